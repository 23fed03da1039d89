#pragma once

#include <span>
#include <vector>

#include "al3d/geometry.hpp"

namespace al3d {

// ---------------------------------------------------------------------------
// Yaw quantization
// ---------------------------------------------------------------------------

/// Uniform quantization of [0, 2*pi) into candidate yaw angles.
struct YawBins {
  int n_bins = 64;

  static YawBins make(int n_bins);
  double centre(int k) const { return kTwoPi * k / n_bins; }
  /// Bin whose centre is closest to the given angle (wrap-around aware).
  int nearest(double yaw) const;
};

/// Per-point log variances (log sigma^2), one entry per point of the
/// instance cloud.
using PerPointVariance = Eigen::VectorXd;

enum class YawMode { Bins, Arctan };

struct LossWeights {
  double alignment = 1.0;
  double yaw_ce = 1.0;
  double consistency = 1.0;
};

struct LossBreakdown {
  double alignment = 0.0;
  double yaw_ce = 0.0;
  double consistency_centre = 0.0;
  double consistency_front = 0.0;
  double total = 0.0;
};

/// Network outputs for one instance. In Bins mode yaw_logits has one entry
/// per bin; in Arctan mode it holds the (sin-like, cos-like) pair.
struct Prediction {
  Vec3 translation = Vec3::Zero();
  Eigen::VectorXd yaw_logits;
  PerPointVariance log_var;
};

// ---------------------------------------------------------------------------
// Alignment losses
// ---------------------------------------------------------------------------

/// One-sided Chamfer distance: mean squared distance from each point to the
/// posed template surface. Throws std::invalid_argument on an empty cloud.
double half_chamfer(const Pose4DoF& pose, const TemplateMesh& mesh, const PointCloud& points);

/// Outlier-aware alignment: mean over points of r^2/sigma^2 + log sigma^2,
/// with r the distance to the posed surface. With all log variances zero
/// this reduces exactly to half_chamfer.
double half_chamfer_weighted(const Pose4DoF& pose, const TemplateMesh& mesh,
                             const PointCloud& points, const PerPointVariance& log_var);

/// Closest canonical-frame surface points for every cloud point under the
/// given pose (the correspondences realized by the alignment minimum).
std::vector<Vec3> closest_points_canonical(const Pose4DoF& pose, const TemplateMesh& mesh,
                                           const PointCloud& points);

// ---------------------------------------------------------------------------
// Direct yaw optimization
// ---------------------------------------------------------------------------

struct YawBinSearchResult {
  int best_bin = 0;
  double best_loss = 0.0;
};

/// Evaluates the outlier-aware alignment at every bin centre with the given
/// fixed translation and returns the argmin. Ties break to the lowest index.
YawBinSearchResult yaw_bin_search(const Vec3& translation, const TemplateMesh& mesh,
                                  const PointCloud& points, const PerPointVariance& log_var,
                                  const YawBins& bins);

/// Numerically stable -log softmax(logits)[target_bin].
double yaw_cross_entropy(const Eigen::VectorXd& logits, int target_bin);

// ---------------------------------------------------------------------------
// Multi-frame consistency
// ---------------------------------------------------------------------------

/// Consistency of a tracked keypoint across frames: for every frame pair
/// (i, i+j) with j = 1..horizon, the keypoint predicted in frame i+j is
/// carried into frame i by the ego motion and compared against the frame-i
/// prediction. ego_steps[k] is the transform from frame k+1 coordinates into
/// frame k coordinates. Normalized by the number of pairs summed.
double consistency_loss(std::span<const Pose4DoF> track_poses,
                        std::span<const EgoMotion> ego_steps, const Vec3& keypoint,
                        int horizon);

// ---------------------------------------------------------------------------
// Composite loss
// ---------------------------------------------------------------------------

/// Full training objective over a batch: alignment at the per-instance best
/// yaw bin, cross-entropy of the yaw head against that bin, and centre/front
/// keypoint consistency over tracks. Tracks are index lists into
/// `instances`, covering consecutive frames; ego_world[f] is the
/// camera-to-world transform of frame f. In Arctan mode the alignment is
/// evaluated at the decoded yaw and the cross-entropy term is zero.
LossBreakdown total_loss(std::span<const MaskedDetection> instances,
                         std::span<const Prediction> predictions,
                         std::span<const std::vector<int>> tracks,
                         std::span<const EgoMotion> ego_world, const TemplateMesh& mesh,
                         const YawBins& bins, const LossWeights& weights = {},
                         YawMode yaw_mode = YawMode::Bins, int consistency_horizon = 5);

/// Yaw angle encoded by a prediction: argmax bin centre in Bins mode, the
/// two-argument arctangent in Arctan mode ((0,0) decodes to 0).
double decode_yaw(const Prediction& pred, const YawBins& bins, YawMode mode);

/// Per-instance direct fitting without learning: alternating yaw bin search
/// and translation gradient descent on the alignment (unit variances),
/// started from the point median. Exists as the no-sharing baseline; prone
/// to the rotational ambiguities that the learned predictor resolves.
struct DirectFitResult {
  Pose4DoF pose;
  double loss = 0.0;
  int iterations = 0;
};
DirectFitResult fit_direct(const PointCloud& points, const TemplateMesh& mesh,
                           const YawBins& bins, int max_iterations = 20);

/// Relative ego motion g_{i<-j} between two frames given camera-to-world
/// transforms per frame.
EgoMotion relative_ego(std::span<const EgoMotion> ego_world, int frame_i, int frame_j);

}  // namespace al3d
