#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "al3d/geometry.hpp"

namespace al3d {

// ---------------------------------------------------------------------------
// Rotated-box overlap
// ---------------------------------------------------------------------------

/// Ground-plane footprint of the box: four corners in the x-z plane.
std::array<Vec2, 4> bev_footprint(const OrientedBox3D& box);

/// Intersection-over-union of the yaw-rotated footprints (convex polygon
/// clipping). Intersections below 1e-12 m^2 count as disjoint.
double bev_iou(const OrientedBox3D& a, const OrientedBox3D& b);

/// Volumetric IoU: footprint intersection times vertical overlap.
double iou_3d(const OrientedBox3D& a, const OrientedBox3D& b);

/// Smallest absolute angular difference modulo 2*pi, in degrees [0, 180].
double yaw_error_deg(double pred_yaw, double gt_yaw);

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

struct DetBox {
  int frame_id = 0;
  int det_id = 0;
  OrientedBox3D box;  // box.score is the ranking confidence
};

/// Difficulty: 0 easy, 1 moderate, 2 hard, 3 below-hard (always ignored).
/// Evaluating bucket d requires ground truths with difficulty <= d and
/// treats harder ones as neutral (matching them is neither TP nor FP).
struct GtBox {
  int frame_id = 0;
  OrientedBox3D box;
  int difficulty = 0;
};

/// Synthetic difficulty from the visible-inlier count (>=200 / >=80 / >=20).
int synth_difficulty(int n_inliers);
/// Standard KITTI binning from 2D box height, truncation and occlusion.
int kitti_difficulty(double bbox_height_px, double truncation, int occlusion);

using IouFn = double (*)(const OrientedBox3D&, const OrientedBox3D&);

struct ApResult {
  double ap_11 = 0.0;  // 11-point interpolation
  double ap_40 = 0.0;  // 40-point interpolation
  int n_gt = 0;
  int n_pred = 0;
  std::vector<std::pair<double, double>> curve;  // (recall, precision)
};

/// Score-descending greedy matching (each ground truth claimed at most once)
/// at the given IoU threshold, restricted to the difficulty bucket. Throws
/// std::invalid_argument on duplicate (frame_id, det_id) predictions.
ApResult average_precision(std::span<const DetBox> predictions, std::span<const GtBox> gts,
                           IouFn iou_fn, double iou_threshold, int difficulty_bucket);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct BucketReport {
  std::string name;
  double ap_bev_11 = 0.0, ap_bev_40 = 0.0;
  double ap_3d_11 = 0.0, ap_3d_40 = 0.0;
  int n_gt = 0;
};

struct EvalReport {
  double iou_threshold = 0.5;
  std::vector<BucketReport> buckets;  // overall, easy, moderate, hard
  // Pose errors over true-positive BEV matches of the overall bucket.
  double mean_yaw_error_deg = 0.0;
  double median_yaw_error_deg = 0.0;
  double mean_centre_error_m = 0.0;
  double median_centre_error_m = 0.0;
  int n_predictions = 0;
  int n_gts = 0;
  int n_matched = 0;
};

EvalReport evaluate(std::span<const DetBox> predictions, std::span<const GtBox> gts,
                    double iou_threshold = 0.5);

std::string report_to_json(const EvalReport& report);
std::string report_to_table(const EvalReport& report);

/// Bird's-eye-view overlay: ground truth red, predictions green.
std::string bev_overlay_svg(std::span<const OrientedBox3D> gts,
                            std::span<const OrientedBox3D> predictions);

}  // namespace al3d
