#include "al3d/losses.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace al3d {

YawBins YawBins::make(int n_bins) {
  if (n_bins < 2) throw std::invalid_argument("YawBins: n_bins must be at least 2");
  return YawBins{n_bins};
}

int YawBins::nearest(double yaw) const {
  const double w = wrap_angle_2pi(yaw);
  const int k = static_cast<int>(std::lround(w * n_bins / kTwoPi));
  return k % n_bins;
}

namespace {

// Shared inner loop of the alignment losses. `centred` holds X - T; the
// rotation is applied inversely so distances are taken in the canonical
// frame, which leaves the mesh fixed across points and bins.
double weighted_alignment(const std::vector<Vec3>& centred, double cos_yaw, double sin_yaw,
                          const TemplateMesh& mesh, const double* log_var,
                          const double* inv_var) {
  double acc = 0.0;
  const size_t n = centred.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec3& q = centred[i];
    const Vec3 canonical(q.x() * cos_yaw - q.z() * sin_yaw, q.y(),
                         q.x() * sin_yaw + q.z() * cos_yaw);
    const double sq = point_to_mesh_sq_distance(canonical, mesh).sq_distance;
    acc += sq * inv_var[i] + log_var[i];
  }
  return acc / static_cast<double>(n);
}

std::vector<Vec3> subtract_translation(const PointCloud& points, const Vec3& t) {
  std::vector<Vec3> centred;
  centred.reserve(points.size());
  for (const Vec3& p : points.points) centred.push_back(p - t);
  return centred;
}

}  // namespace

double half_chamfer(const Pose4DoF& pose, const TemplateMesh& mesh, const PointCloud& points) {
  if (points.empty()) throw std::invalid_argument("half_chamfer: empty point cloud");
  const std::vector<Vec3> centred = subtract_translation(points, pose.translation);
  const std::vector<double> zeros(points.size(), 0.0);
  const std::vector<double> ones(points.size(), 1.0);
  return weighted_alignment(centred, std::cos(pose.yaw), std::sin(pose.yaw), mesh,
                            zeros.data(), ones.data());
}

double half_chamfer_weighted(const Pose4DoF& pose, const TemplateMesh& mesh,
                             const PointCloud& points, const PerPointVariance& log_var) {
  if (points.empty()) throw std::invalid_argument("half_chamfer_weighted: empty point cloud");
  if (static_cast<size_t>(log_var.size()) != points.size()) {
    throw std::invalid_argument("half_chamfer_weighted: variance/point count mismatch");
  }
  const std::vector<Vec3> centred = subtract_translation(points, pose.translation);
  const Eigen::VectorXd inv_var = (-log_var).array().exp();
  return weighted_alignment(centred, std::cos(pose.yaw), std::sin(pose.yaw), mesh,
                            log_var.data(), inv_var.data());
}

std::vector<Vec3> closest_points_canonical(const Pose4DoF& pose, const TemplateMesh& mesh,
                                           const PointCloud& points) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points.points) {
    out.push_back(point_to_mesh_sq_distance(pose.apply_inverse(p), mesh).closest_point);
  }
  return out;
}

YawBinSearchResult yaw_bin_search(const Vec3& translation, const TemplateMesh& mesh,
                                  const PointCloud& points, const PerPointVariance& log_var,
                                  const YawBins& bins) {
  if (points.empty()) throw std::invalid_argument("yaw_bin_search: empty point cloud");
  if (static_cast<size_t>(log_var.size()) != points.size()) {
    throw std::invalid_argument("yaw_bin_search: variance/point count mismatch");
  }
  const std::vector<Vec3> centred = subtract_translation(points, translation);
  const Eigen::VectorXd inv_var = (-log_var).array().exp();

  YawBinSearchResult best{0, std::numeric_limits<double>::infinity()};
  for (int k = 0; k < bins.n_bins; ++k) {
    const double yaw = bins.centre(k);
    const double loss = weighted_alignment(centred, std::cos(yaw), std::sin(yaw), mesh,
                                           log_var.data(), inv_var.data());
    if (loss < best.best_loss) best = {k, loss};
  }
  return best;
}

double yaw_cross_entropy(const Eigen::VectorXd& logits, int target_bin) {
  if (target_bin < 0 || target_bin >= logits.size()) {
    throw std::invalid_argument("yaw_cross_entropy: target bin out of range");
  }
  if (!logits.allFinite()) {
    throw std::invalid_argument("yaw_cross_entropy: non-finite logits");
  }
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return lse - logits[target_bin];
}

double consistency_loss(std::span<const Pose4DoF> track_poses,
                        std::span<const EgoMotion> ego_steps, const Vec3& keypoint,
                        int horizon) {
  const size_t n = track_poses.size();
  double acc = 0.0;
  size_t pairs = 0;
  for (size_t i = 0; i < n; ++i) {
    EgoMotion carry;  // identity: g_{i<-i}
    for (size_t j = 1; j <= static_cast<size_t>(horizon) && i + j < n; ++j) {
      const size_t step = i + j - 1;
      if (step >= ego_steps.size()) {
        throw std::invalid_argument("consistency_loss: missing ego motion for frame pair");
      }
      carry = carry.compose(ego_steps[step]);  // g_{i<-i+j}
      const Vec3 in_later = track_poses[i + j].apply(keypoint);
      const Vec3 carried = carry.apply(in_later);
      const Vec3 in_ref = track_poses[i].apply(keypoint);
      acc += (carried - in_ref).squaredNorm();
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : acc / static_cast<double>(pairs);
}

double decode_yaw(const Prediction& pred, const YawBins& bins, YawMode mode) {
  if (mode == YawMode::Arctan) {
    if (pred.yaw_logits.size() != 2) {
      throw std::invalid_argument("decode_yaw: arctan head must emit 2 values");
    }
    const double y = pred.yaw_logits[0];
    const double x = pred.yaw_logits[1];
    if (y == 0.0 && x == 0.0) return 0.0;
    return wrap_angle_2pi(std::atan2(y, x));
  }
  if (pred.yaw_logits.size() != bins.n_bins) {
    throw std::invalid_argument("decode_yaw: logit count does not match bin count");
  }
  int best = 0;
  for (int k = 1; k < bins.n_bins; ++k) {
    if (pred.yaw_logits[k] > pred.yaw_logits[best]) best = k;
  }
  return bins.centre(best);
}

EgoMotion relative_ego(std::span<const EgoMotion> ego_world, int frame_i, int frame_j) {
  if (frame_i < 0 || frame_j < 0 || frame_i >= static_cast<int>(ego_world.size()) ||
      frame_j >= static_cast<int>(ego_world.size())) {
    throw std::invalid_argument("relative_ego: frame id outside the ego chain");
  }
  return ego_world[frame_i].inverse().compose(ego_world[frame_j]);
}

LossBreakdown total_loss(std::span<const MaskedDetection> instances,
                         std::span<const Prediction> predictions,
                         std::span<const std::vector<int>> tracks,
                         std::span<const EgoMotion> ego_world, const TemplateMesh& mesh,
                         const YawBins& bins, const LossWeights& weights, YawMode yaw_mode,
                         int consistency_horizon) {
  if (instances.size() != predictions.size()) {
    throw std::invalid_argument("total_loss: instance/prediction count mismatch");
  }
  const size_t n = instances.size();
  if (n == 0) throw std::invalid_argument("total_loss: empty batch");

  double align_sum = 0.0;
  double ce_sum = 0.0;
  std::vector<Pose4DoF> decoded(n);
  for (size_t m = 0; m < n; ++m) {
    const MaskedDetection& inst = instances[m];
    const Prediction& pred = predictions[m];
    const double yaw = decode_yaw(pred, bins, yaw_mode);
    decoded[m] = Pose4DoF::make(yaw, pred.translation);
    if (yaw_mode == YawMode::Bins) {
      const YawBinSearchResult r =
          yaw_bin_search(pred.translation, mesh, inst.points, pred.log_var, bins);
      align_sum += r.best_loss;
      ce_sum += yaw_cross_entropy(pred.yaw_logits, r.best_bin);
    } else {
      align_sum += half_chamfer_weighted(Pose4DoF::make(yaw, pred.translation), mesh,
                                         inst.points, pred.log_var);
    }
  }

  double centre_sum = 0.0;
  double front_sum = 0.0;
  size_t pairs = 0;
  for (const std::vector<int>& track : tracks) {
    for (size_t a = 0; a < track.size(); ++a) {
      const int ia = track[a];
      if (ia < 0 || ia >= static_cast<int>(n)) {
        throw std::invalid_argument("total_loss: track references an instance outside the batch");
      }
      for (size_t j = 1; j <= static_cast<size_t>(consistency_horizon) && a + j < track.size();
           ++j) {
        const int ib = track[a + j];
        if (ib < 0 || ib >= static_cast<int>(n)) {
          throw std::invalid_argument(
              "total_loss: track references an instance outside the batch");
        }
        const EgoMotion g =
            relative_ego(ego_world, instances[ia].frame_id, instances[ib].frame_id);
        const Vec3 dc = g.apply(decoded[ib].apply(mesh.keypoint_centre)) -
                        decoded[ia].apply(mesh.keypoint_centre);
        const Vec3 df = g.apply(decoded[ib].apply(mesh.keypoint_front)) -
                        decoded[ia].apply(mesh.keypoint_front);
        centre_sum += dc.squaredNorm();
        front_sum += df.squaredNorm();
        ++pairs;
      }
    }
  }

  LossBreakdown out;
  out.alignment = align_sum / static_cast<double>(n);
  out.yaw_ce = ce_sum / static_cast<double>(n);
  out.consistency_centre = pairs ? centre_sum / static_cast<double>(pairs) : 0.0;
  out.consistency_front = pairs ? front_sum / static_cast<double>(pairs) : 0.0;
  out.total = weights.alignment * out.alignment + weights.yaw_ce * out.yaw_ce +
              weights.consistency * (out.consistency_centre + out.consistency_front);
  return out;
}

}  // namespace al3d
