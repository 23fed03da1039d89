#include "al3d/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace al3d {

// ---------------------------------------------------------------------------
// Rotated overlap
// ---------------------------------------------------------------------------

std::array<Vec2, 4> bev_footprint(const OrientedBox3D& box) {
  const double hx = 0.5 * box.dims.y();  // width along local x
  const double hz = 0.5 * box.dims.x();  // length along local z
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  // Local (x, z) offsets carried by the yaw rotation into camera x-z.
  auto corner = [&](double lx, double lz) {
    return Vec2(box.centre.x() + lx * c + lz * s, box.centre.z() - lx * s + lz * c);
  };
  return {corner(hx, hz), corner(-hx, hz), corner(-hx, -hz), corner(hx, -hz)};
}

namespace {

double signed_area(std::span<const Vec2> poly) {
  double acc = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % poly.size()];
    acc += a.x() * b.y() - b.x() * a.y();
  }
  return 0.5 * acc;
}

// Sutherland-Hodgman clip of a polygon against one half-plane given by the
// directed clip edge (a -> b); keeps the side where `cross` is >= 0.
std::vector<Vec2> clip_half_plane(const std::vector<Vec2>& poly, const Vec2& a, const Vec2& b) {
  std::vector<Vec2> out;
  const auto side = [&](const Vec2& p) {
    return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
  };
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& cur = poly[i];
    const Vec2& nxt = poly[(i + 1) % n];
    const double sc = side(cur);
    const double sn = side(nxt);
    if (sc >= 0.0) out.push_back(cur);
    if ((sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0)) {
      const double t = sc / (sc - sn);
      out.push_back(cur + t * (nxt - cur));
    }
  }
  return out;
}

double intersection_area(const std::array<Vec2, 4>& fa, const std::array<Vec2, 4>& fb) {
  std::vector<Vec2> subject(fa.begin(), fa.end());
  std::array<Vec2, 4> clip = fb;
  if (signed_area(clip) < 0.0) std::reverse(clip.begin(), clip.end());
  for (size_t e = 0; e < 4 && !subject.empty(); ++e) {
    subject = clip_half_plane(subject, clip[e], clip[(e + 1) % 4]);
  }
  if (subject.size() < 3) return 0.0;
  return std::abs(signed_area(subject));
}

double footprint_area(const OrientedBox3D& box) { return box.dims.x() * box.dims.y(); }

}  // namespace

double bev_iou(const OrientedBox3D& a, const OrientedBox3D& b) {
  double inter = intersection_area(bev_footprint(a), bev_footprint(b));
  if (inter < 1e-12) inter = 0.0;
  const double uni = footprint_area(a) + footprint_area(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double iou_3d(const OrientedBox3D& a, const OrientedBox3D& b) {
  double inter_area = intersection_area(bev_footprint(a), bev_footprint(b));
  if (inter_area < 1e-12) inter_area = 0.0;
  const double a_lo = a.centre.y() - 0.5 * a.dims.z();
  const double a_hi = a.centre.y() + 0.5 * a.dims.z();
  const double b_lo = b.centre.y() - 0.5 * b.dims.z();
  const double b_hi = b.centre.y() + 0.5 * b.dims.z();
  const double overlap = std::max(0.0, std::min(a_hi, b_hi) - std::max(a_lo, b_lo));
  const double inter = inter_area * overlap;
  const double vol_a = footprint_area(a) * a.dims.z();
  const double vol_b = footprint_area(b) * b.dims.z();
  const double uni = vol_a + vol_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double yaw_error_deg(double pred_yaw, double gt_yaw) {
  double d = std::fmod(std::abs(pred_yaw - gt_yaw), kTwoPi);
  d = std::min(d, kTwoPi - d);
  return d * 180.0 / M_PI;
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

int synth_difficulty(int n_inliers) {
  if (n_inliers >= 200) return 0;
  if (n_inliers >= 80) return 1;
  if (n_inliers >= 20) return 2;
  return 3;
}

int kitti_difficulty(double bbox_height_px, double truncation, int occlusion) {
  if (bbox_height_px >= 40.0 && truncation <= 0.15 && occlusion <= 0) return 0;
  if (bbox_height_px >= 25.0 && truncation <= 0.30 && occlusion <= 1) return 1;
  if (bbox_height_px >= 25.0 && truncation <= 0.50 && occlusion <= 2) return 2;
  return 3;
}

ApResult average_precision(std::span<const DetBox> predictions, std::span<const GtBox> gts,
                           IouFn iou_fn, double iou_threshold, int difficulty_bucket) {
  std::set<std::pair<int, int>> ids;
  for (const DetBox& p : predictions) {
    if (!ids.insert({p.frame_id, p.det_id}).second) {
      throw std::invalid_argument("average_precision: duplicate prediction id (frame " +
                                  std::to_string(p.frame_id) + ", det " +
                                  std::to_string(p.det_id) + ")");
    }
  }

  ApResult result;
  result.n_pred = static_cast<int>(predictions.size());
  for (const GtBox& g : gts) {
    if (g.difficulty <= difficulty_bucket) ++result.n_gt;
  }

  std::vector<int> order(predictions.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&predictions](int a, int b) {
    if (predictions[a].box.score != predictions[b].box.score) {
      return predictions[a].box.score > predictions[b].box.score;
    }
    if (predictions[a].frame_id != predictions[b].frame_id) {
      return predictions[a].frame_id < predictions[b].frame_id;
    }
    return predictions[a].det_id < predictions[b].det_id;
  });

  std::vector<char> gt_matched(gts.size(), 0);
  std::vector<int> tp_flags;  // 1 TP, 0 FP; neutral predictions are dropped
  tp_flags.reserve(predictions.size());
  for (int idx : order) {
    const DetBox& pred = predictions[idx];
    int best_gt = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].frame_id != pred.frame_id || gt_matched[g]) continue;
      const double iou = iou_fn(pred.box, gts[g].box);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best_iou >= iou_threshold) {
      gt_matched[best_gt] = 1;
      if (gts[best_gt].difficulty <= difficulty_bucket) {
        tp_flags.push_back(1);
      }
      // A match on an out-of-bucket ground truth is neutral.
    } else {
      tp_flags.push_back(0);
    }
  }

  if (result.n_gt == 0) return result;
  int tp = 0;
  int fp = 0;
  for (int flag : tp_flags) {
    (flag ? tp : fp) += 1;
    result.curve.emplace_back(static_cast<double>(tp) / result.n_gt,
                              static_cast<double>(tp) / (tp + fp));
  }

  auto max_precision_at = [&result](double recall) {
    double best = 0.0;
    for (const auto& [r, p] : result.curve) {
      if (r >= recall - 1e-12) best = std::max(best, p);
    }
    return best;
  };
  double acc11 = 0.0;
  for (int k = 0; k <= 10; ++k) acc11 += max_precision_at(k / 10.0);
  result.ap_11 = acc11 / 11.0;
  double acc40 = 0.0;
  for (int k = 1; k <= 40; ++k) acc40 += max_precision_at(k / 40.0);
  result.ap_40 = acc40 / 40.0;
  return result;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

EvalReport evaluate(std::span<const DetBox> predictions, std::span<const GtBox> gts,
                    double iou_threshold) {
  EvalReport report;
  report.iou_threshold = iou_threshold;
  report.n_predictions = static_cast<int>(predictions.size());
  report.n_gts = static_cast<int>(gts.size());

  const struct {
    const char* name;
    int bucket;
  } buckets[] = {{"overall", 3}, {"easy", 0}, {"moderate", 1}, {"hard", 2}};
  for (const auto& [name, bucket] : buckets) {
    BucketReport br;
    br.name = name;
    const ApResult bev = average_precision(predictions, gts, &bev_iou, iou_threshold, bucket);
    const ApResult vol = average_precision(predictions, gts, &iou_3d, iou_threshold, bucket);
    br.ap_bev_11 = bev.ap_11;
    br.ap_bev_40 = bev.ap_40;
    br.ap_3d_11 = vol.ap_11;
    br.ap_3d_40 = vol.ap_40;
    br.n_gt = bev.n_gt;
    report.buckets.push_back(br);
  }

  // Pose errors over greedy BEV true positives (score-descending, overall).
  std::vector<int> order(predictions.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&predictions](int a, int b) {
    return predictions[a].box.score > predictions[b].box.score;
  });
  std::vector<char> matched(gts.size(), 0);
  std::vector<double> yaw_errors;
  std::vector<double> centre_errors;
  for (int idx : order) {
    const DetBox& pred = predictions[idx];
    int best_gt = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].frame_id != pred.frame_id || matched[g]) continue;
      const double iou = bev_iou(pred.box, gts[g].box);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best_iou >= iou_threshold) {
      matched[best_gt] = 1;
      yaw_errors.push_back(yaw_error_deg(pred.box.yaw, gts[best_gt].box.yaw));
      centre_errors.push_back((pred.box.centre - gts[best_gt].box.centre).norm());
    }
  }
  report.n_matched = static_cast<int>(yaw_errors.size());
  auto mean_of = [](const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
  };
  auto median_of = [](std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t hi = v.size() / 2;
    const size_t lo = (v.size() % 2 == 0) ? hi - 1 : hi;
    return 0.5 * (v[lo] + v[hi]);
  };
  report.mean_yaw_error_deg = mean_of(yaw_errors);
  report.median_yaw_error_deg = median_of(yaw_errors);
  report.mean_centre_error_m = mean_of(centre_errors);
  report.median_centre_error_m = median_of(centre_errors);
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["iou_threshold"] = report.iou_threshold;
  j["n_predictions"] = report.n_predictions;
  j["n_gts"] = report.n_gts;
  j["n_matched"] = report.n_matched;
  j["mean_yaw_error_deg"] = report.mean_yaw_error_deg;
  j["median_yaw_error_deg"] = report.median_yaw_error_deg;
  j["mean_centre_error_m"] = report.mean_centre_error_m;
  j["median_centre_error_m"] = report.median_centre_error_m;
  nlohmann::json buckets = nlohmann::json::array();
  for (const BucketReport& b : report.buckets) {
    buckets.push_back({{"name", b.name},
                       {"ap_bev_11", b.ap_bev_11},
                       {"ap_bev_40", b.ap_bev_40},
                       {"ap_3d_11", b.ap_3d_11},
                       {"ap_3d_40", b.ap_3d_40},
                       {"n_gt", b.n_gt}});
  }
  j["buckets"] = buckets;
  return j.dump(2);
}

std::string report_to_table(const EvalReport& report) {
  std::ostringstream out;
  char line[160];
  snprintf(line, sizeof(line), "%-10s %8s %8s %8s %8s %6s\n", "bucket", "BEV@11", "BEV@40",
           "3D@11", "3D@40", "nGT");
  out << line;
  for (const BucketReport& b : report.buckets) {
    snprintf(line, sizeof(line), "%-10s %8.4f %8.4f %8.4f %8.4f %6d\n", b.name.c_str(),
             b.ap_bev_11, b.ap_bev_40, b.ap_3d_11, b.ap_3d_40, b.n_gt);
    out << line;
  }
  snprintf(line, sizeof(line),
           "yaw err mean/median: %.2f/%.2f deg   centre err mean/median: %.3f/%.3f m\n",
           report.mean_yaw_error_deg, report.median_yaw_error_deg, report.mean_centre_error_m,
           report.median_centre_error_m);
  out << line;
  snprintf(line, sizeof(line), "predictions %d, ground truths %d, matched %d (IoU %.2f)\n",
           report.n_predictions, report.n_gts, report.n_matched, report.iou_threshold);
  out << line;
  return out.str();
}

std::string bev_overlay_svg(std::span<const OrientedBox3D> gts,
                            std::span<const OrientedBox3D> predictions) {
  double min_x = -1.0, max_x = 1.0, min_z = -1.0, max_z = 1.0;
  auto expand = [&](const OrientedBox3D& b) {
    for (const Vec2& c : bev_footprint(b)) {
      min_x = std::min(min_x, c.x());
      max_x = std::max(max_x, c.x());
      min_z = std::min(min_z, c.y());
      max_z = std::max(max_z, c.y());
    }
  };
  for (const auto& b : gts) expand(b);
  for (const auto& b : predictions) expand(b);
  const double scale = 20.0;  // px per metre
  const double pad = 10.0;
  const double w = (max_x - min_x) * scale + 2 * pad;
  const double h = (max_z - min_z) * scale + 2 * pad;

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\">\n";
  auto draw = [&](const OrientedBox3D& b, const char* colour) {
    out << "  <polygon points=\"";
    for (const Vec2& c : bev_footprint(b)) {
      const double px = (c.x() - min_x) * scale + pad;
      const double py = (max_z - c.y()) * scale + pad;
      out << px << "," << py << " ";
    }
    out << "\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\"/>\n";
  };
  for (const auto& b : gts) draw(b, "red");
  for (const auto& b : predictions) draw(b, "green");
  out << "</svg>\n";
  return out.str();
}

}  // namespace al3d
