#include "al3d/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace al3d {

Vec3 pseudo_centre(const PointCloud& points) {
  if (points.empty()) throw std::invalid_argument("pseudo_centre: empty point cloud");
  Vec3 centre;
  std::vector<double> axis(points.size());
  for (int a = 0; a < 3; ++a) {
    for (size_t i = 0; i < points.size(); ++i) axis[i] = points.points[i][a];
    std::sort(axis.begin(), axis.end());
    const size_t hi = axis.size() / 2;
    const size_t lo = (axis.size() % 2 == 0) ? hi - 1 : hi;
    centre[a] = 0.5 * (axis[lo] + axis[hi]);
  }
  return centre;
}

std::vector<std::pair<int, int>> associate(std::span<const MaskedDetection> frame_i,
                                           std::span<const MaskedDetection> frame_j,
                                           const EgoMotion& ego_i_from_j,
                                           const TrackerConfig& config) {
  const size_t ni = frame_i.size();
  const size_t nj = frame_j.size();
  std::vector<std::pair<int, int>> matches;
  if (ni == 0 || nj == 0) return matches;

  std::vector<Vec3> ci(ni);
  std::vector<Vec3> cj(nj);
  for (size_t a = 0; a < ni; ++a) ci[a] = pseudo_centre(frame_i[a].points);
  for (size_t b = 0; b < nj; ++b) cj[b] = ego_i_from_j.apply(pseudo_centre(frame_j[b].points));

  // Nearest neighbour each way; ties break to the lower index.
  auto nearest = [](const Vec3& p, const std::vector<Vec3>& candidates) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < candidates.size(); ++k) {
      const double d = (candidates[k] - p).norm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    return std::pair<int, double>{best, best_d};
  };

  for (size_t a = 0; a < ni; ++a) {
    const auto [b, dist] = nearest(ci[a], cj);
    const auto [back, back_dist] = nearest(cj[b], ci);
    (void)back_dist;
    if (back != static_cast<int>(a)) continue;  // not mutual
    if (!(dist < config.max_distance_m)) continue;
    const double na = static_cast<double>(frame_i[a].points.size());
    const double nb = static_cast<double>(frame_j[b].points.size());
    const double ratio = std::max(na, nb) / std::min(na, nb);
    if (ratio > config.count_ratio_max) continue;
    matches.emplace_back(static_cast<int>(a), b);
  }
  return matches;
}

std::vector<Track> build_tracks(std::span<const std::vector<MaskedDetection>> frames,
                                std::span<const int> frame_ids,
                                std::span<const EgoMotion> ego_world,
                                const TrackerConfig& config) {
  if (frames.size() != frame_ids.size()) {
    throw std::invalid_argument("build_tracks: frames/frame_ids size mismatch");
  }
  std::vector<Track> tracks;
  // open[d] = index into tracks of the live track ending at detection d of
  // the previous frame; -1 when the detection is untracked.
  std::vector<int> open;

  for (size_t k = 0; k < frames.size(); ++k) {
    std::vector<int> next_open(frames[k].size(), -1);
    const bool consecutive =
        k > 0 && frame_ids[k] == frame_ids[k - 1] + 1;
    if (consecutive) {
      const int fi = frame_ids[k - 1];
      const int fj = frame_ids[k];
      if (fi < 0 || fj >= static_cast<int>(ego_world.size())) {
        throw std::invalid_argument("build_tracks: frame id outside the ego chain");
      }
      const EgoMotion rel = ego_world[fi].inverse().compose(ego_world[fj]);
      for (const auto& [a, b] : associate(frames[k - 1], frames[k], rel, config)) {
        const int t = open[a];
        if (t >= 0) {
          if (tracks[t].observations.size() < static_cast<size_t>(config.horizon) + 1) {
            tracks[t].observations.emplace_back(frame_ids[k], frames[k][b].det_id);
            next_open[b] = t;
          }
          // Track at the horizon: the chain is cut here; a later pair may
          // start a fresh track at b.
        } else {
          Track fresh;
          fresh.observations.emplace_back(frame_ids[k - 1], frames[k - 1][a].det_id);
          fresh.observations.emplace_back(frame_ids[k], frames[k][b].det_id);
          tracks.push_back(std::move(fresh));
          next_open[b] = static_cast<int>(tracks.size()) - 1;
        }
      }
    }
    open = std::move(next_open);
  }
  return tracks;
}

std::string tracks_to_jsonl(std::span<const Track> tracks) {
  std::ostringstream out;
  for (size_t t = 0; t < tracks.size(); ++t) {
    nlohmann::json j;
    j["track_id"] = t;
    nlohmann::json obs = nlohmann::json::array();
    for (const auto& [frame, det] : tracks[t].observations) {
      obs.push_back({frame, det});
    }
    j["observations"] = obs;
    out << j.dump() << "\n";
  }
  return out.str();
}

std::vector<Track> tracks_from_jsonl(const std::string& text) {
  std::vector<Track> tracks;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("tracks_from_jsonl:" + std::to_string(line_no) + ": " + e.what());
    }
    Track t;
    for (const auto& obs : j.at("observations")) {
      t.observations.emplace_back(obs.at(0).get<int>(), obs.at(1).get<int>());
    }
    tracks.push_back(std::move(t));
  }
  return tracks;
}

}  // namespace al3d
