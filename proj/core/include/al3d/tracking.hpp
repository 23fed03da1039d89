#pragma once

#include <span>
#include <string>
#include <vector>

#include "al3d/geometry.hpp"

namespace al3d {

/// Training-time association of detections across adjacent frames by
/// ego-compensated median pseudo-centres.
struct TrackerConfig {
  double max_distance_m = 2.0;
  double count_ratio_max = 2.0;
  int horizon = 5;  // maximum track length is horizon + 1 frames
};

/// One tracked object: (frame_id, det_id) over strictly consecutive frames.
struct Track {
  std::vector<std::pair<int, int>> observations;
};

/// Per-axis median of the points (even counts average the two middle
/// values). Throws std::invalid_argument on an empty cloud.
Vec3 pseudo_centre(const PointCloud& points);

/// Matched index pairs (into frame_i / frame_j) under greedy mutual-nearest
/// association: detections pair up iff each is the other's nearest
/// ego-compensated pseudo-centre, the distance passes the gate and the point
/// counts do not differ by more than the allowed ratio. ego_i_from_j maps
/// frame-j coordinates into frame i.
std::vector<std::pair<int, int>> associate(std::span<const MaskedDetection> frame_i,
                                           std::span<const MaskedDetection> frame_j,
                                           const EgoMotion& ego_i_from_j,
                                           const TrackerConfig& config);

/// Chains pairwise associations over ordered frames into disjoint tracks,
/// splitting chains at the horizon. frames[k] holds the detections of
/// frame_ids[k]; ego_world[f] is the camera-to-world transform of frame f.
std::vector<Track> build_tracks(std::span<const std::vector<MaskedDetection>> frames,
                                std::span<const int> frame_ids,
                                std::span<const EgoMotion> ego_world,
                                const TrackerConfig& config);

/// JSON-lines serialization: {"track_id": n, "observations": [[frame, det], ...]}.
std::string tracks_to_jsonl(std::span<const Track> tracks);
std::vector<Track> tracks_from_jsonl(const std::string& text);

}  // namespace al3d
