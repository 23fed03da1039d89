#pragma once

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "al3d/geometry.hpp"

namespace al3d {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Synthetic LiDAR scene generator: static objects in a world frame observed
/// by a sensor on a moving platform, with self-occlusion, surface noise and
/// the three outlier patterns seen in masked real scans (road points at the
/// mask boundary, points from adjacent objects, and see-through returns).
struct SynthConfig {
  int n_instances = 2000;
  Vec3 translation_min{-10.0, 0.87, 8.0};
  Vec3 translation_max{10.0, 0.93, 25.0};
  int min_points = 30;   // inlier count range per instance
  int max_points = 150;
  double surface_noise = 0.02;     // sigma, metres
  double outlier_fraction = 0.15;  // total outliers = ceil(fraction * inliers)
  bool outliers_ground = true;
  bool outliers_neighbour = true;
  bool outliers_pass_through = true;
  int sequence_length = 5;  // frames per track
  double ego_step_translation = 1.0;  // metres per frame
  double ego_step_yaw = 0.02;         // radians per frame
  double ground_plane_y = 1.65;       // camera height above the road
  int objects_per_sequence = 2;
  double heldout_fraction = 0.1;
  uint64_t seed = 0;
  double template_length = 4.0;
  double template_width = 1.6;
  double template_height = 1.5;
  std::string template_obj;  // when set, overrides the built-in template
  // Nominal pinhole camera used only for the 2D bbox fields of emitted labels.
  double cam_fx = 721.5377, cam_fy = 721.5377;
  double cam_cx = 609.5593, cam_cy = 172.854;
  int cam_width = 1242, cam_height = 375;
};

TemplateMesh template_from_config(const SynthConfig& config);
CameraCalibration camera_from_config(const SynthConfig& config);

std::string synth_config_to_json(const SynthConfig& config);
SynthConfig synth_config_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Instances
// ---------------------------------------------------------------------------

/// One generated observation. Ground truth lives next to, not inside, the
/// MaskedDetection consumed by training, so training code cannot reach it.
struct SynthInstance {
  MaskedDetection det;
  Pose4DoF gt_pose;  // camera frame
  OrientedBox3D gt_box;
  std::vector<uint8_t> outlier_flags;  // aligned with det.points
  int gt_track_id = -1;
  bool heldout = false;

  int n_inliers() const;
};

/// Raised when a draw yields fewer than 5 visible inlier points; callers
/// retry with fresh randomness.
struct ResampleNeeded : std::runtime_error {
  ResampleNeeded() : std::runtime_error("sample_instance: fewer than 5 visible inliers") {}
};

/// Uniform area-weighted sample on the mesh surface (canonical frame).
Vec3 sample_on_surface(std::mt19937_64& rng, const TemplateMesh& mesh);

/// Exact ray occlusion test: true when the segment from the sensor origin to
/// the given camera-frame point hits no strictly nearer posed triangle.
bool visible_from_origin(const Vec3& point, const TemplateMesh& mesh, const Pose4DoF& pose);

SynthInstance sample_instance_at(std::mt19937_64& rng, const TemplateMesh& mesh,
                                 const SynthConfig& config, const Pose4DoF& pose,
                                 int frame_id, int det_id, int track_id);

/// Draws a pose from the config ranges and samples one instance, retrying on
/// ResampleNeeded.
SynthInstance sample_instance(std::mt19937_64& rng, const TemplateMesh& mesh,
                              const SynthConfig& config);

// ---------------------------------------------------------------------------
// Sequences and datasets
// ---------------------------------------------------------------------------

/// One static object observed over sequence_length frames from a moving
/// sensor. ego_world[f] maps frame-f camera coordinates into the world frame
/// (the frame-0 camera); the per-frame ground-truth poses satisfy the
/// ego-equivariance identity exactly.
struct SynthSequence {
  std::vector<SynthInstance> instances;  // one per frame
  std::vector<EgoMotion> ego_world;
};

SynthSequence sample_sequence(std::mt19937_64& rng, const TemplateMesh& mesh,
                              const SynthConfig& config);

struct SynthDataset {
  std::vector<SynthInstance> instances;
  std::vector<EgoMotion> ego_world;        // indexed by frame_id
  std::vector<std::vector<int>> gt_tracks;  // instance indices per track
  int n_frames = 0;
};

/// Deterministic dataset: tracks of sequence_length frames, several objects
/// sharing each ego sequence, split 90/10 into train/held-out whole tracks.
SynthDataset make_dataset(const SynthConfig& config);

// ---------------------------------------------------------------------------
// On-disk form: scenes.jsonl + points.bin + ego.txt (+ config echo)
// ---------------------------------------------------------------------------

void save_dataset(const std::string& dir, const SynthDataset& dataset,
                  const SynthConfig& config);

struct LoadedDataset {
  SynthDataset data;
  SynthConfig config;
};
LoadedDataset load_dataset(const std::string& dir);

/// The gt-free training view: detections of the requested split plus the
/// track structure as index lists into the returned vector.
struct TrainingView {
  std::vector<MaskedDetection> detections;
  std::vector<std::vector<int>> tracks;
  std::vector<int> dataset_indices;  // detections[i] == instances[dataset_indices[i]]
};
TrainingView training_view(const SynthDataset& dataset, bool heldout);

}  // namespace al3d
