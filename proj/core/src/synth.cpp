#include "al3d/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include <json.hpp>

namespace al3d {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

TemplateMesh template_from_config(const SynthConfig& config) {
  if (!config.template_obj.empty()) return load_obj(config.template_obj);
  return builtin_car_template(config.template_length, config.template_width,
                              config.template_height);
}

CameraCalibration camera_from_config(const SynthConfig& config) {
  CameraCalibration calib;
  calib.projection << config.cam_fx, 0.0, config.cam_cx, 0.0,
                      0.0, config.cam_fy, config.cam_cy, 0.0,
                      0.0, 0.0, 1.0, 0.0;
  calib.image_width = config.cam_width;
  calib.image_height = config.cam_height;
  return calib;
}

// ---------------------------------------------------------------------------
// Surface sampling and visibility
// ---------------------------------------------------------------------------

namespace {

std::vector<double> cumulative_areas(const TemplateMesh& mesh) {
  std::vector<double> cum;
  cum.reserve(mesh.triangles.size());
  double total = 0.0;
  for (const auto& tri : mesh.triangles) {
    const Vec3& a = mesh.vertices[tri[0]];
    const Vec3& b = mesh.vertices[tri[1]];
    const Vec3& c = mesh.vertices[tri[2]];
    total += 0.5 * (b - a).cross(c - a).norm();
    cum.push_back(total);
  }
  return cum;
}

Vec3 sample_triangle(std::mt19937_64& rng, const Vec3& a, const Vec3& b, const Vec3& c) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double r1 = std::sqrt(unit(rng));
  const double r2 = unit(rng);
  return a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
}

// Moeller-Trumbore; returns the ray parameter t of the intersection.
std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a,
                                   const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 pvec = dir.cross(e2);
  const double det = e1.dot(pvec);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 tvec = origin - a;
  const double u = tvec.dot(pvec) * inv;
  if (u < -1e-12 || u > 1.0 + 1e-12) return std::nullopt;
  const Vec3 qvec = tvec.cross(e1);
  const double v = dir.dot(qvec) * inv;
  if (v < -1e-12 || u + v > 1.0 + 1e-12) return std::nullopt;
  return e2.dot(qvec) * inv;
}

struct PosedMesh {
  std::vector<Vec3> vertices;
  const TemplateMesh* mesh;

  PosedMesh(const TemplateMesh& m, const Pose4DoF& pose) : mesh(&m) {
    vertices = apply_pose(pose, m.vertices);
  }

  // True when no triangle lies strictly between the origin and the point.
  bool visible(const Vec3& p) const {
    for (const auto& tri : mesh->triangles) {
      const auto t = ray_triangle(Vec3::Zero(), p, vertices[tri[0]], vertices[tri[1]],
                                  vertices[tri[2]]);
      if (t && *t > 1e-9 && *t < 1.0 - 1e-6) return false;
    }
    return true;
  }

  // Largest intersection parameter along the ray through p (the exit point).
  double last_hit(const Vec3& p) const {
    double t_max = 1.0;
    for (const auto& tri : mesh->triangles) {
      const auto t = ray_triangle(Vec3::Zero(), p, vertices[tri[0]], vertices[tri[1]],
                                  vertices[tri[2]]);
      if (t && *t > t_max) t_max = *t;
    }
    return t_max;
  }
};

}  // namespace

Vec3 sample_on_surface(std::mt19937_64& rng, const TemplateMesh& mesh) {
  const std::vector<double> cum = cumulative_areas(mesh);
  std::uniform_real_distribution<double> pick(0.0, cum.back());
  const double r = pick(rng);
  const size_t idx = std::lower_bound(cum.begin(), cum.end(), r) - cum.begin();
  const auto& tri = mesh.triangles[std::min(idx, mesh.triangles.size() - 1)];
  return sample_triangle(rng, mesh.vertices[tri[0]], mesh.vertices[tri[1]],
                         mesh.vertices[tri[2]]);
}

bool visible_from_origin(const Vec3& point, const TemplateMesh& mesh, const Pose4DoF& pose) {
  return PosedMesh(mesh, pose).visible(point);
}

// ---------------------------------------------------------------------------
// Instance generation
// ---------------------------------------------------------------------------

int SynthInstance::n_inliers() const {
  int n = 0;
  for (uint8_t f : outlier_flags) n += (f == 0);
  return n;
}

namespace {

// Ground points around, never under, the object: the mask bleeds onto the
// road at the silhouette boundary.
Vec3 sample_ground_outlier(std::mt19937_64& rng, const SynthConfig& config,
                           const OrientedBox3D& box) {
  std::uniform_real_distribution<double> angle(0.0, kTwoPi);
  std::uniform_real_distribution<double> gap(0.3, 1.5);
  std::normal_distribution<double> jitter(0.0, config.surface_noise);
  const double phi = angle(rng);
  const Vec2 dir(std::cos(phi), std::sin(phi));
  // Walk from the footprint boundary outward along dir (in the box frame).
  const double hx = 0.5 * box.dims.y();  // width/2 along local x
  const double hz = 0.5 * box.dims.x();  // length/2 along local z
  const double boundary = 1.0 / std::max(std::abs(dir.x()) / hx, std::abs(dir.y()) / hz);
  const double radius = boundary + gap(rng);
  const Vec3 local(dir.x() * radius, 0.0, dir.y() * radius);
  const Mat3 rot = yaw_rotation(box.yaw);
  Vec3 p = box.centre + rot * local;
  p.y() = config.ground_plane_y + jitter(rng);
  return p;
}

Vec3 sample_neighbour_outlier(std::mt19937_64& rng, const TemplateMesh& mesh,
                              const SynthConfig& config, const Pose4DoF& pose) {
  std::uniform_real_distribution<double> gap(0.3, 1.0);
  std::bernoulli_distribution side(0.5);
  const double offset =
      (config.template_width + gap(rng)) * (side(rng) ? 1.0 : -1.0);
  Pose4DoF neighbour = pose;
  neighbour.translation += yaw_rotation(pose.yaw) * Vec3(offset, 0.0, 0.0);
  return neighbour.apply(sample_on_surface(rng, mesh));
}

}  // namespace

SynthInstance sample_instance_at(std::mt19937_64& rng, const TemplateMesh& mesh,
                                 const SynthConfig& config, const Pose4DoF& pose,
                                 int frame_id, int det_id, int track_id) {
  const PosedMesh posed(mesh, pose);
  std::uniform_int_distribution<int> count_dist(config.min_points, config.max_points);
  const int target = count_dist(rng);
  std::normal_distribution<double> noise(0.0, config.surface_noise);

  SynthInstance inst;
  inst.det.frame_id = frame_id;
  inst.det.det_id = det_id;
  inst.gt_track_id = track_id;
  inst.gt_pose = pose;
  inst.gt_box = posed_box(pose, mesh);
  inst.det.points.frame = Frame::Camera;

  const long max_attempts = 60L * std::max(target, 1);
  long attempts = 0;
  while (static_cast<int>(inst.det.points.size()) < target && attempts < max_attempts) {
    ++attempts;
    const Vec3 sample = pose.apply(sample_on_surface(rng, mesh));
    if (!posed.visible(sample)) continue;
    inst.det.points.points.push_back(
        sample + Vec3(noise(rng), noise(rng), noise(rng)));
  }
  if (inst.det.points.size() < 5) throw ResampleNeeded();
  const int n_inliers = static_cast<int>(inst.det.points.size());
  inst.outlier_flags.assign(n_inliers, 0);

  std::vector<int> modes;
  if (config.outliers_ground) modes.push_back(0);
  if (config.outliers_neighbour) modes.push_back(1);
  if (config.outliers_pass_through) modes.push_back(2);
  if (!modes.empty() && config.outlier_fraction > 0.0) {
    const int n_out = static_cast<int>(std::ceil(config.outlier_fraction * n_inliers));
    std::uniform_real_distribution<double> beyond(0.3, 2.0);
    for (int k = 0; k < n_out; ++k) {
      const int mode = modes[k % modes.size()];
      Vec3 p;
      if (mode == 0) {
        p = sample_ground_outlier(rng, config, inst.gt_box);
      } else if (mode == 1) {
        p = sample_neighbour_outlier(rng, mesh, config, pose);
      } else {
        // See-through return: beyond the last surface exit along the ray.
        Vec3 through;
        do {
          through = pose.apply(sample_on_surface(rng, mesh));
        } while (!posed.visible(through));
        const double len = through.norm();
        const Vec3 dir = through / len;
        p = dir * (len * posed.last_hit(through) + beyond(rng));
      }
      inst.det.points.points.push_back(p);
      inst.outlier_flags.push_back(1);
    }
  }

  std::normal_distribution<double> score_noise(0.0, 0.05);
  inst.det.score =
      std::clamp(0.5 + n_inliers / 400.0 + score_noise(rng), 0.05, 1.0);
  return inst;
}

SynthInstance sample_instance(std::mt19937_64& rng, const TemplateMesh& mesh,
                              const SynthConfig& config) {
  std::uniform_real_distribution<double> yaw_dist(0.0, kTwoPi);
  for (int attempt = 0; attempt < 64; ++attempt) {
    Vec3 t;
    for (int a = 0; a < 3; ++a) {
      std::uniform_real_distribution<double> axis(config.translation_min[a],
                                                  config.translation_max[a]);
      t[a] = axis(rng);
    }
    const Pose4DoF pose = Pose4DoF::make(yaw_dist(rng), t);
    try {
      return sample_instance_at(rng, mesh, config, pose, 0, 0, -1);
    } catch (const ResampleNeeded&) {
      continue;
    }
  }
  throw std::runtime_error("sample_instance: could not draw a visible instance");
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

namespace {

uint64_t mix(uint64_t seed, uint64_t salt) {
  uint64_t x = seed ^ (0x9E3779B97F4A7C15ULL + salt * 0xBF58476D1CE4E5B9ULL);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

std::vector<EgoMotion> sample_ego_chain(std::mt19937_64& rng, const SynthConfig& config) {
  std::uniform_real_distribution<double> speed(0.5, 1.5);
  std::uniform_real_distribution<double> turn(-1.0, 1.0);
  std::vector<EgoMotion> world(config.sequence_length);
  world[0] = EgoMotion{};  // world frame == frame-0 camera
  for (int f = 1; f < config.sequence_length; ++f) {
    // Planar step: forward along the current heading plus a small yaw change.
    Pose4DoF step;
    step.yaw = wrap_angle_2pi(turn(rng) * config.ego_step_yaw);
    step.translation = Vec3(0.0, 0.0, speed(rng) * config.ego_step_translation);
    world[f] = world[f - 1].compose(EgoMotion::from_pose(step));
  }
  return world;
}

double yaw_of_rotation(const Mat3& r) { return std::atan2(r(0, 2), r(0, 0)); }

// Camera-frame pose of a static world object seen from camera f.
Pose4DoF object_in_frame(const EgoMotion& world_from_cam, const Pose4DoF& world_pose) {
  const EgoMotion cam_from_world = world_from_cam.inverse();
  const EgoMotion composed = cam_from_world.compose(EgoMotion::from_pose(world_pose));
  return Pose4DoF::make(yaw_of_rotation(composed.rotation), composed.translation);
}

}  // namespace

SynthSequence sample_sequence(std::mt19937_64& rng, const TemplateMesh& mesh,
                              const SynthConfig& config) {
  if (config.sequence_length < 2) {
    throw std::invalid_argument("sample_sequence: sequence_length must be >= 2");
  }
  SynthSequence seq;
  seq.ego_world = sample_ego_chain(rng, config);

  std::uniform_real_distribution<double> yaw_dist(0.0, kTwoPi);
  for (int attempt = 0; attempt < 64; ++attempt) {
    Vec3 t;
    for (int a = 0; a < 3; ++a) {
      std::uniform_real_distribution<double> axis(config.translation_min[a],
                                                  config.translation_max[a]);
      t[a] = axis(rng);
    }
    const Pose4DoF world_pose = Pose4DoF::make(yaw_dist(rng), t);
    try {
      std::vector<SynthInstance> instances;
      for (int f = 0; f < config.sequence_length; ++f) {
        const Pose4DoF cam_pose = object_in_frame(seq.ego_world[f], world_pose);
        instances.push_back(sample_instance_at(rng, mesh, config, cam_pose, f, 0, 0));
      }
      seq.instances = std::move(instances);
      return seq;
    } catch (const ResampleNeeded&) {
      continue;
    }
  }
  throw std::runtime_error("sample_sequence: could not draw a visible track");
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

SynthDataset make_dataset(const SynthConfig& config) {
  SynthDataset ds;
  const TemplateMesh mesh = template_from_config(config);
  if (config.n_instances <= 0) return ds;

  const int seq_len = std::max(1, config.sequence_length);
  const int per_seq = std::max(1, config.objects_per_sequence);
  std::uniform_real_distribution<double> yaw_dist(0.0, kTwoPi);

  int made = 0;
  int track_id = 0;
  int sequence_idx = 0;
  while (made < config.n_instances) {
    std::mt19937_64 ego_rng(mix(config.seed, 0xE60 + sequence_idx));
    std::vector<EgoMotion> ego = sample_ego_chain(ego_rng, config);
    const int frame_base = ds.n_frames;

    std::vector<Pose4DoF> placed;
    for (int obj = 0; obj < per_seq && made < config.n_instances; ++obj) {
      std::mt19937_64 rng(mix(config.seed, 0x0B1000 + track_id));
      const int want = std::min(seq_len, config.n_instances - made);

      bool done = false;
      for (int attempt = 0; attempt < 64 && !done; ++attempt) {
        Vec3 t;
        for (int a = 0; a < 3; ++a) {
          std::uniform_real_distribution<double> axis(config.translation_min[a],
                                                      config.translation_max[a]);
          t[a] = axis(rng);
        }
        const Pose4DoF world_pose = Pose4DoF::make(yaw_dist(rng), t);
        bool separated = true;
        for (const Pose4DoF& other : placed) {
          if ((other.translation - world_pose.translation).norm() < 5.0) separated = false;
        }
        if (!separated) continue;
        try {
          std::vector<SynthInstance> track_instances;
          for (int f = 0; f < want; ++f) {
            const Pose4DoF cam_pose = object_in_frame(ego[f], world_pose);
            SynthInstance inst =
                sample_instance_at(rng, mesh, config, cam_pose, frame_base + f, obj, track_id);
            track_instances.push_back(std::move(inst));
          }
          std::vector<int> track;
          for (SynthInstance& inst : track_instances) {
            track.push_back(static_cast<int>(ds.instances.size()));
            ds.instances.push_back(std::move(inst));
          }
          ds.gt_tracks.push_back(std::move(track));
          placed.push_back(world_pose);
          made += want;
          ++track_id;
          done = true;
        } catch (const ResampleNeeded&) {
          continue;
        }
      }
      if (!done) {
        throw std::runtime_error("make_dataset: could not place a visible object");
      }
    }

    for (int f = 0; f < seq_len; ++f) ds.ego_world.push_back(ego[f]);
    ds.n_frames += seq_len;
    ++sequence_idx;
  }

  // Held-out split by whole tracks.
  const int n_tracks = static_cast<int>(ds.gt_tracks.size());
  const int n_heldout = static_cast<int>(std::ceil(config.heldout_fraction * n_tracks));
  std::vector<int> track_order(n_tracks);
  std::iota(track_order.begin(), track_order.end(), 0);
  std::mt19937_64 split_rng(mix(config.seed, 0x5A11));
  std::shuffle(track_order.begin(), track_order.end(), split_rng);
  for (int i = 0; i < n_heldout; ++i) {
    for (int idx : ds.gt_tracks[track_order[i]]) ds.instances[idx].heldout = true;
  }
  return ds;
}

TrainingView training_view(const SynthDataset& dataset, bool heldout) {
  TrainingView view;
  std::vector<int> remap(dataset.instances.size(), -1);
  for (size_t i = 0; i < dataset.instances.size(); ++i) {
    if (dataset.instances[i].heldout != heldout) continue;
    remap[i] = static_cast<int>(view.detections.size());
    view.detections.push_back(dataset.instances[i].det);
    view.dataset_indices.push_back(static_cast<int>(i));
  }
  for (const std::vector<int>& track : dataset.gt_tracks) {
    std::vector<int> mapped;
    for (int idx : track) {
      if (remap[idx] >= 0) mapped.push_back(remap[idx]);
    }
    if (mapped.size() > 1) view.tracks.push_back(std::move(mapped));
  }
  return view;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[32];
  snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_dataset(const std::string& dir, const SynthDataset& dataset,
                  const SynthConfig& config) {
  fs::create_directories(dir);

  std::ofstream points(fs::path(dir) / "points.bin", std::ios::binary | std::ios::trunc);
  std::ofstream scenes(fs::path(dir) / "scenes.jsonl", std::ios::trunc);
  if (!points || !scenes) throw std::runtime_error("save_dataset: cannot write to " + dir);

  long offset = 0;
  for (const SynthInstance& inst : dataset.instances) {
    for (const Vec3& p : inst.det.points.points) {
      const float xyz[3] = {static_cast<float>(p.x()), static_cast<float>(p.y()),
                            static_cast<float>(p.z())};
      points.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    }
    nlohmann::json j;
    j["frame_id"] = inst.det.frame_id;
    j["track_id"] = inst.gt_track_id;
    j["det_id"] = inst.det.det_id;
    j["score"] = inst.det.score;
    j["gt_yaw"] = inst.gt_pose.yaw;
    j["gt_translation"] = {inst.gt_pose.translation.x(), inst.gt_pose.translation.y(),
                           inst.gt_pose.translation.z()};
    j["n_inliers"] = inst.n_inliers();
    j["split"] = inst.heldout ? "heldout" : "train";
    j["point_offset"] = offset;
    j["point_count"] = static_cast<long>(inst.det.points.size());
    nlohmann::json flags = nlohmann::json::array();
    for (uint8_t f : inst.outlier_flags) flags.push_back(static_cast<int>(f));
    j["outlier_flags"] = flags;
    scenes << j.dump() << "\n";
    offset += static_cast<long>(inst.det.points.size());
  }

  std::ofstream ego(fs::path(dir) / "ego.txt", std::ios::trunc);
  if (!ego) throw std::runtime_error("save_dataset: cannot write ego.txt in " + dir);
  for (const EgoMotion& w : dataset.ego_world) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        ego << format_double(w.rotation(r, c)) << " ";
      }
      ego << format_double(w.translation[r]);
      ego << (r == 2 ? "\n" : " ");
    }
  }

  std::ofstream cfg(fs::path(dir) / "synth_config.json", std::ios::trunc);
  if (!cfg) throw std::runtime_error("save_dataset: cannot write synth_config.json in " + dir);
  cfg << synth_config_to_json(config) << "\n";
}

LoadedDataset load_dataset(const std::string& dir) {
  LoadedDataset out;
  std::ifstream cfg(fs::path(dir) / "synth_config.json");
  if (!cfg) throw std::runtime_error("load_dataset: missing synth_config.json in " + dir);
  std::ostringstream cfg_buf;
  cfg_buf << cfg.rdbuf();
  out.config = synth_config_from_json(cfg_buf.str());
  const TemplateMesh mesh = template_from_config(out.config);

  std::ifstream points(fs::path(dir) / "points.bin", std::ios::binary);
  if (!points) throw std::runtime_error("load_dataset: missing points.bin in " + dir);
  std::vector<float> raw;
  {
    points.seekg(0, std::ios::end);
    const auto bytes = points.tellg();
    points.seekg(0);
    if (bytes % sizeof(float) != 0) {
      throw std::runtime_error("load_dataset: points.bin size is not float-aligned");
    }
    raw.resize(static_cast<size_t>(bytes) / sizeof(float));
    points.read(reinterpret_cast<char*>(raw.data()), bytes);
  }

  std::ifstream scenes(fs::path(dir) / "scenes.jsonl");
  if (!scenes) throw std::runtime_error("load_dataset: missing scenes.jsonl in " + dir);
  std::string line;
  int line_no = 0;
  int max_track = -1;
  while (std::getline(scenes, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("load_dataset: scenes.jsonl:" + std::to_string(line_no) + ": " +
                               e.what());
    }
    SynthInstance inst;
    inst.det.frame_id = j.at("frame_id").get<int>();
    inst.gt_track_id = j.at("track_id").get<int>();
    inst.det.det_id = j.at("det_id").get<int>();
    inst.det.score = j.at("score").get<double>();
    const auto& t = j.at("gt_translation");
    inst.gt_pose = Pose4DoF::make(j.at("gt_yaw").get<double>(),
                                  Vec3(t.at(0).get<double>(), t.at(1).get<double>(),
                                       t.at(2).get<double>()));
    inst.gt_box = posed_box(inst.gt_pose, mesh);
    inst.heldout = j.at("split").get<std::string>() == "heldout";
    const long off = j.at("point_offset").get<long>();
    const long cnt = j.at("point_count").get<long>();
    if ((off + cnt) * 3 > static_cast<long>(raw.size())) {
      throw std::runtime_error("load_dataset: scenes.jsonl:" + std::to_string(line_no) +
                               ": point range exceeds points.bin");
    }
    inst.det.points.frame = Frame::Camera;
    for (long k = 0; k < cnt; ++k) {
      const size_t base = static_cast<size_t>((off + k) * 3);
      inst.det.points.points.emplace_back(raw[base], raw[base + 1], raw[base + 2]);
    }
    for (const auto& f : j.at("outlier_flags")) {
      inst.outlier_flags.push_back(static_cast<uint8_t>(f.get<int>()));
    }
    if (inst.outlier_flags.size() != inst.det.points.size()) {
      throw std::runtime_error("load_dataset: scenes.jsonl:" + std::to_string(line_no) +
                               ": flag/point count mismatch");
    }
    max_track = std::max(max_track, inst.gt_track_id);
    out.data.instances.push_back(std::move(inst));
  }

  out.data.gt_tracks.assign(max_track + 1, {});
  for (size_t i = 0; i < out.data.instances.size(); ++i) {
    const int t = out.data.instances[i].gt_track_id;
    if (t >= 0) out.data.gt_tracks[t].push_back(static_cast<int>(i));
  }

  std::ifstream ego(fs::path(dir) / "ego.txt");
  if (!ego) throw std::runtime_error("load_dataset: missing ego.txt in " + dir);
  int ego_line = 0;
  while (std::getline(ego, line)) {
    ++ego_line;
    if (line.empty()) continue;
    std::istringstream ls(line);
    EgoMotion w;
    double vals[12];
    for (int k = 0; k < 12; ++k) {
      if (!(ls >> vals[k])) {
        throw std::runtime_error("load_dataset: ego.txt:" + std::to_string(ego_line) +
                                 ": expected 12 numbers");
      }
    }
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) w.rotation(r, c) = vals[4 * r + c];
      w.translation[r] = vals[4 * r + 3];
    }
    out.data.ego_world.push_back(w);
  }
  out.data.n_frames = static_cast<int>(out.data.ego_world.size());
  return out;
}

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

std::string synth_config_to_json(const SynthConfig& c) {
  nlohmann::json j;
  j["n_instances"] = c.n_instances;
  j["translation_min"] = {c.translation_min.x(), c.translation_min.y(), c.translation_min.z()};
  j["translation_max"] = {c.translation_max.x(), c.translation_max.y(), c.translation_max.z()};
  j["min_points"] = c.min_points;
  j["max_points"] = c.max_points;
  j["surface_noise"] = c.surface_noise;
  j["outlier_fraction"] = c.outlier_fraction;
  j["outliers_ground"] = c.outliers_ground;
  j["outliers_neighbour"] = c.outliers_neighbour;
  j["outliers_pass_through"] = c.outliers_pass_through;
  j["sequence_length"] = c.sequence_length;
  j["ego_step_translation"] = c.ego_step_translation;
  j["ego_step_yaw"] = c.ego_step_yaw;
  j["ground_plane_y"] = c.ground_plane_y;
  j["objects_per_sequence"] = c.objects_per_sequence;
  j["heldout_fraction"] = c.heldout_fraction;
  j["seed"] = c.seed;
  j["template"] = {{"length", c.template_length},
                   {"width", c.template_width},
                   {"height", c.template_height},
                   {"obj", c.template_obj}};
  j["camera"] = {{"fx", c.cam_fx},     {"fy", c.cam_fy},    {"cx", c.cam_cx},
                 {"cy", c.cam_cy},     {"width", c.cam_width}, {"height", c.cam_height}};
  return j.dump(2);
}

SynthConfig synth_config_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {
        "n_instances", "translation_min", "translation_max", "min_points", "max_points",
        "surface_noise", "outlier_fraction", "outliers_ground", "outliers_neighbour",
        "outliers_pass_through", "sequence_length", "ego_step_translation", "ego_step_yaw",
        "ground_plane_y", "objects_per_sequence", "heldout_fraction", "seed", "template",
        "camera"};
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::runtime_error("config: unknown key '" + key + "'");
  }
  SynthConfig c;
  c.n_instances = j.value("n_instances", c.n_instances);
  auto vec3 = [&j](const char* key, Vec3 fallback) {
    if (!j.contains(key)) return fallback;
    const auto& a = j.at(key);
    return Vec3(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>());
  };
  c.translation_min = vec3("translation_min", c.translation_min);
  c.translation_max = vec3("translation_max", c.translation_max);
  c.min_points = j.value("min_points", c.min_points);
  c.max_points = j.value("max_points", c.max_points);
  c.surface_noise = j.value("surface_noise", c.surface_noise);
  c.outlier_fraction = j.value("outlier_fraction", c.outlier_fraction);
  c.outliers_ground = j.value("outliers_ground", c.outliers_ground);
  c.outliers_neighbour = j.value("outliers_neighbour", c.outliers_neighbour);
  c.outliers_pass_through = j.value("outliers_pass_through", c.outliers_pass_through);
  c.sequence_length = j.value("sequence_length", c.sequence_length);
  c.ego_step_translation = j.value("ego_step_translation", c.ego_step_translation);
  c.ego_step_yaw = j.value("ego_step_yaw", c.ego_step_yaw);
  c.ground_plane_y = j.value("ground_plane_y", c.ground_plane_y);
  c.objects_per_sequence = j.value("objects_per_sequence", c.objects_per_sequence);
  c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
  c.seed = j.value("seed", c.seed);
  if (j.contains("template")) {
    const auto& t = j.at("template");
    c.template_length = t.value("length", c.template_length);
    c.template_width = t.value("width", c.template_width);
    c.template_height = t.value("height", c.template_height);
    c.template_obj = t.value("obj", c.template_obj);
  }
  if (j.contains("camera")) {
    const auto& cam = j.at("camera");
    c.cam_fx = cam.value("fx", c.cam_fx);
    c.cam_fy = cam.value("fy", c.cam_fy);
    c.cam_cx = cam.value("cx", c.cam_cx);
    c.cam_cy = cam.value("cy", c.cam_cy);
    c.cam_width = cam.value("width", c.cam_width);
    c.cam_height = cam.value("height", c.cam_height);
  }
  if (c.outlier_fraction < 0.0 || c.outlier_fraction > 1.0) {
    throw std::runtime_error("config: outlier_fraction must lie in [0, 1]");
  }
  if (c.min_points < 1 || c.max_points < c.min_points) {
    throw std::runtime_error("config: invalid points-per-instance range");
  }
  return c;
}

}  // namespace al3d
