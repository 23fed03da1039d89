#include "al3d/kitti_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>
#include <png.h>

namespace al3d {

// ---------------------------------------------------------------------------
// Velodyne
// ---------------------------------------------------------------------------

PointCloud read_velodyne(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_velodyne: cannot open " + path);
  in.seekg(0, std::ios::end);
  const long bytes = static_cast<long>(in.tellg());
  in.seekg(0);
  if (bytes % 16 != 0) {
    throw std::runtime_error("read_velodyne: " + path + ": size " + std::to_string(bytes) +
                             " is not a multiple of 16 (stray bytes at offset " +
                             std::to_string(bytes - bytes % 16) + ")");
  }
  PointCloud cloud;
  cloud.frame = Frame::Sensor;
  cloud.points.reserve(bytes / 16);
  float quad[4];
  for (long off = 0; off < bytes; off += 16) {
    in.read(reinterpret_cast<char*>(quad), 16);
    if (!in) throw std::runtime_error("read_velodyne: " + path + ": short read at offset " +
                                      std::to_string(off));
    cloud.points.emplace_back(quad[0], quad[1], quad[2]);
  }
  return cloud;
}

void write_velodyne(const std::string& path, const PointCloud& cloud,
                    std::span<const float> reflectance) {
  if (!reflectance.empty() && reflectance.size() != cloud.size()) {
    throw std::invalid_argument("write_velodyne: reflectance count mismatch");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_velodyne: cannot open " + path);
  for (size_t i = 0; i < cloud.size(); ++i) {
    const float quad[4] = {static_cast<float>(cloud.points[i].x()),
                           static_cast<float>(cloud.points[i].y()),
                           static_cast<float>(cloud.points[i].z()),
                           reflectance.empty() ? 0.0f : reflectance[i]};
    out.write(reinterpret_cast<const char*>(quad), 16);
  }
  if (!out) throw std::runtime_error("write_velodyne: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

FrameCalib read_calib(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_calib: cannot open " + path);
  std::map<std::string, std::vector<double>> entries;
  std::string line;
  while (std::getline(in, line)) {
    const size_t colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    std::istringstream values(line.substr(colon + 1));
    std::vector<double> vals;
    double v;
    while (values >> v) vals.push_back(v);
    entries[key] = std::move(vals);
  }
  auto fetch = [&entries, &path](const std::string& key, size_t count) {
    const auto it = entries.find(key);
    if (it == entries.end()) {
      throw std::runtime_error("read_calib: " + path + ": missing key '" + key + "'");
    }
    if (it->second.size() != count) {
      throw std::runtime_error("read_calib: " + path + ": key '" + key + "' has " +
                               std::to_string(it->second.size()) + " values, expected " +
                               std::to_string(count));
    }
    return it->second;
  };
  FrameCalib calib;
  const auto p2 = fetch("P2", 12);
  const auto r0 = fetch("R0_rect", 9);
  const auto tr = fetch("Tr_velo_to_cam", 12);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) calib.P2(r, c) = p2[4 * r + c];
    for (int c = 0; c < 3; ++c) calib.R0_rect(r, c) = r0[3 * r + c];
    for (int c = 0; c < 4; ++c) calib.Tr_velo_to_cam(r, c) = tr[4 * r + c];
  }
  return calib;
}

PointCloud velo_to_cam(const FrameCalib& calib, const PointCloud& cloud) {
  PointCloud out;
  out.frame = Frame::Camera;
  out.points.reserve(cloud.size());
  for (const Vec3& p : cloud.points) {
    const Eigen::Vector4d hp(p.x(), p.y(), p.z(), 1.0);
    out.points.push_back(calib.R0_rect * (calib.Tr_velo_to_cam * hp));
  }
  return out;
}

CameraCalibration camera_from_calib(const FrameCalib& calib, int image_width,
                                    int image_height) {
  CameraCalibration cam;
  cam.projection = calib.P2;
  cam.image_width = image_width;
  cam.image_height = image_height;
  return cam;
}

// ---------------------------------------------------------------------------
// Masks (16-bit grayscale PNG + JSON sidecar)
// ---------------------------------------------------------------------------

namespace {

struct PngCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* file = nullptr;
  bool reading = false;
  ~PngCloser() {
    if (png) {
      if (reading) {
        png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
      } else {
        png_destroy_write_struct(&png, info ? &info : nullptr);
      }
    }
    if (file) fclose(file);
  }
};

std::vector<uint16_t> read_png16(const std::string& path, int& width, int& height) {
  PngCloser ctx;
  ctx.reading = true;
  ctx.file = fopen(path.c_str(), "rb");
  if (!ctx.file) throw std::runtime_error("read_masks: cannot open " + path);
  png_byte header[8];
  if (fread(header, 1, 8, ctx.file) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw std::runtime_error("read_masks: " + path + " is not a PNG file");
  }
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.png || !ctx.info) throw std::runtime_error("read_masks: libpng init failed");
  if (setjmp(png_jmpbuf(ctx.png))) {
    throw std::runtime_error("read_masks: libpng failed decoding " + path);
  }
  png_init_io(ctx.png, ctx.file);
  png_set_sig_bytes(ctx.png, 8);
  png_read_info(ctx.png, ctx.info);
  width = static_cast<int>(png_get_image_width(ctx.png, ctx.info));
  height = static_cast<int>(png_get_image_height(ctx.png, ctx.info));
  const int depth = png_get_bit_depth(ctx.png, ctx.info);
  const int colour = png_get_color_type(ctx.png, ctx.info);
  if (depth != 16 || colour != PNG_COLOR_TYPE_GRAY) {
    throw std::runtime_error("read_masks: " + path + " must be 16-bit grayscale");
  }
  png_set_swap(ctx.png);  // stored big-endian
  std::vector<uint16_t> data(static_cast<size_t>(width) * height);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) {
    rows[y] = reinterpret_cast<png_bytep>(data.data() + static_cast<size_t>(y) * width);
  }
  png_read_image(ctx.png, rows.data());
  png_read_end(ctx.png, nullptr);
  return data;
}

}  // namespace

void write_instance_map(const std::string& png_path, int width, int height,
                        std::span<const uint16_t> instance_map) {
  if (instance_map.size() != static_cast<size_t>(width) * height) {
    throw std::invalid_argument("write_instance_map: size mismatch");
  }
  PngCloser ctx;
  ctx.file = fopen(png_path.c_str(), "wb");
  if (!ctx.file) throw std::runtime_error("write_instance_map: cannot open " + png_path);
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.png || !ctx.info) throw std::runtime_error("write_instance_map: libpng init failed");
  if (setjmp(png_jmpbuf(ctx.png))) {
    throw std::runtime_error("write_instance_map: libpng failed encoding " + png_path);
  }
  png_init_io(ctx.png, ctx.file);
  png_set_IHDR(ctx.png, ctx.info, width, height, 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);
  png_set_swap(ctx.png);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) {
    rows[y] = reinterpret_cast<png_bytep>(
        const_cast<uint16_t*>(instance_map.data() + static_cast<size_t>(y) * width));
  }
  png_write_image(ctx.png, rows.data());
  png_write_end(ctx.png, nullptr);
}

void write_mask_sidecar(const std::string& json_path,
                        std::span<const MaskInstance> instances) {
  nlohmann::json arr = nlohmann::json::array();
  for (const MaskInstance& inst : instances) {
    arr.push_back({{"instance_id", inst.instance_id},
                   {"score", inst.score},
                   {"category", inst.category}});
  }
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_mask_sidecar: cannot open " + json_path);
  out << arr.dump(2) << "\n";
}

MaskSet read_masks(const std::string& png_path, const std::string& json_path) {
  MaskSet set;
  std::vector<uint16_t> map = read_png16(png_path, set.width, set.height);

  std::ifstream sidecar(json_path);
  if (!sidecar) throw std::runtime_error("read_masks: cannot open " + json_path);
  nlohmann::json arr;
  try {
    sidecar >> arr;
  } catch (const std::exception& e) {
    throw std::runtime_error("read_masks: " + json_path + ": " + e.what());
  }
  if (!arr.is_array()) {
    throw std::runtime_error("read_masks: " + json_path + ": expected a top-level array");
  }

  for (const auto& entry : arr) {
    MaskInstance inst;
    inst.instance_id = entry.at("instance_id").get<int>();
    inst.score = entry.value("score", 1.0);
    inst.category = entry.value("category", std::string());
    inst.mask.width = set.width;
    inst.mask.height = set.height;
    inst.mask.score = inst.score;
    inst.mask.bitmap.assign(map.size(), 0);
    size_t area = 0;
    for (size_t i = 0; i < map.size(); ++i) {
      if (map[i] == static_cast<uint16_t>(inst.instance_id)) {
        inst.mask.bitmap[i] = 1;
        ++area;
      }
    }
    if (area == 0) {
      set.warnings.push_back("instance_id " + std::to_string(inst.instance_id) +
                             " from " + json_path + " has no pixels; skipped");
      continue;
    }
    set.instances.push_back(std::move(inst));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

void write_labels(const std::string& path, std::span<const KittiLabel> labels) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_labels: cannot open " + path);
  char line[320];
  for (const KittiLabel& l : labels) {
    int n = snprintf(line, sizeof(line),
                     "%s %.2f %d %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f",
                     l.type.c_str(), l.truncated, l.occluded, l.alpha, l.bbox[0], l.bbox[1],
                     l.bbox[2], l.bbox[3], l.height, l.width, l.length, l.location.x(),
                     l.location.y(), l.location.z(), l.rotation_y);
    out << line;
    if (l.score) {
      snprintf(line, sizeof(line), " %.2f", *l.score);
      out << line;
    }
    out << "\n";
    (void)n;
  }
  if (!out) throw std::runtime_error("write_labels: write failed for " + path);
}

std::vector<KittiLabel> read_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_labels: cannot open " + path);
  std::vector<KittiLabel> labels;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    KittiLabel l;
    std::vector<double> vals;
    double v;
    if (!(ls >> l.type)) {
      throw std::runtime_error("read_labels: " + path + ":" + std::to_string(line_no) +
                               ": missing type field");
    }
    while (ls >> v) vals.push_back(v);
    if (vals.size() != 14 && vals.size() != 15) {
      throw std::runtime_error("read_labels: " + path + ":" + std::to_string(line_no) +
                               ": expected 14 or 15 numeric fields, got " +
                               std::to_string(vals.size()));
    }
    l.truncated = vals[0];
    l.occluded = static_cast<int>(vals[1]);
    l.alpha = vals[2];
    for (int k = 0; k < 4; ++k) l.bbox[k] = vals[3 + k];
    l.height = vals[7];
    l.width = vals[8];
    l.length = vals[9];
    l.location = Vec3(vals[10], vals[11], vals[12]);
    l.rotation_y = vals[13];
    if (vals.size() == 15) l.score = vals[14];
    labels.push_back(std::move(l));
  }
  return labels;
}

KittiLabel box_to_label(const OrientedBox3D& box, const CameraCalibration* calib) {
  KittiLabel l;
  l.height = box.dims.z();
  l.width = box.dims.y();
  l.length = box.dims.x();
  l.location = box.centre + Vec3(0.0, 0.5 * l.height, 0.0);
  l.rotation_y = wrap_angle_pi(box.yaw - M_PI_2);
  l.alpha = wrap_angle_pi(l.rotation_y - std::atan2(l.location.x(), l.location.z()));
  l.score = box.score;
  if (calib) {
    double x1 = std::numeric_limits<double>::infinity();
    double y1 = std::numeric_limits<double>::infinity();
    double x2 = -std::numeric_limits<double>::infinity();
    double y2 = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (const Vec3& corner : box.corners()) {
      const PixelProjection proj = project(*calib, corner);
      if (proj.status == ProjectStatus::BehindCamera) continue;
      any = true;
      x1 = std::min(x1, proj.pixel.x());
      y1 = std::min(y1, proj.pixel.y());
      x2 = std::max(x2, proj.pixel.x());
      y2 = std::max(y2, proj.pixel.y());
    }
    if (any) {
      l.bbox[0] = std::clamp(x1, 0.0, static_cast<double>(calib->image_width));
      l.bbox[1] = std::clamp(y1, 0.0, static_cast<double>(calib->image_height));
      l.bbox[2] = std::clamp(x2, 0.0, static_cast<double>(calib->image_width));
      l.bbox[3] = std::clamp(y2, 0.0, static_cast<double>(calib->image_height));
    }
  }
  return l;
}

OrientedBox3D label_to_box(const KittiLabel& label) {
  return OrientedBox3D::make(label.location - Vec3(0.0, 0.5 * label.height, 0.0),
                             Vec3(label.length, label.width, label.height),
                             label.rotation_y + M_PI_2, label.score.value_or(1.0));
}

}  // namespace al3d
