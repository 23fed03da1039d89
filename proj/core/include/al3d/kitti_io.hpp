#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "al3d/geometry.hpp"

namespace al3d {

// ---------------------------------------------------------------------------
// Velodyne scans
// ---------------------------------------------------------------------------

/// Little-endian float32 (x, y, z, reflectance) quadruples; reflectance is
/// discarded. Rejects files whose size is not a multiple of 16 bytes, naming
/// the byte offset.
PointCloud read_velodyne(const std::string& path);

/// Writes the cloud in the same quadruple format; reflectance defaults to 0.
void write_velodyne(const std::string& path, const PointCloud& cloud,
                    std::span<const float> reflectance = {});

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct FrameCalib {
  Mat34 P2 = Mat34::Zero();
  Mat3 R0_rect = Mat3::Identity();
  Mat34 Tr_velo_to_cam = Mat34::Zero();
};

/// Parses the KITTI object calibration file; requires the P2, R0_rect and
/// Tr_velo_to_cam keys and reports the missing key otherwise.
FrameCalib read_calib(const std::string& path);

/// X_cam = R0_rect * (Tr_velo_to_cam * X_velo_homogeneous).
PointCloud velo_to_cam(const FrameCalib& calib, const PointCloud& cloud);

CameraCalibration camera_from_calib(const FrameCalib& calib, int image_width,
                                    int image_height);

// ---------------------------------------------------------------------------
// Instance masks
// ---------------------------------------------------------------------------

/// Instance metadata alongside each mask, as listed in the JSON sidecar.
struct MaskInstance {
  int instance_id = 0;
  double score = 1.0;
  std::string category;
  Mask2D mask;
};

struct MaskSet {
  std::vector<MaskInstance> instances;
  std::vector<std::string> warnings;  // sidecar ids absent from the bitmap
  int width = 0;
  int height = 0;
};

/// Reads a 16-bit grayscale PNG instance map (pixel value k > 0 marks
/// instance k) plus its JSON sidecar (an array of {instance_id, score,
/// category}). Sidecar entries without pixels are skipped with a warning.
MaskSet read_masks(const std::string& png_path, const std::string& json_path);

/// Writers for producing mask inputs (fixtures, converters).
void write_instance_map(const std::string& png_path, int width, int height,
                        std::span<const uint16_t> instance_map);
void write_mask_sidecar(const std::string& json_path,
                        std::span<const MaskInstance> instances);

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

struct KittiLabel {
  std::string type = "Car";
  double truncated = 0.0;
  int occluded = 0;
  double alpha = 0.0;
  double bbox[4] = {0.0, 0.0, 0.0, 0.0};  // x1 y1 x2 y2
  double height = 0.0, width = 0.0, length = 0.0;
  Vec3 location = Vec3::Zero();  // bottom-centre, camera frame
  double rotation_y = 0.0;
  std::optional<double> score;
};

/// Space-separated fixed two-decimal lines:
///   Car trunc occ alpha x1 y1 x2 y2 h w l x y z ry [score]
void write_labels(const std::string& path, std::span<const KittiLabel> labels);
std::vector<KittiLabel> read_labels(const std::string& path);

/// Internal geometric-centre box <-> KITTI bottom-centre label. The label's
/// rotation_y differs from the box yaw by the quarter turn between the
/// heading conventions; alpha = ry - atan2(x, z). The 2D bbox is the clipped
/// projection of the 8 box corners when a calibration is given.
KittiLabel box_to_label(const OrientedBox3D& box, const CameraCalibration* calib = nullptr);
OrientedBox3D label_to_box(const KittiLabel& label);

}  // namespace al3d
