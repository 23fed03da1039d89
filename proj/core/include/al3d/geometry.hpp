#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace al3d {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

constexpr double kTwoPi = 6.283185307179586476925286766559;

/// Wraps an angle into [0, 2*pi).
double wrap_angle_2pi(double a);
/// Wraps an angle into [-pi, pi].
double wrap_angle_pi(double a);

// ---------------------------------------------------------------------------
// Camera projection
// ---------------------------------------------------------------------------

/// Pinhole camera: 3x4 projection from homogeneous camera-frame metres to
/// homogeneous pixels, plus the pixel frame bounds.
struct CameraCalibration {
  Mat34 projection = Mat34::Zero();
  int image_width = 0;
  int image_height = 0;
};

enum class ProjectStatus { InFrame, OutOfFrame, BehindCamera };

struct PixelProjection {
  ProjectStatus status = ProjectStatus::BehindCamera;
  Vec2 pixel = Vec2::Zero();  // valid unless BehindCamera
};

/// Perspective projection of a camera-frame point. Depth is the third
/// homogeneous coordinate after applying the projection matrix; points with
/// non-positive depth are reported BehindCamera and carry no pixel.
/// In-frame means the pixel lies in [0,W) x [0,H).
PixelProjection project(const CameraCalibration& calib, const Vec3& point);

// ---------------------------------------------------------------------------
// Poses
// ---------------------------------------------------------------------------

/// Yaw-plus-translation rigid motion in the camera frame. The rotation is
/// about the camera vertical (Y) axis with the KITTI rotation_y convention:
///   x' =  x cos(yaw) + z sin(yaw)
///   y' =  y
///   z' = -x sin(yaw) + z cos(yaw)
struct Pose4DoF {
  double yaw = 0.0;  // normalized to [0, 2*pi)
  Vec3 translation = Vec3::Zero();

  static Pose4DoF make(double yaw, const Vec3& translation);

  Mat3 rotation() const;
  Vec3 apply(const Vec3& p) const;          // R * p + T
  Vec3 apply_inverse(const Vec3& p) const;  // R^T * (p - T)
  Pose4DoF inverse() const;
};

/// Rotation matrix about the camera Y axis (KITTI rotation_y convention).
Mat3 yaw_rotation(double yaw);

std::vector<Vec3> apply_pose(const Pose4DoF& pose, const std::vector<Vec3>& points);

// ---------------------------------------------------------------------------
// Rigid transforms between frames (ego-motion)
// ---------------------------------------------------------------------------

/// General rigid transform, used for the known sensor ego-motion between
/// frames. Rotation must be orthonormal with determinant +1.
struct EgoMotion {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  EgoMotion inverse() const;
  /// Composition: (a * b).apply(p) == a.apply(b.apply(p)).
  EgoMotion compose(const EgoMotion& other) const;

  static EgoMotion from_pose(const Pose4DoF& pose);
  bool is_rigid(double tol = 1e-9) const;
};

// ---------------------------------------------------------------------------
// Point clouds and masks
// ---------------------------------------------------------------------------

enum class Frame { Sensor, Camera };

struct PointCloud {
  std::vector<Vec3> points;
  Frame frame = Frame::Camera;

  size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Per-pixel instance mask with the detector confidence.
struct Mask2D {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> bitmap;  // row-major, width*height entries
  double score = 1.0;

  bool at(int x, int y) const { return bitmap[static_cast<size_t>(y) * width + x] != 0; }
};

/// Returns exactly the points with positive depth whose floored pixel lies
/// inside the frame with the mask bit set. Input order is preserved.
PointCloud filter_points_by_mask(const CameraCalibration& calib, const PointCloud& cloud,
                                 const Mask2D& mask);

/// One object instance as consumed by training and prediction: the
/// frustum-filtered LiDAR points plus detection metadata. Carries no ground
/// truth by construction.
struct MaskedDetection {
  PointCloud points;  // camera frame
  int frame_id = 0;
  int det_id = 0;  // instance id within its frame
  double score = 1.0;
};

// ---------------------------------------------------------------------------
// Template meshes
// ---------------------------------------------------------------------------

struct TightBox {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  Vec3 centre() const { return 0.5 * (min + max); }
  Vec3 extents() const { return max - min; }
};

/// Canonical object surface: triangulated mesh centred so its tight
/// axis-aligned box is symmetric about the origin. The heading (length) axis
/// is +Z; width spans X and height spans Y.
struct TemplateMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  TightBox box;
  Vec3 keypoint_centre = Vec3::Zero();
  Vec3 keypoint_front = Vec3::Zero();

  double surface_area() const;
};

/// Exact squared distance from a point to the closest point on the mesh
/// surface, handling face, edge and vertex regions of every triangle.
struct MeshDistance {
  double sq_distance = 0.0;
  Vec3 closest_point = Vec3::Zero();
};
MeshDistance point_to_mesh_sq_distance(const Vec3& point, const TemplateMesh& mesh);

/// Exact squared distance from a point to one triangle (a, b, c).
MeshDistance point_to_triangle_sq_distance(const Vec3& point, const Vec3& a, const Vec3& b,
                                           const Vec3& c);

/// Low-poly two-box car (body slab plus cabin) whose tight box equals the
/// requested dimensions exactly. The cabin sits toward the rear so the shape
/// distinguishes front from back. Throws std::invalid_argument on
/// non-positive dimensions.
TemplateMesh builtin_car_template(double length_m = 4.0, double width_m = 1.6,
                                  double height_m = 1.5);

/// Loads a Wavefront OBJ (v/f records only, 1-based indices, faces
/// triangulated fan-wise), recentres the tight box onto the origin and
/// derives the keypoints. Throws std::runtime_error with the offending line
/// number on malformed input.
TemplateMesh load_obj(const std::string& path);
TemplateMesh parse_obj(const std::string& text, const std::string& name = "<obj>");

// ---------------------------------------------------------------------------
// Oriented boxes
// ---------------------------------------------------------------------------

/// Emitted 3D label. Centre is the geometric centre; dims are
/// (length, width, height) along the local (Z, X, Y) axes before rotation;
/// yaw is normalized to [-pi, pi] on construction.
struct OrientedBox3D {
  Vec3 centre = Vec3::Zero();
  Vec3 dims = Vec3::Zero();  // (length, width, height)
  double yaw = 0.0;
  double score = 1.0;

  static OrientedBox3D make(const Vec3& centre, const Vec3& dims, double yaw,
                            double score = 1.0);
  std::array<Vec3, 8> corners() const;
};

/// The template's tight box carried through a pose: dimensions are the box
/// extents, the centre is the posed box centre and the yaw is the pose yaw.
OrientedBox3D posed_box(const Pose4DoF& pose, const TemplateMesh& mesh);

/// Corners of the canonical tight box, enumerated in the same order as
/// OrientedBox3D::corners().
std::array<Vec3, 8> box_corners(const TightBox& box);

}  // namespace al3d
