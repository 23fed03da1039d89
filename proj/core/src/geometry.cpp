#include "al3d/geometry.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace al3d {

double wrap_angle_2pi(double a) {
  double r = std::fmod(a, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  if (r >= kTwoPi) r = 0.0;  // fmod can land exactly on 2*pi after the add
  return r;
}

double wrap_angle_pi(double a) {
  double r = wrap_angle_2pi(a);
  if (r > M_PI) r -= kTwoPi;
  return r;
}

// ---------------------------------------------------------------------------
// Camera projection
// ---------------------------------------------------------------------------

PixelProjection project(const CameraCalibration& calib, const Vec3& point) {
  Eigen::Vector4d hp(point.x(), point.y(), point.z(), 1.0);
  Eigen::Vector3d h = calib.projection * hp;
  if (!(h.z() > 0.0)) {
    return {ProjectStatus::BehindCamera, Vec2::Zero()};
  }
  Vec2 pixel(h.x() / h.z(), h.y() / h.z());
  const bool in_frame = pixel.x() >= 0.0 && pixel.x() < calib.image_width &&
                        pixel.y() >= 0.0 && pixel.y() < calib.image_height;
  return {in_frame ? ProjectStatus::InFrame : ProjectStatus::OutOfFrame, pixel};
}

// ---------------------------------------------------------------------------
// Poses
// ---------------------------------------------------------------------------

Mat3 yaw_rotation(double yaw) {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  Mat3 r;
  r << c, 0.0, s,
       0.0, 1.0, 0.0,
       -s, 0.0, c;
  return r;
}

Pose4DoF Pose4DoF::make(double yaw, const Vec3& translation) {
  if (!std::isfinite(yaw) || !translation.allFinite()) {
    throw std::invalid_argument("Pose4DoF: non-finite yaw or translation");
  }
  return Pose4DoF{wrap_angle_2pi(yaw), translation};
}

Mat3 Pose4DoF::rotation() const { return yaw_rotation(yaw); }

Vec3 Pose4DoF::apply(const Vec3& p) const {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  return Vec3(p.x() * c + p.z() * s + translation.x(),
              p.y() + translation.y(),
              -p.x() * s + p.z() * c + translation.z());
}

Vec3 Pose4DoF::apply_inverse(const Vec3& p) const {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  const Vec3 q = p - translation;
  return Vec3(q.x() * c - q.z() * s, q.y(), q.x() * s + q.z() * c);
}

Pose4DoF Pose4DoF::inverse() const {
  Pose4DoF inv;
  inv.yaw = wrap_angle_2pi(-yaw);
  inv.translation = -(yaw_rotation(-yaw) * translation);
  return inv;
}

std::vector<Vec3> apply_pose(const Pose4DoF& pose, const std::vector<Vec3>& points) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(pose.apply(p));
  return out;
}

// ---------------------------------------------------------------------------
// Ego motion
// ---------------------------------------------------------------------------

EgoMotion EgoMotion::inverse() const {
  EgoMotion inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(rotation.transpose() * translation);
  return inv;
}

EgoMotion EgoMotion::compose(const EgoMotion& other) const {
  EgoMotion out;
  out.rotation = rotation * other.rotation;
  out.translation = rotation * other.translation + translation;
  return out;
}

EgoMotion EgoMotion::from_pose(const Pose4DoF& pose) {
  return EgoMotion{pose.rotation(), pose.translation};
}

bool EgoMotion::is_rigid(double tol) const {
  const Mat3 gram = rotation.transpose() * rotation;
  return (gram - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         rotation.determinant() > 0.0;
}

// ---------------------------------------------------------------------------
// Mask filtering
// ---------------------------------------------------------------------------

PointCloud filter_points_by_mask(const CameraCalibration& calib, const PointCloud& cloud,
                                 const Mask2D& mask) {
  if (cloud.frame != Frame::Camera) {
    throw std::invalid_argument("filter_points_by_mask: cloud must be in the camera frame");
  }
  if (mask.width != calib.image_width || mask.height != calib.image_height) {
    throw std::invalid_argument("filter_points_by_mask: mask dimensions do not match calibration");
  }
  PointCloud out;
  out.frame = Frame::Camera;
  for (const Vec3& p : cloud.points) {
    const PixelProjection proj = project(calib, p);
    if (proj.status != ProjectStatus::InFrame) continue;
    const int px = static_cast<int>(std::floor(proj.pixel.x()));
    const int py = static_cast<int>(std::floor(proj.pixel.y()));
    if (mask.at(px, py)) out.points.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Point-to-mesh distance
// ---------------------------------------------------------------------------

namespace {

Vec3 closest_on_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double denom = ab.squaredNorm();
  if (denom <= 0.0) return a;
  double t = (p - a).dot(ab) / denom;
  t = std::clamp(t, 0.0, 1.0);
  return a + t * ab;
}

}  // namespace

MeshDistance point_to_triangle_sq_distance(const Vec3& p, const Vec3& a, const Vec3& b,
                                           const Vec3& c) {
  // Closest point on a triangle via Voronoi-region classification.
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return {ap.squaredNorm(), a};

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return {bp.squaredNorm(), b};

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    const Vec3 q = a + v * ab;
    return {(p - q).squaredNorm(), q};
  }

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return {cp.squaredNorm(), c};

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    const Vec3 q = a + w * ac;
    return {(p - q).squaredNorm(), q};
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    const Vec3 q = b + w * (c - b);
    return {(p - q).squaredNorm(), q};
  }

  const double sum = va + vb + vc;
  if (!(sum > 0.0)) {
    // Degenerate triangle: fall back to its edges.
    MeshDistance best{std::numeric_limits<double>::infinity(), a};
    for (const auto& [u, v] : {std::pair{a, b}, std::pair{b, c}, std::pair{c, a}}) {
      const Vec3 q = closest_on_segment(p, u, v);
      const double d = (p - q).squaredNorm();
      if (d < best.sq_distance) best = {d, q};
    }
    return best;
  }
  const double denom = 1.0 / sum;
  const double v = vb * denom;
  const double w = vc * denom;
  const Vec3 q = a + ab * v + ac * w;
  return {(p - q).squaredNorm(), q};
}

MeshDistance point_to_mesh_sq_distance(const Vec3& point, const TemplateMesh& mesh) {
  if (mesh.triangles.empty()) {
    throw std::invalid_argument("point_to_mesh_sq_distance: empty mesh");
  }
  MeshDistance best{std::numeric_limits<double>::infinity(), Vec3::Zero()};
  for (const auto& tri : mesh.triangles) {
    const MeshDistance d = point_to_triangle_sq_distance(
        point, mesh.vertices[tri[0]], mesh.vertices[tri[1]], mesh.vertices[tri[2]]);
    if (d.sq_distance < best.sq_distance) best = d;
  }
  return best;
}

double TemplateMesh::surface_area() const {
  double area = 0.0;
  for (const auto& tri : triangles) {
    const Vec3& a = vertices[tri[0]];
    const Vec3& b = vertices[tri[1]];
    const Vec3& c = vertices[tri[2]];
    area += 0.5 * (b - a).cross(c - a).norm();
  }
  return area;
}

// ---------------------------------------------------------------------------
// Built-in car template
// ---------------------------------------------------------------------------

namespace {

// Shape fractions of the two-box car: body slab height, cabin half-width,
// and the cabin footprint along the heading axis (set back from the front).
constexpr double kBodyHeightFrac = 0.55;
constexpr double kCabinHalfWidthFrac = 0.40;
constexpr double kCabinRearFrac = -0.34;
constexpr double kCabinFrontFrac = 0.16;

void push_quad(std::vector<std::array<int, 3>>& tris, int a, int b, int c, int d) {
  tris.push_back({a, b, c});
  tris.push_back({a, c, d});
}

}  // namespace

TemplateMesh builtin_car_template(double length_m, double width_m, double height_m) {
  if (!(length_m > 0.0) || !(width_m > 0.0) || !(height_m > 0.0)) {
    throw std::invalid_argument("builtin_car_template: dimensions must be positive");
  }
  const double hw = 0.5 * width_m;   // x
  const double hh = 0.5 * height_m;  // y (camera convention: +y is down)
  const double hl = 0.5 * length_m;  // z (+z is the heading)
  const double yb = hh - kBodyHeightFrac * height_m;  // body top / cabin bottom plane
  const double cw = kCabinHalfWidthFrac * width_m;
  const double z0 = kCabinRearFrac * length_m;
  const double z1 = kCabinFrontFrac * length_m;

  TemplateMesh mesh;
  auto add = [&mesh](double x, double y, double z) {
    mesh.vertices.emplace_back(x, y, z);
    return static_cast<int>(mesh.vertices.size()) - 1;
  };

  // Body box corners. b prefix = bottom plane (y = +hh), t = top plane (y = yb).
  const int b0 = add(-hw, hh, -hl), b1 = add(hw, hh, -hl), b2 = add(hw, hh, hl),
            b3 = add(-hw, hh, hl);
  const int t0 = add(-hw, yb, -hl), t1 = add(hw, yb, -hl), t2 = add(hw, yb, hl),
            t3 = add(-hw, yb, hl);
  // Cabin corners: i = inner ring on the body top plane, r = roof (y = -hh).
  const int i0 = add(-cw, yb, z0), i1 = add(cw, yb, z0), i2 = add(cw, yb, z1),
            i3 = add(-cw, yb, z1);
  const int r0 = add(-cw, -hh, z0), r1 = add(cw, -hh, z0), r2 = add(cw, -hh, z1),
            r3 = add(-cw, -hh, z1);

  auto& tris = mesh.triangles;
  push_quad(tris, b0, b1, b2, b3);  // underside
  push_quad(tris, b0, t0, t1, b1);  // rear face (z = -hl)
  push_quad(tris, b2, t2, t3, b3);  // front face (z = +hl)
  push_quad(tris, b0, b3, t3, t0);  // left face (x = -hw)
  push_quad(tris, b1, t1, t2, b2);  // right face (x = +hw)
  // Body top: ring between the outer rectangle and the cabin footprint.
  push_quad(tris, t0, t1, i1, i0);
  push_quad(tris, t1, t2, i2, i1);
  push_quad(tris, t2, t3, i3, i2);
  push_quad(tris, t3, t0, i0, i3);
  // Cabin walls and roof; the cabin is open at the bottom where it meets the ring.
  push_quad(tris, i0, i1, r1, r0);
  push_quad(tris, i1, i2, r2, r1);
  push_quad(tris, i2, i3, r3, r2);
  push_quad(tris, i3, i0, r0, r3);
  push_quad(tris, r0, r1, r2, r3);

  mesh.box = TightBox{Vec3(-hw, -hh, -hl), Vec3(hw, hh, hl)};
  mesh.keypoint_centre = Vec3::Zero();
  mesh.keypoint_front = Vec3(0.0, 0.0, hl);
  return mesh;
}

// ---------------------------------------------------------------------------
// Wavefront OBJ
// ---------------------------------------------------------------------------

TemplateMesh parse_obj(const std::string& text, const std::string& name) {
  TemplateMesh mesh;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  auto fail = [&name, &line_no](const std::string& what) {
    throw std::runtime_error(name + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(stream, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag.empty() || tag[0] == '#') continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) fail("malformed vertex record");
      mesh.vertices.emplace_back(x, y, z);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string field;
      while (ls >> field) {
        const size_t slash = field.find('/');
        if (slash != std::string::npos) field.resize(slash);
        int v = 0;
        try {
          v = std::stoi(field);
        } catch (const std::exception&) {
          fail("malformed face index '" + field + "'");
        }
        if (v <= 0 || v > static_cast<int>(mesh.vertices.size())) {
          fail("face index " + std::to_string(v) + " out of range");
        }
        idx.push_back(v - 1);
      }
      if (idx.size() < 3) fail("face with fewer than 3 vertices");
      for (size_t k = 1; k + 1 < idx.size(); ++k) {
        mesh.triangles.push_back({idx[0], idx[k], idx[k + 1]});
      }
    }
    // All other record types (vn, vt, o, g, s, usemtl, ...) are ignored.
  }
  if (mesh.vertices.empty() || mesh.triangles.empty()) {
    line_no = 0;
    fail("no v/f records found");
  }

  Vec3 lo = mesh.vertices.front();
  Vec3 hi = mesh.vertices.front();
  for (const Vec3& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const Vec3 centre = 0.5 * (lo + hi);
  for (Vec3& v : mesh.vertices) v -= centre;
  mesh.box = TightBox{lo - centre, hi - centre};
  mesh.keypoint_centre = Vec3::Zero();
  mesh.keypoint_front = Vec3(0.0, 0.0, mesh.box.max.z());
  return mesh;
}

TemplateMesh load_obj(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("load_obj: cannot open " + path);
  std::ostringstream buf;
  buf << file.rdbuf();
  return parse_obj(buf.str(), path);
}

// ---------------------------------------------------------------------------
// Oriented boxes
// ---------------------------------------------------------------------------

OrientedBox3D OrientedBox3D::make(const Vec3& centre, const Vec3& dims, double yaw,
                                  double score) {
  if (!(dims.x() > 0.0 && dims.y() > 0.0 && dims.z() > 0.0)) {
    throw std::invalid_argument("OrientedBox3D: dims must be positive");
  }
  OrientedBox3D box;
  box.centre = centre;
  box.dims = dims;
  box.yaw = wrap_angle_pi(yaw);
  box.score = score;
  return box;
}

std::array<Vec3, 8> box_corners(const TightBox& box) {
  const Vec3 c = box.centre();
  const Vec3 he = 0.5 * box.extents();
  std::array<Vec3, 8> out;
  for (int i = 0; i < 8; ++i) {
    const double sx = (i & 1) ? 1.0 : -1.0;
    const double sy = (i & 2) ? 1.0 : -1.0;
    const double sz = (i & 4) ? 1.0 : -1.0;
    out[i] = c + Vec3(sx * he.x(), sy * he.y(), sz * he.z());
  }
  return out;
}

std::array<Vec3, 8> OrientedBox3D::corners() const {
  const double hw = 0.5 * dims.y();  // width along local x
  const double hh = 0.5 * dims.z();  // height along local y
  const double hl = 0.5 * dims.x();  // length along local z
  const Mat3 r = yaw_rotation(yaw);
  std::array<Vec3, 8> out;
  for (int i = 0; i < 8; ++i) {
    const double sx = (i & 1) ? 1.0 : -1.0;
    const double sy = (i & 2) ? 1.0 : -1.0;
    const double sz = (i & 4) ? 1.0 : -1.0;
    out[i] = centre + r * Vec3(sx * hw, sy * hh, sz * hl);
  }
  return out;
}

OrientedBox3D posed_box(const Pose4DoF& pose, const TemplateMesh& mesh) {
  const Vec3 ext = mesh.box.extents();
  return OrientedBox3D::make(pose.apply(mesh.box.centre()),
                             Vec3(ext.z(), ext.x(), ext.y()), pose.yaw, 1.0);
}

}  // namespace al3d
