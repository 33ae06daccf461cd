#pragma once

#include <array>

#include "avp/errors.hpp"

namespace avp::geometry {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

inline Point3 operator+(const Point3& a, const Point3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Point3 operator-(const Point3& a, const Point3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Point3 operator*(double s, const Point3& p) { return {s * p.x, s * p.y, s * p.z}; }
inline double dot(const Point3& a, const Point3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Point3 cross(const Point3& a, const Point3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
double norm(const Point3& p);
Point3 normalized(const Point3& p);

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  double& operator()(int r, int c) { return m[static_cast<std::size_t>(r) * 3 + static_cast<std::size_t>(c)]; }
  double operator()(int r, int c) const { return m[static_cast<std::size_t>(r) * 3 + static_cast<std::size_t>(c)]; }
};

Mat3 matmul(const Mat3& a, const Mat3& b);
Mat3 transpose(const Mat3& a);
Point3 apply(const Mat3& a, const Point3& p);
double det(const Mat3& a);

// Maps base-frame points to camera-frame points: p_c = rotation * p + translation.
struct RigidTransform {
  Mat3 rotation;
  Point3 translation;
};

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
};

// Continuous pixel coordinates, origin top-left, u rightward, v downward.
// Pixel (i, j) spans [i, i+1) x [j, j+1). depth is the camera-frame z in meters.
struct PixelAnchor {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

struct BehindCamera : Error {
  explicit BehindCamera(const std::string& msg) : Error(msg) {}
};

RigidTransform identity_transform();
bool is_rotation(const Mat3& r, double tol = 1e-9);

// (compose(a, b))(p) == a(b(p)).
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform inverse(const RigidTransform& t);
Point3 transform_point(const RigidTransform& t, const Point3& p);

// Pinhole projection with zero skew. Throws BehindCamera when the camera-frame
// depth is at or below 1e-9 m.
PixelAnchor project(const CameraIntrinsics& k, const RigidTransform& t, const Point3& p);
Point3 unproject(const CameraIntrinsics& k, const RigidTransform& t, const PixelAnchor& a);

// Rodrigues rotation about a (not necessarily unit) axis.
Mat3 rotation_axis_angle(const Point3& axis, double angle);

}  // namespace avp::geometry
