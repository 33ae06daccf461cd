#include "avp/geometry.hpp"

#include <cmath>

namespace avp::geometry {

double norm(const Point3& p) { return std::sqrt(dot(p, p)); }

Point3 normalized(const Point3& p) {
  double n = norm(p);
  return {p.x / n, p.y / n, p.z / n};
}

Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a(r, k) * b(k, c);
      out(r, c) = s;
    }
  return out;
}

Mat3 transpose(const Mat3& a) {
  Mat3 out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out(r, c) = a(c, r);
  return out;
}

Point3 apply(const Mat3& a, const Point3& p) {
  return {a(0, 0) * p.x + a(0, 1) * p.y + a(0, 2) * p.z,
          a(1, 0) * p.x + a(1, 1) * p.y + a(1, 2) * p.z,
          a(2, 0) * p.x + a(2, 1) * p.y + a(2, 2) * p.z};
}

double det(const Mat3& a) {
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
         a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

RigidTransform identity_transform() { return RigidTransform{}; }

bool is_rotation(const Mat3& r, double tol) {
  Mat3 rtr = matmul(transpose(r), r);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double want = (i == j) ? 1.0 : 0.0;
      if (std::abs(rtr(i, j) - want) > tol) return false;
    }
  return std::abs(det(r) - 1.0) <= tol;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = matmul(a.rotation, b.rotation);
  out.translation = apply(a.rotation, b.translation) + a.translation;
  return out;
}

RigidTransform inverse(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = transpose(t.rotation);
  out.translation = -1.0 * apply(out.rotation, t.translation);
  return out;
}

Point3 transform_point(const RigidTransform& t, const Point3& p) {
  return apply(t.rotation, p) + t.translation;
}

PixelAnchor project(const CameraIntrinsics& k, const RigidTransform& t, const Point3& p) {
  Point3 pc = transform_point(t, p);
  if (pc.z <= 1e-9)
    throw BehindCamera("project: camera-frame depth " + std::to_string(pc.z) + " <= 1e-9");
  return {k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy, pc.z};
}

Point3 unproject(const CameraIntrinsics& k, const RigidTransform& t, const PixelAnchor& a) {
  Point3 pc{(a.u - k.cx) * a.depth / k.fx, (a.v - k.cy) * a.depth / k.fy, a.depth};
  return transform_point(inverse(t), pc);
}

Mat3 rotation_axis_angle(const Point3& axis, double angle) {
  Point3 n = normalized(axis);
  double c = std::cos(angle), s = std::sin(angle), ic = 1.0 - c;
  Mat3 r;
  r(0, 0) = c + n.x * n.x * ic;
  r(0, 1) = n.x * n.y * ic - n.z * s;
  r(0, 2) = n.x * n.z * ic + n.y * s;
  r(1, 0) = n.y * n.x * ic + n.z * s;
  r(1, 1) = c + n.y * n.y * ic;
  r(1, 2) = n.y * n.z * ic - n.x * s;
  r(2, 0) = n.z * n.x * ic - n.y * s;
  r(2, 1) = n.z * n.y * ic + n.x * s;
  r(2, 2) = c + n.z * n.z * ic;
  return r;
}

}  // namespace avp::geometry
