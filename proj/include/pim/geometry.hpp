#pragma once

#include <array>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

namespace pim {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

// Maps any angle into (-pi, pi].
double normalize_angle(double a);

/// Oriented rectangle in the BEV plane. `yaw` is the heading of the length
/// axis, counterclockwise from +x. `w` spans the lateral axis.
struct OrientedBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double l = 1.0;
  double yaw = 0.0;

  Vec2 center() const { return {cx, cy}; }
  double area() const { return w * l; }

  // Corners in canonical order: front-left, front-right, rear-right,
  // rear-left (box frame: +x forward along length, +y left). The order is
  // clockwise.
  std::array<Vec2, 4> corners() const;

  // Expresses a world point in the box frame (origin at center, x along yaw).
  Vec2 to_local(Vec2 p) const;
};

// Closed test: points on the boundary count as inside.
bool point_in_box(const OrientedBox& b, Vec2 p);

// Strict interior test.
bool point_in_box_interior(const OrientedBox& b, Vec2 p);

/// Parametric interval [t_enter, t_exit] (subset of [0,1]) where the segment
/// a->b lies inside the box, via slab clipping in the box frame. Empty when
/// the segment misses the box or only touches its boundary.
std::optional<std::array<double, 2>> clip_segment_to_box(const OrientedBox& box, Vec2 a, Vec2 b);

// Distance along the ray origin + t*dir (|dir| = 1, t >= 0) to the first
// boundary crossing of the box, if any. A ray starting inside the box hits at
// its exit point.
std::optional<double> ray_box_distance(const OrientedBox& box, Vec2 origin, Vec2 dir);

// Shoelace area, positive for counterclockwise polygons.
double polygon_signed_area(std::span<const Vec2> poly);

// Even-odd rule for simple polygons.
bool point_in_polygon(std::span<const Vec2> poly, Vec2 p);

/// Sutherland-Hodgman clip of `subject` against a convex counterclockwise
/// `clip` polygon.
std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip);

// area(a ∩ b) / area(a ∪ b). Symmetric: the argument pair is put into a
// canonical order before clipping.
double iou_rotated(const OrientedBox& a, const OrientedBox& b);

double intersection_area(const OrientedBox& a, const OrientedBox& b);

// Cheap rejection test on circumscribed circles.
bool may_overlap(const OrientedBox& a, const OrientedBox& b);

}  // namespace pim
