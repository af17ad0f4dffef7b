#include "pim/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

namespace pim {

double normalize_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(a, two_pi);
  if (r <= -std::numbers::pi) r += two_pi;
  if (r > std::numbers::pi) r -= two_pi;
  return r;
}

std::array<Vec2, 4> OrientedBox::corners() const {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  const double hl = 0.5 * l;
  const double hw = 0.5 * w;
  auto at = [&](double lx, double ly) {
    return Vec2{cx + c * lx - s * ly, cy + s * lx + c * ly};
  };
  return {at(hl, hw), at(hl, -hw), at(-hl, -hw), at(-hl, hw)};
}

Vec2 OrientedBox::to_local(Vec2 p) const {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  const double dx = p.x - cx;
  const double dy = p.y - cy;
  return {c * dx + s * dy, -s * dx + c * dy};
}

bool point_in_box(const OrientedBox& b, Vec2 p) {
  const Vec2 q = b.to_local(p);
  return std::abs(q.x) <= 0.5 * b.l && std::abs(q.y) <= 0.5 * b.w;
}

bool point_in_box_interior(const OrientedBox& b, Vec2 p) {
  const Vec2 q = b.to_local(p);
  return std::abs(q.x) < 0.5 * b.l && std::abs(q.y) < 0.5 * b.w;
}

std::optional<std::array<double, 2>> clip_segment_to_box(const OrientedBox& box, Vec2 a, Vec2 b) {
  const Vec2 p = box.to_local(a);
  const Vec2 q = box.to_local(b);
  const Vec2 d = q - p;
  double t0 = 0.0;
  double t1 = 1.0;
  // Liang-Barsky against |x| <= l/2, |y| <= w/2.
  const std::array<double, 4> num = {p.x + 0.5 * box.l, 0.5 * box.l - p.x, p.y + 0.5 * box.w,
                                     0.5 * box.w - p.y};
  const std::array<double, 4> den = {-d.x, d.x, -d.y, d.y};
  for (int k = 0; k < 4; ++k) {
    if (den[k] == 0.0) {
      if (num[k] <= 0.0) return std::nullopt;
      continue;
    }
    const double t = num[k] / den[k];
    if (den[k] < 0.0) {
      t0 = std::max(t0, t);
    } else {
      t1 = std::min(t1, t);
    }
  }
  if (t0 >= t1) return std::nullopt;
  return std::array<double, 2>{t0, t1};
}

std::optional<double> ray_box_distance(const OrientedBox& box, Vec2 origin, Vec2 dir) {
  const Vec2 p = box.to_local(origin);
  const Vec2 d = box.to_local(origin + dir) - p;
  double t0 = 0.0;
  double t1 = std::numeric_limits<double>::infinity();
  const std::array<double, 2> half = {0.5 * box.l, 0.5 * box.w};
  const std::array<double, 2> pos = {p.x, p.y};
  const std::array<double, 2> dd = {d.x, d.y};
  for (int k = 0; k < 2; ++k) {
    if (dd[k] == 0.0) {
      if (std::abs(pos[k]) > half[k]) return std::nullopt;
      continue;
    }
    double ta = (-half[k] - pos[k]) / dd[k];
    double tb = (half[k] - pos[k]) / dd[k];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1) return std::nullopt;
  // Origin inside: the first boundary crossing is the exit.
  if (t0 == 0.0 && std::abs(p.x) < half[0] && std::abs(p.y) < half[1]) return t1;
  return t0;
}

double polygon_signed_area(std::span<const Vec2> poly) {
  const std::size_t n = poly.size();
  if (n < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += cross(poly[i], poly[(i + 1) % n]);
  }
  return 0.5 * acc;
}

bool point_in_polygon(std::span<const Vec2> poly, Vec2 p) {
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2 a = poly[i];
    const Vec2 b = poly[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x_at = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
      if (p.x < x_at) inside = !inside;
    }
  }
  return inside;
}

std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip) {
  std::vector<Vec2> out(subject.begin(), subject.end());
  const std::size_t m = clip.size();
  for (std::size_t e = 0; e < m && !out.empty(); ++e) {
    const Vec2 a = clip[e];
    const Vec2 b = clip[(e + 1) % m];
    const Vec2 edge = b - a;
    std::vector<Vec2> in = std::move(out);
    out.clear();
    const std::size_t n = in.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2 cur = in[i];
      const Vec2 nxt = in[(i + 1) % n];
      const double sc = cross(edge, cur - a);
      const double sn = cross(edge, nxt - a);
      if (sc >= 0.0) out.push_back(cur);
      if ((sc >= 0.0) != (sn >= 0.0)) {
        const double t = sc / (sc - sn);
        out.push_back(cur + t * (nxt - cur));
      }
    }
  }
  return out;
}

bool may_overlap(const OrientedBox& a, const OrientedBox& b) {
  const double ra = 0.5 * std::hypot(a.w, a.l);
  const double rb = 0.5 * std::hypot(b.w, b.l);
  const double dx = a.cx - b.cx;
  const double dy = a.cy - b.cy;
  return dx * dx + dy * dy <= (ra + rb) * (ra + rb);
}

double intersection_area(const OrientedBox& a, const OrientedBox& b) {
  if (!may_overlap(a, b)) return 0.0;
  // Canonical argument order keeps the result bit-symmetric.
  const bool swap = std::tie(a.cx, a.cy, a.w, a.l, a.yaw) > std::tie(b.cx, b.cy, b.w, b.l, b.yaw);
  const OrientedBox& s = swap ? b : a;
  const OrientedBox& c = swap ? a : b;
  // corners() runs clockwise; the clipper wants counterclockwise polygons.
  auto sc = s.corners();
  auto cc = c.corners();
  std::reverse(sc.begin(), sc.end());
  std::reverse(cc.begin(), cc.end());
  const auto poly = clip_convex(sc, cc);
  if (poly.size() < 3) return 0.0;
  const double area = polygon_signed_area(poly);
  return area > 1e-12 ? area : 0.0;
}

double iou_rotated(const OrientedBox& a, const OrientedBox& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

}  // namespace pim
