#include "drn/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <tuple>

namespace drn {

Mat2 rotation_matrix(double theta) {
  if (!std::isfinite(theta)) throw std::invalid_argument("rotation_matrix: non-finite angle");
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  return {c, -s, s, c};
}

double canonical_angle(double theta) {
  if (!std::isfinite(theta)) throw std::invalid_argument("canonical_angle: non-finite angle");
  if (theta >= -kPi / 2 && theta < kPi / 2) return theta;
  double t = std::fmod(theta + kPi / 2, kPi);
  if (t < 0) t += kPi;
  t -= kPi / 2;
  // fmod can land exactly on the excluded upper end after the shift back.
  if (t >= kPi / 2) t -= kPi;
  return t;
}

CornerBox corners_from_septet(const Septet& s) {
  if (!(s.w > 0) || !(s.h > 0)) {
    throw std::invalid_argument("corners_from_septet: width and height must be positive");
  }
  const Mat2 r = rotation_matrix(s.theta);
  const Vec2 c = s.center();
  const double hw = s.w / 2;
  const double hh = s.h / 2;
  return {r * Vec2{-hw, -hh} + c, r * Vec2{hw, -hh} + c, r * Vec2{-hw, hh} + c,
          r * Vec2{hw, hh} + c};
}

Septet septet_from_corners(const CornerBox& c) {
  const Vec2 top = c.rt - c.lt;
  const Vec2 left = c.lb - c.lt;
  const double w = std::hypot(top.x, top.y);
  const double h = std::hypot(left.x, left.y);
  const double scale = std::max({1.0, w, h});
  if (!(w * h > 1e-12 * scale * scale) || std::abs(cross(top, left)) <= 1e-12 * scale * scale) {
    throw std::invalid_argument("septet_from_corners: degenerate corner set");
  }
  const double tol = 1e-4 * scale;
  const Vec2 closing = c.lt + top + left - c.rb;
  if (std::hypot(closing.x, closing.y) > tol || std::abs(dot(top, left)) > tol * std::max(w, h)) {
    throw std::invalid_argument("septet_from_corners: corners do not form a rectangle");
  }
  if (cross(top, left) < 0) {
    throw std::invalid_argument("septet_from_corners: corners are mirrored");
  }
  // Average the parallel edges so small annotation noise is spread evenly.
  const Vec2 bottom = c.rb - c.lb;
  const Vec2 right = c.rb - c.rt;
  const Vec2 along = (top + bottom) * 0.5;
  const Vec2 across = (left + right) * 0.5;
  Septet s;
  const Vec2 ctr = c.centroid();
  s.cx = ctr.x;
  s.cy = ctr.y;
  s.w = std::hypot(along.x, along.y);
  s.h = std::hypot(across.x, across.y);
  s.theta = canonical_angle(std::atan2(along.y, along.x));
  return s;
}

double polygon_area(const ConvexPolygon& p) {
  const std::size_t n = p.size();
  if (n < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += cross(p[i], p[(i + 1) % n]);
  return acc / 2;
}

ConvexPolygon polygon_from_septet(const Septet& s) {
  const auto ring = corners_from_septet(s).ring();
  return {ring.begin(), ring.end()};
}

namespace {

// Keeps the part of `poly` on the left of the directed edge a->b.
ConvexPolygon clip_half_plane(const ConvexPolygon& poly, const Vec2& a, const Vec2& b) {
  ConvexPolygon out;
  const std::size_t n = poly.size();
  if (n == 0) return out;
  out.reserve(n + 1);
  const Vec2 edge = b - a;
  const double len = std::hypot(edge.x, edge.y);
  const double eps = 1e-12 * std::max(1.0, len * len);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % n];
    const double sp = cross(edge, p - a);
    const double sq = cross(edge, q - a);
    const bool pin = sp >= -eps;
    const bool qin = sq >= -eps;
    if (pin) out.push_back(p);
    if (pin != qin) {
      const double t = sp / (sp - sq);
      out.push_back(p + (q - p) * t);
    }
  }
  return out;
}

}  // namespace

double polygon_intersection_area(const ConvexPolygon& a, const ConvexPolygon& b) {
  if (a.size() < 3 || b.size() < 3) return 0.0;
  ConvexPolygon clipped = a;
  for (std::size_t i = 0; i < b.size() && clipped.size() >= 3; ++i) {
    clipped = clip_half_plane(clipped, b[i], b[(i + 1) % b.size()]);
  }
  return std::max(0.0, polygon_area(clipped));
}

double rotated_iou(const Septet& a, const Septet& b) {
  const auto key = [](const Septet& s) {
    return std::make_tuple(s.cx + s.dx, s.cy + s.dy, s.w, s.h, s.theta, s.cx, s.cy);
  };
  const bool swap = key(b) < key(a);
  const Septet& first = swap ? b : a;
  const Septet& second = swap ? a : b;
  const double area_a = first.w * first.h;
  const double area_b = second.w * second.h;
  if (area_a <= 0 && area_b <= 0) return 0.0;
  const double inter =
      polygon_intersection_area(polygon_from_septet(first), polygon_from_septet(second));
  const double uni = area_a + area_b - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<Detection> angle_soft_nms(std::vector<Detection> dets, double iou_threshold,
                                      double suppress_threshold) {
  if (!(iou_threshold >= 0 && iou_threshold <= 1) ||
      !(suppress_threshold >= 0 && suppress_threshold <= 1)) {
    throw std::invalid_argument("angle_soft_nms: thresholds must lie in [0, 1]");
  }
  struct Entry {
    Detection det;
    std::size_t order;
  };
  std::vector<Entry> pending;
  pending.reserve(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].score >= suppress_threshold) pending.push_back({dets[i], i});
  }
  const auto better = [](const Entry& x, const Entry& y) {
    return x.det.score > y.det.score || (x.det.score == y.det.score && x.order < y.order);
  };

  std::vector<Entry> kept;
  while (!pending.empty()) {
    auto top = std::min_element(pending.begin(), pending.end(), better);
    Entry current = *top;
    pending.erase(top);
    std::vector<Entry> next;
    next.reserve(pending.size());
    for (Entry& e : pending) {
      if (e.det.class_id == current.det.class_id) {
        const double iou = rotated_iou(current.det.box, e.det.box);
        if (iou > iou_threshold) e.det.score *= (1.0 - iou);
      }
      if (e.det.score >= suppress_threshold) next.push_back(e);
    }
    pending = std::move(next);
    kept.push_back(current);
  }
  std::stable_sort(kept.begin(), kept.end(), better);
  std::vector<Detection> out;
  out.reserve(kept.size());
  for (auto& e : kept) out.push_back(e.det);
  return out;
}

}  // namespace drn
