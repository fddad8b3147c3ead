#pragma once

// Oriented-box geometry: septet <-> corner conversion, convex clipping,
// rotated IoU and angle-aware soft-NMS.
//
// Coordinates are image pixels with x to the right and y pointing down.
// Rotations use M(theta) = [[cos, -sin], [sin, cos]], so a positive angle
// turns clockwise on screen.

#include <array>
#include <vector>

namespace drn {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  bool operator==(const Vec2&) const = default;
};

inline double dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
inline double cross(const Vec2& a, const Vec2& b) { return a.x * b.y - a.y * b.x; }

// Row-major 2x2 matrix.
struct Mat2 {
  double m00 = 1.0, m01 = 0.0;
  double m10 = 0.0, m11 = 1.0;

  Vec2 operator*(const Vec2& v) const {
    return {m00 * v.x + m01 * v.y, m10 * v.x + m11 * v.y};
  }
  double det() const { return m00 * m11 - m01 * m10; }
};

// Center, size, angle and sub-cell offset of one oriented box. The box
// center on the image is (cx + dx, cy + dy); w is measured along theta.
struct Septet {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double h = 1.0;
  double theta = 0.0;
  double dx = 0.0;
  double dy = 0.0;

  Vec2 center() const { return {cx + dx, cy + dy}; }
  bool operator==(const Septet&) const = default;
};

struct CornerBox {
  Vec2 lt, rt, lb, rb;

  Vec2 centroid() const { return (lt + rt + lb + rb) * 0.25; }
  // Vertices in positive (shoelace-area >= 0) order: lt, rt, rb, lb.
  std::array<Vec2, 4> ring() const { return {lt, rt, rb, lb}; }
};

// Vertices in positive orientation (non-negative shoelace area).
using ConvexPolygon = std::vector<Vec2>;

struct Detection {
  Septet box;
  int class_id = 0;
  double score = 0.0;
};

Mat2 rotation_matrix(double theta);

// Wraps theta into [-pi/2, pi/2) using the pi-periodicity of a rectangle.
// (w, h) are left untouched: the two representations (w, h, t) and
// (h, w, t + pi/2) are distinct septets for the same rectangle, and the
// corner-labelled inversion below always keeps w on the lt->rt edge.
double canonical_angle(double theta);

CornerBox corners_from_septet(const Septet& s);

// Inverse of corners_from_septet. The offset is folded into the center
// (dx = dy = 0) and theta is canonicalised. Throws std::invalid_argument if
// the corners are not a rectangle within 1e-4 or have zero area.
Septet septet_from_corners(const CornerBox& c);

double polygon_area(const ConvexPolygon& p);
ConvexPolygon polygon_from_septet(const Septet& s);

// Area of the intersection of two convex polygons (Sutherland-Hodgman).
double polygon_intersection_area(const ConvexPolygon& a, const ConvexPolygon& b);

// Exactly symmetric: the pair is ordered canonically before clipping.
double rotated_iou(const Septet& a, const Septet& b);

// Class-aware linear soft-NMS over rotated boxes. Detections overlapping a
// kept one with IoU > iou_threshold are rescaled by (1 - IoU); anything whose
// score drops below suppress_threshold is discarded. Output is sorted by
// descending final score, ties by input order.
std::vector<Detection> angle_soft_nms(std::vector<Detection> dets,
                                      double iou_threshold = 0.5,
                                      double suppress_threshold = 0.03);

}  // namespace drn
