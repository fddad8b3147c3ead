#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "drn/geometry.hpp"
#include "test_support.hpp"

namespace drn {
namespace {

void expect_point(const Vec2& p, double x, double y, double tol = 1e-12) {
  EXPECT_NEAR(p.x, x, tol);
  EXPECT_NEAR(p.y, y, tol);
}

double max_corner_error(const CornerBox& a, const CornerBox& b) {
  double m = 0.0;
  const auto ra = a.ring(), rb = b.ring();
  for (int i = 0; i < 4; ++i) {
    m = std::max({m, std::abs(ra[i].x - rb[i].x), std::abs(ra[i].y - rb[i].y)});
  }
  return m;
}

TEST(RotationMatrix, KnownAngles) {
  const Mat2 id = rotation_matrix(0.0);
  EXPECT_EQ(id.m00, 1.0);
  EXPECT_EQ(id.m01, 0.0);
  EXPECT_EQ(id.m10, 0.0);
  EXPECT_EQ(id.m11, 1.0);

  const Mat2 q = rotation_matrix(kPi / 2);
  EXPECT_NEAR(q.m00, 0.0, 1e-15);
  EXPECT_NEAR(q.m01, -1.0, 1e-15);
  EXPECT_NEAR(q.m10, 1.0, 1e-15);
  EXPECT_NEAR(q.m11, 0.0, 1e-15);

  const Mat2 s = rotation_matrix(kPi / 6);
  EXPECT_NEAR(s.m00, 0.86603, 1e-5);
  EXPECT_NEAR(s.m01, -0.5, 1e-5);
  EXPECT_NEAR(s.m10, 0.5, 1e-5);
  EXPECT_NEAR(s.m11, 0.86603, 1e-5);
  EXPECT_NEAR(s.det(), 1.0, 1e-15);
}

TEST(RotationMatrix, RejectsNonFinite) {
  EXPECT_THROW(rotation_matrix(std::numeric_limits<double>::quiet_NaN()), std::invalid_argument);
  EXPECT_THROW(rotation_matrix(std::numeric_limits<double>::infinity()), std::invalid_argument);
}

TEST(CanonicalAngle, WrapsIntoHalfOpenRange) {
  EXPECT_DOUBLE_EQ(canonical_angle(0.3), 0.3);
  EXPECT_NEAR(canonical_angle(kPi / 2), -kPi / 2, 1e-15);
  EXPECT_NEAR(canonical_angle(100.0 * kPi / 180.0), -80.0 * kPi / 180.0, 1e-12);
  EXPECT_NEAR(canonical_angle(-kPi / 2), -kPi / 2, 1e-15);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(-50, 50);
  for (int i = 0; i < 1000; ++i) {
    const double t = canonical_angle(d(rng));
    EXPECT_GE(t, -kPi / 2);
    EXPECT_LT(t, kPi / 2);
  }
}

TEST(CornersFromSeptet, ZeroRotation) {
  const CornerBox c = corners_from_septet({0, 0, 2, 2, 0, 0, 0});
  expect_point(c.lt, -1, -1);
  expect_point(c.rt, 1, -1);
  expect_point(c.lb, -1, 1);
  expect_point(c.rb, 1, 1);
}

TEST(CornersFromSeptet, OffsetShiftsCenter) {
  const CornerBox c = corners_from_septet({5, 5, 2, 4, 0, 0.5, -0.5});
  expect_point(c.lt, 4.5, 2.5);
  expect_point(c.rt, 6.5, 2.5);
  expect_point(c.lb, 4.5, 6.5);
  expect_point(c.rb, 6.5, 6.5);
}

TEST(CornersFromSeptet, QuarterTurnDiamond) {
  const CornerBox c = corners_from_septet({0, 0, 2, 2, kPi / 4, 0, 0});
  const double r = std::sqrt(2.0);
  expect_point(c.lt, 0, -r, 1e-12);
  expect_point(c.rt, r, 0, 1e-12);
  expect_point(c.lb, -r, 0, 1e-12);
  expect_point(c.rb, 0, r, 1e-12);
}

TEST(CornersFromSeptet, RejectsNonPositiveSize) {
  EXPECT_THROW(corners_from_septet({0, 0, 0, 2, 0, 0, 0}), std::invalid_argument);
  EXPECT_THROW(corners_from_septet({0, 0, 2, -1, 0, 0, 0}), std::invalid_argument);
}

TEST(CornersFromSeptet, RectangleInvariants) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    Septet s = testing::random_septet(rng);
    s.dx = 0.3;
    s.dy = -0.7;
    const CornerBox c = corners_from_septet(s);
    const Vec2 top = c.rt - c.lt, left = c.lb - c.lt;
    const double cosang = dot(top, left) / (std::hypot(top.x, top.y) * std::hypot(left.x, left.y));
    EXPECT_NEAR(std::acos(cosang), kPi / 2, 1e-6);
    const Vec2 ctr = c.centroid();
    EXPECT_NEAR(ctr.x, s.cx + s.dx, 1e-6);
    EXPECT_NEAR(ctr.y, s.cy + s.dy, 1e-6);
  }
}

TEST(SeptetFromCorners, AxisAlignedRoundTrip) {
  const Septet s = septet_from_corners(corners_from_septet({0, 0, 2, 2, 0, 0, 0}));
  EXPECT_NEAR(s.cx, 0, 1e-12);
  EXPECT_NEAR(s.cy, 0, 1e-12);
  EXPECT_NEAR(s.w, 2, 1e-12);
  EXPECT_NEAR(s.h, 2, 1e-12);
  EXPECT_NEAR(s.theta, 0, 1e-12);
  EXPECT_EQ(s.dx, 0.0);
  EXPECT_EQ(s.dy, 0.0);
}

TEST(SeptetFromCorners, DiamondRoundTrip) {
  const Septet s = septet_from_corners(corners_from_septet({0, 0, 2, 2, kPi / 4, 0, 0}));
  EXPECT_NEAR(s.w, 2, 1e-12);
  EXPECT_NEAR(s.h, 2, 1e-12);
  EXPECT_NEAR(s.theta, kPi / 4, 1e-12);
}

TEST(SeptetFromCorners, OffsetFoldsIntoCenter) {
  const Septet s = septet_from_corners(corners_from_septet({5, 5, 2, 4, 0, 0.5, -0.5}));
  EXPECT_NEAR(s.cx, 5.5, 1e-12);
  EXPECT_NEAR(s.cy, 4.5, 1e-12);
  EXPECT_EQ(s.dx, 0.0);
}

TEST(SeptetFromCorners, RandomRoundTripProperty) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> size(1.0, 100.0);
  std::uniform_real_distribution<double> ang(-kPi / 2, kPi / 2);
  std::uniform_real_distribution<double> pos(-500.0, 500.0);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Septet s{pos(rng), pos(rng), size(rng), size(rng), ang(rng), 0, 0};
    const CornerBox c = corners_from_septet(s);
    const Septet back = septet_from_corners(c);
    worst = std::max(worst, max_corner_error(c, corners_from_septet(back)));
    EXPECT_GE(back.theta, -kPi / 2);
    EXPECT_LT(back.theta, kPi / 2);
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(SeptetFromCorners, RejectsDegenerateAndSkewed) {
  const Vec2 p{1, 1};
  EXPECT_THROW(septet_from_corners({p, p, p, p}), std::invalid_argument);
  // Parallelogram, not a rectangle.
  EXPECT_THROW(septet_from_corners({{0, 0}, {2, 0}, {1, 2}, {3, 2}}), std::invalid_argument);
}

TEST(PolygonIntersection, IdenticalAndDisjoint) {
  const ConvexPolygon unit = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  const ConvexPolygon far = {{5, 5}, {6, 5}, {6, 6}, {5, 6}};
  EXPECT_NEAR(polygon_intersection_area(unit, unit), 1.0, 1e-12);
  EXPECT_EQ(polygon_intersection_area(unit, far), 0.0);
  EXPECT_EQ(polygon_intersection_area(far, unit), 0.0);
}

TEST(PolygonIntersection, RotatedSquareOctagon) {
  const Septet a{0, 0, 1, 1, 0, 0, 0};
  const Septet b{0, 0, 1, 1, kPi / 4, 0, 0};
  const double area = polygon_intersection_area(polygon_from_septet(a), polygon_from_septet(b));
  EXPECT_NEAR(area, 2 * (std::sqrt(2.0) - 1), 1e-12);
  // Rasterised cross-check over the square [-0.5, 0.5]^2 at 2048^2.
  long inside = 0;
  const int res = 2048;
  for (int j = 0; j < res; ++j) {
    for (int i = 0; i < res; ++i) {
      const double x = -0.5 + (i + 0.5) / res, y = -0.5 + (j + 0.5) / res;
      inside += std::abs(x + y) <= std::sqrt(0.5) && std::abs(x - y) <= std::sqrt(0.5);
    }
  }
  EXPECT_NEAR(double(inside) / (double(res) * res), 0.82843, 1e-3);
}

TEST(PolygonIntersection, Symmetric) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto a = polygon_from_septet(testing::random_septet(rng, 30));
    const auto b = polygon_from_septet(testing::random_septet(rng, 30));
    EXPECT_NEAR(polygon_intersection_area(a, b), polygon_intersection_area(b, a), 1e-9);
  }
}

TEST(RotatedIou, BasicCases) {
  const Septet a{0, 0, 1, 1, 0, 0, 0};
  EXPECT_NEAR(rotated_iou(a, a), 1.0, 1e-12);
  EXPECT_EQ(rotated_iou(a, {10, 10, 1, 1, 0, 0, 0}), 0.0);
  EXPECT_NEAR(rotated_iou(a, {0, 0, 1, 1, kPi / 4, 0, 0}), 1.0 / std::sqrt(2.0), 1e-9);
}

TEST(RotatedIou, SymmetryAndSelf) {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 2000; ++i) {
    const Septet a = testing::random_septet(rng, 60);
    const Septet b = testing::random_septet(rng, 60);
    EXPECT_EQ(rotated_iou(a, b), rotated_iou(b, a));
    EXPECT_NEAR(rotated_iou(a, a), 1.0, 1e-9);
  }
}

TEST(RotatedIou, RotationInvariance) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> ang(-kPi, kPi);
  for (int i = 0; i < 500; ++i) {
    const Septet a = testing::random_septet(rng, 40);
    const Septet b = testing::random_septet(rng, 40);
    const double phi = ang(rng);
    const Vec2 pivot{13.0, -4.0};
    const Mat2 r = rotation_matrix(phi);
    const auto turn = [&](Septet s) {
      const Vec2 c = r * (Vec2{s.cx, s.cy} - pivot) + pivot;
      s.cx = c.x;
      s.cy = c.y;
      s.theta += phi;
      return s;
    };
    EXPECT_NEAR(rotated_iou(turn(a), turn(b)), rotated_iou(a, b), 1e-6);
  }
}

TEST(RotatedIou, AxisAlignedMatchesFormula) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 1000; ++i) {
    Septet a = testing::random_septet(rng, 30, 1, 30);
    Septet b = testing::random_septet(rng, 30, 1, 30);
    a.theta = b.theta = 0.0;
    const double ix = std::max(0.0, std::min(a.cx + a.w / 2, b.cx + b.w / 2) -
                                        std::max(a.cx - a.w / 2, b.cx - b.w / 2));
    const double iy = std::max(0.0, std::min(a.cy + a.h / 2, b.cy + b.h / 2) -
                                        std::max(a.cy - a.h / 2, b.cy - b.h / 2));
    const double inter = ix * iy;
    const double expected = inter / (a.w * a.h + b.w * b.h - inter);
    EXPECT_NEAR(rotated_iou(a, b), expected, 1e-9);
  }
}

TEST(RotatedIou, AgreesWithRasterOracle) {
  std::mt19937_64 rng(123);
  std::normal_distribution<double> jitter(0.0, 8.0);
  for (int i = 0; i < 100; ++i) {
    const Septet a = testing::random_septet(rng, 100, 5, 40);
    Septet b = testing::random_septet(rng, 100, 5, 40);
    b.cx = a.cx + jitter(rng);
    b.cy = a.cy + jitter(rng);
    EXPECT_NEAR(rotated_iou(a, b), testing::raster_iou(a, b, 512), 5e-3);
  }
}

// ------------------------------------------------------------ soft-NMS

Detection det(Septet box, double score, int cls = 0) { return {box, cls, score}; }

TEST(AngleSoftNms, SingleDetectionUnchanged) {
  const auto out = angle_soft_nms({det({10, 10, 4, 2, 0.3, 0, 0}, 0.7)});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].score, 0.7);
  EXPECT_EQ(out[0].box, (Septet{10, 10, 4, 2, 0.3, 0, 0}));
}

TEST(AngleSoftNms, IdenticalBoxesCollapse) {
  const Septet b{10, 10, 4, 2, 0.3, 0, 0};
  const auto out = angle_soft_nms({det(b, 0.8), det(b, 0.9)}, 0.5, 0.03);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].score, 0.9);
}

TEST(AngleSoftNms, DisjointBoxesKept) {
  const auto out =
      angle_soft_nms({det({0, 0, 2, 2, 0, 0, 0}, 0.05), det({50, 50, 2, 2, 0, 0, 0}, 0.9)});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].score, 0.9);
  EXPECT_EQ(out[1].score, 0.05);
}

TEST(AngleSoftNms, LinearDecayAboveThreshold) {
  // IoU of these two is 0.6 (width overlap 8 of 12 with equal height 10).
  const Septet a{0, 0, 10, 10, 0, 0, 0};
  const Septet b{2.5, 0, 10, 10, 0, 0, 0};
  const double iou = rotated_iou(a, b);
  ASSERT_NEAR(iou, 7.5 / 12.5, 1e-12);
  const auto out = angle_soft_nms({det(a, 0.9), det(b, 0.8)}, 0.5, 0.03);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_NEAR(out[1].score, 0.8 * (1 - iou), 1e-12);
  // Below the IoU threshold nothing changes.
  const auto loose = angle_soft_nms({det(a, 0.9), det(b, 0.8)}, 0.7, 0.03);
  EXPECT_EQ(loose[1].score, 0.8);
}

TEST(AngleSoftNms, ClassAware) {
  const Septet b{10, 10, 4, 2, 0.3, 0, 0};
  const auto out = angle_soft_nms({det(b, 0.9, 0), det(b, 0.8, 1)});
  EXPECT_EQ(out.size(), 2u);
}

TEST(AngleSoftNms, RejectsBadThresholds) {
  EXPECT_THROW(angle_soft_nms({}, 1.5, 0.03), std::invalid_argument);
  EXPECT_THROW(angle_soft_nms({}, 0.5, -0.1), std::invalid_argument);
}

TEST(AngleSoftNms, ManyIdenticalReduceToOne) {
  const Septet b{30, 20, 12, 5, -0.4, 0, 0};
  std::vector<Detection> dets;
  for (int i = 0; i < 7; ++i) dets.push_back(det(b, 0.3 + 0.1 * i));
  const auto out = angle_soft_nms(dets);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_NEAR(out[0].score, 0.9, 1e-12);
}

}  // namespace
}  // namespace drn
