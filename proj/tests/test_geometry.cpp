#include <doctest.h>

#include <cmath>
#include <vector>

#include "slicetrack/geometry.hpp"
#include "slicetrack/rng.hpp"

using namespace slicetrack;
using geom::Box2D;
using geom::Box3D;

namespace {

// Rasterization oracle: IoU of two 2D boxes by counting cells of a fine grid.
double iou2d_raster(const Box2D& a, const Box2D& b, int res = 400) {
  const auto pa = a.xyxy();
  const auto pb = b.xyxy();
  const double x0 = std::min(pa[0], pb[0]), x1 = std::max(pa[2], pb[2]);
  const double y0 = std::min(pa[1], pb[1]), y1 = std::max(pa[3], pb[3]);
  const double dx = (x1 - x0) / res, dy = (y1 - y0) / res;
  if (dx <= 0.0 || dy <= 0.0) return 0.0;
  long inter = 0, uni = 0;
  for (int iy = 0; iy < res; ++iy) {
    const double y = y0 + (iy + 0.5) * dy;
    for (int ix = 0; ix < res; ++ix) {
      const double x = x0 + (ix + 0.5) * dx;
      const bool in_a = x > pa[0] && x < pa[2] && y > pa[1] && y < pa[3];
      const bool in_b = x > pb[0] && x < pb[2] && y > pb[1] && y < pb[3];
      if (in_a && in_b) ++inter;
      if (in_a || in_b) ++uni;
    }
  }
  return uni ? static_cast<double>(inter) / uni : 0.0;
}

// Integer-voxel counting oracle for 3D IoU on integer-cornered boxes.
double iou3d_voxel_count(const Box3D& a, const Box3D& b) {
  auto count = [](const Box3D& box, const Box3D& other, bool intersect) {
    long n = 0;
    const int x0 = static_cast<int>(std::floor(std::min(box.x0, other.x0)));
    const int x1 = static_cast<int>(std::ceil(std::max(box.x1, other.x1)));
    const int y0 = static_cast<int>(std::floor(std::min(box.y0, other.y0)));
    const int y1 = static_cast<int>(std::ceil(std::max(box.y1, other.y1)));
    const int z0 = std::min(box.z0, other.z0);
    const int z1 = std::max(box.z1, other.z1);
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const bool in_a = x >= box.x0 && x < box.x1 && y >= box.y0 && y < box.y1 &&
                            z >= box.z0 && z <= box.z1;
          const bool in_b = x >= other.x0 && x < other.x1 && y >= other.y0 && y < other.y1 &&
                            z >= other.z0 && z <= other.z1;
          if (intersect ? (in_a && in_b) : (in_a || in_b)) ++n;
        }
    return n;
  };
  const long inter = count(a, b, true);
  const long uni = count(a, b, false);
  return uni ? static_cast<double>(inter) / uni : 0.0;
}

Box2D random_box(Rng& rng) {
  return {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.02, 0.5),
          rng.uniform(0.02, 0.5)};
}

}  // namespace

TEST_CASE("geometry: cxcywh/xyxy conversion is an involution") {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const Box2D b = random_box(rng);
    const auto p = b.xyxy();
    const Box2D back = Box2D::from_xyxy(p[0], p[1], p[2], p[3]);
    CHECK(back.cx == doctest::Approx(b.cx).epsilon(1e-9));
    CHECK(back.cy == doctest::Approx(b.cy).epsilon(1e-9));
    CHECK(back.w == doctest::Approx(b.w).epsilon(1e-9));
    CHECK(back.h == doctest::Approx(b.h).epsilon(1e-9));
  }
}

TEST_CASE("geometry: iou2d identity, disjoint, and hand case") {
  const Box2D a = Box2D::from_xyxy(0, 0, 2, 2);
  CHECK(geom::iou2d(a, a) == doctest::Approx(1.0));
  const Box2D far = Box2D::from_xyxy(5, 5, 6, 6);
  CHECK(geom::iou2d(a, far) == 0.0);
  const Box2D b = Box2D::from_xyxy(1, 1, 3, 3);
  CHECK(geom::iou2d(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("geometry: iou2d matches rasterization oracle on random boxes") {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const Box2D a = random_box(rng);
    const Box2D b = random_box(rng);
    const double exact = geom::iou2d(a, b);
    const double approx = iou2d_raster(a, b);
    CHECK(exact == doctest::Approx(approx).epsilon(0.05));
    CHECK(geom::iou2d(a, b) == geom::iou2d(b, a));
  }
}

TEST_CASE("geometry: giou2d hand cases and bounds") {
  const Box2D a = Box2D::from_xyxy(0, 0, 1, 1);
  const Box2D b = Box2D::from_xyxy(2, 2, 3, 3);
  CHECK(geom::giou2d(a, b) == doctest::Approx(-7.0 / 9.0).epsilon(1e-9));
  CHECK(geom::giou2d(a, a) == doctest::Approx(1.0));

  // nested boxes: hull equals the outer box, so giou == iou
  const Box2D outer = Box2D::from_xyxy(0, 0, 4, 4);
  const Box2D inner = Box2D::from_xyxy(1, 1, 2, 2);
  CHECK(geom::giou2d(outer, inner) == doctest::Approx(geom::iou2d(outer, inner)).epsilon(1e-12));

  Rng rng(13);
  for (int i = 0; i < 200; ++i) {
    const Box2D x = random_box(rng);
    const Box2D y = random_box(rng);
    const double g = geom::giou2d(x, y);
    CHECK(g >= -1.0);
    CHECK(g <= 1.0);
    CHECK(g <= geom::iou2d(x, y) + 1e-12);
    CHECK(g == doctest::Approx(geom::giou2d(y, x)).epsilon(1e-12));
  }
}

TEST_CASE("geometry: iou3d hand cases") {
  const Box3D a{0, 0, 2, 2, 0, 1};
  const Box3D b{1, 1, 3, 3, 1, 2};
  CHECK(geom::iou3d(a, a) == doctest::Approx(1.0));
  CHECK(geom::iou3d(a, b) == doctest::Approx(1.0 / 15.0).epsilon(1e-12));
  const Box3D c{0, 0, 2, 2, 5, 6};
  CHECK(geom::iou3d(a, c) == 0.0);
}

TEST_CASE("geometry: iou3d matches integer-voxel counting on random integer boxes") {
  Rng rng(23);
  for (int i = 0; i < 500; ++i) {
    auto rand_box = [&]() {
      const int x0 = static_cast<int>(rng.uniform_int(0, 6));
      const int y0 = static_cast<int>(rng.uniform_int(0, 6));
      const int z0 = static_cast<int>(rng.uniform_int(0, 4));
      return Box3D{static_cast<double>(x0),
                   static_cast<double>(y0),
                   static_cast<double>(x0 + rng.uniform_int(1, 5)),
                   static_cast<double>(y0 + rng.uniform_int(1, 5)),
                   z0,
                   z0 + static_cast<int>(rng.uniform_int(0, 3))};
    };
    const Box3D a = rand_box();
    const Box3D b = rand_box();
    CHECK(geom::iou3d(a, b) == doctest::Approx(iou3d_voxel_count(a, b)).epsilon(1e-9));
    CHECK(geom::iou3d(a, b) == geom::iou3d(b, a));
  }
}

TEST_CASE("geometry: box3d_from_stack") {
  using Slice = std::pair<int, Box2D>;
  const int nx = 64, ny = 64;

  SUBCASE("single slice gives unit z range") {
    std::vector<Slice> s{{4, Box2D{0.5, 0.5, 0.25, 0.25}}};
    const Box3D out = geom::box3d_from_stack(s, nx, ny);
    CHECK(out.z0 == 4);
    CHECK(out.z1 == 4);
    CHECK(out.x0 == doctest::Approx((0.5 - 0.125) * nx));
    CHECK(out.x1 == doctest::Approx((0.5 + 0.125) * nx));
  }

  SUBCASE("identical boxes keep their xy extent") {
    const Box2D b{0.5, 0.5, 0.2, 0.1};
    std::vector<Slice> s{{3, b}, {4, b}, {5, b}};
    const Box3D out = geom::box3d_from_stack(s, nx, ny);
    CHECK(out.z0 == 3);
    CHECK(out.z1 == 5);
    CHECK(out.x1 - out.x0 == doctest::Approx(0.2 * nx));
    CHECK(out.y1 - out.y0 == doctest::Approx(0.1 * ny));
  }

  SUBCASE("offset boxes produce the xy hull") {
    std::vector<Slice> s{{2, Box2D{0.4, 0.4, 0.2, 0.2}}, {3, Box2D{0.6, 0.6, 0.2, 0.2}}};
    const Box3D out = geom::box3d_from_stack(s, nx, ny);
    CHECK(out.x0 == doctest::Approx(0.3 * nx));
    CHECK(out.x1 == doctest::Approx(0.7 * nx));
    CHECK(out.y0 == doctest::Approx(0.3 * ny));
    CHECK(out.y1 == doctest::Approx(0.7 * ny));
  }

  SUBCASE("errors") {
    std::vector<Slice> empty;
    CHECK_THROWS_AS(geom::box3d_from_stack(empty, nx, ny), DataError);
    std::vector<Slice> gap{{2, Box2D{0.5, 0.5, 0.1, 0.1}}, {4, Box2D{0.5, 0.5, 0.1, 0.1}}};
    CHECK_THROWS_AS(geom::box3d_from_stack(gap, nx, ny), DataError);
  }
}
