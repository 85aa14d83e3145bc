#include <doctest.h>

#include <map>
#include <vector>

#include "slicetrack/baseline.hpp"
#include "slicetrack/rng.hpp"

using namespace slicetrack;
using baseline::ScoredBox;

namespace {
constexpr int kNx = 64, kNy = 64;
}

TEST_CASE("baseline: single chain over consecutive slices") {
  // consecutive boxes shifted by 0.01 in x: pairwise IoU = 0.19/0.21 ~ 0.905
  std::map<int, std::vector<ScoredBox>> per_slice;
  for (int z = 2; z <= 5; ++z)
    per_slice[z] = {{0.8, {0.5 + 0.01 * (z - 2), 0.5, 0.2, 0.2}}};

  const auto preds = baseline::stack_2d_to_3d(per_slice, 0.5, 0, kNx, kNy);
  REQUIRE(preds.size() == 1);
  CHECK(preds[0].box.z0 == 2);
  CHECK(preds[0].box.z1 == 5);
  CHECK(preds[0].length == 4);
  CHECK(preds[0].score == doctest::Approx(0.8));

  SUBCASE("a gate above the pairwise IoU splits every slice apart") {
    const auto singles = baseline::stack_2d_to_3d(per_slice, 0.95, 0, kNx, kNy);
    CHECK(singles.size() == 4);
    for (const auto& p : singles) CHECK(p.length == 1);
  }

  SUBCASE("an impossible gate of 1 isolates every detection") {
    const auto singles = baseline::stack_2d_to_3d(per_slice, 1.0, 0, kNx, kNy);
    CHECK(singles.size() == 4);
  }
}

TEST_CASE("baseline: two clustered instances over-merge into one chain") {
  // two instances whose boxes overlap heavily across slices; the stacker
  // cannot tell them apart and fuses them into a single 3D box
  std::map<int, std::vector<ScoredBox>> per_slice;
  per_slice[2] = {{0.9, {0.48, 0.50, 0.20, 0.20}}};                // instance A
  per_slice[3] = {{0.8, {0.52, 0.50, 0.20, 0.20}}};                // instance B, IoU ~0.67 with A
  per_slice[4] = {{0.8, {0.52, 0.50, 0.20, 0.20}}};
  const auto preds = baseline::stack_2d_to_3d(per_slice, 0.5, 0, kNx, kNy);
  REQUIRE(preds.size() == 1);
  CHECK(preds[0].box.z0 == 2);
  CHECK(preds[0].box.z1 == 4);
}

TEST_CASE("baseline: gap tolerance bridges missing slices") {
  std::map<int, std::vector<ScoredBox>> per_slice;
  per_slice[1] = {{0.9, {0.5, 0.5, 0.2, 0.2}}};
  per_slice[3] = {{0.9, {0.5, 0.5, 0.2, 0.2}}};  // slice 2 missing

  const auto no_gap = baseline::stack_2d_to_3d(per_slice, 0.5, 0, kNx, kNy);
  CHECK(no_gap.size() == 2);

  const auto gap1 = baseline::stack_2d_to_3d(per_slice, 0.5, 1, kNx, kNy);
  REQUIRE(gap1.size() == 1);
  CHECK(gap1[0].box.z0 == 1);
  CHECK(gap1[0].box.z1 == 3);
  CHECK(gap1[0].length == 2);
}

TEST_CASE("baseline: detections partition into chains") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::map<int, std::vector<ScoredBox>> per_slice;
    int total = 0;
    for (int z = 0; z < 8; ++z) {
      const int n = static_cast<int>(rng.uniform_int(0, 3));
      for (int k = 0; k < n; ++k) {
        per_slice[z].push_back(
            {rng.uniform(0.3, 1.0),
             {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3),
              rng.uniform(0.05, 0.3)}});
        ++total;
      }
    }
    const double gate = rng.uniform(0.0, 0.9);
    const int max_gap = static_cast<int>(rng.uniform_int(0, 2));
    const auto preds = baseline::stack_2d_to_3d(per_slice, gate, max_gap, kNx, kNy);
    int covered = 0;
    for (const auto& p : preds) covered += p.length;
    CHECK(covered == total);  // each detection in exactly one chain
  }
}

TEST_CASE("baseline: zero gate with one detection per slice chains components") {
  // all boxes overlap their neighbour slightly, so with gate 0 and unlimited
  // gap a single chain forms per overlapping component
  std::map<int, std::vector<ScoredBox>> per_slice;
  per_slice[0] = {{0.9, {0.30, 0.30, 0.20, 0.20}}};
  per_slice[1] = {{0.9, {0.36, 0.30, 0.20, 0.20}}};
  per_slice[2] = {{0.9, {0.42, 0.30, 0.20, 0.20}}};
  per_slice[4] = {{0.9, {0.80, 0.80, 0.10, 0.10}}};  // separate component

  const auto preds = baseline::stack_2d_to_3d(per_slice, 0.0, 100, kNx, kNy);
  CHECK(preds.size() == 2);
}
