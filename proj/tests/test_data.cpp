#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "oracles.hpp"
#include "qfaap/data.hpp"

using namespace qfaap;
namespace fs = std::filesystem;

namespace {

Dataset numbered(int n) {
  Dataset d(n);
  for (int i = 0; i < n; ++i) {
    d[i].id = std::to_string(i);
    d[i].rgb = Tensor(3, 4, 4);
  }
  return d;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qfaap_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("split is a disjoint cover of the records and seed-stable") {
  const Dataset d = numbered(50);
  const auto [tr, te] = split_imagewise(d, 0.9, 3);
  CHECK(tr.size() == 45);
  CHECK(te.size() == 5);
  std::set<std::string> ids;
  for (const auto& r : tr) ids.insert(r.id);
  for (const auto& r : te) CHECK(ids.insert(r.id).second);
  CHECK(ids.size() == 50);
  const auto again = split_imagewise(d, 0.9, 3);
  for (std::size_t i = 0; i < te.size(); ++i) CHECK(again.second[i].id == te[i].id);
  CHECK_THROWS_AS(split_imagewise(d, 1.0, 3), InvalidInput);
  CHECK_THROWS_AS(split_imagewise(numbered(1), 0.5, 3), InvalidInput);
}

TEST_CASE("augmentation keeps each label centre on its marked pixel") {
  std::mt19937_64 rng(4);
  for (int turns = 0; turns < 4; ++turns) {
    for (int t = 0; t < 10; ++t) {
      DatasetRecord rec;
      rec.rgb = Tensor(3, 32, 32, 0.0);
      const int r = 4 + static_cast<int>(rng() % 24), c = 4 + static_cast<int>(rng() % 24);
      for (int ch = 0; ch < 3; ++ch) rec.rgb(ch, r, c) = 1.0;
      GraspCandidate2D g;
      g.j = c + 0.5;
      g.k = r + 0.5;
      g.w = 10;
      g.h = 4;
      g.theta = 0.3;
      rec.labels = {g};
      const DatasetRecord out = apply_augmentation(rec, AugmentParams{1.0, turns});
      REQUIRE(out.labels.size() == 1);
      const auto& o = out.labels[0];
      CHECK(out.rgb(0, static_cast<int>(std::floor(o.k)), static_cast<int>(std::floor(o.j))) == doctest::Approx(1.0));
      CHECK(o.w == 10);
      CHECK(std::abs(angle_difference(o.theta, 0.3 + turns * kPi / 2)) < 1e-12);
    }
  }
}

TEST_CASE("half-turn maps a centre to the mirrored pixel") {
  GraspCandidate2D g;
  g.j = 3.5;
  g.k = 7.5;
  g.w = 5;
  g.h = 2;
  const auto o = transform_label(g, AugmentParams{1.0, 2}, 20, 30);
  CHECK(o.j == doctest::Approx(30 - 3.5));
  CHECK(o.k == doctest::Approx(20 - 7.5));
}

TEST_CASE("zoom scales label geometry about the centre") {
  GraspCandidate2D g;
  g.j = 20;
  g.k = 16;
  g.w = 6;
  g.h = 3;
  const auto o = transform_label(g, AugmentParams{0.5, 0}, 32, 32);
  CHECK(o.j == doctest::Approx(24));
  CHECK(o.k == doctest::Approx(16));
  CHECK(o.w == doctest::Approx(12));
  CHECK_THROWS_AS(apply_augmentation(DatasetRecord{"x", Tensor(3, 4, 4)}, AugmentParams{0.4, 0}), InvalidInput);
}

TEST_CASE("augment is deterministic in its seed") {
  std::mt19937_64 rng(5);
  DatasetRecord rec;
  rec.rgb = oracle::random_frame(rng, 24, 24);
  GraspCandidate2D g;
  g.j = 12;
  g.k = 12;
  g.w = 8;
  g.h = 3;
  rec.labels = {g};
  const auto a = augment(rec, 9), b = augment(rec, 9);
  CHECK(a.rgb == b.rgb);
  REQUIRE(a.labels.size() == b.labels.size());
}

TEST_CASE("Cornell rectangles are parsed, cropped and invalid lines skipped") {
  const fs::path dir = scratch("cornell");
  {
    std::ofstream f(dir / "pcd0100cpos.txt");
    f << "270 220\n370 220\n370 260\n270 260\n";
    f << "nan 1\n2 2\n3 3\n4 4\n";
  }
  int skipped = 0;
  const auto rects = parse_cornell_rectangles(dir / "pcd0100cpos.txt", &skipped);
  REQUIRE(rects.size() == 1);
  CHECK(skipped == 1);
  CHECK(rects[0].j == 320);
  CHECK(rects[0].k == 240);
  CHECK(rects[0].w == 100);
  CHECK(rects[0].h == 40);

  write_rgb_png(dir / "pcd0100r.png", Tensor(3, 480, 640, 0.5));
  CornellReport rep;
  const Dataset d = load_cornell(dir, 224, &rep);
  REQUIRE(d.size() == 1);
  REQUIRE(d[0].labels.size() == 1);
  CHECK(d[0].rows() == 224);
  CHECK(d[0].labels[0].j == doctest::Approx(112));
  CHECK(d[0].labels[0].k == doctest::Approx(112));
  CHECK(d[0].labels[0].w == doctest::Approx(100 * 224.0 / 480));
  const CropTransform ct = CropTransform::centre_square(480, 640, 224);
  const auto back = ct.inverse(ct.apply(rects[0]));
  CHECK(back.j == doctest::Approx(rects[0].j));
  CHECK(back.w == doctest::Approx(rects[0].w));
  fs::remove_all(dir);
}

TEST_CASE("synthetic scenes: deterministic, valid labels, hand near the best object") {
  SyntheticSceneSpec spec;
  spec.canvas = 96;
  spec.seed = 21;
  spec.hand = HandPlacement::NearBestObject;
  for (int i = 0; i < 8; ++i) {
    const auto a = gen_scene(spec, i), b = gen_scene(spec, i);
    CHECK(a.rgb == b.rgb);
    CHECK(a.hand_mask == b.hand_mask);
    REQUIRE(a.hand_mask);
    REQUIRE(a.objects);
    CHECK_NOTHROW(check_alignment(a));
    CHECK(a.hand_mask->any());
    CHECK_FALSE(a.labels.empty());
    for (const auto& g : a.labels) CHECK_NOTHROW(validate(g));
    REQUIRE(a.best_object >= 1);
    const Mask best = a.objects->mask_of(static_cast<std::uint8_t>(a.best_object));
    double sr = 0, sc = 0;
    const double n = static_cast<double>(a.hand_mask->count());
    for (int r = 0; r < 96; ++r)
      for (int c = 0; c < 96; ++c)
        if ((*a.hand_mask)(r, c)) sr += r, sc += c;
    CHECK(distance_to_mask(best, sr / n, sc / n) <= spec.adjacency_px);
  }
}

TEST_CASE("synthetic scenes survive a save/load round trip") {
  SyntheticSceneSpec spec;
  spec.canvas = 96;
  spec.seed = 2;
  spec.hand = HandPlacement::Random;
  const Dataset d = gen_synthetic(spec, 3);
  const fs::path dir = scratch("synth");
  save_synthetic(dir, d);
  const Dataset back = load_synthetic(dir);
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back[i].id == d[i].id);
    CHECK(back[i].hand_mask == d[i].hand_mask);
    CHECK(back[i].labels.size() == d[i].labels.size());
    for (std::size_t v = 0; v < d[i].rgb.size(); ++v)
      REQUIRE(std::abs(back[i].rgb.values()[v] - d[i].rgb.values()[v]) <= 0.5 / 255 + 1e-12);
  }
  fs::remove_all(dir);
}

TEST_CASE("distance_to_mask") {
  Mask m(5, 5);
  CHECK(std::isinf(distance_to_mask(m, 0, 0)));
  m.set(1, 1, true);
  CHECK(distance_to_mask(m, 4, 5) == 5.0);
}
