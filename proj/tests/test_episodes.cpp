#include "support/doctest_torch.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "manet/augment.hpp"
#include "manet/episodes.hpp"
#include "manet/errors.hpp"
#include "manet/image_io.hpp"
#include "manet/metrics.hpp"
#include "support/properties.hpp"

using namespace manet;
namespace fs = std::filesystem;

namespace {

std::vector<ClassId> ids_up_to(int n) {
  std::vector<ClassId> ids;
  for (int c = 1; c <= n; ++c) ids.push_back(c);
  return ids;
}

std::set<ClassId> range_set(int lo, int hi) {
  std::set<ClassId> s;
  for (int c = lo; c <= hi; ++c) s.insert(c);
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

torch::Tensor square_mask(int side, int lo, int hi) {
  auto m = torch::zeros({side, side});
  m.index_put_({torch::indexing::Slice(lo, hi), torch::indexing::Slice(lo, hi)}, 1.0f);
  return m;
}

}  // namespace

TEST_SUITE("episodes") {
  TEST_CASE("folds are contiguous ascending blocks") {
    FoldSpec f0 = build_folds(ids_up_to(20), 0, 4);
    CHECK(f0.test_classes == range_set(1, 5));
    CHECK(f0.train_classes == range_set(6, 20));

    FoldSpec f3 = build_folds(ids_up_to(20), 3, 4);
    CHECK(f3.test_classes == range_set(16, 20));
    CHECK(f3.test_classes.size() == 5);

    FoldSpec s1 = build_folds(ids_up_to(8), 1, 4);
    CHECK(s1.test_classes == std::set<ClassId>{3, 4});
    CHECK(s1.train_classes == std::set<ClassId>{1, 2, 5, 6, 7, 8});
  }

  TEST_CASE("fold construction rejects bad input") {
    CHECK_THROWS_AS(build_folds(ids_up_to(10), 0, 4), ConfigError);
    CHECK_THROWS_AS(build_folds(ids_up_to(8), 4, 4), ConfigError);
    CHECK_THROWS_AS(build_folds(ids_up_to(8), -1, 4), ConfigError);
  }

  TEST_CASE("synthetic generator writes the requested dataset deterministically") {
    const fs::path a = testing::scratch_dir("gen-a"), b = testing::scratch_dir("gen-b");
    SynthSpec spec;  // 8 classes × 20 images, 128 px
    DatasetManifest m = generate_synthetic_dataset(spec, a);
    CHECK(m.entries.size() == 160);
    CHECK(m.num_classes() == 8);
    generate_synthetic_dataset(spec, b);
    CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
    for (std::size_t i = 0; i < m.entries.size(); i += 7) {
      const auto rel = fs::relative(m.entries[i].mask_path, a);
      CHECK(slurp(a / rel) == slurp(b / rel));
      CHECK(slurp(m.entries[i].image_path) == slurp(b / fs::relative(m.entries[i].image_path, a)));
    }

    SUBCASE("masks are exact 0/255 rasters") {
      for (std::size_t i = 0; i < m.entries.size(); i += 5) {
        RawImage mask = read_image(m.entries[i].mask_path);
        REQUIRE(mask.channels == 1);
        bool exact = true;
        long fg = 0;
        for (auto v : mask.pixels) {
          exact = exact && (v == 0 || v == 255);
          fg += v == 255;
        }
        CHECK(exact);
        CHECK(fg > 0);
      }
    }

    SUBCASE("manifest reloads with the same content") {
      DatasetManifest back = load_manifest(a / "manifest.json");
      REQUIRE(back.entries.size() == m.entries.size());
      CHECK(back.class_names == m.class_names);
      CHECK(fs::equivalent(back.entries[3].image_path, m.entries[3].image_path));
      CHECK(back.entries[3].classes == m.entries[3].classes);
    }
  }

  TEST_CASE("synthetic generator validates its spec") {
    const fs::path dir = testing::scratch_dir("gen-bad");
    SynthSpec few;
    few.num_shape_classes = 6;
    CHECK_THROWS_AS(generate_synthetic_dataset(few, dir), ConfigError);
    SynthSpec tiny;
    tiny.image_size = 32;
    CHECK_THROWS_AS(generate_synthetic_dataset(tiny, dir), ConfigError);
    SynthSpec too_many;
    too_many.num_shape_classes = 11;
    CHECK_THROWS_AS(generate_synthetic_dataset(too_many, dir), ConfigError);
  }

  TEST_CASE("manifest loading reports missing files and undeclared classes") {
    const fs::path dir = testing::scratch_dir("manifest");
    CHECK_THROWS_AS(load_manifest(dir / "absent.json"), IoError);
    {
      std::ofstream(dir / "bad.json") << R"({"entries":[{"image":"x.png","mask":"y.png","classes":[1]}],"class_names":{"1":"a"}})";
    }
    CHECK_THROWS_AS(load_manifest(dir / "bad.json"), IoError);
    DatasetManifest src = load_manifest(testing::small_synthetic_manifest());
    nlohmann::json doc = {{"class_names", {{"1", "a"}}},
                          {"entries",
                           {{{"image", src.entries[0].image_path.string()},
                             {"mask", src.entries[0].mask_path.string()},
                             {"classes", {2}}}}}};
    std::ofstream(dir / "undeclared.json") << doc.dump();
    CHECK_THROWS_AS(load_manifest(dir / "undeclared.json"), FormatError);
    std::ofstream(dir / "garbage.json") << "{not json";
    CHECK_THROWS_AS(load_manifest(dir / "garbage.json"), FormatError);
  }

  TEST_CASE("sampling is deterministic and without replacement") {
    EpisodeSampler sampler(load_manifest(testing::small_synthetic_manifest()));
    const std::set<ClassId> pool = range_set(1, 8);
    Rng a(7), b(7);
    Episode ea = sampler.sample(pool, 1, a), eb = sampler.sample(pool, 1, b);
    CHECK(ea.class_id == eb.class_id);
    CHECK(ea.query_path == eb.query_path);
    CHECK(torch::equal(ea.support[0].image, eb.support[0].image));

    Rng r(3);
    for (int trial = 0; trial < 20; ++trial) {
      Episode e = sampler.sample(pool, 5, r);
      REQUIRE(e.shots() == 5);
      std::set<fs::path> paths{e.query_path};
      for (const auto& s : e.support) paths.insert(s.image_path);
      CHECK(paths.size() == 6);
      CHECK(pool.count(e.class_id) == 1);
    }
  }

  TEST_CASE("sampling too large a support set names the class") {
    EpisodeSampler sampler(load_manifest(testing::small_synthetic_manifest()));
    Rng rng(1);
    try {
      sampler.sample({2}, 6, rng);
      FAIL("expected a sampling error");
    } catch (const SamplingError& e) {
      CHECK(std::string(e.what()).find("class 2") != std::string::npos);
    }
    CHECK_THROWS_AS(sampler.sample({}, 1, rng), SamplingError);
  }

  TEST_CASE("episode classes are uniform over the pool") {
    SynthSpec spec;
    spec.num_shape_classes = 10;
    spec.images_per_class = 2;
    spec.image_size = 64;
    const fs::path dir = testing::scratch_dir("uniform");
    generate_synthetic_dataset(spec, dir);
    EpisodeSampler sampler(load_manifest(dir / "manifest.json"));
    const auto fold = build_folds(sampler.manifest(), 0, 2);
    REQUIRE(fold.test_classes == range_set(1, 5));
    std::map<ClassId, int> counts;
    Rng rng(99);
    const int n = 1000;
    for (int i = 0; i < n; ++i) counts[sampler.sample(fold.test_classes, 1, rng).class_id]++;
    // Binomial(1000, 1/5): mean 200, sd = sqrt(1000·0.2·0.8) = 12.649.
    const double sd = std::sqrt(n * 0.2 * 0.8);
    for (ClassId c = 1; c <= 5; ++c) {
      CHECK(std::abs(counts[c] - 200) <= 5 * sd);
    }
    CHECK(counts.size() == 5);
  }

  TEST_CASE("disabled augmentation is the identity") {
    auto image = torch::rand({3, 40, 50});
    auto mask = square_mask(50, 10, 30).slice(0, 0, 40);
    Rng rng(4);
    auto [img, m] = augment(image, mask, rng, AugmentConfig{});
    CHECK(torch::equal(img, image));
    CHECK(torch::equal(m, mask));
  }

  TEST_CASE("horizontal flip is an involution") {
    auto image = torch::rand({3, 33, 47});
    auto mask = (torch::rand({33, 47}) > 0.5).to(torch::kFloat32);
    AffineParams flip;
    flip.flip = true;
    auto [i1, m1] = apply_affine(image, mask, flip);
    CHECK_FALSE(torch::equal(i1, image));
    auto [i2, m2] = apply_affine(i1, m1, flip);
    CHECK(torch::equal(i2, image));
    CHECK(torch::equal(m2, mask));
  }

  TEST_CASE("rotating by an angle and back keeps a square mask") {
    auto mask = square_mask(128, 40, 88);
    auto image = torch::stack({mask, mask, mask});
    for (double angle : {10.0, -7.5, 4.0}) {
      AffineParams fwd, back;
      fwd.angle_deg = angle;
      back.angle_deg = -angle;
      auto [i1, m1] = apply_affine(image, mask, fwd);
      auto [i2, m2] = apply_affine(i1, m1, back);
      CHECK(binary_iou(m2, mask) >= 0.95);
      CHECK(((m2 == 0) | (m2 == 1)).all().item<bool>());
    }
  }

  TEST_CASE("sampled transforms stay within the configured ranges") {
    Rng rng(8);
    AugmentConfig cfg = AugmentConfig::all();
    for (int i = 0; i < 500; ++i) {
      AffineParams p = sample_affine(cfg, rng);
      CHECK(p.scale >= 0.8);
      CHECK(p.scale <= 1.25);
      CHECK(std::abs(p.angle_deg) <= 10.0);
      CHECK(std::abs(p.shift_x) <= 0.1);
      CHECK(std::abs(p.shift_y) <= 0.1);
    }
  }

  TEST_CASE("augmented episodes keep non-empty supports") {
    EpisodeSampler sampler(load_manifest(testing::small_synthetic_manifest()));
    Rng rng(12);
    for (int i = 0; i < 30; ++i) {
      Episode e = augment_episode(resize_episode(sampler.sample(range_set(1, 8), 2, rng), 96), rng,
                                  AugmentConfig::all());
      for (const auto& s : e.support) CHECK(s.mask.sum().item<double>() > 0);
    }
  }

  TEST_CASE("resize_episode") {
    SUBCASE("same size leaves pixels unchanged") {
      Episode e;
      e.query_image = torch::rand({3, 473, 473});
      e.query_mask = square_mask(473, 100, 300);
      e.support.push_back({torch::rand({3, 473, 473}), square_mask(473, 50, 80), {}});
      Episode r = resize_episode(e, 473);
      CHECK(torch::equal(r.query_image, e.query_image));
      CHECK(torch::equal(r.query_mask, e.query_mask));
      CHECK(torch::equal(r.support[0].image, e.support[0].image));
      CHECK(r.original_height == 473);
    }
    SUBCASE("non-square input becomes square with binary masks") {
      Episode e;
      e.query_image = torch::rand({3, 300, 400});
      e.query_mask = (torch::rand({300, 400}) > 0.7).to(torch::kFloat32);
      e.support.push_back({torch::rand({3, 300, 400}), square_mask(400, 10, 200).slice(0, 0, 300), {}});
      Episode r = resize_episode(e, 473);
      CHECK(r.query_image.sizes() == std::vector<int64_t>{3, 473, 473});
      CHECK(r.query_mask.sizes() == std::vector<int64_t>{473, 473});
      CHECK(((r.query_mask == 0) | (r.query_mask == 1)).all().item<bool>());
      CHECK(((r.support[0].mask == 0) | (r.support[0].mask == 1)).all().item<bool>());
      CHECK(r.original_height == 300);
      CHECK(r.original_width == 400);
      CHECK(torch::equal(r.original_query_mask, e.query_mask));
    }
    SUBCASE("down then up keeps a large blob") {
      auto yy = torch::arange(400).view({400, 1}).to(torch::kFloat32);
      auto xx = torch::arange(400).view({1, 400}).to(torch::kFloat32);
      auto blob = (((yy - 190).pow(2) + (xx - 210).pow(2)) < 120.0f * 120.0f).to(torch::kFloat32);
      auto back = resize_nearest(resize_nearest(blob, 100, 100), 400, 400);
      CHECK(binary_iou(back, blob) >= 0.9);
    }
    SUBCASE("small sides are rejected") {
      Episode e;
      e.query_image = torch::rand({3, 70, 70});
      e.query_mask = torch::zeros({70, 70});
      CHECK_THROWS_AS(resize_episode(e, 32), ConfigError);
    }
  }

  TEST_CASE("derived seeds differ across indices and bases") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t base : {0ULL, 1ULL, 2ULL}) {
      for (std::uint64_t i = 0; i < 100; ++i) seen.insert(derive_seed(base, i));
    }
    CHECK(seen.size() == 300);
    CHECK(derive_seed(5, 9) == derive_seed(5, 9));
  }

  TEST_CASE("image io round-trips") {
    const fs::path dir = testing::scratch_dir("io");
    auto t = torch::rand({3, 17, 23});
    write_png(dir / "rgb.png", tensor_to_image(t));
    auto back = image_to_tensor(read_image(dir / "rgb.png"));
    CHECK((back - t).abs().max().item<double>() <= 0.5 / 255.0 + 1e-6);
    auto m = (torch::rand({17, 23}) > 0.5).to(torch::kFloat32);
    write_png(dir / "mask.png", mask_tensor_to_image(m));
    CHECK(torch::equal(binary_mask_to_tensor(read_image(dir / "mask.png")), m));
    std::ofstream(dir / "junk.png") << "not an image";
    CHECK_THROWS(read_image(dir / "junk.png"));
  }
}
