#include "support/doctest_torch.hpp"

#include <cmath>

#include "manet/correlation.hpp"
#include "manet/errors.hpp"

using namespace manet;

namespace {

torch::Tensor unit_at_cos(double c) { return torch::tensor({c, std::sqrt(1 - c * c)}, torch::kFloat64); }

}  // namespace

TEST_SUITE("correlation") {
  TEST_CASE("masked GAP reductions") {
    auto feat = torch::randn({5, 4, 6}, torch::kFloat64);
    SUBCASE("all-ones mask is the spatial mean") {
      auto p = masked_gap(feat, torch::ones({4, 6}, torch::kFloat64)).vector;
      // Σ/(24 + ε) vs Σ/24: relative difference ε/24.
      CHECK((p - feat.mean({1, 2})).abs().max().item<double>() < 1e-7);
    }
    SUBCASE("single pixel mask picks that feature") {
      auto m = torch::zeros({4, 6}, torch::kFloat64);
      m[2][3] = 1.0;
      auto p = masked_gap(feat, m).vector;
      CHECK((p - feat.select(1, 2).select(1, 3)).abs().max().item<double>() < 1e-6);
    }
    SUBCASE("constant features give the constant") {
      auto c = torch::tensor({1.5, -2.0, 0.25}, torch::kFloat64).view({3, 1, 1}).expand({3, 4, 6}).contiguous();
      auto m = (torch::rand({4, 6}) > 0.5).to(torch::kFloat64);
      m[0][0] = 1.0;
      auto p = masked_gap(c, m).vector;
      CHECK((p - torch::tensor({1.5, -2.0, 0.25}, torch::kFloat64)).abs().max().item<double>() < 1e-6);
    }
    SUBCASE("batched form matches the unbatched one") {
      auto fb = torch::randn({2, 5, 4, 6}, torch::kFloat64);
      auto mb = (torch::rand({2, 4, 6}) > 0.5).to(torch::kFloat64);
      mb.index_put_({torch::indexing::Slice(), 0, 0}, 1.0);
      auto pb = masked_gap(fb, mb).vector;
      CHECK(torch::allclose(pb[1], masked_gap(fb[1], mb[1]).vector));
    }
    SUBCASE("errors") {
      CHECK_THROWS_AS(masked_gap(feat, torch::zeros({4, 6}, torch::kFloat64)), DegenerateSupportError);
      CHECK_THROWS_AS(masked_gap(feat, torch::ones({3, 6}, torch::kFloat64)), ContractError);
    }
  }

  TEST_CASE("min-max normalization") {
    auto raw = torch::tensor({0.2, 0.6, 1.0, 0.6}, torch::kFloat64).view({1, 2, 2});
    auto n = normalize_min_max(raw);
    auto expected = torch::tensor({0.0, 0.5, 1.0, 0.5}, torch::kFloat64).view({1, 2, 2});
    CHECK((n - expected).abs().max().item<double>() < 1e-6);
    auto flat = normalize_min_max(torch::full({1, 3, 3}, 0.7, torch::kFloat64));
    CHECK(flat.abs().max().item<double>() <= 1e-5);
  }

  TEST_CASE("correlation map examples") {
    SUBCASE("self-match gives raw 1 and a flat normalized map") {
      auto f = torch::randn({8, 5, 5}, torch::kFloat64);
      auto m = correlation_map(f, f, torch::ones({5, 5}, torch::kFloat64));
      CHECK((m.raw - 1).abs().max().item<double>() < 1e-9);
      CHECK(m.values.abs().max().item<double>() <= 1e-5);
    }
    SUBCASE("orthogonal features give raw 0") {
      auto q = torch::zeros({4, 3, 3}, torch::kFloat64);
      q.select(0, 0).fill_(1.0);
      q.select(0, 1).copy_(torch::rand({3, 3}, torch::kFloat64));
      auto s = torch::zeros({4, 3, 3}, torch::kFloat64);
      s.select(0, 2).copy_(torch::rand({3, 3}, torch::kFloat64) + 0.1);
      s.select(0, 3).fill_(-2.0);
      auto m = correlation_map(q, s, torch::ones({3, 3}, torch::kFloat64));
      CHECK(m.raw.abs().max().item<double>() < 1e-12);
    }
    SUBCASE("hand-built 2x2 map") {
      auto q = torch::stack({unit_at_cos(0.2), unit_at_cos(0.6), unit_at_cos(1.0), unit_at_cos(0.6)}, 1).view({2, 2, 2});
      auto s = torch::zeros({2, 2, 2}, torch::kFloat64);
      s[0][0][0] = 1.0;                        // the only foreground support vector: (1, 0)
      s.select(0, 1).fill_(5.0);               // background vectors are ignored
      s[1][0][0] = 0.0;
      auto mask = torch::zeros({2, 2}, torch::kFloat64);
      mask[0][0] = 1.0;
      auto m = correlation_map(q, s, mask);
      auto raw = torch::tensor({0.2, 0.6, 1.0, 0.6}, torch::kFloat64).view({2, 2});
      CHECK((m.raw - raw).abs().max().item<double>() < 1e-12);
      auto expected = torch::tensor({0.0, 0.5, 1.0, 0.5}, torch::kFloat64).view({2, 2});
      CHECK((m.values - expected).abs().max().item<double>() < 1e-6);
    }
    SUBCASE("zero vectors count as cosine 0") {
      auto q = torch::zeros({3, 2, 2}, torch::kFloat64);
      q[0][0][0] = 1.0;
      auto s = torch::zeros({3, 2, 2}, torch::kFloat64);
      s[0][1][1] = 2.0;
      auto m = correlation_map(q, s, torch::ones({2, 2}, torch::kFloat64));
      CHECK(m.raw[0][0].item<double>() == doctest::Approx(1.0));
      CHECK(m.raw[1][1].item<double>() == 0.0);
      CHECK(torch::isfinite(m.values).all().item<bool>());
    }
  }

  TEST_CASE("support mask downsampling") {
    SUBCASE("nearest downsample of a large region") {
      auto m = torch::zeros({1, 16, 16});
      m.index_put_({0, torch::indexing::Slice(0, 8), torch::indexing::Slice(0, 8)}, 1.0f);
      auto d = downsample_support_mask(m, 4, 4);
      CHECK(d.sum().item<double>() == 4.0);
      CHECK(d[0][0][0].item<double>() == 1.0);
      CHECK(d[0][3][3].item<double>() == 0.0);
    }
    SUBCASE("a lost small object falls back to the cell nearest its centroid") {
      auto m = torch::zeros({1, 16, 16});
      m[0][9][13] = 1.0f;  // not on a nearest-neighbour sample point (multiples of 4)
      auto d = downsample_support_mask(m, 4, 4);
      CHECK(d.sum().item<double>() == 1.0);
      CHECK(d[0][2][3].item<double>() == 1.0);
    }
    SUBCASE("empty full mask is degenerate") {
      CHECK_THROWS_AS(downsample_support_mask(torch::zeros({1, 8, 8}), 2, 2), DegenerateSupportError);
    }
  }

  TEST_CASE("shot fusion") {
    Prototype a{torch::tensor({1.0, 0.0})}, b{torch::tensor({0.0, 1.0})};
    auto ma = torch::rand({1, 3, 3}), mb = torch::rand({1, 3, 3});
    CorrelationMap ca{ma, ma}, cb{mb, mb};

    SUBCASE("one shot is the identity") {
      auto [p, m] = fuse_shots({a}, {ca});
      CHECK(torch::equal(p.vector, a.vector));
      CHECK(torch::equal(m.values, ca.values));
    }
    SUBCASE("identical shots return the shot exactly") {
      auto v = torch::randn({7});
      auto [p, m] = fuse_shots({{v}, {v}, {v}}, {ca, ca, ca});
      CHECK(torch::equal(p.vector, v));
      CHECK(torch::equal(m.values, ca.values));
    }
    SUBCASE("two vectors average elementwise") {
      auto [p, m] = fuse_shots({a, b}, {ca, cb});
      CHECK(torch::allclose(p.vector, torch::tensor({0.5, 0.5})));
      CHECK(torch::allclose(m.values, (ma + mb) / 2));
    }
    SUBCASE("average-then-normalize renormalizes the mean raw map") {
      auto [p, m] = fuse_shots({a, b}, {ca, cb}, ShotFusion::kAverageThenNormalize);
      CHECK(torch::allclose(m.values, normalize_min_max((ma + mb) / 2)));
    }
    SUBCASE("errors") {
      CHECK_THROWS_AS(fuse_shots({}, {}), ContractError);
      CHECK_THROWS_AS(fuse_shots({a, b}, {ca}), ContractError);
    }
  }
}
