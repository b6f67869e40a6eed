#include "support/doctest_torch.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "manet/errors.hpp"
#include "manet/losses.hpp"
#include "support/gradcheck.hpp"

using namespace manet;

namespace {

torch::Tensor d(std::vector<double> v, std::vector<int64_t> shape) {
  return torch::tensor(v, torch::kFloat64).view(shape);
}

std::vector<int64_t> all_indices(const torch::Tensor& t) {
  std::vector<int64_t> out(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int64_t>(i);
  return out;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("pixel loss values") {
    auto y = d({1, 0, 1, 0}, {2, 2});
    auto perfect = y.clamp(kNormEpsilon, 1 - kNormEpsilon);
    CHECK(pixel_loss(perfect, y).item<double>() <= 2 * kNormEpsilon);
    CHECK(pixel_loss(torch::full({2, 2}, 0.5, torch::kFloat64), y).item<double>() == doctest::Approx(std::log(2.0)));
    CHECK(pixel_loss(torch::full({3}, 0.5, torch::kFloat64), torch::zeros({3}, torch::kFloat64)).item<double>() ==
          doctest::Approx(std::log(2.0)));
    // −½(ln 0.9 + ln 0.8)
    CHECK(pixel_loss(d({0.9, 0.2}, {1, 2}), d({1, 0}, {1, 2})).item<double>() ==
          doctest::Approx(0.164252033486018).epsilon(1e-12));
    CHECK_THROWS_AS(pixel_loss(torch::rand({2, 3}), torch::rand({3, 2})), ContractError);
  }

  TEST_CASE("positive-only pixel loss ignores background pixels") {
    auto p = d({0.9, 0.2}, {1, 2});
    auto y = d({1, 0}, {1, 2});
    // −½ ln 0.9
    CHECK(pixel_loss(p, y, PixelLossMode::kPositiveOnly).item<double>() ==
          doctest::Approx(0.0526802578289).epsilon(1e-10));
    auto all_fg = torch::full({1, 2}, 1 - kNormEpsilon, torch::kFloat64);
    CHECK(pixel_loss(all_fg, y, PixelLossMode::kPositiveOnly).item<double>() < 1e-6);
  }

  TEST_CASE("grid target") {
    SUBCASE("top-left quadrant") {
      auto m = torch::zeros({4, 4}, torch::kFloat64);
      m.index_put_({torch::indexing::Slice(0, 2), torch::indexing::Slice(0, 2)}, 1.0);
      auto g = grid_target(m, 2).values;
      CHECK(torch::allclose(g, d({1, 0, 0, 0}, {2, 2}), 0, 1e-6));
    }
    SUBCASE("all foreground is flat zero") {
      auto g = grid_target(torch::ones({6, 6}, torch::kFloat64), 3).values;
      CHECK(g.abs().max().item<double>() <= 1e-5);
    }
    SUBCASE("cell means with min 0 and max 1 are kept") {
      // 4×4 cells of a 8×8 mask with means 0.5, 0.25, 0.0, 1.0.
      auto m = torch::zeros({8, 8}, torch::kFloat64);
      m.index_put_({torch::indexing::Slice(0, 2), torch::indexing::Slice(0, 4)}, 1.0);  // 8/16 = 0.5
      m.index_put_({torch::indexing::Slice(0, 1), torch::indexing::Slice(4, 8)}, 1.0);  // 4/16 = 0.25
      m.index_put_({torch::indexing::Slice(4, 8), torch::indexing::Slice(4, 8)}, 1.0);  // 1.0
      auto g = grid_target(m, 2).values;
      CHECK(torch::allclose(g, d({0.5, 0.25, 0.0, 1.0}, {2, 2}), 0, 1e-6));
    }
    SUBCASE("floor bins for sizes not divisible by the grid") {
      // 5 rows into 2 cells: rows 0-1 and 2-4. A single fg row 2 lands in cell 1.
      auto m = torch::zeros({5, 4}, torch::kFloat64);
      m[2].fill_(1.0);
      auto g = grid_target(m, 2).values;
      CHECK(g[0][0].item<double>() == 0.0);
      CHECK(g[1][0].item<double>() == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("masks smaller than the grid are rejected") {
      CHECK_THROWS_AS(grid_target(torch::zeros({3, 3}), 4), ContractError);
    }
  }

  TEST_CASE("grid loss") {
    SUBCASE("zero target") {
      CellLogits cells{torch::randn({1, 2, 3, 3}, torch::kFloat64), 3};
      CHECK(grid_loss(cells, GridTarget{torch::zeros({1, 3, 3}, torch::kFloat64)}).item<double>() == 0.0);
    }
    SUBCASE("tied logits on a single cell") {
      CellLogits cells{torch::zeros({1, 2, 1, 1}, torch::kFloat64), 1};
      CHECK(grid_loss(cells, GridTarget{torch::ones({1, 1, 1}, torch::kFloat64)}).item<double>() ==
            doctest::Approx(std::log(2.0)));
    }
    SUBCASE("confident foreground drives the loss to zero monotonically") {
      double previous = 1e9;
      for (double fg : {0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0}) {
        CellLogits cells{d({0.0, fg}, {1, 2, 1, 1}), 1};
        const double loss = grid_loss(cells, GridTarget{torch::ones({1, 1, 1}, torch::kFloat64)}).item<double>();
        CHECK(loss < previous);
        previous = loss;
      }
      CHECK(previous < 1e-15);
    }
  }

  TEST_CASE("total loss") {
    CHECK(total_loss(0.5, 0.3, 1.0).total == doctest::Approx(0.8));
    LossReport ablated = total_loss(0.5, 0.3, 0.0);
    CHECK(ablated.total == 0.5);
    CHECK(ablated.grid == 0.3);
    CHECK(total_loss(0.0, 0.0, 1.0).total == 0.0);
  }

  TEST_CASE("loss gradients match central differences in double precision") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(31);
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);

    SUBCASE("grid loss w.r.t. cell logits") {
      auto logits = (torch::randn({2, 2, 5, 5}, gen, opts) * 2).requires_grad_(true);
      auto mask = (torch::rand({2, 20, 20}, gen, opts) > 0.6).to(torch::kFloat64);
      GridTarget target = grid_target(mask, 5);
      auto check = testing::central_difference_check([&] { return grid_loss({logits, 5}, target); }, logits,
                                                     all_indices(logits));
      CHECK(check.coordinates == 100);
      CHECK(check.max_relative_error < 1e-4);
    }
    SUBCASE("pixel loss w.r.t. the score map") {
      auto score = (torch::rand({2, 9, 9}, gen, opts) * 0.9 + 0.05).requires_grad_(true);
      auto y = (torch::rand({2, 9, 9}, gen, opts) > 0.5).to(torch::kFloat64);
      for (auto mode : {PixelLossMode::kBinaryCrossEntropy, PixelLossMode::kPositiveOnly}) {
        auto check = testing::central_difference_check([&] { return pixel_loss(score, y, mode); }, score,
                                                       all_indices(score));
        CHECK(check.max_relative_error < 1e-4);
      }
    }
  }

  TEST_CASE("end-to-end loss gradient matches central differences") {
    auto check = testing::end_to_end_check(10, 4);
    CHECK(check.coordinates == 10);
    CHECK(check.max_abs_gradient > 0);
    CHECK(check.max_relative_error < 1e-3);
  }

  TEST_CASE("end-to-end autodiff agrees with a small-step central difference") {
    for (std::uint64_t seed : {4, 5, 6}) {
      auto check = testing::end_to_end_check(10, seed, 1e-5);
      CHECK(check.max_relative_error < 1e-4);
    }
  }
}
