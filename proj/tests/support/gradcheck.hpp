#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "manet/episodes.hpp"
#include "manet/model.hpp"

namespace manet::testing {

struct GradCheck {
  int coordinates = 0;
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;
};

/// Compares autodiff with central differences (f(x+h) − f(x−h)) / 2h at the
/// given flat indices of `param`. Relative error per coordinate is
/// |a − n| / max(|a|, |n|, floor).
GradCheck central_difference_check(const std::function<torch::Tensor()>& loss, torch::Tensor param,
                                   const std::vector<int64_t>& indices, double step = 1e-3,
                                   double floor = 1e-8);

/// Float64 tiny-backbone model and a 64×64 one-shot episode from the small
/// synthetic dataset; checks d(pixel + grid)/dθ for `count` random head
/// parameter entries.
GradCheck end_to_end_check(int count, std::uint64_t seed, double step = 1e-3);

}  // namespace manet::testing
