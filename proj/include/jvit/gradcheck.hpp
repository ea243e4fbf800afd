// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient checking in double precision.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "jvit/tensor.hpp"

namespace jvit {

/// Builds a scalar from the leaves it captured.
using ScalarProgram = std::function<Tensor<double>(Graph<double>&)>;
/// Builds a scalar from one input.
using PointProgram = std::function<Tensor<double>(Graph<double>&, const Tensor<double>&)>;

/// |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double analytic, double numeric);

/// Compares backward() against (f(x + h e) - f(x - h e)) / 2h on every leaf.
/// With per_leaf > 0 only that many coordinates per leaf are probed, drawn
/// with `coord_seed`. Leaves are perturbed in place and restored. Returns the
/// max relative error; `probed` receives the number of coordinates checked.
double grad_check_leaves(const ScalarProgram& f, std::span<const Tensor<double>> leaves,
                         double step, std::size_t per_leaf = 0, std::uint64_t coord_seed = 0,
                         std::size_t* probed = nullptr);

/// Single-input form: max relative error of d f / d x at `point`.
double grad_check(const PointProgram& f, const Tensor<double>& point, double step);

struct GradCheckEntry {
  std::string name;  // primitive name, or "l_total" for the end-to-end loss
  double max_rel_error = 0;
  std::size_t coordinates = 0;
};

struct GradCheckSuite {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;
  bool passed() const;
};

/// Every primitive plus the joint loss of a tiny ViT with both flows.
/// Trial 0 checks every coordinate; later trials draw new points and check
/// a random subset.
GradCheckSuite run_gradcheck_suite(std::size_t trials, std::uint64_t seed = 0);

}  // namespace jvit
