#pragma once

// Shared test utilities: finite-difference gradient checking against the
// autograd engine, and small fixtures reused across test files.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "xfactor/rng.hpp"
#include "xfactor/tensor.hpp"

namespace testutil {

using xfactor::Rng;
using xfactor::Shape;
using xfactor::Tensor;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(static_cast<size_t>(xfactor::shape_numel(shape)));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(d), true);
}

// Central finite differences on every element of `x` against the autograd
// gradient of the scalar `f(x)`. Relative tolerance with an absolute floor.
struct GradCheckResult {
  double max_rel_err = 0;
  bool ok = true;
};

inline GradCheckResult check_gradient(
    Tensor<double> x, const std::function<Tensor<double>(const Tensor<double>&)>& f,
    double step = 1e-5, double tol = 1e-4) {
  auto loss = f(x);
  if (loss.numel() != 1) throw std::invalid_argument("check_gradient: f must return a scalar");
  xfactor::backward(loss);
  const std::vector<double> grad = x.grad();

  GradCheckResult res;
  auto eval = [&](size_t i, double delta) {
    xfactor::NoGradGuard ng;
    std::vector<double> d = x.data();
    d[i] += delta;
    Tensor<double> xp(x.shape(), std::move(d));
    return static_cast<double>(f(xp).item());
  };
  for (size_t i = 0; i < x.data().size(); ++i) {
    const double fd = (eval(i, step) - eval(i, -step)) / (2.0 * step);
    const double g = grad.empty() ? 0.0 : grad[i];
    const double denom = std::max({std::abs(fd), std::abs(g), 1e-6});
    const double rel = std::abs(fd - g) / denom;
    if (std::abs(fd - g) > 1e-8 && rel > res.max_rel_err) res.max_rel_err = rel;
  }
  res.ok = res.max_rel_err <= tol;
  return res;
}

// Scratch directory fixture for file-writing tests.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("xfactor_tests_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace testutil
