#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "dsaa/rng.hpp"
#include "dsaa/tensor.hpp"

namespace dsaa::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0, bool requires_grad = true) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return a.numel() == 0 || std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

struct GradCheck {
  double rel_error = 0;  // worst input, norm-wise
  bool ok(double tol = 1e-4) const { return rel_error < tol; }
};

/// Central differences (step h) against the taped gradient of a scalar loss.
/// Error per input is |g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8) with
/// vector 2-norms.
inline GradCheck grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                            double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = f(inputs);
    tape.backward(loss);
  }
  GradCheck out;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(t.numel());
    auto x = t.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x[i];
      x[i] = keep + h;
      const double up = [&] {
        NoGradGuard g;
        return f(inputs).item();
      }();
      x[i] = keep - h;
      const double down = [&] {
        NoGradGuard g;
        return f(inputs).item();
      }();
      x[i] = keep;
      numeric[i] = (up - down) / (2 * h);
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
    out.rel_error = std::max(out.rel_error, std::sqrt(diff) / denom);
  }
  return out;
}

}  // namespace dsaa::testing
