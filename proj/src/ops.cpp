#include "dsaa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace dsaa::ops {
namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_single(const Tensor& s, const char* op) {
  if (s.numel() != 1) throw DimensionError(std::string(op) + ": expected one element, got " + shape_str(s.shape()));
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(xd[i]);
  if (should_record({&x})) {
    Tape::active()->record({x}, out, [x, deriv](const Tensor& y) {
      if (!x.requires_grad()) return;
      auto gx = grad_buffer(x);
      auto gy = y.grad();
      auto xv = x.data();
      auto yv = y.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
    });
  }
  return out;
}

double gelu_value(double x) {
  if constexpr (kGeluForm == GeluForm::Exact) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  } else {
    const double k = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
  }
}

double gelu_deriv(double x) {
  if constexpr (kGeluForm == GeluForm::Exact) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
  } else {
    const double k = std::sqrt(2.0 / std::numbers::pi);
    const double u = k * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  auto o = out.mutable_data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = o.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (should_record({&a, &b})) {
    Tape::active()->record({a, b}, out, [a, b, m, k, n](const Tensor& y) {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto ga = grad_buffer(a);
        auto bd2 = b.data();
        // ga += gy * b^T, with b^T materialized so the inner loop is contiguous.
        std::vector<double> bt(k * n);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bd2[p * n + j];
        for (std::size_t i = 0; i < m; ++i) {
          double* garow = ga.data() + i * k;
          const double* grow = gy.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) {
            const double gv = grow[j];
            const double* btrow = bt.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) garow[p] += gv * btrow[p];
          }
        }
      }
      if (b.requires_grad()) {
        auto gb = grad_buffer(b);
        auto ad2 = a.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = gy.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ad2[i * k + p];
            double* gbrow = gb.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  auto o = out.mutable_data();
  auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j * m + i] = ad[i * n + j];
  if (should_record({&a})) {
    Tape::active()->record({a}, out, [a, m, n](const Tensor& y) {
      auto ga = grad_buffer(a);
      auto gy = y.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[j * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (should_record({&a})) {
    Tape::active()->record({a}, out, [a](const Tensor& y) {
      auto ga = grad_buffer(a);
      auto gy = y.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
  if (should_record({&a, &b})) {
    Tape::active()->record({a, b}, out, [a, b](const Tensor& y) {
      auto gy = y.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = grad_buffer(*t);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] - b.data()[i];
  if (should_record({&a, &b})) {
    Tape::active()->record({a, b}, out, [a, b](const Tensor& y) {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto g = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto g = grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
  if (should_record({&a, &b})) {
    Tape::active()->record({a, b}, out, [a, b](const Tensor& y) {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto g = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto g = grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * a.data()[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same(a, b, "div");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] / b.data()[i];
  if (should_record({&a, &b})) {
    Tape::active()->record({a, b}, out, [a, b](const Tensor& y) {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto g = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] / b.data()[i];
      }
      if (b.requires_grad()) {
        auto g = grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double bv = b.data()[i];
          g[i] -= gy[i] * a.data()[i] / (bv * bv);
        }
      }
    });
  }
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor add_row(const Tensor& x, const Tensor& v) {
  require_matrix(x, "add_row");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (v.numel() != n) throw DimensionError("add_row: " + shape_str(v.shape()) + " vs rows of " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = x.data()[i * n + j] + v.data()[j];
  if (should_record({&x, &v})) {
    Tape::active()->record({x, v}, out, [x, v, m, n](const Tensor& y) {
      auto gy = y.grad();
      if (x.requires_grad()) {
        auto g = grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
      if (v.requires_grad()) {
        auto g = grad_buffer(v);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += gy[i * n + j];
      }
    });
  }
  return out;
}

Tensor mul_row(const Tensor& x, const Tensor& v) {
  require_matrix(x, "mul_row");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (v.numel() != n) throw DimensionError("mul_row: " + shape_str(v.shape()) + " vs rows of " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = x.data()[i * n + j] * v.data()[j];
  if (should_record({&x, &v})) {
    Tape::active()->record({x, v}, out, [x, v, m, n](const Tensor& y) {
      auto gy = y.grad();
      if (x.requires_grad()) {
        auto g = grad_buffer(x);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[i * n + j] * v.data()[j];
      }
      if (v.requires_grad()) {
        auto g = grad_buffer(v);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += gy[i * n + j] * x.data()[i * n + j];
      }
    });
  }
  return out;
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  require_single(s, "mul_scalar");
  const double sv = s.data()[0];
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] * sv;
  if (should_record({&x, &s})) {
    Tape::active()->record({x, s}, out, [x, s](const Tensor& y) {
      auto gy = y.grad();
      if (x.requires_grad()) {
        auto g = grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * s.data()[0];
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * x.data()[i];
        grad_buffer(s)[0] += acc;
      }
    });
  }
  return out;
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
  require_single(s, "div_scalar");
  const double sv = s.data()[0];
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] / sv;
  if (should_record({&x, &s})) {
    Tape::active()->record({x, s}, out, [x, s](const Tensor& y) {
      auto gy = y.grad();
      const double sv2 = s.data()[0];
      if (x.requires_grad()) {
        auto g = grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] / sv2;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * x.data()[i];
        grad_buffer(s)[0] -= acc / (sv2 * sv2);
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  return unary(x, gelu_value, [](double v, double) { return gelu_deriv(v); });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (should_record({&x})) {
    Tape::active()->record({x}, out, [x](const Tensor& y) {
      auto g = grad_buffer(x);
      const double gy = y.grad()[0];
      for (double& gi : g) gi += gy;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean_rows(const Tensor& x) {
  require_matrix(x, "mean_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (m == 0) throw ContractError("mean_rows over zero rows");
  Tensor out = Tensor::zeros({n});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j] += x.data()[i * n + j];
  for (double& v : o) v /= static_cast<double>(m);
  if (should_record({&x})) {
    Tape::active()->record({x}, out, [x, m, n](const Tensor& y) {
      auto g = grad_buffer(x);
      auto gy = y.grad();
      const double inv = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[j] * inv;
    });
  }
  return out;
}

Tensor l2_norm(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v * v;
  const double nrm = std::sqrt(acc);
  Tensor out = Tensor::scalar(nrm);
  if (should_record({&x})) {
    Tape::active()->record({x}, out, [x, nrm](const Tensor& y) {
      if (nrm == 0.0) return;
      auto g = grad_buffer(x);
      const double gy = y.grad()[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy * x.data()[i] / nrm;
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = x.cols();
  const std::size_t m = n == 0 ? 0 : x.numel() / n;
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(m);
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      o[i * n + j] = xhat[i * n + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  if (should_record({&x, &gamma, &beta})) {
    Tape::active()->record(
        {x, gamma, beta}, out,
        [x, gamma, beta, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor& y) {
          auto gy = y.grad();
          if (gamma.requires_grad()) {
            auto g = grad_buffer(gamma);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) g[j] += gy[i * n + j] * xhat[i * n + j];
          }
          if (beta.requires_grad()) {
            auto g = grad_buffer(beta);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) g[j] += gy[i * n + j];
          }
          if (x.requires_grad()) {
            auto g = grad_buffer(x);
            std::vector<double> dxhat(n);
            for (std::size_t i = 0; i < m; ++i) {
              double mean_d = 0.0, mean_dx = 0.0;
              for (std::size_t j = 0; j < n; ++j) {
                dxhat[j] = gy[i * n + j] * gamma.data()[j];
                mean_d += dxhat[j];
                mean_dx += dxhat[j] * xhat[i * n + j];
              }
              mean_d /= static_cast<double>(n);
              mean_dx /= static_cast<double>(n);
              for (std::size_t j = 0; j < n; ++j) {
                g[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
              }
            }
          }
        });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, double eps) {
  const std::size_t n = x.cols();
  return layer_norm(x, Tensor::full({n}, 1.0), Tensor::zeros({n}), eps);
}

Tensor softmax_lastaxis(const Tensor& x) {
  const std::size_t n = x.cols();
  const std::size_t m = n == 0 ? 0 : x.numel() / n;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[i * n + j] = std::exp(row[j] - mx);
      z += o[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] /= z;
  }
  if (should_record({&x})) {
    Tape::active()->record({x}, out, [x, m, n](const Tensor& y) {
      auto g = grad_buffer(x);
      auto gy = y.grad();
      auto yv = y.data();
      for (std::size_t i = 0; i < m; ++i) {
        double dotp = 0.0;
        for (std::size_t j = 0; j < n; ++j) dotp += gy[i * n + j] * yv[i * n + j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += yv[i * n + j] * (gy[i * n + j] - dotp);
      }
    });
  }
  return out;
}

Tensor log_softmax_lastaxis(const Tensor& x) {
  const std::size_t n = x.cols();
  const std::size_t m = n == 0 ? 0 : x.numel() / n;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = row[j] - lse;
  }
  if (should_record({&x})) {
    Tape::active()->record({x}, out, [x, m, n](const Tensor& y) {
      auto g = grad_buffer(x);
      auto gy = y.grad();
      auto yv = y.data();
      for (std::size_t i = 0; i < m; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += gy[i * n + j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[i * n + j] - std::exp(yv[i * n + j]) * total;
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.rank() > 2 || p.cols() != n) {
      throw DimensionError("concat_rows: part " + shape_str(p.shape()) + " does not have " + std::to_string(n) +
                           " columns");
    }
    m += p.rank() == 2 ? p.shape()[0] : 1;
  }
  std::vector<double> values;
  values.reserve(m * n);
  bool record = false;
  for (const auto& p : parts) {
    values.insert(values.end(), p.data().begin(), p.data().end());
    record = record || p.requires_grad();
  }
  Tensor out = Tensor::matrix(m, n, std::move(values));
  if (record && Tape::active() != nullptr) {
    Tape::active()->record(parts, out, [parts](const Tensor& y) {
      auto gy = y.grad();
      std::size_t offset = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          auto g = grad_buffer(p);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  bool record = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch " + shape_str(p.shape()));
    n += p.cols();
    record = record || p.requires_grad();
  }
  Tensor out = Tensor::zeros({m, n});
  auto o = out.mutable_data();
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pc; ++j) o[i * n + c0 + j] = p.data()[i * pc + j];
    c0 += pc;
  }
  if (record && Tape::active() != nullptr) {
    Tape::active()->record(parts, out, [parts, m, n](const Tensor& y) {
      auto gy = y.grad();
      std::size_t c = 0;
      for (const auto& p : parts) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          auto g = grad_buffer(p);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += gy[i * n + c + j];
        }
        c += pc;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  const std::size_t n = x.shape()[1];
  if (begin > end || end > x.shape()[0]) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                         shape_str(x.shape()));
  }
  std::vector<double> values(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                             x.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  Tensor out = Tensor::matrix(end - begin, n, std::move(values));
  if (should_record({&x})) {
    Tape::active()->record({x}, out, [x, begin, n](const Tensor& y) {
      auto g = grad_buffer(x);
      auto gy = y.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) g[begin * n + i] += gy[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_cols");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (begin > end || end > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                         shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out = Tensor::zeros({m, w});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) o[i * w + j] = x.data()[i * n + begin + j];
  if (should_record({&x})) {
    Tape::active()->record({x}, out, [x, m, n, begin, w](const Tensor& y) {
      auto g = grad_buffer(x);
      auto gy = y.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += gy[i * w + j];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  require_matrix(x, "gather_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out = Tensor::zeros({rows.size(), n});
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " out of " + shape_str(x.shape()));
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] = x.data()[rows[r] * n + j];
  }
  if (should_record({&x})) {
    Tape::active()->record({x}, out, [x, rows, n](const Tensor& y) {
      auto g = grad_buffer(x);
      auto gy = y.grad();
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) g[rows[r] * n + j] += gy[r * n + j];
    });
  }
  return out;
}

Tensor row(const Tensor& x, std::size_t r) {
  require_matrix(x, "row");
  return reshape(slice_rows(x, r, r + 1), {x.shape()[1]});
}

Tensor modulate_rows(const Tensor& x, const std::vector<std::size_t>& rows, const Tensor& s) {
  require_matrix(x, "modulate_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (s.numel() != n) {
    throw DimensionError("modulate_rows: scale " + shape_str(s.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  for (std::size_t r : rows) {
    if (r >= m) throw DimensionError("modulate_rows: row " + std::to_string(r) + " out of " + shape_str(x.shape()));
  }
  Tensor out = x.clone();
  auto o = out.mutable_data();
  for (std::size_t r : rows)
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] = x.data()[r * n + j] * s.data()[j];
  if (should_record({&x, &s})) {
    Tape::active()->record({x, s}, out, [x, s, rows, m, n](const Tensor& y) {
      auto gy = y.grad();
      std::vector<char> hit(m, 0);
      for (std::size_t r : rows) hit[r] = 1;
      if (x.requires_grad()) {
        auto g = grad_buffer(x);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += hit[i] ? gy[i * n + j] * s.data()[j] : gy[i * n + j];
      }
      if (s.requires_grad()) {
        auto g = grad_buffer(s);
        for (std::size_t r : rows)
          for (std::size_t j = 0; j < n; ++j) g[j] += gy[r * n + j] * x.data()[r * n + j];
      }
    });
  }
  return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same(logits, targets, "bce_with_logits");
  if (logits.numel() == 0) throw ContractError("bce_with_logits on empty input");
  for (double t : targets.data()) {
    if (t != 0.0 && t != 1.0) throw ContractError("bce_with_logits: targets must be 0 or 1, got " + std::to_string(t));
  }
  const std::size_t n = logits.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.data()[i];
    acc += std::max(z, 0.0) - z * targets.data()[i] + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  if (should_record({&logits})) {
    Tape::active()->record({logits}, out, [logits, targets, n](const Tensor& y) {
      auto g = grad_buffer(logits);
      const double gy = y.grad()[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double z = logits.data()[i];
        const double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        g[i] += gy * (sig - targets.data()[i]);
      }
    });
  }
  return out;
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

Tensor cosine(const Tensor& a, const Tensor& b, double eps) {
  require_same(a, b, "cosine");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    ab += a.data()[i] * b.data()[i];
    aa += a.data()[i] * a.data()[i];
    bb += b.data()[i] * b.data()[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const bool degenerate = na * nb <= eps;
  const double c = degenerate ? 0.0 : ab / (na * nb);
  Tensor out = Tensor::scalar(c);
  if (should_record({&a, &b})) {
    Tape::active()->record({a, b}, out, [a, b, na, nb, c, degenerate](const Tensor& y) {
      if (degenerate) return;
      const double gy = y.grad()[0];
      if (a.requires_grad()) {
        auto g = grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += gy * (b.data()[i] / (na * nb) - c * a.data()[i] / (na * na));
      }
      if (b.requires_grad()) {
        auto g = grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += gy * (a.data()[i] / (na * nb) - c * b.data()[i] / (nb * nb));
      }
    });
  }
  return out;
}

}  // namespace dsaa::ops
