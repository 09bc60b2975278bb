#include "dsaa/objectives.hpp"

#include <cmath>
#include <algorithm>
#include <limits>

#include "dsaa/ops.hpp"

namespace dsaa {

void LossWeights::validate() const {
  if (!(tau_cls > 0) || !(tau_attr > 0)) throw std::invalid_argument("losses: temperatures must be positive");
  if (!(lambda_attr >= 0)) throw std::invalid_argument("losses: lambda_attr must be >= 0");
  if (!(lambda_det >= 0) || !(alpha_nce >= 0)) throw std::invalid_argument("losses: weights must be >= 0");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda_det", w.lambda_det}, {"lambda_attr", w.lambda_attr}, {"alpha_nce", w.alpha_nce},
       {"tau_cls", w.tau_cls},       {"tau_attr", w.tau_attr},       {"det_warmup_steps", w.det_warmup_steps}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.lambda_det = j.value("lambda_det", w.lambda_det);
  w.lambda_attr = j.value("lambda_attr", w.lambda_attr);
  w.alpha_nce = j.value("alpha_nce", w.alpha_nce);
  w.tau_cls = j.value("tau_cls", w.tau_cls);
  w.tau_attr = j.value("tau_attr", w.tau_attr);
  w.det_warmup_steps = j.value("det_warmup_steps", w.det_warmup_steps);
}

Tensor bce_loss(const Tensor& logits, const Tensor& targets) {
  for (double y : targets.data()) {
    if (y != 0.0 && y != 1.0) throw std::invalid_argument("bce_loss: target " + std::to_string(y) + " is not 0 or 1");
  }
  return ops::bce_with_logits(logits, targets);
}

Tensor info_nce(const Tensor& sims, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("info_nce: tau must be positive");
  if (sims.rank() != 2 || sims.rows() != sims.cols()) {
    throw DimensionError("info_nce: similarity matrix must be square, got " + shape_str(sims.shape()));
  }
  const std::size_t n = sims.rows();
  Tensor eye = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) eye.mutable_data()[i * n + i] = 1.0;
  Tensor lsm = ops::log_softmax_lastaxis(ops::scale(sims, 1.0 / tau));
  return ops::scale(ops::sum(ops::mul(lsm, eye)), -1.0 / double(n));
}

Tensor cls_loss(const Tensor& logits, const Tensor& targets, const Tensor& sims, const LossWeights& lw) {
  Tensor b = bce_loss(logits, targets);
  if (lw.alpha_nce == 0.0) return b;
  return ops::add(b, ops::scale(info_nce(sims, lw.tau_cls), lw.alpha_nce));
}

namespace {

using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;

// Classic O(n^2 m) potentials method for n <= m. Returns col index per row.
std::vector<std::size_t> solve_rect(const std::vector<std::vector<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0) return {};
  const std::size_t m = a[0].size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::size_t> col(n);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j]) col[p[j] - 1] = j - 1;
  return col;
}

// Optimal cost over a sub-matrix (rows x cols), any orientation.
double sub_optimum(const std::vector<std::vector<double>>& c, const std::vector<std::size_t>& rows,
                   const std::vector<std::size_t>& cols) {
  if (rows.empty() || cols.empty()) return 0.0;
  const bool flip = rows.size() > cols.size();
  const auto& r = flip ? cols : rows;
  const auto& k = flip ? rows : cols;
  std::vector<std::vector<double>> a(r.size(), std::vector<double>(k.size()));
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < k.size(); ++j) a[i][j] = flip ? c[k[j]][r[i]] : c[r[i]][k[j]];
  const auto col = solve_rect(a);
  double total = 0;
  for (std::size_t i = 0; i < r.size(); ++i) total += a[i][col[i]];
  return total;
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> hungarian_match(const Tensor& cost) {
  if (cost.rank() != 2) throw DimensionError("hungarian_match: cost must be a matrix, got " + shape_str(cost.shape()));
  const std::size_t n = cost.rows(), m = cost.cols();
  std::vector<std::vector<double>> c(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double x = cost.at(i, j);
      if (!std::isfinite(x)) throw ContractError("hungarian_match: non-finite cost at (" + std::to_string(i) + ", " +
                                                 std::to_string(j) + ")");
      c[i][j] = x;
    }
  if (n == 0 || m == 0) return {};

  std::vector<std::size_t> all_rows(n), all_cols(m);
  for (std::size_t i = 0; i < n; ++i) all_rows[i] = i;
  for (std::size_t j = 0; j < m; ++j) all_cols[j] = j;
  const double best = sub_optimum(c, all_rows, all_cols);
  const double tol = 1e-9 * std::max(1.0, std::abs(best));
  const std::size_t k = std::min(n, m);

  // Walk rows in order and take the smallest column (or no column) that still
  // admits an optimal completion.
  Pairs out;
  std::vector<char> col_used(m, 0);
  double fixed = 0.0;
  for (std::size_t i = 0; i < n && out.size() < k; ++i) {
    std::vector<std::size_t> rest_rows;
    for (std::size_t r = i + 1; r < n; ++r) rest_rows.push_back(r);
    bool placed = false;
    for (std::size_t j = 0; j < m && !placed; ++j) {
      if (col_used[j]) continue;
      std::vector<std::size_t> rest_cols;
      for (std::size_t q = 0; q < m; ++q)
        if (!col_used[q] && q != j) rest_cols.push_back(q);
      if (out.size() + 1 + std::min(rest_rows.size(), rest_cols.size()) != k) continue;
      if (std::abs(fixed + c[i][j] + sub_optimum(c, rest_rows, rest_cols) - best) <= tol) {
        out.emplace_back(i, j);
        col_used[j] = 1;
        fixed += c[i][j];
        placed = true;
      }
    }
    // Otherwise row i stays unmatched; the remaining rows can still cover k.
  }
  if (out.size() == k) return out;

  // Rounding defeated the walk; take the solver's own assignment.
  out.clear();
  if (n <= m) {
    const auto col = solve_rect(c);
    for (std::size_t i = 0; i < n; ++i) out.emplace_back(i, col[i]);
  } else {
    std::vector<std::vector<double>> t(m, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) t[j][i] = c[i][j];
    const auto row = solve_rect(t);
    for (std::size_t j = 0; j < m; ++j) out.emplace_back(row[j], j);
    std::sort(out.begin(), out.end());
  }
  return out;
}

Tensor det_loss(const PredBoxes& pred, const std::vector<Box>& gt, const LossWeights&) {
  const std::size_t n = pred.logits.defined() ? pred.logits.numel() : 0, g = gt.size();
  if (n > 0 && (pred.boxes.rank() != 2 || pred.boxes.rows() != n || pred.boxes.cols() != 4)) {
    throw DimensionError("det_loss: boxes " + shape_str(pred.boxes.shape()) + " do not match " + std::to_string(n) +
                         " logits");
  }
  const double ln2 = std::log(2.0);
  if (n == 0) return Tensor::scalar(g > 0 ? ln2 : 0.0);
  if (g == 0) return bce_loss(pred.logits, Tensor::zeros(pred.logits.shape()));

  Tensor cost = Tensor::zeros({n, g});
  for (std::size_t i = 0; i < n; ++i) {
    const double z = pred.logits[i];
    const double p = 1.0 / (1.0 + std::exp(-z));
    for (std::size_t j = 0; j < g; ++j) {
      const auto gc = gt[j].coords();
      double l1 = 0;
      for (std::size_t d = 0; d < 4; ++d) l1 += std::abs(pred.boxes.at(i, d) - gc[d]);
      cost.mutable_data()[i * g + j] = l1 / 4.0 + (1.0 - p);
    }
  }
  const auto pairs = hungarian_match(cost);

  std::vector<std::size_t> pred_rows;
  std::vector<double> gt_vals;
  Tensor targets = Tensor::zeros({n});
  for (auto [i, j] : pairs) {
    pred_rows.push_back(i);
    for (double v : gt[j].coords()) gt_vals.push_back(v);
    targets.mutable_data()[i] = 1.0;
  }
  Tensor matched = ops::gather_rows(pred.boxes, pred_rows);
  Tensor loc = ops::mean(ops::abs(ops::sub(matched, Tensor::matrix(pred_rows.size(), 4, gt_vals))));

  // Each unmatched gt is one extra BCE term of ln 2.
  const std::size_t unmatched = g - pairs.size();
  Tensor cls = bce_loss(ops::reshape(pred.logits, {n}), targets);
  if (unmatched > 0) {
    cls = ops::add_scalar(ops::scale(cls, double(n) / double(n + unmatched)),
                          ln2 * double(unmatched) / double(n + unmatched));
  }
  return ops::add(loc, cls);
}

Tensor attr_contrastive(const AttrLogitSet& logits, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("attr_contrastive: tau must be positive");
  if (logits.positives.size() != logits.negatives.size()) {
    throw ContractError("attr_contrastive: positives and negatives lists differ in length");
  }
  const std::size_t M = logits.positives.size();
  if (M == 0) return Tensor::scalar(0.0);
  Tensor acc;
  for (std::size_t m = 0; m < M; ++m) {
    std::vector<Tensor> row = {ops::reshape(logits.positives[m], {1})};
    for (const auto& s : logits.negatives[m]) row.push_back(ops::reshape(s, {1}));
    Tensor v = ops::reshape(ops::concat_rows(row), {row.size()});
    Tensor lsm = ops::log_softmax_lastaxis(ops::scale(v, 1.0 / tau));
    Tensor term = ops::row(ops::reshape(lsm, {row.size(), 1}), 0);
    acc = acc.defined() ? ops::add(acc, term) : term;
  }
  return ops::scale(acc, -1.0 / double(M));
}

bool det_gate_open(const LossWeights& lw, std::size_t step) { return step >= lw.det_warmup_steps; }

Tensor total_loss(const LossParts& parts, const LossWeights& lw, std::size_t step) {
  Tensor total = parts.cls;
  if (parts.attr.defined() && lw.lambda_attr != 0.0) total = ops::add(total, ops::scale(parts.attr, lw.lambda_attr));
  if (det_gate_open(lw, step) && parts.det.defined() && lw.lambda_det != 0.0) {
    total = ops::add(total, ops::scale(parts.det, lw.lambda_det));
  }
  return total;
}

LossLog::LossLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw std::runtime_error("cannot write loss log " + path.string());
}

void LossLog::write(std::size_t step, const std::map<std::string, double>& terms, bool det_gate) {
  nlohmann::json j = {{"step", step}, {"det_gate", det_gate}};
  for (const auto& [k, v] : terms) j[k] = v;
  out_ << j.dump() << '\n';
  out_.flush();
}

std::vector<nlohmann::json> LossLog::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open loss log " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

}  // namespace dsaa
