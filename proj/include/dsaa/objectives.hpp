#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dsaa/box.hpp"
#include "dsaa/tensor.hpp"

namespace dsaa {

struct LossWeights {
  double lambda_det = 1.0;
  double lambda_attr = 0.5;
  double alpha_nce = 1.0;
  double tau_cls = 0.1;
  double tau_attr = 0.1;
  std::size_t det_warmup_steps = 500;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// Mean binary cross-entropy with logits; targets must be 0 or 1.
Tensor bce_loss(const Tensor& logits, const Tensor& targets);

/// Contrastive loss over an N x N similarity matrix whose diagonal holds the
/// matched pairs.
Tensor info_nce(const Tensor& sims, double tau);

Tensor cls_loss(const Tensor& logits, const Tensor& targets, const Tensor& sims, const LossWeights& lw);

/// Minimum-cost assignment of min(n, m) (row, col) pairs, sorted by row.
/// Among optimal assignments the lexicographically smallest is returned.
std::vector<std::pair<std::size_t, std::size_t>> hungarian_match(const Tensor& cost);

struct PredBoxes {
  Tensor boxes;   // [n x 4]
  Tensor logits;  // [n]
};

/// L1 box regression on matched pairs plus matched/unmatched classification.
/// Matching cost is l1 distance plus (1 - sigmoid(logit)) with weight 1:1.
/// An unmatched ground-truth box counts as one classification term of ln 2.
Tensor det_loss(const PredBoxes& pred, const std::vector<Box>& gt, const LossWeights& lw);

struct AttrLogitSet {
  std::vector<Tensor> positives;               // M one-element tensors
  std::vector<std::vector<Tensor>> negatives;  // M lists of one-element tensors
};

Tensor attr_contrastive(const AttrLogitSet& logits, double tau);

struct LossParts {
  Tensor cls;
  Tensor attr;  // may be undefined (treated as 0)
  Tensor det;   // may be undefined (treated as 0)
};

bool det_gate_open(const LossWeights& lw, std::size_t step);
Tensor total_loss(const LossParts& parts, const LossWeights& lw, std::size_t step);

/// Line-delimited JSON step log: one object per step with each loss term and
/// the detection gate state.
class LossLog {
 public:
  explicit LossLog(const std::filesystem::path& path);
  void write(std::size_t step, const std::map<std::string, double>& terms, bool det_gate);

  static std::vector<nlohmann::json> read(const std::filesystem::path& path);

 private:
  std::ofstream out_;
};

}  // namespace dsaa
