#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsaa/adapter.hpp"
#include "dsaa/harness.hpp"
#include "dsaa/objectives.hpp"
#include "dsaa/pipeline.hpp"

namespace dsaa {

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::string optimizer = "adamw";
  std::size_t checkpoint_interval = 500;
  /// Region-caption cosine that maps to logit 0 in the BCE term.
  double logit_bias = 0.2;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const TrainConfig& cfg);
  void step();
  void zero_grad();
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

struct BatchLosses {
  LossParts parts;
  Tensor total;
  bool det_gate = false;

  std::map<std::string, double> values() const;
};

/// Forward pass of one batch under the gated objective.
BatchLosses batch_losses(const TextPipeline& text, const SyntheticWorld& world,
                         const std::vector<const BenchmarkItem*>& batch, const LossWeights& lw,
                         const TrainConfig& tc, std::size_t step);

/// Indices of the batch used at each step: shuffled epochs from a labeled stream.
class BatchSampler {
 public:
  BatchSampler(std::size_t n_items, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  std::size_t n_, b_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct TrainHooks {
  /// Called after every step with the step index and logged terms.
  std::function<void(std::size_t, const std::map<std::string, double>&, bool)> on_step;
  /// Called every checkpoint_interval steps after the update.
  std::function<void(std::size_t)> on_checkpoint;
};

struct TrainSummary {
  std::vector<double> total_per_step;
  std::size_t steps_run = 0;
};

/// Trains params in place. Encoder weights must be frozen; throws
/// NumericError on a non-finite loss before applying that step's update.
TrainSummary train_dsaa(DsaaParams& params, const TextPipeline& text, const Dataset& train, const LossWeights& lw,
                        const TrainConfig& tc, std::uint64_t seed, const TrainHooks& hooks = {});

enum class Variant { Baseline, ApaOnly, ApaAttr, Full };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

/// Configuration switches for an ablation variant.
void apply_variant(Variant v, DsaaConfig& dc, LossWeights& lw);

}  // namespace dsaa
