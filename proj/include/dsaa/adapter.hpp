#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsaa/checkpoint.hpp"
#include "dsaa/encoder.hpp"
#include "dsaa/rng.hpp"
#include "dsaa/tensor.hpp"
#include "dsaa/text.hpp"

namespace dsaa {

struct DsaaConfig {
  std::size_t apa_bottleneck = 16;
  /// 0 means model_dim / 4.
  std::size_t mod_bottleneck = 0;
  double gamma_k = 0.1;
  double gamma_v = 0.1;
  double init_std = 0.02;
  double ln_eps = 1e-5;
  bool use_apa = true;
  bool use_modulator = true;
  /// Also scale K/V of the prefix rows.
  bool modulate_prefix = false;

  void validate(std::size_t model_dim) const;
  std::size_t mod_bottleneck_for(std::size_t model_dim) const {
    return mod_bottleneck ? mod_bottleneck : model_dim / 4;
  }
};

void to_json(nlohmann::json& j, const DsaaConfig& c);
void from_json(const nlohmann::json& j, DsaaConfig& c);

/// Prefix adapter: a + W2 LN(gelu(W1 a)), rescaled to the norm of a.
struct ApaWeights {
  Tensor w1;    // [d x D]
  Tensor w2;    // [D x d]
  Tensor ln_g;  // [d]
  Tensor ln_b;  // [d]
  double ln_eps = 1e-5;

  std::size_t bottleneck() const { return w1.rows(); }
  static ApaWeights init(std::size_t model_dim, std::size_t d, double init_std, Rng& rng);
};

struct ModulatorWeights {
  Tensor wk1;  // [b x D]
  Tensor wk2;  // [D x b]
  Tensor wv1;  // [b x D]
  Tensor wv2;  // [D x b]
  double gamma_k = 0.1;
  double gamma_v = 0.1;

  std::size_t bottleneck() const { return wk1.rows(); }
  static ModulatorWeights init(std::size_t model_dim, std::size_t b, double gamma_k, double gamma_v, double init_std,
                               Rng& rng);
};

/// All trainable parameters of the method.
struct DsaaParams {
  DsaaConfig cfg;
  ApaWeights apa;
  ModulatorWeights mod;

  static DsaaParams init(const DsaaConfig& cfg, std::size_t model_dim, Rng& rng);
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> parameters() const;

  Checkpoint to_checkpoint() const;
  /// Reads the "dsaa/" namespace; cfg must describe matching shapes.
  static DsaaParams from_checkpoint(const Checkpoint& ckpt, const DsaaConfig& cfg, std::size_t model_dim);
};

Tensor apa_prefix(const ApaWeights& w, const Tensor& a);

/// One prefix per attribute position, ascending. embeds are the caption rows.
Tensor build_prefixes(const ApaWeights& w, const Tensor& embeds, const text::AttributeSpanSet& spans);

/// Span-length weighted mean of span prototypes.
Tensor condition_vector(const Tensor& embeds, const text::AttributeSpanSet& spans);

/// 1 + gamma * tanh(W2 gelu(W1 c)), kept strictly inside the gamma band.
ScalePair modulation_scales(const ModulatorWeights& w, const Tensor& c);

}  // namespace dsaa
