#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsaa/checkpoint.hpp"
#include "dsaa/rng.hpp"
#include "dsaa/tensor.hpp"
#include "dsaa/text.hpp"

namespace dsaa {

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t model_dim = 64;
  std::size_t ff_dim = 128;
  std::size_t max_len = 32;
  std::size_t vocab_size = 0;
  /// 1-based layer indices whose attribute K/V rows get scaled.
  std::vector<std::size_t> modulated_layers = {1, 2, 3, 4};
  double ln_eps = 1e-5;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  bool is_modulated(std::size_t layer) const;
  std::size_t head_dim() const { return model_dim / num_heads; }
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct LayerWeights {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

/// Frozen text encoder parameters. Projections act on row vectors (x * W).
struct EncoderWeights {
  Tensor tok_emb;  // [vocab x D]
  Tensor pos_emb;  // [max_len x D]
  std::vector<LayerWeights> layers;
  Tensor lnf_g, lnf_b;
  bool frozen = true;

  static EncoderWeights init(const EncoderConfig& cfg, Rng& rng);

  /// Every parameter with its checkpoint name ("encoder/...").
  std::vector<std::pair<std::string, Tensor>> named() const;
  void set_frozen(bool flag);

  Checkpoint to_checkpoint(const EncoderConfig& cfg) const;
  /// Rebuilds weights from the "encoder/" namespace; shape mismatches against
  /// cfg raise CheckpointError.
  static EncoderWeights from_checkpoint(const Checkpoint& ckpt, const EncoderConfig& cfg);
};

struct ScalePair {
  Tensor s_k;  // [D]
  Tensor s_v;  // [D]
};

/// K and V of one layer, before and after the modulation hook.
struct KvSnapshot {
  Tensor k_pre, v_pre, k_post, v_post;
};

struct EncodeResult {
  Tensor hidden;  // [(k+L) x D]
  Tensor pooled;  // [D]
  std::vector<KvSnapshot> per_layer_kv;
};

/// Token plus positional embedding; row i uses position offset + i.
Tensor embed(const EncoderWeights& w, const text::TokenSeq& tokens, std::size_t offset = 0);

struct EncodeOptions {
  /// Leading prefix rows, excluded from pooling.
  std::size_t prefix_rows = 0;
  /// 0-based rows of the input to modulate.
  std::vector<std::size_t> attr_rows;
  const ScalePair* scales = nullptr;
  bool record_kv = false;
};

EncodeResult encode(const EncoderWeights& w, const EncoderConfig& cfg, const Tensor& input,
                    const EncodeOptions& opt = {});

}  // namespace dsaa
