#include "dsaa/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "dsaa/ops.hpp"

namespace dsaa {

void EncoderConfig::validate() const {
  if (model_dim == 0 || num_heads == 0) throw std::invalid_argument("encoder: model_dim and num_heads must be positive");
  if (model_dim % num_heads != 0) {
    throw std::invalid_argument("encoder: model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                                std::to_string(num_heads));
  }
  if (ff_dim == 0 || max_len == 0) throw std::invalid_argument("encoder: ff_dim and max_len must be positive");
  if (vocab_size == 0) throw std::invalid_argument("encoder: vocab_size must be positive");
  for (std::size_t l : modulated_layers) {
    if (l < 1 || l > num_layers) {
      throw std::invalid_argument("encoder: modulated layer " + std::to_string(l) + " outside [1, " +
                                  std::to_string(num_layers) + "]");
    }
  }
  if (!std::is_sorted(modulated_layers.begin(), modulated_layers.end()) ||
      std::adjacent_find(modulated_layers.begin(), modulated_layers.end()) != modulated_layers.end()) {
    throw std::invalid_argument("encoder: modulated_layers must be sorted and distinct");
  }
  if (!(ln_eps > 0)) throw std::invalid_argument("encoder: ln_eps must be positive");
}

bool EncoderConfig::is_modulated(std::size_t layer) const {
  return std::binary_search(modulated_layers.begin(), modulated_layers.end(), layer);
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"num_layers", c.num_layers}, {"num_heads", c.num_heads},   {"model_dim", c.model_dim},
       {"ff_dim", c.ff_dim},         {"max_len", c.max_len},       {"vocab_size", c.vocab_size},
       {"modulated_layers", c.modulated_layers}, {"ln_eps", c.ln_eps}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.max_len = j.value("max_len", c.max_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.modulated_layers = j.value("modulated_layers", c.modulated_layers);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
}

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor proj(std::size_t in, std::size_t out, Rng& rng) { return gaussian({in, out}, 1.0 / std::sqrt(double(in)), rng); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::add_row(ops::matmul(x, w), b); }

}  // namespace

EncoderWeights EncoderWeights::init(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t D = cfg.model_dim, F = cfg.ff_dim;
  EncoderWeights w;
  w.tok_emb = gaussian({cfg.vocab_size, D}, 1.0, rng);
  w.pos_emb = gaussian({cfg.max_len, D}, 1.0, rng);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    LayerWeights lw;
    lw.ln1_g = Tensor::full({D}, 1.0);
    lw.ln1_b = Tensor::zeros({D});
    lw.wq = proj(D, D, rng);
    lw.bq = Tensor::zeros({D});
    lw.wk = proj(D, D, rng);
    lw.bk = Tensor::zeros({D});
    lw.wv = proj(D, D, rng);
    lw.bv = Tensor::zeros({D});
    lw.wo = proj(D, D, rng);
    lw.bo = Tensor::zeros({D});
    lw.ln2_g = Tensor::full({D}, 1.0);
    lw.ln2_b = Tensor::zeros({D});
    lw.w_ff1 = proj(D, F, rng);
    lw.b_ff1 = Tensor::zeros({F});
    lw.w_ff2 = proj(F, D, rng);
    lw.b_ff2 = Tensor::zeros({D});
    w.layers.push_back(std::move(lw));
  }
  w.lnf_g = Tensor::full({D}, 1.0);
  w.lnf_b = Tensor::zeros({D});
  return w;
}

std::vector<std::pair<std::string, Tensor>> EncoderWeights::named() const {
  std::vector<std::pair<std::string, Tensor>> out = {{"encoder/tok_emb", tok_emb}, {"encoder/pos_emb", pos_emb}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lw = layers[l];
    const std::string p = "encoder/layer" + std::to_string(l + 1) + "/";
    for (auto& [n, t] : std::vector<std::pair<const char*, const Tensor*>>{
             {"ln1_g", &lw.ln1_g}, {"ln1_b", &lw.ln1_b}, {"wq", &lw.wq},       {"bq", &lw.bq},
             {"wk", &lw.wk},       {"bk", &lw.bk},       {"wv", &lw.wv},       {"bv", &lw.bv},
             {"wo", &lw.wo},       {"bo", &lw.bo},       {"ln2_g", &lw.ln2_g}, {"ln2_b", &lw.ln2_b},
             {"w_ff1", &lw.w_ff1}, {"b_ff1", &lw.b_ff1}, {"w_ff2", &lw.w_ff2}, {"b_ff2", &lw.b_ff2}}) {
      out.emplace_back(p + n, *t);
    }
  }
  out.emplace_back("encoder/lnf_g", lnf_g);
  out.emplace_back("encoder/lnf_b", lnf_b);
  return out;
}

void EncoderWeights::set_frozen(bool flag) {
  frozen = flag;
  for (auto& [name, t] : named()) {
    Tensor h = t;
    h.set_requires_grad(!flag);
  }
}

Checkpoint EncoderWeights::to_checkpoint(const EncoderConfig& cfg) const {
  Checkpoint ck;
  ck.metadata["encoder"] = cfg;
  for (auto& [name, t] : named()) ck.tensors[name] = t.clone();
  return ck;
}

EncoderWeights EncoderWeights::from_checkpoint(const Checkpoint& ckpt, const EncoderConfig& cfg) {
  cfg.validate();
  Rng scratch(0);
  EncoderWeights w = init(cfg, scratch);
  for (auto& [name, t] : w.named()) {
    const Tensor& src = ckpt.at(name);
    if (src.shape() != t.shape()) {
      throw CheckpointError("tensor " + name + " has shape " + shape_str(src.shape()) + ", config expects " +
                            shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
  return w;
}

Tensor embed(const EncoderWeights& w, const text::TokenSeq& tokens, std::size_t offset) {
  const std::size_t L = tokens.length(), D = w.tok_emb.cols();
  if (offset + L > w.pos_emb.rows()) {
    throw ContractError("embed: " + std::to_string(offset + L) + " positions exceed max_len " +
                        std::to_string(w.pos_emb.rows()));
  }
  std::vector<std::size_t> ids, pos;
  for (std::size_t i = 0; i < L; ++i) {
    const int id = tokens.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= w.tok_emb.rows()) {
      throw ContractError("embed: token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(w.tok_emb.rows()));
    }
    ids.push_back(static_cast<std::size_t>(id));
    pos.push_back(offset + i);
  }
  if (L == 0) return Tensor::zeros({0, D});
  return ops::add(ops::gather_rows(w.tok_emb, ids), ops::gather_rows(w.pos_emb, pos));
}

EncodeResult encode(const EncoderWeights& w, const EncoderConfig& cfg, const Tensor& input, const EncodeOptions& opt) {
  const std::size_t D = cfg.model_dim;
  if (input.rank() != 2 || input.cols() != D) {
    throw DimensionError("encode: input " + shape_str(input.shape()) + " is not [n x " + std::to_string(D) + "]");
  }
  const std::size_t n = input.rows();
  if (n > cfg.max_len) {
    throw ContractError("encode: " + std::to_string(n) + " rows exceed max_len " + std::to_string(cfg.max_len));
  }
  if (opt.prefix_rows > n) throw ContractError("encode: more prefix rows than input rows");
  for (std::size_t r : opt.attr_rows) {
    if (r >= n) throw ContractError("encode: attribute row " + std::to_string(r) + " outside input");
  }
  if (opt.scales) {
    for (const Tensor* s : {&opt.scales->s_k, &opt.scales->s_v}) {
      if (s->numel() != D) {
        throw ContractError("encode: scale vector " + shape_str(s->shape()) + " does not match model_dim " +
                            std::to_string(D));
      }
    }
  }
  const bool modulate = opt.scales != nullptr && !opt.attr_rows.empty();

  EncodeResult res;
  Tensor x = input;
  const std::size_t H = cfg.num_heads, dh = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    Tensor h = ops::layer_norm(x, lw.ln1_g, lw.ln1_b, cfg.ln_eps);
    Tensor q = linear(h, lw.wq, lw.bq);
    Tensor k = linear(h, lw.wk, lw.bk);
    Tensor v = linear(h, lw.wv, lw.bv);
    KvSnapshot snap;
    if (opt.record_kv) {
      snap.k_pre = k.clone();
      snap.v_pre = v.clone();
    }
    if (modulate && cfg.is_modulated(l + 1)) {
      k = ops::modulate_rows(k, opt.attr_rows, opt.scales->s_k);
      v = ops::modulate_rows(v, opt.attr_rows, opt.scales->s_v);
    }
    if (opt.record_kv) {
      snap.k_post = k.clone();
      snap.v_post = v.clone();
      res.per_layer_kv.push_back(std::move(snap));
    }
    std::vector<Tensor> heads;
    heads.reserve(H);
    for (std::size_t hh = 0; hh < H; ++hh) {
      Tensor qh = ops::slice_cols(q, hh * dh, (hh + 1) * dh);
      Tensor kh = ops::slice_cols(k, hh * dh, (hh + 1) * dh);
      Tensor vh = ops::slice_cols(v, hh * dh, (hh + 1) * dh);
      Tensor att = ops::softmax_lastaxis(ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt));
      heads.push_back(ops::matmul(att, vh));
    }
    x = ops::add(x, linear(ops::concat_cols(heads), lw.wo, lw.bo));
    Tensor f = ops::layer_norm(x, lw.ln2_g, lw.ln2_b, cfg.ln_eps);
    x = ops::add(x, linear(ops::gelu(linear(f, lw.w_ff1, lw.b_ff1)), lw.w_ff2, lw.b_ff2));
  }
  // An empty stack is the identity map.
  res.hidden = cfg.num_layers == 0 ? x : ops::layer_norm(x, w.lnf_g, w.lnf_b, cfg.ln_eps);
  if (n > opt.prefix_rows) {
    res.pooled = ops::mean_rows(ops::slice_rows(res.hidden, opt.prefix_rows, n));
  } else {
    res.pooled = Tensor::zeros({D});
  }
  return res;
}

}  // namespace dsaa
