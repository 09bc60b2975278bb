#include "dsaa/adapter.hpp"

#include <cmath>

#include "dsaa/log.hpp"
#include "dsaa/ops.hpp"

namespace dsaa {

void DsaaConfig::validate(std::size_t model_dim) const {
  if (apa_bottleneck < 1 || apa_bottleneck >= model_dim) {
    throw std::invalid_argument("dsaa: apa bottleneck must satisfy 1 <= d < model_dim");
  }
  if (mod_bottleneck_for(model_dim) < 1) throw std::invalid_argument("dsaa: modulator bottleneck must be >= 1");
  if (!(gamma_k > 0) || !(gamma_v > 0)) throw std::invalid_argument("dsaa: gamma_k and gamma_v must be positive");
  if (!(init_std >= 0)) throw std::invalid_argument("dsaa: init_std must be >= 0");
}

void to_json(nlohmann::json& j, const DsaaConfig& c) {
  j = {{"apa_bottleneck", c.apa_bottleneck}, {"mod_bottleneck", c.mod_bottleneck},
       {"gamma_k", c.gamma_k},               {"gamma_v", c.gamma_v},
       {"init_std", c.init_std},             {"ln_eps", c.ln_eps},
       {"use_apa", c.use_apa},               {"use_modulator", c.use_modulator},
       {"modulate_prefix", c.modulate_prefix}};
}

void from_json(const nlohmann::json& j, DsaaConfig& c) {
  c.apa_bottleneck = j.value("apa_bottleneck", c.apa_bottleneck);
  c.mod_bottleneck = j.value("mod_bottleneck", c.mod_bottleneck);
  c.gamma_k = j.value("gamma_k", c.gamma_k);
  c.gamma_v = j.value("gamma_v", c.gamma_v);
  c.init_std = j.value("init_std", c.init_std);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  c.use_apa = j.value("use_apa", c.use_apa);
  c.use_modulator = j.value("use_modulator", c.use_modulator);
  c.modulate_prefix = j.value("modulate_prefix", c.modulate_prefix);
}

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  return t;
}

// W [out x in] applied to a vector v [in]; returns [1 x out].
Tensor apply(const Tensor& w, const Tensor& v) {
  return ops::matmul(ops::reshape(v, {1, v.numel()}), ops::transpose(w));
}

}  // namespace

ApaWeights ApaWeights::init(std::size_t model_dim, std::size_t d, double init_std, Rng& rng) {
  ApaWeights w;
  w.w1 = gaussian({d, model_dim}, init_std, rng);
  w.w2 = Tensor::zeros({model_dim, d}, true);
  w.ln_g = Tensor::full({d}, 1.0, true);
  w.ln_b = Tensor::zeros({d}, true);
  return w;
}

ModulatorWeights ModulatorWeights::init(std::size_t model_dim, std::size_t b, double gamma_k, double gamma_v,
                                        double init_std, Rng& rng) {
  ModulatorWeights w;
  w.wk1 = gaussian({b, model_dim}, init_std, rng);
  w.wk2 = Tensor::zeros({model_dim, b}, true);
  w.wv1 = gaussian({b, model_dim}, init_std, rng);
  w.wv2 = Tensor::zeros({model_dim, b}, true);
  w.gamma_k = gamma_k;
  w.gamma_v = gamma_v;
  return w;
}

DsaaParams DsaaParams::init(const DsaaConfig& cfg, std::size_t model_dim, Rng& rng) {
  cfg.validate(model_dim);
  DsaaParams p;
  p.cfg = cfg;
  p.apa = ApaWeights::init(model_dim, cfg.apa_bottleneck, cfg.init_std, rng);
  p.apa.ln_eps = cfg.ln_eps;
  p.mod = ModulatorWeights::init(model_dim, cfg.mod_bottleneck_for(model_dim), cfg.gamma_k, cfg.gamma_v,
                                 cfg.init_std, rng);
  return p;
}

std::vector<std::pair<std::string, Tensor>> DsaaParams::named() const {
  return {{"dsaa/apa/w1", apa.w1},     {"dsaa/apa/w2", apa.w2},     {"dsaa/apa/ln_g", apa.ln_g},
          {"dsaa/apa/ln_b", apa.ln_b}, {"dsaa/mod/wk1", mod.wk1},   {"dsaa/mod/wk2", mod.wk2},
          {"dsaa/mod/wv1", mod.wv1},   {"dsaa/mod/wv2", mod.wv2}};
}

std::vector<Tensor> DsaaParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named()) out.push_back(t);
  return out;
}

Checkpoint DsaaParams::to_checkpoint() const {
  Checkpoint ck;
  ck.metadata["dsaa"] = cfg;
  for (auto& [n, t] : named()) ck.tensors[n] = t.clone();
  return ck;
}

DsaaParams DsaaParams::from_checkpoint(const Checkpoint& ckpt, const DsaaConfig& cfg, std::size_t model_dim) {
  Rng scratch(0);
  DsaaParams p = init(cfg, model_dim, scratch);
  for (auto& [name, t] : p.named()) {
    const Tensor& src = ckpt.at(name);
    if (src.shape() != t.shape()) {
      throw CheckpointError("tensor " + name + " has shape " + shape_str(src.shape()) + ", config expects " +
                            shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
  return p;
}

Tensor apa_prefix(const ApaWeights& w, const Tensor& a) {
  const std::size_t D = a.numel();
  if (w.w1.cols() != D || w.w2.rows() != D) {
    throw DimensionError("apa_prefix: weights " + shape_str(w.w1.shape()) + "/" + shape_str(w.w2.shape()) +
                         " do not fit input " + shape_str(a.shape()));
  }
  Tensor norm_a = ops::l2_norm(a);
  if (norm_a.item() == 0.0) return a;
  Tensor h = ops::layer_norm(ops::gelu(apply(w.w1, a)), w.ln_g, w.ln_b, w.ln_eps);
  Tensor y = ops::add(ops::reshape(a, {D}), ops::reshape(apply(w.w2, h), {D}));
  Tensor norm_y = ops::l2_norm(y);
  if (norm_y.item() == 0.0) return a;
  return ops::mul_scalar(ops::div_scalar(y, norm_y), norm_a);
}

Tensor build_prefixes(const ApaWeights& w, const Tensor& embeds, const text::AttributeSpanSet& spans) {
  spans.validate(embeds.rows());
  const auto positions = spans.attribute_positions();
  if (positions.empty()) return Tensor::zeros({0, embeds.cols()});
  std::vector<Tensor> rows;
  bool warned = false;
  for (std::size_t p : positions) {
    Tensor a = ops::row(embeds, p - 1);
    if (!warned && ops::l2_norm(a).item() == 0.0) {
      log::warn("attribute embedding with zero norm passed through the prefix adapter unchanged");
      warned = true;
    }
    rows.push_back(apa_prefix(w, a));
  }
  return ops::concat_rows(rows);
}

Tensor condition_vector(const Tensor& embeds, const text::AttributeSpanSet& spans) {
  if (spans.empty()) throw ContractError("condition_vector: no attribute spans");
  spans.validate(embeds.rows());
  Tensor num;
  double total = 0.0;
  for (const auto& s : spans.spans) {
    std::vector<std::size_t> rows;
    for (std::size_t i : s.indices) rows.push_back(i - 1);
    const double wa = double(rows.size());
    Tensor term = ops::scale(ops::mean_rows(ops::gather_rows(embeds, rows)), wa);
    num = num.defined() ? ops::add(num, term) : term;
    total += wa;
  }
  return ops::scale(num, 1.0 / total);
}

namespace {

Tensor band(const Tensor& w1, const Tensor& w2, const Tensor& c, double gamma) {
  const std::size_t D = c.numel();
  Tensor t = ops::tanh(apply(w2, ops::reshape(ops::gelu(apply(w1, c)), {w1.rows()})));
  Tensor s = ops::add_scalar(ops::scale(ops::reshape(t, {D}), gamma), 1.0);
  // tanh rounds to exactly +-1 for large arguments; keep the open interval.
  return ops::clamp(s, std::nextafter(1.0 - gamma, 1.0), std::nextafter(1.0 + gamma, 1.0));
}

}  // namespace

ScalePair modulation_scales(const ModulatorWeights& w, const Tensor& c) {
  if (w.wk1.cols() != c.numel() || w.wv1.cols() != c.numel()) {
    throw DimensionError("modulation_scales: weights " + shape_str(w.wk1.shape()) + " do not fit condition " +
                         shape_str(c.shape()));
  }
  return {band(w.wk1, w.wk2, c, w.gamma_k), band(w.wv1, w.wv2, c, w.gamma_v)};
}

}  // namespace dsaa
