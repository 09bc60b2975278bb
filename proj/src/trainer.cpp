#include "dsaa/trainer.hpp"

#include <cmath>
#include <numeric>

#include "dsaa/ops.hpp"

namespace dsaa {

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("training: batch_size must be positive");
  if (!(lr > 0)) throw std::invalid_argument("training: learning rate must be positive");
  if (!(weight_decay >= 0)) throw std::invalid_argument("training: weight_decay must be >= 0");
  if (optimizer != "adamw") throw std::invalid_argument("training: unsupported optimizer '" + optimizer + "'");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},       {"batch_size", c.batch_size},
       {"lr", c.lr},             {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},       {"beta2", c.beta2},
       {"eps", c.eps},           {"optimizer", c.optimizer},
       {"checkpoint_interval", c.checkpoint_interval}, {"logit_bias", c.logit_bias}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.logit_bias = j.value("logit_bias", c.logit_bias);
}

AdamW::AdamW(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)), lr_(cfg.lr), wd_(cfg.weight_decay), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    // Parameters outside the active graph (a disabled stage) stay put.
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto x = p.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * g[i];
      v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * g[i] * g[i];
      const double mh = m_[k][i] / c1, vh = v_[k][i] / c2;
      x[i] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * x[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::map<std::string, double> BatchLosses::values() const {
  std::map<std::string, double> v = {{"cls", parts.cls.item()}, {"total", total.item()}};
  v["attr"] = parts.attr.defined() ? parts.attr.item() : 0.0;
  v["det"] = parts.det.defined() ? parts.det.item() : 0.0;
  return v;
}

BatchLosses batch_losses(const TextPipeline& text, const SyntheticWorld& world,
                         const std::vector<const BenchmarkItem*>& batch, const LossWeights& lw, const TrainConfig& tc,
                         std::size_t step) {
  const std::size_t N = batch.size();
  if (N == 0) throw ContractError("batch_losses: empty batch");
  const double inv_tau = 1.0 / lw.tau_cls;
  auto logit = [&](const Tensor& cos) { return ops::scale(ops::add_scalar(cos, -tc.logit_bias), inv_tau); };

  std::vector<Tensor> regions;
  std::vector<CaptionEncoding> pos;
  std::vector<Tensor> logits;
  std::vector<double> targets;
  AttrLogitSet attr;
  const bool want_attr = lw.lambda_attr != 0.0;
  for (const auto* item : batch) {
    Tensor r = world.project(item->target().feature);
    regions.push_back(r);
    CaptionEncoding p = text.encode(item->record.positive);
    logits.push_back(logit(ops::cosine(r, p.pooled())));
    targets.push_back(1.0);
    std::vector<Tensor> neg_attr;
    for (const auto& neg : item->record.negatives) {
      CaptionEncoding n = text.encode(neg);
      logits.push_back(logit(ops::cosine(r, n.pooled())));
      targets.push_back(0.0);
      if (want_attr && n.attr_mean.defined()) neg_attr.push_back(ops::cosine(r, n.attr_mean));
    }
    if (want_attr && p.attr_mean.defined()) {
      attr.positives.push_back(ops::cosine(r, p.attr_mean));
      attr.negatives.push_back(std::move(neg_attr));
    }
    pos.push_back(std::move(p));
  }

  std::vector<Tensor> sims;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) sims.push_back(ops::cosine(regions[i], pos[j].pooled()));
  Tensor S = ops::reshape(ops::concat_rows(sims), {N, N});
  Tensor L = ops::reshape(ops::concat_rows(logits), {logits.size()});
  Tensor T = Tensor::vector(targets);

  BatchLosses out;
  out.parts.cls = cls_loss(L, T, S, lw);
  if (want_attr) out.parts.attr = attr_contrastive(attr, lw.tau_attr);
  out.det_gate = det_gate_open(lw, step);
  if (out.det_gate && lw.lambda_det != 0.0) {
    Tensor acc;
    for (std::size_t b = 0; b < N; ++b) {
      const auto& item = *batch[b];
      std::vector<Tensor> plogits;
      std::vector<double> coords;
      for (const auto& prop : item.proposals) {
        plogits.push_back(logit(ops::cosine(world.project(prop.feature), pos[b].pooled())));
        for (double c : prop.box.coords()) coords.push_back(c);
      }
      PredBoxes pred{Tensor::matrix(item.proposals.size(), 4, coords),
                     ops::reshape(ops::concat_rows(plogits), {plogits.size()})};
      Tensor d = det_loss(pred, {item.target().box}, lw);
      acc = acc.defined() ? ops::add(acc, d) : d;
    }
    out.parts.det = ops::scale(acc, 1.0 / double(N));
  }
  out.total = total_loss(out.parts, lw, step);
  return out;
}

BatchSampler::BatchSampler(std::size_t n_items, std::size_t batch_size, std::uint64_t seed)
    : n_(n_items), b_(batch_size), rng_(Rng::stream(seed, "train/order")), order_(n_items) {
  if (n_ == 0) throw std::invalid_argument("training set is empty");
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_.engine());
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  while (out.size() < std::min(b_, n_)) {
    if (pos_ == n_) {
      std::shuffle(order_.begin(), order_.end(), rng_.engine());
      pos_ = 0;
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

TrainSummary train_dsaa(DsaaParams& params, const TextPipeline& text, const Dataset& train, const LossWeights& lw,
                        const TrainConfig& tc, std::uint64_t seed, const TrainHooks& hooks) {
  tc.validate();
  lw.validate();
  if (!text.encoder->frozen) throw ContractError("train_dsaa: encoder weights must be frozen");
  if (text.dsaa != &params) throw ContractError("train_dsaa: pipeline does not use the parameters being trained");
  AdamW opt(params.parameters(), tc);
  BatchSampler sampler(train.items.size(), tc.batch_size, seed);
  TrainSummary summary;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::vector<const BenchmarkItem*> batch;
    for (std::size_t i : sampler.next()) batch.push_back(&train.items[i]);
    Tape tape;
    BatchLosses bl = batch_losses(text, train.world, batch, lw, tc, step);
    const auto values = bl.values();
    for (const auto& [k, v] : values) {
      if (!std::isfinite(v)) throw NumericError("non-finite " + k + " loss at step " + std::to_string(step));
    }
    opt.zero_grad();
    tape.backward(bl.total);
    opt.step();
    summary.total_per_step.push_back(values.at("total"));
    summary.steps_run = step + 1;
    if (hooks.on_step) hooks.on_step(step, values, bl.det_gate);
    if (hooks.on_checkpoint && tc.checkpoint_interval && (step + 1) % tc.checkpoint_interval == 0) {
      hooks.on_checkpoint(step + 1);
    }
  }
  return summary;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::ApaOnly: return "apa";
    case Variant::ApaAttr: return "apa_attr";
    case Variant::Full: return "full";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::Baseline, Variant::ApaOnly, Variant::ApaAttr, Variant::Full})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown variant '" + s + "' (baseline, apa, apa_attr, full)");
}

void apply_variant(Variant v, DsaaConfig& dc, LossWeights& lw) {
  switch (v) {
    case Variant::Baseline:
    case Variant::Full:
      dc.use_apa = true;
      dc.use_modulator = true;
      break;
    case Variant::ApaOnly:
      dc.use_apa = true;
      dc.use_modulator = false;
      lw.lambda_attr = 0.0;
      break;
    case Variant::ApaAttr:
      dc.use_apa = true;
      dc.use_modulator = false;
      break;
  }
}

}  // namespace dsaa
