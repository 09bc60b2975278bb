#include "dsaa/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <mutex>
#include <thread>

#include "dsaa/log.hpp"
#include "dsaa/ops.hpp"
#include "dsaa/pipeline.hpp"
#include "dsaa/rng.hpp"

namespace dsaa {

// ---------------------------------------------------------------- world

void WorldConfig::validate() const {
  if (categories.empty()) throw std::invalid_argument("world: no categories");
  std::set<std::string> seen(categories.begin(), categories.end());
  if (seen.size() != categories.size()) throw std::invalid_argument("world: duplicate category");
  std::size_t n_attr = 0;
  for (const auto& [type, names] : attributes) {
    if (std::find(kAttributeTypes.begin(), kAttributeTypes.end(), type) == kAttributeTypes.end()) {
      throw std::invalid_argument("world: unknown attribute type '" + type + "'");
    }
    for (const auto& a : names) {
      if (!seen.insert(a).second) throw std::invalid_argument("world: attribute '" + a + "' defined twice");
      ++n_attr;
    }
  }
  if (n_attr == 0) throw std::invalid_argument("world: no attributes");
  if (!(noise_std >= 0)) throw std::invalid_argument("world: noise_std must be >= 0");
  if (!(min_angle_deg >= 0 && min_angle_deg < 90)) throw std::invalid_argument("world: min_angle_deg outside [0, 90)");
}

std::vector<std::string> WorldConfig::vocabulary_words() const {
  std::vector<std::string> words = {"a"};
  for (const auto& c : categories) words.push_back(c);
  for (const auto& t : kAttributeTypes) {
    auto it = attributes.find(t);
    if (it != attributes.end()) words.insert(words.end(), it->second.begin(), it->second.end());
  }
  for (const auto& n : neutral_nouns)
    if (std::find(words.begin(), words.end(), n) == words.end()) words.push_back(n);
  return words;
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"categories", c.categories},         {"attributes", c.attributes},   {"neutral_nouns", c.neutral_nouns},
       {"category_scale", c.category_scale}, {"attribute_scale", c.attribute_scale},
       {"noise_std", c.noise_std},           {"min_angle_deg", c.min_angle_deg}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  c.categories = j.value("categories", c.categories);
  c.attributes = j.value("attributes", c.attributes);
  c.neutral_nouns = j.value("neutral_nouns", c.neutral_nouns);
  c.category_scale = j.value("category_scale", c.category_scale);
  c.attribute_scale = j.value("attribute_scale", c.attribute_scale);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.min_angle_deg = j.value("min_angle_deg", c.min_angle_deg);
}

namespace {

using Vec = std::vector<double>;

double dotv(const Vec& a, const Vec& b) { return std::inner_product(a.begin(), a.end(), b.begin(), 0.0); }

void normalize(Vec& v) {
  const double n = std::sqrt(dotv(v, v));
  if (n > 0)
    for (double& x : v) x /= n;
}

Vec random_unit(std::size_t dim, Rng& rng) {
  Vec v(dim);
  for (double& x : v) x = rng.normal();
  normalize(v);
  return v;
}

double min_angle_deg(const std::vector<const Vec*>& vs) {
  double worst = 180.0;
  for (std::size_t i = 0; i < vs.size(); ++i)
    for (std::size_t j = i + 1; j < vs.size(); ++j) {
      const double c = dotv(*vs[i], *vs[j]) / std::sqrt(dotv(*vs[i], *vs[i]) * dotv(*vs[j], *vs[j]));
      // Collinear in either direction counts.
      const double ang = std::acos(std::clamp(std::abs(c), 0.0, 1.0)) * 180.0 / M_PI;
      worst = std::min(worst, ang);
    }
  return worst;
}

Tensor random_orthogonal(std::size_t n, Rng& rng) {
  std::vector<Vec> cols;
  while (cols.size() < n) {
    Vec v(n);
    for (double& x : v) x = rng.normal();
    for (const auto& c : cols) {
      const double p = dotv(v, c);
      for (std::size_t i = 0; i < n; ++i) v[i] -= p * c[i];
    }
    if (std::sqrt(dotv(v, v)) < 1e-8) continue;
    normalize(v);
    cols.push_back(std::move(v));
  }
  Tensor q = Tensor::zeros({n, n});
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i) q.mutable_data()[i * n + j] = cols[j][i];
  return q;
}

}  // namespace

SyntheticWorld SyntheticWorld::build(const WorldConfig& cfg, std::size_t feature_dim, std::uint64_t seed,
                                     const TextPipeline* text) {
  cfg.validate();
  SyntheticWorld w;
  w.cfg = cfg;
  w.feature_dim = feature_dim;
  Rng proj_rng = Rng::stream(seed, "world/projection");
  w.projection = random_orthogonal(feature_dim, proj_rng);

  if (text) {
    if (text->enc_cfg->model_dim != feature_dim) {
      throw std::invalid_argument("world: feature_dim must equal the text model_dim for aligned categories");
    }
    NoGradGuard guard;
    std::vector<Vec> centroids;
    for (const auto& c : cfg.categories) {
      Vec acc(feature_dim, 0.0);
      std::size_t n = 0;
      for (const auto& [type, names] : cfg.attributes)
        for (const auto& a : names) {
          const auto pooled = text->encode_with(render_caption({a}, c), {}).pooled();
          for (std::size_t i = 0; i < feature_dim; ++i) acc[i] += pooled[i];
          ++n;
        }
      for (double& x : acc) x /= double(n);
      centroids.push_back(std::move(acc));
    }
    Vec mean(feature_dim, 0.0);
    for (const auto& c : centroids)
      for (std::size_t i = 0; i < feature_dim; ++i) mean[i] += c[i] / double(centroids.size());
    for (std::size_t k = 0; k < cfg.categories.size(); ++k) {
      Vec t = centroids[k];
      if (cfg.categories.size() > 1)
        for (std::size_t i = 0; i < feature_dim; ++i) t[i] -= mean[i];
      normalize(t);
      // Pull back through the projection: u = Q^T t.
      Vec u(feature_dim, 0.0);
      for (std::size_t i = 0; i < feature_dim; ++i)
        for (std::size_t j = 0; j < feature_dim; ++j) u[j] += w.projection.at(i, j) * t[i];
      w.category_latent[cfg.categories[k]] = std::move(u);
    }
  } else {
    Rng cat_rng = Rng::stream(seed, "world/categories");
    for (const auto& c : cfg.categories) w.category_latent[c] = random_unit(feature_dim, cat_rng);
  }

  Rng attr_rng = Rng::stream(seed, "world/attributes");
  for (int attempt = 0;; ++attempt) {
    if (attempt == 1000) throw GenerationError("world: could not separate latent vectors by min_angle_deg");
    w.attribute_latent.clear();
    for (const auto& t : kAttributeTypes) {
      auto it = cfg.attributes.find(t);
      if (it == cfg.attributes.end()) continue;
      for (const auto& a : it->second) w.attribute_latent[a] = random_unit(feature_dim, attr_rng);
    }
    std::vector<const Vec*> all;
    for (auto& [k, v] : w.category_latent) all.push_back(&v);
    for (auto& [k, v] : w.attribute_latent) all.push_back(&v);
    if (min_angle_deg(all) > cfg.min_angle_deg) break;
    if (text) {
      std::vector<const Vec*> cats;
      for (auto& [k, v] : w.category_latent) cats.push_back(&v);
      if (min_angle_deg(cats) <= cfg.min_angle_deg) {
        throw GenerationError("world: category latents from the text encoder are closer than min_angle_deg");
      }
    }
  }
  return w;
}

std::string SyntheticWorld::type_of(const std::string& attribute) const {
  for (const auto& [type, names] : cfg.attributes)
    if (std::find(names.begin(), names.end(), attribute) != names.end()) return type;
  throw std::invalid_argument("unknown attribute '" + attribute + "'");
}

std::vector<double> SyntheticWorld::compose(const std::string& category, const std::vector<std::string>& attrs) const {
  Vec f(feature_dim, 0.0);
  const auto& u = category_latent.at(category);
  for (std::size_t i = 0; i < feature_dim; ++i) f[i] += cfg.category_scale * u[i];
  for (const auto& a : attrs) {
    const auto& v = attribute_latent.at(a);
    for (std::size_t i = 0; i < feature_dim; ++i) f[i] += cfg.attribute_scale * v[i];
  }
  return f;
}

Tensor SyntheticWorld::project(const std::vector<double>& feature) const {
  if (feature.size() != feature_dim) {
    throw DimensionError("project: feature of size " + std::to_string(feature.size()) + ", world expects " +
                         std::to_string(feature_dim));
  }
  const std::size_t D = projection.cols();
  std::vector<double> out(D, 0.0);
  for (std::size_t i = 0; i < feature_dim; ++i)
    for (std::size_t j = 0; j < D; ++j) out[j] += feature[i] * projection.at(j, i);
  return Tensor::vector(std::move(out));
}

void to_json(nlohmann::json& j, const SyntheticWorld& w) {
  std::vector<double> q(w.projection.data().begin(), w.projection.data().end());
  j = {{"config", w.cfg},
       {"feature_dim", w.feature_dim},
       {"category_latent", w.category_latent},
       {"attribute_latent", w.attribute_latent},
       {"projection", q}};
}

void from_json(const nlohmann::json& j, SyntheticWorld& w) {
  w.cfg = j.at("config").get<WorldConfig>();
  w.feature_dim = j.at("feature_dim").get<std::size_t>();
  w.category_latent = j.at("category_latent").get<std::map<std::string, Vec>>();
  w.attribute_latent = j.at("attribute_latent").get<std::map<std::string, Vec>>();
  auto q = j.at("projection").get<Vec>();
  if (q.size() != w.feature_dim * w.feature_dim) throw std::runtime_error("world: projection size mismatch");
  w.projection = Tensor::matrix(w.feature_dim, w.feature_dim, std::move(q));
}

// ---------------------------------------------------------------- records

std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::Trivial: return "Trivial";
    case Difficulty::Easy: return "Easy";
    case Difficulty::Medium: return "Medium";
    case Difficulty::Hard: return "Hard";
  }
  return "?";
}

std::string to_string(AttrSubset s) {
  switch (s) {
    case AttrSubset::Color: return "Color";
    case AttrSubset::Material: return "Material";
    case AttrSubset::Pattern: return "Pattern";
    case AttrSubset::Transparency: return "Transparency";
    case AttrSubset::Mixed: return "Mixed";
  }
  return "?";
}

Difficulty difficulty_from_string(const std::string& s) {
  for (auto d : {Difficulty::Trivial, Difficulty::Easy, Difficulty::Medium, Difficulty::Hard})
    if (to_string(d) == s) return d;
  throw std::invalid_argument("unknown difficulty '" + s + "'");
}

AttrSubset attr_subset_from_string(const std::string& s) {
  for (auto a : {AttrSubset::Color, AttrSubset::Material, AttrSubset::Pattern, AttrSubset::Transparency,
                 AttrSubset::Mixed})
    if (to_string(a) == s) return a;
  throw std::invalid_argument("unknown attribute subset '" + s + "'");
}

namespace {

std::string subset_type(AttrSubset s) {
  switch (s) {
    case AttrSubset::Color: return "color";
    case AttrSubset::Material: return "material";
    case AttrSubset::Pattern: return "pattern";
    case AttrSubset::Transparency: return "transparency";
    case AttrSubset::Mixed: return "";
  }
  return "";
}

nlohmann::json box_json(const Box& b) { return {b.x0, b.y0, b.x1, b.y1}; }
Box box_from(const nlohmann::json& j) { return {j.at(0), j.at(1), j.at(2), j.at(3)}; }

}  // namespace

std::vector<std::string> BenchmarkItem::captions() const {
  std::vector<std::string> out = {record.positive};
  out.insert(out.end(), record.negatives.begin(), record.negatives.end());
  return out;
}

void to_json(nlohmann::json& j, const BenchmarkItem& b) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : b.objects) {
    objs.push_back(
        {{"box", box_json(o.box)}, {"category", o.category}, {"attributes", o.attributes}, {"feature", o.feature}});
  }
  nlohmann::json props = nlohmann::json::array();
  for (const auto& p : b.proposals) props.push_back({{"box", box_json(p.box)}, {"feature", p.feature}});
  j = {{"id", b.id},
       {"positive", b.record.positive},
       {"negatives", b.record.negatives},
       {"difficulty", to_string(b.record.difficulty)},
       {"attr_subset", to_string(b.record.attr_subset)},
       {"target", b.record.target},
       {"objects", objs},
       {"proposals", props}};
}

void from_json(const nlohmann::json& j, BenchmarkItem& b) {
  b.id = j.at("id");
  b.record.positive = j.at("positive");
  b.record.negatives = j.at("negatives").get<std::vector<std::string>>();
  b.record.difficulty = difficulty_from_string(j.at("difficulty"));
  b.record.attr_subset = attr_subset_from_string(j.at("attr_subset"));
  b.record.target = j.at("target");
  b.objects.clear();
  for (const auto& o : j.at("objects")) {
    b.objects.push_back({box_from(o.at("box")), o.at("category"), o.at("attributes").get<std::vector<std::string>>(),
                         o.at("feature").get<Vec>()});
  }
  b.proposals.clear();
  for (const auto& p : j.at("proposals")) b.proposals.push_back({box_from(p.at("box")), p.at("feature").get<Vec>()});
}

void GenConfig::validate() const {
  if (train_negatives > 10 || eval_negatives > 10) {
    throw std::invalid_argument("negatives per record must be <= 10 (got train " + std::to_string(train_negatives) +
                                ", eval " + std::to_string(eval_negatives) + ")");
  }
  if (decoys_min > decoys_max) throw std::invalid_argument("decoys_min exceeds decoys_max");
  if (!(jitter_feature_std >= 0)) throw std::invalid_argument("jitter_feature_std must be >= 0");
}

void to_json(nlohmann::json& j, const GenConfig& c) {
  j = {{"train_records", c.train_records},
       {"eval_records_per_subset", c.eval_records_per_subset},
       {"train_negatives", c.train_negatives},
       {"eval_negatives", c.eval_negatives},
       {"jitter_proposals", c.jitter_proposals},
       {"decoys_min", c.decoys_min},
       {"decoys_max", c.decoys_max},
       {"jitter_feature_std", c.jitter_feature_std}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  c.train_records = j.value("train_records", c.train_records);
  c.eval_records_per_subset = j.value("eval_records_per_subset", c.eval_records_per_subset);
  c.train_negatives = j.value("train_negatives", c.train_negatives);
  c.eval_negatives = j.value("eval_negatives", c.eval_negatives);
  c.jitter_proposals = j.value("jitter_proposals", c.jitter_proposals);
  c.decoys_min = j.value("decoys_min", c.decoys_min);
  c.decoys_max = j.value("decoys_max", c.decoys_max);
  c.jitter_feature_std = j.value("jitter_feature_std", c.jitter_feature_std);
}

std::string render_caption(const std::vector<std::string>& attributes, const std::string& category) {
  std::string s = "a";
  for (const auto& a : attributes) s += " " + a;
  return s + " " + category;
}

std::vector<std::string> make_negatives(const SyntheticWorld& world, const SceneInstance& obj, Difficulty d,
                                        AttrSubset subset, std::size_t max_count, std::mt19937_64& rng) {
  const std::string positive = render_caption(obj.attributes, obj.category);
  const std::string only_type = subset_type(subset);
  std::set<std::string> present_types;
  for (const auto& a : obj.attributes) present_types.insert(world.type_of(a));

  std::vector<std::string> pool;
  auto add = [&](const std::vector<std::string>& attrs, const std::string& cat) {
    std::string c = render_caption(attrs, cat);
    if (c != positive && std::find(pool.begin(), pool.end(), c) == pool.end()) pool.push_back(std::move(c));
  };

  switch (d) {
    case Difficulty::Hard:
      for (std::size_t i = 0; i < obj.attributes.size(); ++i) {
        const std::string type = world.type_of(obj.attributes[i]);
        if (!only_type.empty() && type != only_type) continue;
        for (const auto& sib : world.cfg.attributes.at(type)) {
          if (sib == obj.attributes[i]) continue;
          auto attrs = obj.attributes;
          attrs[i] = sib;
          add(attrs, obj.category);
        }
      }
      break;
    case Difficulty::Medium:
      for (std::size_t i = 0; i < obj.attributes.size(); ++i)
        for (const auto& [type, names] : world.cfg.attributes) {
          if (present_types.count(type)) continue;
          for (const auto& a : names) {
            auto attrs = obj.attributes;
            attrs[i] = a;
            add(attrs, obj.category);
          }
        }
      break;
    case Difficulty::Easy: {
      // Every slot changes; types stay distinct within the caption.
      std::vector<std::string> all;
      for (const auto& t : kAttributeTypes) {
        auto it = world.cfg.attributes.find(t);
        if (it != world.cfg.attributes.end()) all.insert(all.end(), it->second.begin(), it->second.end());
      }
      std::vector<std::string> cur(obj.attributes.size());
      std::function<void(std::size_t, std::set<std::string>&)> rec = [&](std::size_t slot, std::set<std::string>& used) {
        if (slot == cur.size()) {
          add(cur, obj.category);
          return;
        }
        for (const auto& a : all) {
          if (std::find(obj.attributes.begin(), obj.attributes.end(), a) != obj.attributes.end()) continue;
          const std::string t = world.type_of(a);
          if (used.count(t)) continue;
          used.insert(t);
          cur[slot] = a;
          rec(slot + 1, used);
          used.erase(t);
        }
      };
      std::set<std::string> used;
      rec(0, used);
      break;
    }
    case Difficulty::Trivial:
      for (const auto& c : world.cfg.categories)
        if (c != obj.category) add(obj.attributes, c);
      break;
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  if (pool.size() > max_count) pool.resize(max_count);
  return pool;
}

namespace {

Box random_box(Rng& rng) {
  const double w = rng.uniform(0.2, 0.4), h = rng.uniform(0.2, 0.4);
  const double x = rng.uniform(0.0, 1.0 - w), y = rng.uniform(0.0, 1.0 - h);
  return {x, y, x + w, y + h};
}

Box jitter_box(const Box& b, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double w = b.x1 - b.x0, h = b.y1 - b.y0;
    Box j{b.x0 + rng.uniform(-0.1, 0.1) * w, b.y0 + rng.uniform(-0.1, 0.1) * h, b.x1 + rng.uniform(-0.1, 0.1) * w,
          b.y1 + rng.uniform(-0.1, 0.1) * h};
    j.x0 = std::clamp(j.x0, 0.0, 1.0);
    j.y0 = std::clamp(j.y0, 0.0, 1.0);
    j.x1 = std::clamp(j.x1, 0.0, 1.0);
    j.y1 = std::clamp(j.y1, 0.0, 1.0);
    const double o = iou(j, b);
    if (j.valid() && o > 0.6 && o < 0.95) return j;
  }
  return b;
}

std::vector<std::string> random_attributes(const SyntheticWorld& world, AttrSubset subset, Rng& rng) {
  std::vector<std::string> types;
  for (const auto& t : kAttributeTypes)
    if (world.cfg.attributes.count(t) && !world.cfg.attributes.at(t).empty()) types.push_back(t);
  std::vector<std::string> chosen;
  const std::string need = subset_type(subset);
  if (!need.empty()) {
    if (!world.cfg.attributes.count(need)) throw GenerationError("world has no '" + need + "' attributes");
    chosen.push_back(need);
  }
  const std::size_t want = std::min<std::size_t>(types.size(), 1 + rng.index(2));
  std::shuffle(types.begin(), types.end(), rng.engine());
  for (const auto& t : types) {
    if (chosen.size() >= want) break;
    if (std::find(chosen.begin(), chosen.end(), t) == chosen.end()) chosen.push_back(t);
  }
  // Caption order follows the canonical type order.
  std::vector<std::string> attrs;
  for (const auto& t : kAttributeTypes) {
    if (std::find(chosen.begin(), chosen.end(), t) == chosen.end()) continue;
    const auto& names = world.cfg.attributes.at(t);
    attrs.push_back(names[rng.index(names.size())]);
  }
  return attrs;
}

Vec noisy(const SyntheticWorld& world, const Vec& base, double stddev, Rng& rng) {
  Vec f = base;
  for (double& x : f) x += rng.normal(0.0, stddev);
  (void)world;
  return f;
}

BenchmarkItem make_item(const SyntheticWorld& world, const GenConfig& cfg, std::size_t id, Difficulty d,
                        AttrSubset subset, std::size_t negatives, bool exact, Rng& rng) {
  BenchmarkItem item;
  item.id = id;
  SceneInstance target;
  target.box = random_box(rng);
  target.category = world.cfg.categories[rng.index(world.cfg.categories.size())];
  target.attributes = random_attributes(world, subset, rng);
  target.feature = noisy(world, world.compose(target.category, target.attributes), world.cfg.noise_std, rng);
  item.objects.push_back(target);

  const std::size_t n_decoys = cfg.decoys_min + rng.index(cfg.decoys_max - cfg.decoys_min + 1);
  for (std::size_t k = 0; k < n_decoys && world.cfg.categories.size() > 1; ++k) {
    SceneInstance dec;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      dec.box = random_box(rng);
      placed = std::all_of(item.objects.begin(), item.objects.end(),
                           [&](const SceneInstance& o) { return iou(o.box, dec.box) < 0.1; });
    }
    if (!placed) continue;
    do {
      dec.category = world.cfg.categories[rng.index(world.cfg.categories.size())];
    } while (dec.category == target.category);
    dec.attributes = random_attributes(world, AttrSubset::Mixed, rng);
    dec.feature = noisy(world, world.compose(dec.category, dec.attributes), world.cfg.noise_std, rng);
    item.objects.push_back(std::move(dec));
  }

  item.proposals.push_back({target.box, target.feature});
  for (std::size_t k = 0; k < cfg.jitter_proposals; ++k) {
    item.proposals.push_back({jitter_box(target.box, rng), noisy(world, target.feature, cfg.jitter_feature_std, rng)});
  }
  for (std::size_t k = 1; k < item.objects.size(); ++k) item.proposals.push_back({item.objects[k].box, item.objects[k].feature});

  item.record.positive = render_caption(target.attributes, target.category);
  item.record.difficulty = d;
  item.record.attr_subset = subset;
  item.record.target = 0;
  item.record.negatives = make_negatives(world, target, d, subset, negatives, rng.engine());
  if (exact && item.record.negatives.size() < negatives) {
    throw GenerationError("record " + std::to_string(id) + " (\"" + item.record.positive + "\"): requested " +
                          std::to_string(negatives) + " " + to_string(d) + " negatives, vocabulary allows only " +
                          std::to_string(item.record.negatives.size()) + " (short by " +
                          std::to_string(negatives - item.record.negatives.size()) + ")");
  }
  return item;
}

}  // namespace

Dataset gen_train(const SyntheticWorld& world, const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset ds{"train", seed, world, {}};
  Rng rng = Rng::stream(seed, "data/train");
  for (std::size_t i = 0; i < cfg.train_records; ++i) {
    ds.items.push_back(make_item(world, cfg, i, Difficulty::Hard, AttrSubset::Mixed, cfg.train_negatives, true, rng));
  }
  return ds;
}

Dataset gen_eval(const SyntheticWorld& world, const GenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset ds{"eval", seed, world, {}};
  Rng rng = Rng::stream(seed, "data/eval");
  std::size_t id = 0;
  for (auto d : {Difficulty::Hard, Difficulty::Medium, Difficulty::Easy, Difficulty::Trivial})
    for (std::size_t i = 0; i < cfg.eval_records_per_subset; ++i)
      ds.items.push_back(make_item(world, cfg, id++, d, AttrSubset::Mixed, cfg.eval_negatives, false, rng));
  for (auto s : {AttrSubset::Color, AttrSubset::Material, AttrSubset::Pattern, AttrSubset::Transparency}) {
    if (!world.cfg.attributes.count(subset_type(s))) continue;
    for (std::size_t i = 0; i < cfg.eval_records_per_subset; ++i)
      ds.items.push_back(make_item(world, cfg, id++, Difficulty::Hard, s, cfg.eval_negatives, false, rng));
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  nlohmann::json header = {{"format", "dsaa-fgovd"},
                           {"version", kDatasetVersion},
                           {"split", ds.split},
                           {"seed", ds.seed},
                           {"records", ds.items.size()},
                           {"world", ds.world}};
  out << header.dump() << '\n';
  for (const auto& it : ds.items) out << nlohmann::json(it).dump() << '\n';
  if (!out) throw std::runtime_error("short write to " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty dataset file");
  Dataset ds;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "dsaa-fgovd") throw std::runtime_error(path.string() + ": not a dataset file");
    if (header.value("version", 0) != kDatasetVersion) {
      throw std::runtime_error(path.string() + ": unsupported dataset version " + header.at("version").dump());
    }
    ds.split = header.at("split");
    ds.seed = header.at("seed");
    ds.world = header.at("world").get<SyntheticWorld>();
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      ds.items.push_back(nlohmann::json::parse(line).get<BenchmarkItem>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  return ds;
}

// ---------------------------------------------------------------- scoring

Tensor score_regions(const std::vector<Tensor>& region_feats, const std::vector<Tensor>& caption_embeds) {
  const std::size_t R = region_feats.size(), C = caption_embeds.size();
  Tensor out = Tensor::zeros({R, C});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const auto& a = region_feats[r];
      const auto& b = caption_embeds[c];
      if (a.numel() != b.numel()) {
        throw DimensionError("score_regions: region " + shape_str(a.shape()) + " vs caption " + shape_str(b.shape()));
      }
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t i = 0; i < a.numel(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
      }
      if (aa == 0 || bb == 0) {
        log::warn("score_regions: zero-norm feature at region " + std::to_string(r) + ", caption " +
                  std::to_string(c) + "; similarity set to 0");
        continue;
      }
      out.mutable_data()[r * C + c] = ab / (std::sqrt(aa) * std::sqrt(bb));
    }
  return out;
}

std::vector<Detection> assign_and_nms(const Tensor& sims, const std::vector<Box>& boxes, double iou_threshold) {
  if (!(iou_threshold > 0 && iou_threshold < 1)) throw std::invalid_argument("NMS IoU threshold must be in (0, 1)");
  if (sims.rank() != 2 || sims.rows() != boxes.size()) {
    throw DimensionError("assign_and_nms: " + shape_str(sims.shape()) + " scores for " + std::to_string(boxes.size()) +
                         " boxes");
  }
  const std::size_t R = boxes.size(), C = sims.cols();
  std::vector<Detection> cand;
  if (C == 0) return cand;
  for (std::size_t r = 0; r < R; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (sims.at(r, c) > sims.at(r, best)) best = c;
    cand.push_back({boxes[r], best, sims.at(r, best)});
  }
  std::vector<std::size_t> order(R);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cand[a].score > cand[b].score; });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(),
                                        [&](const Detection& k) { return iou(k.box, cand[i].box) > iou_threshold; });
    if (!suppressed) kept.push_back(cand[i]);
  }
  return kept;
}

double iou_threshold_at(std::size_t i) { return double(50 + 5 * i) / 100.0; }

std::optional<double> average_precision(const std::vector<std::vector<Detection>>& dets,
                                        const std::vector<std::vector<GroundTruth>>& gts, double thr) {
  if (dets.size() != gts.size()) throw ContractError("average_precision: detections and ground truth differ in images");
  std::set<std::size_t> labels;
  for (const auto& img : gts)
    for (const auto& g : img) labels.insert(g.label);
  if (labels.empty()) return std::nullopt;

  double ap_sum = 0;
  for (std::size_t label : labels) {
    struct Ref {
      double score;
      std::size_t img, idx;
    };
    std::vector<Ref> refs;
    std::size_t n_gt = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      for (const auto& g : gts[i]) n_gt += g.label == label;
      for (std::size_t k = 0; k < dets[i].size(); ++k)
        if (dets[i][k].label == label) refs.push_back({dets[i][k].score, i, k});
    }
    std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
    std::vector<std::vector<char>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), 0);
    std::vector<double> prec, rec;
    std::size_t tp = 0, fp = 0;
    for (const auto& r : refs) {
      const Box& b = dets[r.img][r.idx].box;
      double best = -1;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < gts[r.img].size(); ++g) {
        const auto& gt = gts[r.img][g];
        if (gt.label != label || used[r.img][g]) continue;
        const double o = iou(b, gt.box);
        if (o >= thr && o > best) {
          best = o;
          best_g = g;
        }
      }
      if (best >= 0) {
        used[r.img][best_g] = 1;
        ++tp;
      } else {
        ++fp;
      }
      prec.push_back(double(tp) / double(tp + fp));
      rec.push_back(double(tp) / double(n_gt));
    }
    // Precision envelope, then 101 recall points.
    for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
    double acc = 0;
    for (std::size_t t = 0; t <= 100; ++t) {
      const double r = double(t) / 100.0;
      auto it = std::lower_bound(rec.begin(), rec.end(), r);
      if (it != rec.end()) acc += prec[std::size_t(it - rec.begin())];
    }
    ap_sum += acc / 101.0;
  }
  return ap_sum / double(labels.size());
}

std::optional<double> coco_map(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<GroundTruth>>& gts) {
  double acc = 0;
  for (std::size_t i = 0; i < kIouSteps; ++i) {
    auto ap = average_precision(dets, gts, iou_threshold_at(i));
    if (!ap) return std::nullopt;
    acc += *ap;
  }
  return acc / double(kIouSteps);
}

// ---------------------------------------------------------------- protocol

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cols = nlohmann::json::object();
  for (const auto& name : kReportColumns) {
    auto it = columns.find(name);
    cols[name] = (it != columns.end() && it->second) ? nlohmann::json(*it->second) : nlohmann::json(nullptr);
  }
  return {{"columns", cols}, {"average", average ? nlohmann::json(*average) : nlohmann::json(nullptr)},
          {"metadata", metadata}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  for (const auto& name : kReportColumns) {
    const auto& v = j.at("columns").at(name);
    r.columns[name] = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
  }
  const auto& a = j.at("average");
  r.average = a.is_null() ? std::nullopt : std::optional<double>(a.get<double>());
  r.metadata = j.value("metadata", nlohmann::json::object());
  return r;
}

namespace {

std::size_t worker_count(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(n, jobs));
}

template <class Fn>
void parallel_for(std::size_t jobs, std::size_t workers, Fn fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto body = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  const std::size_t n = worker_count(workers, jobs);
  if (n <= 1) {
    body();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(body);
    for (auto& t : pool) t.join();
  }
  if (err) std::rethrow_exception(err);
}

}  // namespace

std::vector<std::vector<Detection>> detect_all(const Dataset& ds, const Scorer& scorer, const ProtocolOptions& opt) {
  std::vector<std::vector<Detection>> dets(ds.items.size());
  parallel_for(ds.items.size(), opt.workers, [&](std::size_t i) {
    const auto& item = ds.items[i];
    std::vector<Box> boxes;
    for (const auto& p : item.proposals) boxes.push_back(p.box);
    dets[i] = assign_and_nms(scorer(item), boxes, opt.iou_threshold);
  });
  return dets;
}

EvalReport run_protocol(const Dataset& ds, const Scorer& scorer, const ProtocolOptions& opt) {
  const auto dets = detect_all(ds, scorer, opt);
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const auto& r = ds.items[i].record;
    if (r.attr_subset == AttrSubset::Mixed) {
      groups[to_string(r.difficulty)].push_back(i);
    } else {
      groups[r.attr_subset == AttrSubset::Transparency ? "Transp." : to_string(r.attr_subset)].push_back(i);
    }
  }
  EvalReport rep;
  double sum = 0;
  std::size_t present = 0;
  for (const auto& name : kReportColumns) {
    std::vector<std::vector<Detection>> d;
    std::vector<std::vector<GroundTruth>> g;
    for (std::size_t i : groups[name]) {
      d.push_back(dets[i]);
      g.push_back({{ds.items[i].target().box, 0}});
    }
    rep.columns[name] = g.empty() ? std::nullopt : coco_map(d, g);
    if (rep.columns[name]) {
      sum += *rep.columns[name];
      ++present;
    }
  }
  if (present) rep.average = sum / double(present);
  rep.metadata["records"] = ds.items.size();
  rep.metadata["seed"] = ds.seed;
  rep.metadata["iou_threshold"] = opt.iou_threshold;
  return rep;
}

std::map<std::string, Tensor> embed_captions(const Dataset& ds, const TextPipeline& text, std::size_t workers) {
  std::set<std::string> unique;
  for (const auto& it : ds.items)
    for (const auto& c : it.captions()) unique.insert(c);
  std::vector<std::string> list(unique.begin(), unique.end());
  std::vector<Tensor> out(list.size());
  parallel_for(list.size(), workers, [&](std::size_t i) {
    NoGradGuard guard;
    out[i] = text.encode(list[i]).pooled().clone();
  });
  std::map<std::string, Tensor> m;
  for (std::size_t i = 0; i < list.size(); ++i) m.emplace(list[i], out[i]);
  return m;
}

Scorer embedding_scorer(const SyntheticWorld& world, const std::map<std::string, Tensor>& embeds) {
  return [&world, &embeds](const BenchmarkItem& item) {
    std::vector<Tensor> regions, caps;
    for (const auto& p : item.proposals) regions.push_back(world.project(p.feature));
    for (const auto& c : item.captions()) {
      auto it = embeds.find(c);
      if (it == embeds.end()) throw ContractError("no embedding for caption \"" + c + "\"");
      caps.push_back(it->second);
    }
    return score_regions(regions, caps);
  };
}

Scorer oracle_scorer() {
  return [](const BenchmarkItem& item) {
    const std::size_t R = item.proposals.size(), C = 1 + item.record.negatives.size();
    Tensor s = Tensor::zeros({R, C});
    for (std::size_t r = 0; r < R; ++r)
      if (item.proposals[r].box == item.target().box) {
        s.mutable_data()[r * C] = 1.0;
        break;
      }
    return s;
  };
}

}  // namespace dsaa
