#include "dsaa/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "dsaa/digest.hpp"

namespace dsaa {

nlohmann::json RunConfig::to_json() const {
  return {{"seed", seed},
          {"encoder", encoder},
          {"dsaa", dsaa},
          {"losses", losses},
          {"training", training},
          {"world", world},
          {"data", data},
          {"extraction",
           {{"mode", extraction.mode},
            {"endpoint", extraction.endpoint},
            {"lexicon_path", extraction.lexicon_path},
            {"prompt_template", extraction.prompt_template},
            {"timeout_ms", extraction.timeout_ms},
            {"retries", extraction.retries},
            {"max_connections", extraction.max_connections}}},
          {"paths", {{"data_dir", paths.data_dir}, {"out_dir", paths.out_dir}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {"seed", "encoder", "dsaa",       "losses", "training",
                                              "world", "data",   "extraction", "paths"};
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown config key '" + k + "'");
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("encoder")) dsaa::from_json(j.at("encoder"), c.encoder);
    if (j.contains("dsaa")) dsaa::from_json(j.at("dsaa"), c.dsaa);
    if (j.contains("losses")) dsaa::from_json(j.at("losses"), c.losses);
    if (j.contains("training")) dsaa::from_json(j.at("training"), c.training);
    if (j.contains("world")) dsaa::from_json(j.at("world"), c.world);
    if (j.contains("data")) dsaa::from_json(j.at("data"), c.data);
    if (j.contains("extraction")) {
      const auto& e = j.at("extraction");
      c.extraction.mode = e.value("mode", c.extraction.mode);
      c.extraction.endpoint = e.value("endpoint", c.extraction.endpoint);
      c.extraction.lexicon_path = e.value("lexicon_path", c.extraction.lexicon_path);
      c.extraction.prompt_template = e.value("prompt_template", c.extraction.prompt_template);
      c.extraction.timeout_ms = e.value("timeout_ms", c.extraction.timeout_ms);
      c.extraction.retries = e.value("retries", c.extraction.retries);
      c.extraction.max_connections = e.value("max_connections", c.extraction.max_connections);
    }
    if (j.contains("paths")) {
      c.paths.data_dir = j.at("paths").value("data_dir", c.paths.data_dir);
      c.paths.out_dir = j.at("paths").value("out_dir", c.paths.out_dir);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::apply_env() {
  if (const char* v = std::getenv("DSAA_OUT_DIR"); v && *v) paths.out_dir = v;
  if (const char* v = std::getenv("DSAA_DATA_DIR"); v && *v) paths.data_dir = v;
  if (const char* v = std::getenv("DSAA_ENDPOINT"); v && *v) extraction.endpoint = v;
}

void RunConfig::validate() const {
  EncoderConfig e = encoder;
  if (e.vocab_size == 0) e.vocab_size = 1;
  e.validate();
  dsaa.validate(encoder.model_dim);
  losses.validate();
  training.validate();
  world.validate();
  data.validate();
  if (extraction.mode != "lexicon" && extraction.mode != "remote") {
    throw std::invalid_argument("extraction mode must be 'lexicon' or 'remote'");
  }
  if (extraction.mode == "remote" && extraction.endpoint.empty()) {
    throw std::invalid_argument("remote extraction requires an endpoint (config or DSAA_ENDPOINT)");
  }
}

std::string RunConfig::digest() const { return digest_of(to_json().dump()); }

Environment Environment::create(const RunConfig& cfg) {
  cfg.validate();
  Environment env;
  env.cfg = cfg;
  env.vocab = text::Vocabulary(cfg.world.vocabulary_words());
  env.enc_cfg = cfg.encoder;
  env.enc_cfg.vocab_size = env.vocab.size();
  Rng rng = Rng::stream(cfg.seed, "encoder");
  env.encoder = EncoderWeights::init(env.enc_cfg, rng);
  env.encoder.set_frozen(true);

  auto& ex = env.extraction;
  ex.mode = cfg.extraction.mode == "remote" ? text::ExtractionMode::Remote : text::ExtractionMode::Lexicon;
  ex.endpoint = cfg.extraction.endpoint;
  if (!cfg.extraction.prompt_template.empty()) ex.prompt_template = cfg.extraction.prompt_template;
  ex.timeout_ms = cfg.extraction.timeout_ms;
  ex.retries = cfg.extraction.retries;
  ex.max_connections = cfg.extraction.max_connections;
  if (!cfg.extraction.lexicon_path.empty()) {
    ex.lexicon = text::Lexicon::load(cfg.extraction.lexicon_path);
  } else {
    ex.lexicon.by_type = cfg.world.attributes;
  }
  ex.validate();
  return env;
}

TextPipeline Environment::pipeline(const DsaaParams* params) const {
  TextPipeline p;
  p.vocab = &vocab;
  p.enc_cfg = &enc_cfg;
  p.encoder = &encoder;
  p.dsaa = params;
  p.extraction = extraction;
  // Training and evaluation always run offline.
  p.extraction.mode = text::ExtractionMode::Lexicon;
  return p;
}

SyntheticWorld Environment::build_world() const {
  TextPipeline base = pipeline(nullptr);
  return SyntheticWorld::build(cfg.world, enc_cfg.model_dim, cfg.seed, &base);
}

DsaaParams Environment::init_dsaa(Variant v) const {
  DsaaConfig dc = cfg.dsaa;
  LossWeights lw = cfg.losses;
  apply_variant(v, dc, lw);
  Rng rng = Rng::stream(cfg.seed, "dsaa");
  return DsaaParams::init(dc, enc_cfg.model_dim, rng);
}

LossWeights Environment::losses_for(Variant v) const {
  DsaaConfig dc = cfg.dsaa;
  LossWeights lw = cfg.losses;
  apply_variant(v, dc, lw);
  return lw;
}

Checkpoint make_checkpoint(const Environment& env, const DsaaParams& params, const std::string& variant,
                           std::size_t step) {
  Checkpoint ck = env.encoder.to_checkpoint(env.enc_cfg);
  Checkpoint d = params.to_checkpoint();
  ck.merge(d, "dsaa/");
  ck.metadata["dsaa"] = params.cfg;
  ck.metadata["variant"] = variant;
  ck.metadata["step"] = step;
  ck.metadata["seed"] = env.cfg.seed;
  ck.metadata["config_digest"] = env.cfg.digest();
  ck.metadata["encoder_digest"] = checkpoint_digest(env.encoder.to_checkpoint(env.enc_cfg));
  return ck;
}

DsaaParams load_dsaa(const Environment& env, const Checkpoint& ck) {
  const std::string want = checkpoint_digest(env.encoder.to_checkpoint(env.enc_cfg));
  const std::string have = ck.metadata.value("encoder_digest", std::string("none"));
  if (have != want) {
    throw CheckpointError("checkpoint encoder digest " + have + " does not match configured encoder " + want +
                          " (config digest " + ck.metadata.value("config_digest", std::string("none")) + " vs " +
                          env.cfg.digest() + ")");
  }
  DsaaConfig dc = env.cfg.dsaa;
  if (ck.metadata.contains("dsaa")) dsaa::from_json(ck.metadata.at("dsaa"), dc);
  return DsaaParams::from_checkpoint(ck, dc, env.enc_cfg.model_dim);
}

}  // namespace dsaa
