#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "dsaa/adapter.hpp"
#include "dsaa/encoder.hpp"
#include "dsaa/harness.hpp"
#include "dsaa/objectives.hpp"
#include "dsaa/pipeline.hpp"
#include "dsaa/text.hpp"
#include "dsaa/trainer.hpp"

namespace dsaa {

struct PathsConfig {
  std::string data_dir = "data";
  std::string out_dir = "out";
};

struct ExtractionSettings {
  std::string mode = "lexicon";
  std::string endpoint;
  /// Optional lexicon file; empty uses the world's attribute lists.
  std::string lexicon_path;
  std::string prompt_template;
  int timeout_ms = 2000;
  int retries = 1;
  int max_connections = 4;
};

/// Everything a run needs. Every field has a default.
struct RunConfig {
  std::uint64_t seed = 7;
  EncoderConfig encoder;
  DsaaConfig dsaa;
  LossWeights losses;
  TrainConfig training;
  WorldConfig world;
  GenConfig data;
  ExtractionSettings extraction;
  PathsConfig paths;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown top-level keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  /// Applies DSAA_OUT_DIR, DSAA_DATA_DIR and DSAA_ENDPOINT when set.
  void apply_env();
  void validate() const;
  /// Hash of the resolved configuration.
  std::string digest() const;
};

/// Vocabulary, frozen encoder and extraction settings derived from a config.
struct Environment {
  RunConfig cfg;
  text::Vocabulary vocab{std::vector<std::string>{}};
  EncoderConfig enc_cfg;
  EncoderWeights encoder;
  text::ExtractionConfig extraction;

  static Environment create(const RunConfig& cfg);

  TextPipeline pipeline(const DsaaParams* params) const;
  SyntheticWorld build_world() const;
  DsaaParams init_dsaa(Variant v = Variant::Full) const;
  LossWeights losses_for(Variant v) const;
};

/// Checkpoint with frozen encoder, DSAA parameters and metadata.
Checkpoint make_checkpoint(const Environment& env, const DsaaParams& params, const std::string& variant,
                           std::size_t step);
/// Loads DSAA parameters, checking the encoder digest against env.
DsaaParams load_dsaa(const Environment& env, const Checkpoint& ck);

}  // namespace dsaa
