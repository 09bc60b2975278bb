#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dsaa/harness.hpp"
#include "dsaa/pipeline.hpp"

namespace dsaa {

/// 1 - cosine similarity, in [0, 2]. Zero-norm inputs count as distance 1.
double cosine_distance(const Tensor& a, const Tensor& b);

struct PromptGroupSpec {
  std::vector<std::string> neutral_nouns{"object", "item", "thing"};
  std::vector<std::string> explicit_nouns;
  std::vector<std::pair<std::string, std::string>> attribute_pairs;

  void validate() const;
  /// Every same-type attribute pair of the world, its categories as explicit nouns.
  static PromptGroupSpec from_world(const WorldConfig& world);
};

struct PairDistance {
  std::string group;  // "neutral" or "explicit"
  std::string noun;
  std::string first, second;
  double distance = 0;
};

struct SuppressionReport {
  double neutral_mean = 0;
  double explicit_mean = 0;
  std::vector<PairDistance> pairs;
  /// Pairs dropped because a prompt could not be tokenized.
  std::size_t skipped = 0;

  nlohmann::json to_json() const;
};

/// Encodes "{attr} {noun}" for both sides of every pair and noun and
/// averages the pooled cosine distances per group.
SuppressionReport suppression_metric(const TextPipeline& text, const PromptGroupSpec& spec);

struct Histogram {
  double lo = 0, hi = 1;
  std::vector<std::size_t> counts;

  double bin_width() const { return (hi - lo) / double(counts.size()); }
  /// Uniform bins over [lo, hi]; the last bin is closed. Values outside are clamped.
  static Histogram build(const std::vector<double>& values, double lo, double hi, std::size_t bins = 30);
};

/// [min, max] of the values, widened by 0.5 each way when degenerate.
std::pair<double, double> observed_range(const std::vector<double>& a, const std::vector<double>& b = {});

struct SeparationStats {
  std::vector<double> positive, negative;
  double positive_mean = 0, negative_mean = 0;
  /// (negative_mean - positive_mean) / positive_mean; +inf when the positive
  /// mean is 0 and the negatives are farther, 0 when both are 0.
  double gap = 0;
  Histogram positive_hist, negative_hist;

  nlohmann::json to_json() const;
};

/// Cosine distances from each target region to its positive and negative captions.
SeparationStats separation_stats(const Dataset& ds, const std::map<std::string, Tensor>& embeds,
                                 std::size_t bins = 30);
SeparationStats separation_stats(const TextPipeline& text, const Dataset& ds, std::size_t bins = 30);

struct ReportBundle {
  std::vector<std::pair<std::string, EvalReport>> evals;
  std::vector<std::pair<std::string, SuppressionReport>> suppression;
  std::vector<std::pair<std::string, SeparationStats>> separation;
  /// Extra manifest fields (seed, digests, checkpoint hashes).
  nlohmann::json manifest = nlohmann::json::object();
};

/// Writes tables, histograms and manifest.json into out_dir. Returns the
/// written paths, manifest last.
std::vector<std::filesystem::path> emit_report(const ReportBundle& bundle, const std::filesystem::path& out_dir);

/// Standalone SVG with two overlaid histograms sharing one range.
std::string histogram_svg(const Histogram& pos, const Histogram& neg, const std::string& title);

}  // namespace dsaa
