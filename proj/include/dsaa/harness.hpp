#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsaa/box.hpp"
#include "dsaa/tensor.hpp"

namespace dsaa {

struct TextPipeline;

inline const std::vector<std::string> kAttributeTypes = {"color", "material", "pattern", "transparency"};

struct WorldConfig {
  std::vector<std::string> categories = {"dog", "chair", "plate", "mug", "car", "lamp", "bottle", "hat"};
  std::map<std::string, std::vector<std::string>> attributes = {
      {"color", {"red", "blue", "green", "black", "white", "yellow"}},
      {"material", {"wooden", "metal", "plastic", "leather"}},
      {"pattern", {"striped", "dotted", "checkered", "plain"}},
      {"transparency", {"transparent", "translucent", "opaque", "tinted"}},
  };
  std::vector<std::string> neutral_nouns = {"object", "item", "thing"};
  double category_scale = 1.0;
  double attribute_scale = 1.0;
  double noise_std = 0.15;
  /// Minimum pairwise angle between latent vectors, degrees.
  double min_angle_deg = 10.0;

  void validate() const;
  std::vector<std::string> vocabulary_words() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

/// Frozen visual side: category/attribute latents and the projection into
/// the text embedding space.
struct SyntheticWorld {
  WorldConfig cfg;
  std::size_t feature_dim = 0;
  std::map<std::string, std::vector<double>> category_latent;
  std::map<std::string, std::vector<double>> attribute_latent;
  Tensor projection;  // [F x D], orthogonal

  /// Category latents follow the frozen encoder's mean-centered pooled
  /// centroids (pulled back through the projection) when text is given;
  /// otherwise they are random like the attribute latents.
  static SyntheticWorld build(const WorldConfig& cfg, std::size_t feature_dim, std::uint64_t seed,
                              const TextPipeline* text = nullptr);

  std::string type_of(const std::string& attribute) const;
  std::vector<double> compose(const std::string& category, const std::vector<std::string>& attributes) const;
  /// Feature mapped into the text embedding space.
  Tensor project(const std::vector<double>& feature) const;
};

void to_json(nlohmann::json& j, const SyntheticWorld& w);
void from_json(const nlohmann::json& j, SyntheticWorld& w);

enum class Difficulty { Trivial, Easy, Medium, Hard };
enum class AttrSubset { Color, Material, Pattern, Transparency, Mixed };

std::string to_string(Difficulty d);
std::string to_string(AttrSubset s);
Difficulty difficulty_from_string(const std::string& s);
AttrSubset attr_subset_from_string(const std::string& s);

struct SceneInstance {
  Box box;
  std::string category;
  std::vector<std::string> attributes;
  std::vector<double> feature;
};

struct Proposal {
  Box box;
  std::vector<double> feature;
};

struct CaptionRecord {
  std::string positive;
  std::vector<std::string> negatives;
  Difficulty difficulty = Difficulty::Hard;
  AttrSubset attr_subset = AttrSubset::Mixed;
  std::size_t target = 0;
};

struct BenchmarkItem {
  std::size_t id = 0;
  std::vector<SceneInstance> objects;
  std::vector<Proposal> proposals;
  CaptionRecord record;

  const SceneInstance& target() const { return objects.at(record.target); }
  /// [positive] + negatives.
  std::vector<std::string> captions() const;
};

void to_json(nlohmann::json& j, const BenchmarkItem& b);
void from_json(const nlohmann::json& j, BenchmarkItem& b);

struct GenConfig {
  std::size_t train_records = 400;
  /// Evaluation records per subset column.
  std::size_t eval_records_per_subset = 60;
  std::size_t train_negatives = 3;
  std::size_t eval_negatives = 5;
  std::size_t jitter_proposals = 2;
  std::size_t decoys_min = 1;
  std::size_t decoys_max = 2;
  double jitter_feature_std = 0.05;

  void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::string split;
  std::uint64_t seed = 0;
  SyntheticWorld world;
  std::vector<BenchmarkItem> items;
};

inline constexpr int kDatasetVersion = 1;

/// "a {attrs} {category}".
std::string render_caption(const std::vector<std::string>& attributes, const std::string& category);

/// Training split: Hard negatives only, exactly cfg.train_negatives each.
Dataset gen_train(const SyntheticWorld& world, const GenConfig& cfg, std::uint64_t seed);
/// Evaluation split: cfg.eval_records_per_subset records for each difficulty
/// (mixed attributes) and each single-attribute subset.
Dataset gen_eval(const SyntheticWorld& world, const GenConfig& cfg, std::uint64_t seed);

/// Negatives for one target object; at most max_count, fewer when the
/// vocabulary runs out.
std::vector<std::string> make_negatives(const SyntheticWorld& world, const SceneInstance& obj, Difficulty d,
                                        AttrSubset subset, std::size_t max_count, std::mt19937_64& rng);

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

/// Cosine similarity of each region against each caption embedding; a zero
/// norm on either side gives 0 and a warning.
Tensor score_regions(const std::vector<Tensor>& region_feats, const std::vector<Tensor>& caption_embeds);

struct Detection {
  Box box;
  std::size_t label = 0;
  double score = 0;
};

/// Labels each region with its argmax caption, then greedy class-agnostic NMS.
std::vector<Detection> assign_and_nms(const Tensor& sims, const std::vector<Box>& boxes, double iou_threshold = 0.5);

struct GroundTruth {
  Box box;
  std::size_t label = 0;
};

inline constexpr std::size_t kIouSteps = 10;
double iou_threshold_at(std::size_t i);

/// AP at one IoU threshold, averaged over labels that have ground truth.
std::optional<double> average_precision(const std::vector<std::vector<Detection>>& dets,
                                        const std::vector<std::vector<GroundTruth>>& gts, double iou_threshold);
/// Mean AP over IoU 0.50:0.05:0.95. Absent when there is no ground truth.
std::optional<double> coco_map(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<GroundTruth>>& gts);

inline const std::vector<std::string> kReportColumns = {"Hard",  "Medium",   "Easy",    "Trivial",
                                                        "Color", "Material", "Pattern", "Transp."};

struct EvalReport {
  std::map<std::string, std::optional<double>> columns;
  std::optional<double> average;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Similarity of every proposal against every caption of one item, [R x C].
using Scorer = std::function<Tensor(const BenchmarkItem&)>;

struct ProtocolOptions {
  double iou_threshold = 0.5;
  std::size_t workers = 0;  // 0 = hardware concurrency
};

/// Per-item detections, computed on a worker pool.
std::vector<std::vector<Detection>> detect_all(const Dataset& ds, const Scorer& scorer, const ProtocolOptions& opt);
EvalReport run_protocol(const Dataset& ds, const Scorer& scorer, const ProtocolOptions& opt = {});

/// Caption embeddings for every distinct caption in the dataset, computed once.
std::map<std::string, Tensor> embed_captions(const Dataset& ds, const TextPipeline& text, std::size_t workers = 0);

/// Cosine scorer over projected region features and cached caption embeddings.
Scorer embedding_scorer(const SyntheticWorld& world, const std::map<std::string, Tensor>& embeds);
/// Similarity 1 for the target's ground-truth proposal against the positive
/// caption, 0 elsewhere.
Scorer oracle_scorer();

}  // namespace dsaa
