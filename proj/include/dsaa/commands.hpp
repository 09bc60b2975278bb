#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dsaa/analysis.hpp"
#include "dsaa/experiment.hpp"

namespace dsaa {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kInput = 2;
inline constexpr int kGeneration = 3;
inline constexpr int kNumeric = 4;
}  // namespace exit_code

/// Raised for missing inputs and config/checkpoint mismatches (exit 2).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs fn, maps known exceptions to exit codes and logs them.
int run_guarded(const std::function<void()>& fn);

std::filesystem::path dataset_path(const RunConfig& cfg, const std::string& split);
std::filesystem::path train_dir(const RunConfig& cfg, const std::string& variant);

struct GenDataOutput {
  std::filesystem::path train_path, eval_path;
  std::string train_digest, eval_digest;
};
/// Builds the world and writes the train and eval splits plus a manifest to data_dir.
GenDataOutput cmd_gen_data(const RunConfig& cfg);

struct TrainOutput {
  std::filesystem::path final_checkpoint;
  std::filesystem::path loss_log;
  TrainSummary summary;
};
/// Trains one variant on the stored train split. Writes the initial
/// checkpoint, periodic ones, final.ckpt and the loss log. A non-finite loss
/// rethrows NumericError after recording the last good checkpoint.
TrainOutput cmd_train(const RunConfig& cfg, Variant variant);

struct EvalOptions {
  std::string split = "eval";
  /// Restrict to one report column ("Hard", ..., "Transp."); empty keeps all.
  std::string subset;
  /// Keep at most this many negatives per record; 0 keeps all.
  std::size_t negatives = 0;
  double iou_threshold = 0.5;
  std::size_t workers = 0;
  std::string label;
};

/// Evaluates a checkpoint (or the oracle scorer when checkpoint is empty and
/// oracle is set) and writes the table under out_dir/eval/<label>.
EvalReport cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint, const EvalOptions& opt,
                    bool oracle = false);

struct AnalyzeOutput {
  std::vector<std::pair<std::string, SuppressionReport>> suppression;
  std::vector<std::pair<std::string, SeparationStats>> separation;
  std::filesystem::path out_dir;
};
/// Suppression and separation for each checkpoint, written side by side.
AnalyzeOutput cmd_analyze(const RunConfig& cfg, const std::vector<std::filesystem::path>& checkpoints,
                          std::vector<std::string> labels, const std::string& split = "eval");

struct ExtractSummary {
  std::size_t captions = 0;
  std::size_t fallbacks = 0;
};
/// One JSON line per caption line: phrases, spans, fallback flag.
ExtractSummary cmd_extract(const RunConfig& cfg, const std::filesystem::path& captions,
                           const std::filesystem::path& output);

/// Pipeline parameters stored in a checkpoint, checked against the environment.
DsaaParams load_checkpoint_params(const Environment& env, const std::filesystem::path& path);

}  // namespace dsaa
