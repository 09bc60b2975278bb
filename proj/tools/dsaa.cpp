// dsaa: data generation, training, evaluation, analysis and extraction.
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsaa/commands.hpp"
#include "dsaa/log.hpp"

using namespace dsaa;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data_dir, out_dir;
  bool verbose = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "JSON run configuration");
  app->add_option("--seed", c.seed, "Override the config seed");
  app->add_option("--data-dir", c.data_dir, "Dataset directory");
  app->add_option("--out-dir", c.out_dir, "Output directory");
  app->add_flag("-v,--verbose", c.verbose, "Debug logging");
}

// Config file, then environment, then flags.
RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  cfg.apply_env();
  if (c.seed) cfg.seed = *c.seed;
  if (!c.data_dir.empty()) cfg.paths.data_dir = c.data_dir;
  if (!c.out_dir.empty()) cfg.paths.out_dir = c.out_dir;
  if (c.verbose) log::set_level(log::Level::Debug);
  return cfg;
}

void print_report(const std::string& label, const EvalReport& rep) {
  std::cout << "model";
  for (const auto& c : kReportColumns) std::cout << '\t' << c;
  std::cout << "\tAverage\n" << label;
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string("-");
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *v);
    return std::string(buf);
  };
  for (const auto& c : kReportColumns) std::cout << '\t' << cell(rep.columns.at(c));
  std::cout << '\t' << cell(rep.average) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-stage attribute activation toolkit"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, an_c, ex_c;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic train and eval splits");
  add_common(gen, gen_c);
  std::optional<std::size_t> train_records, eval_records, train_neg, eval_neg;
  gen->add_option("--train-records", train_records);
  gen->add_option("--eval-records", eval_records, "Records per report column");
  gen->add_option("--train-negatives", train_neg);
  gen->add_option("--eval-negatives", eval_neg, "Negatives per eval record (<= 10)");

  auto* train = app.add_subcommand("train", "Train one variant");
  add_common(train, train_c);
  std::string variant = "full";
  std::optional<std::size_t> steps, batch, ckpt_every;
  std::optional<double> lr;
  train->add_option("--variant", variant, "baseline, apa, apa_attr or full");
  train->add_option("--steps", steps);
  train->add_option("--batch-size", batch);
  train->add_option("--lr", lr);
  train->add_option("--checkpoint-interval", ckpt_every);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the benchmark");
  add_common(eval, eval_c);
  std::string eval_ckpt;
  bool oracle = false;
  EvalOptions eo;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file");
  eval->add_flag("--oracle", oracle, "Use the oracle scorer instead of a checkpoint");
  eval->add_option("--split", eo.split);
  eval->add_option("--subset", eo.subset, "Single report column, e.g. Hard or Color");
  eval->add_option("--negatives", eo.negatives, "Keep at most this many negatives per record");
  eval->add_option("--iou", eo.iou_threshold, "NMS IoU threshold");
  eval->add_option("--workers", eo.workers, "Worker threads (0 = all cores)");
  eval->add_option("--label", eo.label, "Report label");

  auto* an = app.add_subcommand("analyze", "Suppression and separation analyses");
  add_common(an, an_c);
  std::vector<std::string> an_ckpts, an_labels;
  std::string an_split = "eval";
  an->add_option("--checkpoint", an_ckpts, "Checkpoint file (repeatable)")->required();
  an->add_option("--label", an_labels, "Label per checkpoint (repeatable)");
  an->add_option("--split", an_split);

  auto* ex = app.add_subcommand("extract", "Attribute extraction for a caption file");
  add_common(ex, ex_c);
  std::string captions, output, mode, endpoint;
  ex->add_option("--captions", captions, "Line-delimited captions")->required();
  ex->add_option("-o,--output", output, "Output JSON lines")->required();
  ex->add_option("--mode", mode, "lexicon or remote");
  ex->add_option("--endpoint", endpoint, "Remote extraction URL");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code::kInput;
  }

  return run_guarded([&] {
    if (*gen) {
      RunConfig cfg = resolve(gen_c);
      if (train_records) cfg.data.train_records = *train_records;
      if (eval_records) cfg.data.eval_records_per_subset = *eval_records;
      if (train_neg) cfg.data.train_negatives = *train_neg;
      if (eval_neg) cfg.data.eval_negatives = *eval_neg;
      const auto out = cmd_gen_data(cfg);
      std::cout << out.train_path.string() << ' ' << out.train_digest << '\n'
                << out.eval_path.string() << ' ' << out.eval_digest << '\n';
    } else if (*train) {
      RunConfig cfg = resolve(train_c);
      if (steps) cfg.training.steps = *steps;
      if (batch) cfg.training.batch_size = *batch;
      if (lr) cfg.training.lr = *lr;
      if (ckpt_every) cfg.training.checkpoint_interval = *ckpt_every;
      const auto out = cmd_train(cfg, variant_from_string(variant));
      std::cout << out.final_checkpoint.string() << '\n';
    } else if (*eval) {
      RunConfig cfg = resolve(eval_c);
      if (!oracle && eval_ckpt.empty()) throw std::invalid_argument("eval: --checkpoint or --oracle is required");
      const auto rep = cmd_eval(cfg, eval_ckpt, eo, oracle);
      print_report(eo.label.empty() ? (oracle ? "oracle" : eval_ckpt) : eo.label, rep);
    } else if (*an) {
      RunConfig cfg = resolve(an_c);
      std::vector<std::filesystem::path> paths(an_ckpts.begin(), an_ckpts.end());
      const auto out = cmd_analyze(cfg, paths, an_labels, an_split);
      std::cout << "model\tneutral\texplicit\tgap\n";
      for (std::size_t i = 0; i < out.suppression.size(); ++i) {
        std::cout << out.suppression[i].first << '\t' << out.suppression[i].second.neutral_mean << '\t'
                  << out.suppression[i].second.explicit_mean << '\t' << out.separation[i].second.gap << '\n';
      }
    } else if (*ex) {
      RunConfig cfg = resolve(ex_c);
      if (!mode.empty()) cfg.extraction.mode = mode;
      if (!endpoint.empty()) cfg.extraction.endpoint = endpoint;
      const auto s = cmd_extract(cfg, captions, output);
      std::cout << s.captions << " captions, " << s.fallbacks << " fallbacks\n";
    }
  });
}
