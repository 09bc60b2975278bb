#include "dsaa/commands.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

#include "dsaa/digest.hpp"
#include "dsaa/log.hpp"

namespace dsaa {

namespace fs = std::filesystem;

int run_guarded(const std::function<void()>& fn) {
  try {
    fn();
    return exit_code::kOk;
  } catch (const NumericError& e) {
    log::error(e.what());
    return exit_code::kNumeric;
  } catch (const GenerationError& e) {
    log::error(e.what());
    return exit_code::kGeneration;
  } catch (const InputError& e) {
    log::error(e.what());
    return exit_code::kInput;
  } catch (const CheckpointError& e) {
    log::error(e.what());
    return exit_code::kInput;
  } catch (const std::invalid_argument& e) {
    // Also covers DimensionError.
    log::error(e.what());
    return exit_code::kInput;
  } catch (const nlohmann::json::exception& e) {
    log::error(std::string("malformed input: ") + e.what());
    return exit_code::kInput;
  } catch (const std::exception& e) {
    log::error(e.what());
    return 1;
  }
}

fs::path dataset_path(const RunConfig& cfg, const std::string& split) {
  return fs::path(cfg.paths.data_dir) / (split + ".jsonl");
}

fs::path train_dir(const RunConfig& cfg, const std::string& variant) {
  return fs::path(cfg.paths.out_dir) / "train" / variant;
}

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json base_manifest(const RunConfig& cfg, const std::string& command) {
  return {{"command", command}, {"seed", cfg.seed}, {"config_digest", cfg.digest()}, {"created", utc_now()}};
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

Dataset load_split(const RunConfig& cfg, const std::string& split) {
  const fs::path p = dataset_path(cfg, split);
  if (!fs::exists(p)) throw InputError("dataset " + p.string() + " not found (run gen-data first)");
  return load_dataset(p);
}

std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu.ckpt", step);
  return buf;
}

}  // namespace

GenDataOutput cmd_gen_data(const RunConfig& cfg) {
  Environment env = Environment::create(cfg);
  cfg.data.validate();
  SyntheticWorld world = env.build_world();
  Dataset train = gen_train(world, cfg.data, cfg.seed);
  Dataset eval = gen_eval(world, cfg.data, cfg.seed);
  GenDataOutput out;
  out.train_path = dataset_path(cfg, "train");
  out.eval_path = dataset_path(cfg, "eval");
  fs::create_directories(cfg.paths.data_dir);
  save_dataset(out.train_path, train);
  save_dataset(out.eval_path, eval);
  out.train_digest = file_digest(out.train_path);
  out.eval_digest = file_digest(out.eval_path);
  auto m = base_manifest(cfg, "gen-data");
  m["datasets"] = {{"train", {{"path", out.train_path.string()}, {"records", train.items.size()},
                              {"digest", out.train_digest}}},
                   {"eval", {{"path", out.eval_path.string()}, {"records", eval.items.size()},
                             {"digest", out.eval_digest}}}};
  write_json(fs::path(cfg.paths.data_dir) / "manifest.json", m);
  log::info("wrote " + std::to_string(train.items.size()) + " train and " + std::to_string(eval.items.size()) +
            " eval records to " + cfg.paths.data_dir);
  return out;
}

TrainOutput cmd_train(const RunConfig& cfg, Variant variant) {
  Environment env = Environment::create(cfg);
  const Dataset train = load_split(cfg, "train");
  const std::string vname = to_string(variant);
  const fs::path dir = train_dir(cfg, vname);
  fs::create_directories(dir);

  DsaaParams params = env.init_dsaa(variant);
  const LossWeights lw = env.losses_for(variant);
  TextPipeline text = env.pipeline(&params);

  TrainOutput out;
  out.loss_log = dir / "losses.jsonl";
  out.final_checkpoint = dir / "final.ckpt";
  fs::path last_good = dir / checkpoint_name(0);
  save_checkpoint(last_good, make_checkpoint(env, params, vname, 0));

  auto manifest = base_manifest(cfg, "train");
  manifest["variant"] = vname;
  manifest["dataset_digest"] = file_digest(dataset_path(cfg, "train"));
  std::vector<std::string> saved = {last_good.filename().string()};

  TrainConfig tc = cfg.training;
  // The baseline is the identity-initialized pipeline and is never updated.
  if (variant == Variant::Baseline) tc.steps = 0;

  LossLog log_file(out.loss_log);
  TrainHooks hooks;
  hooks.on_step = [&](std::size_t step, const std::map<std::string, double>& terms, bool gate) {
    log_file.write(step, terms, gate);
    if (step % 100 == 0) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s step %zu total %.5f cls %.5f attr %.5f det %.5f", vname.c_str(), step,
                    terms.at("total"), terms.at("cls"), terms.at("attr"), terms.at("det"));
      log::info(buf);
    }
  };
  hooks.on_checkpoint = [&](std::size_t step) {
    last_good = dir / checkpoint_name(step);
    save_checkpoint(last_good, make_checkpoint(env, params, vname, step));
    saved.push_back(last_good.filename().string());
  };
  try {
    out.summary = train_dsaa(params, text, train, lw, tc, cfg.seed, hooks);
  } catch (const NumericError& e) {
    manifest["status"] = "numeric_failure";
    manifest["error"] = e.what();
    manifest["last_good_checkpoint"] = last_good.filename().string();
    manifest["checkpoints"] = saved;
    write_json(dir / "manifest.json", manifest);
    throw NumericError(std::string(e.what()) + "; last good checkpoint " + last_good.string());
  }
  const Checkpoint final_ck = make_checkpoint(env, params, vname, out.summary.steps_run);
  save_checkpoint(out.final_checkpoint, final_ck);
  manifest["status"] = "ok";
  manifest["steps"] = out.summary.steps_run;
  manifest["checkpoints"] = saved;
  manifest["final_checkpoint"] = out.final_checkpoint.filename().string();
  manifest["checkpoint_digest"] = checkpoint_digest(final_ck);
  write_json(dir / "manifest.json", manifest);
  return out;
}

DsaaParams load_checkpoint_params(const Environment& env, const fs::path& path) {
  if (!fs::exists(path)) throw InputError("checkpoint " + path.string() + " not found");
  const Checkpoint ck = load_checkpoint(path);
  return load_dsaa(env, ck);
}

namespace {

std::string column_of(const CaptionRecord& r) {
  if (r.attr_subset == AttrSubset::Mixed) return to_string(r.difficulty);
  return r.attr_subset == AttrSubset::Transparency ? "Transp." : to_string(r.attr_subset);
}

Dataset filtered(Dataset ds, const EvalOptions& opt) {
  if (!opt.subset.empty()) {
    if (std::find(kReportColumns.begin(), kReportColumns.end(), opt.subset) == kReportColumns.end()) {
      throw std::invalid_argument("unknown subset '" + opt.subset + "'");
    }
    std::vector<BenchmarkItem> keep;
    for (auto& it : ds.items)
      if (column_of(it.record) == opt.subset) keep.push_back(std::move(it));
    ds.items = std::move(keep);
  }
  if (opt.negatives) {
    for (auto& it : ds.items)
      if (it.record.negatives.size() > opt.negatives) it.record.negatives.resize(opt.negatives);
  }
  return ds;
}

std::string label_for(const fs::path& ckpt, const std::string& given) {
  if (!given.empty()) return given;
  // out/train/<variant>/final.ckpt -> <variant>
  const auto parent = ckpt.parent_path().filename().string();
  return parent.empty() ? ckpt.stem().string() : parent;
}

}  // namespace

EvalReport cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const EvalOptions& opt, bool oracle) {
  if (!(opt.iou_threshold > 0 && opt.iou_threshold < 1)) throw std::invalid_argument("IoU threshold must be in (0,1)");
  Environment env = Environment::create(cfg);
  const Dataset ds = filtered(load_split(cfg, opt.split), opt);
  ProtocolOptions po{opt.iou_threshold, opt.workers};
  EvalReport rep;
  std::string label = opt.label;
  auto manifest = base_manifest(cfg, "eval");
  manifest["dataset_digest"] = file_digest(dataset_path(cfg, opt.split));
  if (oracle) {
    rep = run_protocol(ds, oracle_scorer(), po);
    if (label.empty()) label = "oracle";
  } else {
    const DsaaParams params = load_checkpoint_params(env, checkpoint);
    const TextPipeline text = env.pipeline(&params);
    const auto embeds = embed_captions(ds, text, opt.workers);
    rep = run_protocol(ds, embedding_scorer(ds.world, embeds), po);
    label = label_for(checkpoint, label);
    manifest["checkpoint"] = checkpoint.string();
    manifest["checkpoint_digest"] = file_digest(checkpoint);
  }
  rep.metadata["config_digest"] = cfg.digest();
  rep.metadata["split"] = opt.split;
  if (!opt.subset.empty()) rep.metadata["subset"] = opt.subset;
  if (manifest.contains("checkpoint_digest")) rep.metadata["checkpoint_digest"] = manifest["checkpoint_digest"];

  const fs::path dir = fs::path(cfg.paths.out_dir) / "eval" / label;
  ReportBundle b;
  b.evals.emplace_back(label, rep);
  b.manifest = manifest;
  emit_report(b, dir);
  write_json(dir / "eval.json", rep.to_json());
  return rep;
}

AnalyzeOutput cmd_analyze(const RunConfig& cfg, const std::vector<fs::path>& checkpoints,
                          std::vector<std::string> labels, const std::string& split) {
  if (checkpoints.empty()) throw std::invalid_argument("analyze: no checkpoints given");
  if (!labels.empty() && labels.size() != checkpoints.size()) {
    throw std::invalid_argument("analyze: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(checkpoints.size()) + " checkpoints");
  }
  for (const auto& c : checkpoints)
    if (!fs::exists(c)) throw InputError("checkpoint " + c.string() + " not found");
  Environment env = Environment::create(cfg);
  const Dataset ds = load_split(cfg, split);
  const PromptGroupSpec spec = PromptGroupSpec::from_world(cfg.world);

  AnalyzeOutput out;
  ReportBundle b;
  b.manifest = base_manifest(cfg, "analyze");
  b.manifest["dataset_digest"] = file_digest(dataset_path(cfg, split));
  b.manifest["representation"] = "pooled final hidden state";
  nlohmann::json hashes = nlohmann::json::object();
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const std::string label = labels.empty() ? label_for(checkpoints[i], "") : labels[i];
    const DsaaParams params = load_checkpoint_params(env, checkpoints[i]);
    const TextPipeline text = env.pipeline(&params);
    out.suppression.emplace_back(label, suppression_metric(text, spec));
    out.separation.emplace_back(label, separation_stats(text, ds));
    hashes[label] = file_digest(checkpoints[i]);
  }
  b.manifest["checkpoints"] = hashes;
  b.suppression = out.suppression;
  b.separation = out.separation;
  out.out_dir = fs::path(cfg.paths.out_dir) / "analysis";
  emit_report(b, out.out_dir);
  return out;
}

ExtractSummary cmd_extract(const RunConfig& cfg, const fs::path& captions, const fs::path& output) {
  std::ifstream in(captions);
  if (!in) throw InputError("cannot open captions file " + captions.string());
  Environment env = Environment::create(cfg);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  std::ofstream out(output);
  if (!out) throw std::runtime_error("cannot write " + output.string());

  std::unique_ptr<text::RemoteExtractor> remote;
  if (env.extraction.mode == text::ExtractionMode::Remote) remote = std::make_unique<text::RemoteExtractor>(env.extraction);

  ExtractSummary s;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    text::ExtractionResult r;
    if (remote) {
      r = remote->extract(line);
    } else {
      r.phrases = text::extract_attributes_lexicon(env.extraction, line);
    }
    nlohmann::json rec = {{"caption", line}, {"phrases", r.phrases}, {"fallback", r.fallback}};
    try {
      const auto toks = text::tokenize(env.vocab, line, env.enc_cfg.max_len);
      const auto m = text::match_spans(env.vocab, toks, r.phrases);
      nlohmann::json spans = nlohmann::json::array();
      for (const auto& sp : m.spans.spans) spans.push_back({{"phrase", sp.phrase}, {"indices", sp.indices}});
      rec["spans"] = spans;
      rec["tokens"] = toks.surfaces;
    } catch (const text::TruncationError& e) {
      rec["spans"] = nlohmann::json::array();
      rec["error"] = e.what();
    }
    if (!r.dropped.empty()) rec["dropped"] = r.dropped;
    if (r.fallback) {
      rec["reason"] = r.reason;
      ++s.fallbacks;
    }
    out << rec.dump() << '\n';
    ++s.captions;
  }
  if (s.fallbacks) {
    log::warn("extract: " + std::to_string(s.fallbacks) + " of " + std::to_string(s.captions) +
              " captions fell back to the lexicon");
  }
  return s;
}

}  // namespace dsaa
