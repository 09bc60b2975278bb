#include "dsaa/analysis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "dsaa/digest.hpp"
#include "dsaa/log.hpp"
#include "dsaa/ops.hpp"
#include "dsaa/text.hpp"

namespace dsaa {

double cosine_distance(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("cosine_distance: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto x = a.data();
  auto y = b.data();
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ab += x[i] * y[i];
    aa += x[i] * x[i];
    bb += y[i] * y[i];
  }
  if (aa == 0 || bb == 0) return 1.0;
  const double c = ab / (std::sqrt(aa) * std::sqrt(bb));
  return std::clamp(1.0 - c, 0.0, 2.0);
}

void PromptGroupSpec::validate() const {
  if (neutral_nouns.empty()) throw std::invalid_argument("prompt spec: neutral noun list is empty");
  if (explicit_nouns.empty()) throw std::invalid_argument("prompt spec: explicit noun list is empty");
  if (attribute_pairs.empty()) throw std::invalid_argument("prompt spec: no attribute pairs");
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& [a, b] : attribute_pairs) {
    if (a == b) throw std::invalid_argument("prompt spec: pair '" + a + "/" + b + "' does not contrast");
    if (!seen.insert(std::minmax(a, b)).second) {
      throw std::invalid_argument("prompt spec: duplicate pair '" + a + "/" + b + "'");
    }
  }
}

PromptGroupSpec PromptGroupSpec::from_world(const WorldConfig& world) {
  PromptGroupSpec s;
  s.neutral_nouns = world.neutral_nouns;
  s.explicit_nouns = world.categories;
  for (const auto& t : kAttributeTypes) {
    auto it = world.attributes.find(t);
    if (it == world.attributes.end()) continue;
    const auto& v = it->second;
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = i + 1; j < v.size(); ++j) s.attribute_pairs.emplace_back(v[i], v[j]);
  }
  return s;
}

nlohmann::json SuppressionReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& p : pairs) {
    rows.push_back({{"group", p.group}, {"noun", p.noun}, {"first", p.first}, {"second", p.second},
                    {"distance", p.distance}});
  }
  return {{"neutral_mean", neutral_mean},
          {"explicit_mean", explicit_mean},
          {"skipped", skipped},
          {"representation", "pooled final hidden state"},
          {"pairs", rows}};
}

SuppressionReport suppression_metric(const TextPipeline& text, const PromptGroupSpec& spec) {
  spec.validate();
  NoGradGuard guard;
  std::map<std::string, Tensor> cache;
  auto embed = [&](const std::string& prompt) -> const Tensor* {
    auto it = cache.find(prompt);
    if (it == cache.end()) {
      Tensor t;
      try {
        t = text.encode(prompt).pooled().clone();
      } catch (const text::TruncationError&) {
      } catch (const ContractError&) {
      }
      it = cache.emplace(prompt, t).first;
    }
    return it->second.defined() ? &it->second : nullptr;
  };

  SuppressionReport r;
  double sums[2] = {0, 0};
  std::size_t counts[2] = {0, 0};
  const std::vector<std::string>* groups[2] = {&spec.neutral_nouns, &spec.explicit_nouns};
  const char* names[2] = {"neutral", "explicit"};
  for (int g = 0; g < 2; ++g) {
    for (const auto& noun : *groups[g]) {
      for (const auto& [a, b] : spec.attribute_pairs) {
        const Tensor* ea = embed(a + " " + noun);
        const Tensor* eb = embed(b + " " + noun);
        if (!ea || !eb) {
          ++r.skipped;
          continue;
        }
        const double d = cosine_distance(*ea, *eb);
        r.pairs.push_back({names[g], noun, a, b, d});
        sums[g] += d;
        ++counts[g];
      }
    }
  }
  if (r.skipped) log::warn("suppression: skipped " + std::to_string(r.skipped) + " prompt pairs");
  r.neutral_mean = counts[0] ? sums[0] / double(counts[0]) : 0.0;
  r.explicit_mean = counts[1] ? sums[1] / double(counts[1]) : 0.0;
  return r;
}

Histogram Histogram::build(const std::vector<double>& values, double lo, double hi, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("histogram: bins must be positive");
  if (!(hi > lo)) throw std::invalid_argument("histogram: empty range");
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.counts.assign(bins, 0);
  const double w = (hi - lo) / double(bins);
  for (double v : values) {
    auto b = static_cast<std::ptrdiff_t>(std::floor((v - lo) / w));
    b = std::clamp<std::ptrdiff_t>(b, 0, std::ptrdiff_t(bins) - 1);
    ++h.counts[std::size_t(b)];
  }
  return h;
}

std::pair<double, double> observed_range(const std::vector<double>& a, const std::vector<double>& b) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&a, &b})
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  if (!std::isfinite(lo)) return {0.0, 1.0};
  if (hi == lo) return {lo - 0.5, hi + 0.5};
  return {lo, hi};
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json SeparationStats::to_json() const {
  return {{"positive_mean", positive_mean},
          {"negative_mean", negative_mean},
          {"gap", finite_or_null(gap)},
          {"positive_count", positive.size()},
          {"negative_count", negative.size()},
          {"range", {positive_hist.lo, positive_hist.hi}},
          {"bins", positive_hist.counts.size()}};
}

SeparationStats separation_stats(const Dataset& ds, const std::map<std::string, Tensor>& embeds, std::size_t bins) {
  SeparationStats s;
  auto lookup = [&](const std::string& c) -> const Tensor& {
    auto it = embeds.find(c);
    if (it == embeds.end()) throw ContractError("separation: no embedding for caption \"" + c + "\"");
    return it->second;
  };
  for (const auto& item : ds.items) {
    Tensor r = ds.world.project(item.target().feature);
    s.positive.push_back(cosine_distance(r, lookup(item.record.positive)));
    for (const auto& n : item.record.negatives) s.negative.push_back(cosine_distance(r, lookup(n)));
  }
  s.positive_mean = mean_of(s.positive);
  s.negative_mean = mean_of(s.negative);
  if (s.positive_mean > 0) {
    s.gap = (s.negative_mean - s.positive_mean) / s.positive_mean;
  } else {
    s.gap = s.negative_mean > 0 ? std::numeric_limits<double>::infinity() : 0.0;
  }
  const auto [lo, hi] = observed_range(s.positive, s.negative);
  s.positive_hist = Histogram::build(s.positive, lo, hi, bins);
  s.negative_hist = Histogram::build(s.negative, lo, hi, bins);
  return s;
}

SeparationStats separation_stats(const TextPipeline& text, const Dataset& ds, std::size_t bins) {
  return separation_stats(ds, embed_captions(ds, text), bins);
}

namespace {

std::string fmt(double v, const char* spec = "%.6f") {
  if (!std::isfinite(v)) return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

// Labels become file name stems.
std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out.empty() ? "model" : out;
}

void write_file(const std::filesystem::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << body;
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

}  // namespace

std::string histogram_svg(const Histogram& pos, const Histogram& neg, const std::string& title) {
  const double W = 640, H = 400, left = 60, right = 20, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  std::size_t peak = 1;
  for (const auto* h : {&pos, &neg})
    for (auto c : h->counts) peak = std::max(peak, c);
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
    << title << "</text>\n";
  auto bars = [&](const Histogram& h, const char* color) {
    const double bw = pw / double(h.counts.size());
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
      const double bh = ph * double(h.counts[i]) / double(peak);
      o << "<rect x=\"" << fmt(left + bw * double(i), "%.2f") << "\" y=\"" << fmt(top + ph - bh, "%.2f")
        << "\" width=\"" << fmt(bw, "%.2f") << "\" height=\"" << fmt(bh, "%.2f") << "\" fill=\"" << color
        << "\" fill-opacity=\"0.55\"/>\n";
    }
  };
  bars(neg, "#d62728");
  bars(pos, "#1f77b4");
  o << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double fx = double(t) / 4.0;
    const double x = left + pw * fx;
    o << "<text x=\"" << fmt(x, "%.2f") << "\" y=\"" << top + ph + 16
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
      << fmt(pos.lo + (pos.hi - pos.lo) * fx, "%.3f") << "</text>\n";
    const double y = top + ph * (1 - fx);
    o << "<text x=\"" << left - 6 << "\" y=\"" << fmt(y + 4, "%.2f")
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
      << fmt(double(peak) * fx, "%.0f") << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">cosine distance</text>\n";
  o << "<text x=\"16\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 16 " << top + ph / 2
    << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">count</text>\n";
  o << "<rect x=\"" << left + pw - 130 << "\" y=\"" << top + 6 << "\" width=\"12\" height=\"12\" fill=\"#1f77b4\"/>\n";
  o << "<text x=\"" << left + pw - 112 << "\" y=\"" << top + 16
    << "\" font-family=\"sans-serif\" font-size=\"12\">positive</text>\n";
  o << "<rect x=\"" << left + pw - 130 << "\" y=\"" << top + 24 << "\" width=\"12\" height=\"12\" fill=\"#d62728\"/>\n";
  o << "<text x=\"" << left + pw - 112 << "\" y=\"" << top + 34
    << "\" font-family=\"sans-serif\" font-size=\"12\">negative</text>\n";
  o << "</svg>\n";
  return o.str();
}

std::vector<std::filesystem::path> emit_report(const ReportBundle& bundle, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  nlohmann::json files = nlohmann::json::object();
  auto emit = [&](const std::string& name, const std::string& body) {
    const auto p = out_dir / name;
    write_file(p, body);
    files[name] = digest_of(body);
    written.push_back(p);
  };

  if (!bundle.evals.empty()) {
    std::ostringstream t;
    t << "model";
    for (const auto& c : kReportColumns) t << ',' << c;
    t << ",Average\n";
    for (const auto& [label, rep] : bundle.evals) {
      t << label;
      for (const auto& c : kReportColumns) {
        auto it = rep.columns.find(c);
        t << ',' << (it == rep.columns.end() ? "" : fmt_opt(it->second));
      }
      t << ',' << fmt_opt(rep.average) << '\n';
    }
    emit("map_table.csv", t.str());
  }

  if (!bundle.suppression.empty()) {
    std::ostringstream t, raw;
    t << "category_type";
    for (const auto& [label, rep] : bundle.suppression) t << ',' << label;
    t << "\nneutral";
    for (const auto& [label, rep] : bundle.suppression) t << ',' << fmt(rep.neutral_mean);
    t << "\nexplicit";
    for (const auto& [label, rep] : bundle.suppression) t << ',' << fmt(rep.explicit_mean);
    t << '\n';
    emit("suppression.csv", t.str());
    raw << "model,group,noun,first,second,distance\n";
    for (const auto& [label, rep] : bundle.suppression)
      for (const auto& p : rep.pairs)
        raw << label << ',' << p.group << ',' << p.noun << ',' << p.first << ',' << p.second << ','
            << fmt(p.distance) << '\n';
    emit("suppression_pairs.csv", raw.str());
  }

  if (!bundle.separation.empty()) {
    std::ostringstream t;
    t << "model,positive_mean,negative_mean,gap\n";
    for (const auto& [label, s] : bundle.separation) {
      t << label << ',' << fmt(s.positive_mean) << ',' << fmt(s.negative_mean) << ',' << fmt(s.gap) << '\n';
      std::ostringstream csv;
      csv << "bin_lo,bin_hi,positive,negative\n";
      const double w = s.positive_hist.bin_width();
      for (std::size_t i = 0; i < s.positive_hist.counts.size(); ++i) {
        csv << fmt(s.positive_hist.lo + w * double(i)) << ',' << fmt(s.positive_hist.lo + w * double(i + 1)) << ','
            << s.positive_hist.counts[i] << ',' << s.negative_hist.counts[i] << '\n';
      }
      const std::string stem = "separation_" + slug(label);
      emit(stem + ".csv", csv.str());
      emit(stem + ".svg", histogram_svg(s.positive_hist, s.negative_hist, "Region-caption distance: " + label));
    }
    emit("separation.csv", t.str());
  }

  nlohmann::json manifest = bundle.manifest;
  manifest["files"] = files;
  const auto mp = out_dir / "manifest.json";
  write_file(mp, manifest.dump(2) + "\n");
  written.push_back(mp);
  return written;
}

}  // namespace dsaa
