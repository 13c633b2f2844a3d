#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "icl/analysis.hpp"
#include "icl/checkpoint.hpp"
#include "icl/model.hpp"
#include "icl/oracle.hpp"
#include "icl/stats.hpp"
#include "icl/trainer.hpp"

namespace icl {

namespace fs = std::filesystem;
using nlohmann::json;

/// Invalid experiment spec; the message starts with the offending key path.
class SpecError : public std::invalid_argument {
 public:
  SpecError(const std::string& path, const std::string& msg)
      : std::invalid_argument(path + ": " + msg), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

enum class AnalysisKind { regression, lens, ov, kernel };

inline std::string_view to_string(AnalysisKind k) {
  switch (k) {
    case AnalysisKind::regression: return "regression";
    case AnalysisKind::lens: return "lens";
    case AnalysisKind::ov: return "ov";
    case AnalysisKind::kernel: return "kernel";
  }
  return "regression";
}

inline AnalysisKind parse_analysis(std::string_view s) {
  for (auto k : {AnalysisKind::regression, AnalysisKind::lens, AnalysisKind::ov,
                 AnalysisKind::kernel}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown analysis '" + std::string(s) + "'");
}

struct ExperimentSpec {
  std::string name;
  TaskConfig task;
  Corruption corruption;
  ModelConfig model;
  TrainConfig train;
  std::optional<double> ood_sigma_k;
  std::vector<AnalysisKind> analyses;
  std::size_t analysis_episodes = 2000;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string out = "runs";

  DataConfig data() const { return {task, corruption}; }
  bool operator==(const ExperimentSpec&) const = default;
};

// ---------------------------------------------------------------- parsing

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SpecError(path_, "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <class T>
  void read(const std::string& key, T& dst) {
    if (!has(key)) return;
    try {
      dst = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw SpecError(child(key), std::string("invalid value (") + e.what() + ")");
    }
  }

  template <class T, class Parse>
  void read_enum(const std::string& key, T& dst, Parse parse) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw SpecError(child(key), "expected a string");
    try {
      dst = parse(v.get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw SpecError(child(key), e.what());
    }
  }

  const json& at(const std::string& key) { return has(key), j_.at(key); }
  std::string child(const std::string& key) const { return path_ + "." + key; }

  /// Rejects every key that was never asked for.
  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.contains(key)) throw SpecError(child(key), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Fn>
void checked(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const SpecError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw SpecError(path, e.what());
  }
}

}  // namespace detail

/// Builds a validated spec from JSON. Missing fields take the defaults of the
/// reference setup; unknown keys are rejected.
inline ExperimentSpec spec_from_json(const json& j) {
  ExperimentSpec s;
  detail::ObjectReader root(j, "spec");
  if (!root.has("task")) throw SpecError("spec.task", "missing task family");
  root.read_enum("task", s.task.family, parse_task_family);
  root.read("name", s.name);

  if (root.has("data")) {
    detail::ObjectReader d(root.at("data"), "spec.data");
    d.read("sigma_k", s.task.sigma_k);
    d.read("sigma_lo", s.task.sigma_lo);
    d.read("sigma_hi", s.task.sigma_hi);
    d.read("n_context", s.task.n_context);
    d.read("dim", s.task.dim);
    d.read_enum("corruption", s.corruption.mode, parse_corruption);
    d.read("noise_p", s.corruption.p);
    d.finish();
    if (!(s.task.sigma_k > 0)) throw SpecError("spec.data.sigma_k", "must be positive");
    if (!(s.task.sigma_lo > 0) || !(s.task.sigma_hi >= s.task.sigma_lo)) {
      throw SpecError("spec.data.sigma_lo", "need 0 < sigma_lo <= sigma_hi");
    }
    if (s.task.n_context < 1) throw SpecError("spec.data.n_context", "must be >= 1");
    if (s.task.dim < 1) throw SpecError("spec.data.dim", "must be >= 1");
    if (!(s.corruption.p >= 0 && s.corruption.p <= 1)) {
      throw SpecError("spec.data.noise_p", "must be in [0, 1]");
    }
  }
  s.model.n_context = s.task.n_context;
  s.model.input_dim = s.task.dim;

  if (root.has("model")) {
    detail::ObjectReader m(root.at("model"), "spec.model");
    m.read("d_model", s.model.d_model);
    m.read("n_heads", s.model.n_heads);
    m.read("n_layers", s.model.n_layers);
    m.read("d_ff", s.model.d_ff);
    m.read_enum("variant", s.model.variant, parse_variant);
    m.read_enum("label_mode", s.model.label_mode, parse_label_mode);
    m.finish();
  }
  detail::checked("spec.model", [&] { s.model.validate(); });

  if (root.has("train")) {
    detail::ObjectReader t(root.at("train"), "spec.train");
    t.read("lr_max", s.train.lr_max);
    t.read("beta1", s.train.beta1);
    t.read("beta2", s.train.beta2);
    t.read("weight_decay", s.train.weight_decay);
    t.read("adam_eps", s.train.adam_eps);
    t.read("batch", s.train.batch);
    t.read("epochs", s.train.epochs);
    t.read("steps_per_epoch", s.train.steps_per_epoch);
    t.read("eval_episodes", s.train.eval_episodes);
    t.read("warmup_frac", s.train.warmup_frac);
    t.read("div_factor", s.train.div_factor);
    t.read("final_div_factor", s.train.final_div_factor);
    t.finish();
  }
  detail::checked("spec.train", [&] { s.train.validate(); });

  if (root.has("ood_sigma_k") && !root.at("ood_sigma_k").is_null()) {
    double v = 0;
    root.read("ood_sigma_k", v);
    if (!(v > 0)) throw SpecError("spec.ood_sigma_k", "must be positive");
    s.ood_sigma_k = v;
  }
  if (root.has("analyses")) {
    const json& a = root.at("analyses");
    if (!a.is_array()) throw SpecError("spec.analyses", "expected an array");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const std::string path = "spec.analyses[" + std::to_string(i) + "]";
      if (!a[i].is_string()) throw SpecError(path, "expected a string");
      detail::checked(path, [&] { s.analyses.push_back(parse_analysis(a[i].get<std::string>())); });
    }
  }
  root.read("analysis_episodes", s.analysis_episodes);
  if (s.analysis_episodes < 500) throw SpecError("spec.analysis_episodes", "must be >= 500");
  if (root.has("seeds")) {
    root.read("seeds", s.seeds);
    if (s.seeds.empty()) throw SpecError("spec.seeds", "need at least one seed");
  }
  root.read("out", s.out);
  root.finish();
  return s;
}

inline ExperimentSpec parse_spec_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SpecError("spec", std::string("malformed JSON: ") + e.what());
  }
  return spec_from_json(j);
}

inline ExperimentSpec parse_spec(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read spec file: " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_spec_text(ss.str());
}

/// Full spec with every default spelled out.
inline json to_json(const ExperimentSpec& s) {
  json j;
  j["name"] = s.name;
  j["task"] = std::string(to_string(s.task.family));
  j["data"] = {{"sigma_k", s.task.sigma_k},
               {"sigma_lo", s.task.sigma_lo},
               {"sigma_hi", s.task.sigma_hi},
               {"n_context", s.task.n_context},
               {"dim", s.task.dim},
               {"corruption", std::string(to_string(s.corruption.mode))},
               {"noise_p", s.corruption.p}};
  j["model"] = {{"d_model", s.model.d_model},
                {"n_heads", s.model.n_heads},
                {"n_layers", s.model.n_layers},
                {"d_ff", s.model.d_ff},
                {"variant", std::string(to_string(s.model.variant))},
                {"label_mode", std::string(to_string(s.model.label_mode))}};
  const TrainConfig& t = s.train;
  j["train"] = {{"lr_max", t.lr_max},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"weight_decay", t.weight_decay},
                {"adam_eps", t.adam_eps},
                {"batch", t.batch},
                {"epochs", t.epochs},
                {"steps_per_epoch", t.steps_per_epoch},
                {"eval_episodes", t.eval_episodes},
                {"warmup_frac", t.warmup_frac},
                {"div_factor", t.div_factor},
                {"final_div_factor", t.final_div_factor}};
  j["ood_sigma_k"] = s.ood_sigma_k ? json(*s.ood_sigma_k) : json(nullptr);
  j["analyses"] = json::array();
  for (auto a : s.analyses) j["analyses"].push_back(std::string(to_string(a)));
  j["analysis_episodes"] = s.analysis_episodes;
  j["seeds"] = s.seeds;
  j["out"] = s.out;
  return j;
}

/// FNV-1a (64-bit) over the canonical JSON of everything except the output
/// location and the display name.
inline std::string config_hash(const ExperimentSpec& s) {
  json j = to_json(s);
  j.erase("out");
  j.erase("name");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Seed list from ICL_LAB_SEED ("7" or "1,2,3"), if set.
inline std::optional<std::vector<std::uint64_t>> seeds_from_env(const char* value) {
  if (value == nullptr || *value == '\0') return std::nullopt;
  std::vector<std::uint64_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) {
      throw SpecError("ICL_LAB_SEED", "not a seed list: '" + std::string(value) + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw SpecError("ICL_LAB_SEED", "empty seed list");
  return out;
}

/// Precedence: --seed flag, then ICL_LAB_SEED, then the spec's own list.
inline void apply_seed_overrides(ExperimentSpec& spec, std::optional<std::uint64_t> flag,
                                 const char* env) {
  if (flag) {
    spec.seeds = {*flag};
  } else if (auto from_env = seeds_from_env(env)) {
    spec.seeds = *from_env;
  }
}

// ---------------------------------------------------------------- persistence

/// Writes via a sibling temp file and rename, so readers never see a partial file.
inline void write_atomic(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw IoError("corrupt JSON in " + path.string() + ": " + e.what());
  }
}

inline void save_checkpoint_atomic(const IclModel& model, const CheckpointInfo& info,
                                   const fs::path& path) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp" + std::to_string(::getpid());
  save_checkpoint(model, info, tmp);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename checkpoint into " + path.string() + ": " + ec.message());
}

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv_header() { return "step,epoch,lr,loss,train_acc,val_acc,variant,seed\n"; }

inline std::string metrics_csv_row(const StepRecord& r, Variant variant, std::uint64_t seed) {
  std::string s = std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt_double(r.lr) +
                  "," + fmt_double(r.loss) + "," + fmt_double(r.train_acc) + ",";
  if (r.val_acc) s += fmt_double(*r.val_acc);
  s += "," + std::string(to_string(variant)) + "," + std::to_string(seed) + "\n";
  return s;
}

inline std::string pairs_csv(const std::string& x_name, const std::string& y_name,
                             const PairedSamples& p) {
  std::string s = x_name + "," + y_name + "\n";
  for (std::size_t i = 0; i < p.x.size(); ++i) s += fmt_double(p.x[i]) + "," + fmt_double(p.y[i]) + "\n";
  return s;
}

inline json to_json(const RegressionReport& r) {
  return {{"pearson_r", r.pearson_r}, {"spearman_rho", r.spearman_rho}, {"slope", r.slope},
          {"intercept", r.intercept}, {"n", r.n}};
}

inline json to_json(const Estimate& e) {
  return {{"mean", e.mean}, {"half_width", e.half_width}, {"n", e.n}};
}

inline Estimate estimate_from_json(const json& j) {
  return {j.at("mean").get<double>(), j.at("half_width").get<double>(), j.at("n").get<std::size_t>()};
}

// ---------------------------------------------------------------- runs

struct RunLayout {
  fs::path root;  // <out>/<hash>
  fs::path seed_dir(std::uint64_t seed) const { return root / std::to_string(seed); }
  fs::path metrics(std::uint64_t seed) const { return seed_dir(seed) / "metrics.csv"; }
  fs::path checkpoint(std::uint64_t seed) const { return seed_dir(seed) / "checkpoint.bin"; }
  fs::path summary(std::uint64_t seed) const { return seed_dir(seed) / "summary.json"; }
  fs::path aggregate() const { return root / "aggregate.json"; }
};

inline RunLayout layout_for(const ExperimentSpec& spec) {
  return {fs::path(spec.out) / config_hash(spec)};
}

/// Analysis statistics that feed the seed aggregate, keyed "<analysis>.<stat>".
using StatMap = std::map<std::string, double>;

inline StatMap run_analysis(AnalysisKind kind, const IclModel& model, const ExperimentSpec& spec,
                            std::uint64_t seed, const fs::path& dir, const std::string& hash) {
  const Rng stream = Rng(seed).split(streams::kAnalysis);
  const std::string name(to_string(kind));
  json summary{{"analysis", name}, {"config_hash", hash}, {"seed", seed},
               {"checkpoint", (dir / "checkpoint.bin").string()}};
  StatMap stats;
  switch (kind) {
    case AnalysisKind::regression: {
      const auto r = logit_llr_regression(model, spec.task, spec.analysis_episodes, stream);
      write_atomic(dir / "regression.csv", pairs_csv("llr", "logit", r.pairs));
      summary["in_distribution"] = to_json(r.report);
      stats["regression.pearson_r"] = r.report.pearson_r;
      stats["regression.spearman_rho"] = r.report.spearman_rho;
      if (spec.ood_sigma_k && spec.task.family == TaskFamily::A) {
        const auto o = logit_llr_regression(model, spec.task, spec.analysis_episodes, stream,
                                            spec.ood_sigma_k);
        write_atomic(dir / "regression_ood.csv", pairs_csv("llr", "logit", o.pairs));
        summary["ood"] = to_json(o.report);
        summary["ood_sigma_k"] = *spec.ood_sigma_k;
        stats["regression.ood_pearson_r"] = o.report.pearson_r;
        stats["regression.ood_spearman_rho"] = o.report.spearman_rho;
      }
      break;
    }
    case AnalysisKind::lens: {
      const auto lens = logit_lens(model, spec.task, spec.analysis_episodes, stream);
      std::string csv = "llr";
      for (const auto& e : lens.entries) csv += "," + e.probe;
      csv += "\n";
      for (std::size_t i = 0; i < lens.llr.size(); ++i) {
        csv += fmt_double(lens.llr[i]);
        for (const auto& v : lens.values) csv += "," + fmt_double(v[i]);
        csv += "\n";
      }
      write_atomic(dir / "lens.csv", csv);
      summary["probes"] = json::array();
      for (const auto& e : lens.entries) {
        summary["probes"].push_back(
            {{"probe", e.probe}, {"pearson_r", e.pearson_r}, {"spearman_rho", e.spearman_rho}});
        stats["lens." + e.probe + ".pearson_r"] = e.pearson_r;
      }
      break;
    }
    case AnalysisKind::ov: {
      const auto ov = ov_alignment(model);
      std::string csv = "layer,head,alignment\n";
      for (std::size_t l = 0; l < ov.n_layers; ++l)
        for (std::size_t h = 0; h < ov.n_heads; ++h)
          csv += std::to_string(l) + "," + std::to_string(h) + "," + fmt_double(ov.at(l, h)) + "\n";
      write_atomic(dir / "ov.csv", csv);
      summary["scores"] = ov.scores;
      summary["n_layers"] = ov.n_layers;
      summary["n_heads"] = ov.n_heads;
      for (std::size_t l = 0; l < ov.n_layers; ++l) {
        stats["ov.layer" + std::to_string(l) + ".max"] = ov.max_in_layer(l);
      }
      break;
    }
    case AnalysisKind::kernel: {
      const auto k = compare_kernel(model, spec.task, spec.analysis_episodes, stream);
      write_atomic(dir / "kernel.csv", pairs_csv("kernel", "logit", k.pairs));
      summary["model_vs_kernel"] = to_json(k.report);
      const auto episodes = analysis_episodes(spec.task, spec.analysis_episodes, stream);
      const auto oracle = compare_kernel(oracle_predictor(), episodes);
      summary["oracle_vs_kernel"] = to_json(oracle.report);
      stats["kernel.spearman_rho"] = k.report.spearman_rho;
      stats["kernel.oracle_spearman_rho"] = oracle.report.spearman_rho;
      break;
    }
  }
  summary["stats"] = stats;
  write_atomic(dir / (name + ".json"), summary.dump(2));
  return stats;
}

struct SeedResult {
  std::uint64_t seed = 0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  std::optional<double> ood_acc;
  StatMap stats;
  double wall_clock_s = 0.0;
  bool reused = false;
};

inline json to_json(const SeedResult& r) {
  json j{{"seed", r.seed}, {"train_acc", r.train_acc}, {"val_acc", r.val_acc}, {"stats", r.stats},
         {"wall_clock_s", r.wall_clock_s}};
  j["ood_acc"] = r.ood_acc ? json(*r.ood_acc) : json(nullptr);
  return j;
}

inline SeedResult seed_result_from_json(const json& j) {
  SeedResult r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.train_acc = j.at("train_acc").get<double>();
  r.val_acc = j.at("val_acc").get<double>();
  if (!j.at("ood_acc").is_null()) r.ood_acc = j.at("ood_acc").get<double>();
  r.stats = j.at("stats").get<StatMap>();
  r.wall_clock_s = j.at("wall_clock_s").get<double>();
  return r;
}

struct RunRecord {
  ExperimentSpec spec;
  std::string hash;
  std::vector<SeedResult> seeds;
  Estimate train_acc;
  Estimate val_acc;
  std::optional<Estimate> ood_acc;
  std::map<std::string, Estimate> stats;
  fs::path root;
};

struct RunOptions {
  /// Reuse a seed whose summary.json is complete for the same config hash.
  bool reuse = true;
  std::function<void(const std::string&)> log;
};

/// A summary is reusable only if it completed and lists every requested analysis.
inline std::optional<SeedResult> load_complete_seed(const RunLayout& layout, const ExperimentSpec& spec,
                                                    std::uint64_t seed, const std::string& hash) {
  const fs::path p = layout.summary(seed);
  if (!fs::exists(p) || !fs::exists(layout.checkpoint(seed))) return std::nullopt;
  json j;
  try {
    j = read_json(p);
  } catch (const IoError&) {
    return std::nullopt;
  }
  if (j.value("status", "") != "complete" || j.value("config_hash", "") != hash) return std::nullopt;
  for (auto a : spec.analyses) {
    if (!fs::exists(layout.seed_dir(seed) / (std::string(to_string(a)) + ".json"))) return std::nullopt;
  }
  auto r = seed_result_from_json(j.at("result"));
  r.reused = true;
  return r;
}

/// Train, evaluate and analyze a single seed, writing its artifacts.
inline SeedResult run_seed(const ExperimentSpec& spec, std::uint64_t seed, const RunOptions& opts = {}) {
  const std::string hash = config_hash(spec);
  const RunLayout layout = layout_for(spec);
  const fs::path dir = layout.seed_dir(seed);
  fs::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();

  std::string csv = metrics_csv_header();
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) {
    csv += metrics_csv_row(r, spec.model.variant, seed);
    if (opts.log && r.val_acc) {
      opts.log("seed " + std::to_string(seed) + " epoch " + std::to_string(r.epoch) + " loss " +
               fmt_double(r.loss) + " val_acc " + fmt_double(*r.val_acc));
    }
  };
  std::size_t last_epoch = 0;
  hooks.on_epoch = [&](std::size_t epoch, const IclModel& m) {
    last_epoch = epoch;
    save_checkpoint_atomic(m, {seed, (epoch + 1) * spec.train.steps_per_epoch}, layout.checkpoint(seed));
  };

  json summary{{"config_hash", hash}, {"seed", seed}, {"spec", to_json(spec)},
               {"init", "uniform(+-1/sqrt(fan_in)); readout uniform(+-0.1/sqrt(fan_in)), bias 0; "
                        "positions N(0, 0.02^2)"}};
  std::optional<TrainResult> trained;
  try {
    trained.emplace(train(spec.train, spec.model, spec.data(), seed, hooks));
  } catch (const NumericError& e) {
    write_atomic(layout.metrics(seed), csv);
    summary["status"] = "aborted";
    summary["error"] = e.what();
    summary["last_checkpoint_epoch"] = last_epoch;
    write_atomic(layout.summary(seed), summary.dump(2));
    throw;
  }
  write_atomic(layout.metrics(seed), csv);

  SeedResult r;
  r.seed = seed;
  r.train_acc = trained->metrics.final_train_acc();
  r.val_acc = trained->metrics.final_val_acc();
  const IclModel& model = trained->model;
  if (spec.ood_sigma_k) {
    r.ood_acc = evaluate(model, spec.task, spec.train.eval_episodes,
                         Rng(seed).split(streams::kEvaluation), spec.ood_sigma_k)
                    .mean;
  }
  for (auto a : spec.analyses) {
    for (const auto& [k, v] : run_analysis(a, model, spec, seed, dir, hash)) r.stats[k] = v;
  }
  r.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  summary["status"] = "complete";
  summary["result"] = to_json(r);
  summary["checkpoint"] = layout.checkpoint(seed).string();
  write_atomic(layout.summary(seed), summary.dump(2));
  return r;
}

inline RunRecord aggregate(const ExperimentSpec& spec, std::vector<SeedResult> seeds) {
  RunRecord rec;
  rec.spec = spec;
  rec.hash = config_hash(spec);
  rec.root = layout_for(spec).root;
  std::vector<double> tr, va, ood;
  std::map<std::string, std::vector<double>> stats;
  for (const auto& s : seeds) {
    tr.push_back(s.train_acc);
    va.push_back(s.val_acc);
    if (s.ood_acc) ood.push_back(*s.ood_acc);
    for (const auto& [k, v] : s.stats) stats[k].push_back(v);
  }
  rec.train_acc = seed_estimate(tr);
  rec.val_acc = seed_estimate(va);
  if (!ood.empty()) rec.ood_acc = seed_estimate(ood);
  for (const auto& [k, v] : stats) rec.stats[k] = seed_estimate(v);
  rec.seeds = std::move(seeds);
  return rec;
}

inline json to_json(const RunRecord& r) {
  json j{{"config_hash", r.hash}, {"spec", to_json(r.spec)}, {"train_acc", to_json(r.train_acc)},
         {"val_acc", to_json(r.val_acc)}};
  j["ood_acc"] = r.ood_acc ? to_json(*r.ood_acc) : json(nullptr);
  j["stats"] = json::object();
  for (const auto& [k, v] : r.stats) j["stats"][k] = to_json(v);
  j["seeds"] = json::array();
  for (const auto& s : r.seeds) {
    json sj{{"seed", s.seed}, {"train_acc", s.train_acc}, {"val_acc", s.val_acc}, {"stats", s.stats}};
    sj["ood_acc"] = s.ood_acc ? json(*s.ood_acc) : json(nullptr);
    j["seeds"].push_back(sj);
  }
  return j;
}

inline RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.spec = spec_from_json(j.at("spec"));
  r.hash = j.at("config_hash").get<std::string>();
  r.train_acc = estimate_from_json(j.at("train_acc"));
  r.val_acc = estimate_from_json(j.at("val_acc"));
  if (!j.at("ood_acc").is_null()) r.ood_acc = estimate_from_json(j.at("ood_acc"));
  for (const auto& [k, v] : j.at("stats").items()) r.stats[k] = estimate_from_json(v);
  for (const auto& sj : j.at("seeds")) {
    SeedResult s;
    s.seed = sj.at("seed").get<std::uint64_t>();
    s.train_acc = sj.at("train_acc").get<double>();
    s.val_acc = sj.at("val_acc").get<double>();
    if (!sj.at("ood_acc").is_null()) s.ood_acc = sj.at("ood_acc").get<double>();
    s.stats = sj.at("stats").get<StatMap>();
    r.seeds.push_back(std::move(s));
  }
  r.root = layout_for(r.spec).root;
  return r;
}

/// Runs every seed of a spec (reusing finished seeds when allowed) and writes
/// the aggregate.
inline RunRecord run(const ExperimentSpec& spec, const RunOptions& opts = {}) {
  const std::string hash = config_hash(spec);
  const RunLayout layout = layout_for(spec);
  std::vector<SeedResult> results;
  for (std::uint64_t seed : spec.seeds) {
    std::optional<SeedResult> r;
    if (opts.reuse) r = load_complete_seed(layout, spec, seed, hash);
    if (r) {
      if (opts.log) opts.log("seed " + std::to_string(seed) + ": reusing " + layout.seed_dir(seed).string());
    } else {
      r = run_seed(spec, seed, opts);
    }
    results.push_back(*r);
  }
  RunRecord rec = aggregate(spec, std::move(results));
  write_atomic(layout.aggregate(), to_json(rec).dump(2));
  return rec;
}

/// Loads the model of a finished seed.
inline IclModel load_run_model(const ExperimentSpec& spec, std::uint64_t seed) {
  const fs::path p = layout_for(spec).checkpoint(seed);
  if (!fs::exists(p)) throw IoError("no checkpoint for seed " + std::to_string(seed) + " at " + p.string());
  return load_checkpoint(p).model;
}

// ---------------------------------------------------------------- report

struct ReportRow {
  std::string group;
  std::string condition;
  std::string variant;
  std::optional<Estimate> train;  // absent for oracle rows
  Estimate val;
};

namespace detail {

inline std::string pct(const Estimate& e) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.1f +- %.1f", 100.0 * e.mean, 100.0 * e.half_width);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Row for a single record, labelled by its spec.
inline ReportRow report_row(const RunRecord& r, std::string group = "") {
  std::string cond = r.spec.name.empty()
                         ? "Task " + std::string(to_string(r.spec.task.family))
                         : r.spec.name;
  return {std::move(group), std::move(cond), std::string(to_string(r.spec.model.variant)),
          r.train_acc, r.val_acc};
}

inline std::string render_text(const std::vector<ReportRow>& rows) {
  std::size_t wc = 9, wv = 7;
  for (const auto& r : rows) {
    wc = std::max(wc, r.condition.size());
    wv = std::max(wv, r.variant.size());
  }
  std::ostringstream os;
  auto line = [&](const std::string& c, const std::string& v, const std::string& t, const std::string& a) {
    os << std::left << std::setw(static_cast<int>(wc) + 2) << c << std::setw(static_cast<int>(wv) + 2) << v
       << std::setw(16) << t << a << "\n";
  };
  line("Condition", "Variant", "Train Acc (%)", "Val Acc (%)");
  std::string group;
  for (const auto& r : rows) {
    if (!r.group.empty() && r.group != group) {
      group = r.group;
      os << "[" << group << "]\n";
    }
    line(r.condition, r.variant, r.train ? detail::pct(*r.train) : "—", detail::pct(r.val));
  }
  return os.str();
}

inline std::string render_csv(const std::vector<ReportRow>& rows) {
  std::string s = "group,condition,variant,train_mean,train_ci,val_mean,val_ci\n";
  for (const auto& r : rows) {
    s += detail::csv_field(r.group) + "," + detail::csv_field(r.condition) + "," +
         detail::csv_field(r.variant) + ",";
    s += r.train ? fmt_double(r.train->mean) + "," + fmt_double(r.train->half_width) : std::string("—,");
    s += "," + fmt_double(r.val.mean) + "," + fmt_double(r.val.half_width) + "\n";
  }
  return s;
}

inline std::vector<ReportRow> report(const std::vector<RunRecord>& records) {
  if (records.empty()) throw std::invalid_argument("report: no records");
  std::vector<ReportRow> rows;
  for (const auto& r : records) rows.push_back(report_row(r));
  return rows;
}

// ---------------------------------------------------------------- ablation suite

enum class SuiteRowKind { oracle, trained, ood };

struct SuiteEntry {
  std::string group;
  std::string condition;
  std::string variant;
  SuiteRowKind kind = SuiteRowKind::trained;
  ExperimentSpec spec;
};

/// The 17 conditions of the full results table, derived from a base spec
/// (which supplies the training budget, seeds and output root).
inline std::vector<SuiteEntry> ablation_suite(const ExperimentSpec& base) {
  auto make = [&](TaskFamily fam, const std::string& name) {
    ExperimentSpec s = base;
    s.name = name;
    s.task.family = fam;
    s.corruption = {};
    s.model.variant = Variant::regular;
    s.model.label_mode = LabelMode::bound;
    s.ood_sigma_k.reset();
    return s;
  };
  std::vector<SuiteEntry> out;
  const std::string oracle = "Theoretical Oracle", main = "Main Tasks",
                    arch = "Architecture Ablations (Task A)", data = "Data Structure Ablations (Task A)",
                    noise = "Label Noise Robustness (Task A)";
  out.push_back({oracle, "Task A (Shifted Mean)", "LLR", SuiteRowKind::oracle, make(TaskFamily::A, "oracle_a")});
  out.push_back({oracle, "Task B (Variance)", "LLR", SuiteRowKind::oracle, make(TaskFamily::B, "oracle_b")});

  ExperimentSpec main_a = make(TaskFamily::A, "main_a");
  main_a.ood_sigma_k = 9.0;
  main_a.analyses = {AnalysisKind::regression, AnalysisKind::lens, AnalysisKind::ov, AnalysisKind::kernel};
  ExperimentSpec main_b = make(TaskFamily::B, "main_b");
  main_b.analyses = {AnalysisKind::regression, AnalysisKind::lens, AnalysisKind::ov};
  out.push_back({main, "Task A (Shifted Mean)", "ICLTransformer", SuiteRowKind::trained, main_a});
  out.push_back({main, "Task B (Variance)", "ICLTransformer", SuiteRowKind::trained, main_b});
  out.push_back({main, "Task A OOD (sigma_k=9.0)", "ICLTransformer", SuiteRowKind::ood, main_a});

  auto variant = [&](const std::string& name, Variant v) {
    ExperimentSpec s = make(TaskFamily::A, name);
    s.model.variant = v;
    return s;
  };
  out.push_back({arch, "No Positional Encodings", "NoPos", SuiteRowKind::trained, variant("no_pos", Variant::no_pos)});
  out.push_back({arch, "Frozen Positional Encodings", "FrozenPos", SuiteRowKind::trained,
                 variant("frozen_pos", Variant::frozen_pos)});
  out.push_back({arch, "Frozen Attention Weights", "FrozenAttention", SuiteRowKind::trained,
                 variant("frozen_attention", Variant::frozen_attention)});
  out.push_back({arch, "Frozen Q/K Projections", "FrozenQK", SuiteRowKind::trained,
                 variant("frozen_qk", Variant::frozen_qk)});
  out.push_back({arch, "Interleaved Embeddings (x, y)", "Interleaved", SuiteRowKind::trained,
                 variant("interleaved", Variant::interleaved)});

  auto corrupted = [&](const std::string& name, CorruptionMode m, double p = 0.0) {
    ExperimentSpec s = make(TaskFamily::A, name);
    s.corruption = {m, p};
    return s;
  };
  out.push_back({data, "Shuffled Context Pairs", "ShuffledContext", SuiteRowKind::trained,
                 corrupted("shuffled_context", CorruptionMode::shuffled_context)});
  out.push_back({data, "Shuffled Labels Only", "ShuffledLabels", SuiteRowKind::trained,
                 corrupted("shuffled_labels", CorruptionMode::shuffled_labels)});
  out.push_back({data, "No Labels", "NoLabels", SuiteRowKind::trained, corrupted("no_labels", CorruptionMode::no_labels)});
  ExperimentSpec wide = make(TaskFamily::A, "context_64");
  wide.task.n_context = 64;
  wide.model.n_context = 64;
  out.push_back({data, "Increased Context Size (N=64)", "ICLTransformer", SuiteRowKind::trained, wide});

  for (double p : {0.1, 0.2, 0.4}) {
    char label[48];
    std::snprintf(label, sizeof label, "Noisy Labels (p=%.1f)", p);
    char name[32];
    std::snprintf(name, sizeof name, "noisy_%.1f", p);
    out.push_back({noise, label, "NoisyLabels", SuiteRowKind::trained,
                   corrupted(name, CorruptionMode::noisy_labels, p)});
  }
  return out;
}

inline constexpr std::size_t kOracleEpisodes = 100000;

/// Oracle accuracy for a spec's task, on the evaluation stream of its first seed.
inline Estimate spec_oracle_accuracy(const ExperimentSpec& spec, std::size_t episodes = kOracleEpisodes) {
  return oracle_accuracy(spec.task, episodes, Rng(spec.seeds.front()).split(streams::kEvaluation));
}

struct SuiteResult {
  std::vector<ReportRow> rows;
  std::vector<RunRecord> records;  // one per trained spec, in suite order
};

inline SuiteResult run_suite(const ExperimentSpec& base, const RunOptions& opts = {}) {
  SuiteResult out;
  std::map<std::string, RunRecord> done;
  json manifest = json::array();
  for (const auto& e : ablation_suite(base)) {
    if (e.kind == SuiteRowKind::oracle) {
      out.rows.push_back({e.group, e.condition, e.variant, std::nullopt, spec_oracle_accuracy(e.spec)});
      manifest.push_back({{"group", e.group}, {"condition", e.condition}, {"variant", e.variant},
                          {"kind", "oracle"}, {"val_acc", to_json(out.rows.back().val)}});
      continue;
    }
    const std::string hash = config_hash(e.spec);
    if (!done.contains(hash)) {
      if (opts.log) opts.log("== " + e.condition + " [" + hash + "]");
      done.emplace(hash, run(e.spec, opts));
      out.records.push_back(done.at(hash));
    }
    const RunRecord& rec = done.at(hash);
    if (e.kind == SuiteRowKind::ood) {
      if (!rec.ood_acc) throw std::logic_error("suite: OOD row without an OOD evaluation");
      out.rows.push_back({e.group, e.condition, e.variant, rec.train_acc, *rec.ood_acc});
    } else {
      out.rows.push_back({e.group, e.condition, e.variant, rec.train_acc, rec.val_acc});
    }
    manifest.push_back({{"group", e.group}, {"condition", e.condition}, {"variant", e.variant},
                        {"kind", e.kind == SuiteRowKind::ood ? "ood" : "trained"},
                        {"aggregate", layout_for(e.spec).aggregate().string()}});
  }
  const fs::path root(base.out);
  write_atomic(root / "suite.json", manifest.dump(2));
  write_atomic(root / "report.txt", render_text(out.rows));
  write_atomic(root / "report.csv", render_csv(out.rows));
  return out;
}

/// Rebuilds the suite table from a manifest written by run_suite.
inline std::vector<ReportRow> report_from_manifest(const fs::path& manifest_path) {
  const json manifest = read_json(manifest_path);
  std::vector<ReportRow> rows;
  for (const auto& e : manifest) {
    ReportRow row{e.at("group"), e.at("condition"), e.at("variant"), std::nullopt, {}};
    const std::string kind = e.at("kind");
    if (kind == "oracle") {
      row.val = estimate_from_json(e.at("val_acc"));
    } else {
      const RunRecord rec = run_record_from_json(read_json(e.at("aggregate").get<std::string>()));
      row.train = rec.train_acc;
      if (kind == "ood") {
        if (!rec.ood_acc) throw IoError("aggregate lacks the OOD evaluation: " + e.at("aggregate").get<std::string>());
        row.val = *rec.ood_acc;
      } else {
        row.val = rec.val_acc;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace icl
