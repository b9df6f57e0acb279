#pragma once

// Run orchestration: JSON run configuration, a content-hashed manifest of
// completed stages, the stage implementations, the checkpointed decoder-grid
// scheduler, and the report emitter.

#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "repspace/brainmap.hpp"
#include "repspace/concurrency.hpp"
#include "repspace/encoding.hpp"
#include "repspace/feature_store.hpp"
#include "repspace/geometry.hpp"
#include "repspace/io.hpp"
#include "repspace/report.hpp"
#include "repspace/synthgen.hpp"
#include "repspace/tournament.hpp"
#include "repspace/transfer.hpp"

namespace repspace {

inline constexpr const char* kToolkitVersion = "0.1.0";

using json = nlohmann::json;

/// Upstream stage missing or stale.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The run directory was produced under a different configuration.
class ConfigMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by the fault-injection hook to simulate the process dying mid-grid.
/// Never retried.
class InjectedCrash : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

struct SyntheticResponsesConfig {
  std::size_t subjects = 5;
  std::size_t channels = 60;
  double noise_sd = 1.0;
  std::vector<std::string> drivers;  // channel v is driven by drivers[v * |drivers| / V]
  bool normalize_signal = true;
  double tr_seconds = 2.0;
};

struct SyntheticConfig {
  std::uint64_t seed = 1;
  std::size_t latent_dim = 7;
  std::size_t train_tokens = 4000;
  std::size_t train_stories = 8;
  std::size_t test_tokens = 1000;
  std::string universal_id;
  std::vector<SyntheticRep> reps;
  std::map<std::string, double> mds_weights;
  std::optional<SyntheticResponsesConfig> responses;
};

struct SubjectInput {
  std::string subject;
  fs::path path;
};

struct DataConfig {
  fs::path corpus;
  std::vector<fs::path> bundles;
  std::string universal_id;
  std::vector<SubjectInput> responses;
};

struct RunConfig {
  fs::path output_dir = "repspace-run";
  std::size_t workers = 1;
  std::size_t max_retries = 2;
  std::uint64_t seed = 0;

  std::optional<DataConfig> data;
  std::optional<SyntheticConfig> synthetic;
  TrainConfig train;

  double diag_value = 0.1;
  bool renormalize = false;

  std::size_t mds_dims = 2;
  std::string mds_weights = "auto";  // auto | uniform
  std::string anchor;                // defaults to the universal id
  Sign anchor_sign = Sign::Negative;
  std::size_t scree_k = 10;

  CvOptions cv;
  std::vector<int> delays{1, 2, 3, 4};
  double words_per_second = 2.5;

  std::size_t majority_threshold = 3;
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok |= k == a;
    if (!ok) throw ValidationError("config: unknown key '" + k + "' in '" + where + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json j;
  j["output_dir"] = c.output_dir.string();
  j["workers"] = c.workers;
  j["max_retries"] = c.max_retries;
  j["seed"] = c.seed;
  if (c.data) {
    json d;
    d["corpus"] = c.data->corpus.string();
    d["bundles"] = json::array();
    for (const auto& b : c.data->bundles) d["bundles"].push_back(b.string());
    d["universal_id"] = c.data->universal_id;
    d["responses"] = json::array();
    for (const auto& r : c.data->responses) d["responses"].push_back({{"subject", r.subject}, {"path", r.path.string()}});
    j["data"] = d;
  }
  if (c.synthetic) {
    const auto& s = *c.synthetic;
    json d;
    d["seed"] = s.seed;
    d["latent_dim"] = s.latent_dim;
    d["train_tokens"] = s.train_tokens;
    d["train_stories"] = s.train_stories;
    d["test_tokens"] = s.test_tokens;
    d["universal_id"] = s.universal_id;
    d["reps"] = json::array();
    for (const auto& r : s.reps) {
      json rj{{"id", r.id},           {"visible", r.visible},           {"output_dim", r.output_dim},
              {"noise_sd", r.noise_sd}, {"latent_offset", r.latent_offset}, {"model_group", r.model_group}};
      if (!r.mixing_key.empty()) rj["mixing_key"] = r.mixing_key;
      if (r.layer_index) rj["layer_index"] = *r.layer_index;
      if (auto it = s.mds_weights.find(r.id); it != s.mds_weights.end()) rj["mds_weight"] = it->second;
      d["reps"].push_back(rj);
    }
    if (s.responses) {
      const auto& r = *s.responses;
      d["responses"] = {{"subjects", r.subjects},   {"channels", r.channels},
                        {"noise_sd", r.noise_sd},   {"drivers", r.drivers},
                        {"normalize_signal", r.normalize_signal}, {"tr_seconds", r.tr_seconds}};
    }
    j["synthetic"] = d;
  }
  j["train"] = {{"latent_dim", c.train.latent_dim},       {"batch_size", c.train.batch_size},
                {"lr_encoder", c.train.lr_encoder},       {"lr_decoder", c.train.lr_decoder},
                {"max_batches", c.train.max_batches},     {"patience", c.train.patience},
                {"validation_fraction", c.train.validation_fraction}, {"rank_tolerance", c.train.rank_tolerance}};
  j["tournament"] = {{"diag_value", c.diag_value}, {"renormalize", c.renormalize}};
  j["geometry"] = {{"dims", c.mds_dims},
                   {"weights", c.mds_weights},
                   {"anchor", c.anchor},
                   {"anchor_sign", c.anchor_sign == Sign::Negative ? "negative" : "positive"},
                   {"scree_k", c.scree_k}};
  j["encoding"] = {{"alphas", c.cv.alphas},   {"folds", c.cv.folds},
                   {"holdout", c.cv.holdout}, {"delays", c.delays},
                   {"words_per_second", c.words_per_second}};
  j["brainmap"] = {{"majority_threshold", c.majority_threshold}};
  return j;
}

/// Relative paths resolve against `base` (the config file's directory).
inline RunConfig config_from_json(const json& j, const fs::path& base = ".") {
  using detail::check_keys;
  using detail::read_opt;
  check_keys(j, {"output_dir", "workers", "max_retries", "seed", "data", "synthetic", "train", "tournament", "geometry",
                 "encoding", "brainmap"},
             "(top level)");
  RunConfig c;
  if (j.contains("output_dir")) c.output_dir = detail::resolve(base, j.at("output_dir").get<std::string>());
  read_opt(j, "workers", c.workers);
  read_opt(j, "max_retries", c.max_retries);
  read_opt(j, "seed", c.seed);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"corpus", "bundles", "universal_id", "responses"}, "data");
    DataConfig dc;
    dc.corpus = detail::resolve(base, d.at("corpus").get<std::string>());
    for (const auto& b : d.at("bundles")) dc.bundles.push_back(detail::resolve(base, b.get<std::string>()));
    dc.universal_id = d.at("universal_id").get<std::string>();
    if (d.contains("responses"))
      for (const auto& r : d.at("responses")) {
        check_keys(r, {"subject", "path"}, "data.responses[]");
        dc.responses.push_back({r.at("subject").get<std::string>(), detail::resolve(base, r.at("path").get<std::string>())});
      }
    c.data = dc;
  }
  if (j.contains("synthetic")) {
    const auto& d = j.at("synthetic");
    check_keys(d, {"seed", "latent_dim", "train_tokens", "train_stories", "test_tokens", "universal_id", "reps", "responses"},
               "synthetic");
    SyntheticConfig s;
    read_opt(d, "seed", s.seed);
    read_opt(d, "latent_dim", s.latent_dim);
    read_opt(d, "train_tokens", s.train_tokens);
    read_opt(d, "train_stories", s.train_stories);
    read_opt(d, "test_tokens", s.test_tokens);
    s.universal_id = d.at("universal_id").get<std::string>();
    for (const auto& r : d.at("reps")) {
      check_keys(r, {"id", "visible", "output_dim", "noise_sd", "latent_offset", "mixing_key", "model_group", "layer_index",
                     "mds_weight"},
                 "synthetic.reps[]");
      SyntheticRep rep;
      rep.id = r.at("id").get<std::string>();
      rep.visible = r.at("visible").get<std::size_t>();
      rep.output_dim = r.at("output_dim").get<std::size_t>();
      read_opt(r, "noise_sd", rep.noise_sd);
      read_opt(r, "latent_offset", rep.latent_offset);
      read_opt(r, "mixing_key", rep.mixing_key);
      read_opt(r, "model_group", rep.model_group);
      if (r.contains("layer_index")) rep.layer_index = r.at("layer_index").get<std::size_t>();
      if (r.contains("mds_weight")) s.mds_weights[rep.id] = r.at("mds_weight").get<double>();
      s.reps.push_back(rep);
    }
    if (d.contains("responses")) {
      const auto& r = d.at("responses");
      check_keys(r, {"subjects", "channels", "noise_sd", "drivers", "normalize_signal", "tr_seconds"}, "synthetic.responses");
      SyntheticResponsesConfig rc;
      read_opt(r, "subjects", rc.subjects);
      read_opt(r, "channels", rc.channels);
      read_opt(r, "noise_sd", rc.noise_sd);
      read_opt(r, "drivers", rc.drivers);
      read_opt(r, "normalize_signal", rc.normalize_signal);
      read_opt(r, "tr_seconds", rc.tr_seconds);
      s.responses = rc;
    }
    c.synthetic = s;
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, {"latent_dim", "batch_size", "lr_encoder", "lr_decoder", "max_batches", "patience", "validation_fraction",
                   "rank_tolerance"},
               "train");
    read_opt(t, "latent_dim", c.train.latent_dim);
    read_opt(t, "batch_size", c.train.batch_size);
    read_opt(t, "lr_encoder", c.train.lr_encoder);
    read_opt(t, "lr_decoder", c.train.lr_decoder);
    read_opt(t, "max_batches", c.train.max_batches);
    read_opt(t, "patience", c.train.patience);
    read_opt(t, "validation_fraction", c.train.validation_fraction);
    read_opt(t, "rank_tolerance", c.train.rank_tolerance);
  }
  if (j.contains("tournament")) {
    const auto& t = j.at("tournament");
    check_keys(t, {"diag_value", "renormalize"}, "tournament");
    read_opt(t, "diag_value", c.diag_value);
    read_opt(t, "renormalize", c.renormalize);
  }
  if (j.contains("geometry")) {
    const auto& g = j.at("geometry");
    check_keys(g, {"dims", "weights", "anchor", "anchor_sign", "scree_k"}, "geometry");
    read_opt(g, "dims", c.mds_dims);
    read_opt(g, "weights", c.mds_weights);
    read_opt(g, "anchor", c.anchor);
    if (g.contains("anchor_sign")) {
      const auto s = g.at("anchor_sign").get<std::string>();
      if (s != "negative" && s != "positive") throw ValidationError("config: geometry.anchor_sign must be negative or positive");
      c.anchor_sign = s == "negative" ? Sign::Negative : Sign::Positive;
    }
    read_opt(g, "scree_k", c.scree_k);
  }
  if (j.contains("encoding")) {
    const auto& e = j.at("encoding");
    check_keys(e, {"alphas", "folds", "holdout", "delays", "words_per_second"}, "encoding");
    read_opt(e, "alphas", c.cv.alphas);
    read_opt(e, "folds", c.cv.folds);
    read_opt(e, "holdout", c.cv.holdout);
    read_opt(e, "delays", c.delays);
    read_opt(e, "words_per_second", c.words_per_second);
  }
  if (j.contains("brainmap")) {
    const auto& b = j.at("brainmap");
    check_keys(b, {"majority_threshold"}, "brainmap");
    read_opt(b, "majority_threshold", c.majority_threshold);
  }
  return c;
}

inline void validate(const RunConfig& c) {
  require(c.data || c.synthetic, "config: need a 'data' or a 'synthetic' section");
  require(c.workers >= 1, "config: workers must be >= 1");
  c.train.validate();
  require(c.mds_dims >= 1 && c.mds_dims <= 10, "config: geometry.dims must lie in [1, 10]");
  require(c.mds_weights == "auto" || c.mds_weights == "uniform", "config: geometry.weights must be auto or uniform");
  require(c.scree_k >= 1, "config: geometry.scree_k must be >= 1");
  require(!c.cv.alphas.empty(), "config: encoding.alphas is empty");
  for (double a : c.cv.alphas) require(a >= 0.0, "config: encoding.alphas must be >= 0");
  require(c.cv.folds >= 1, "config: encoding.folds must be >= 1");
  require(c.cv.holdout > 0.0 && c.cv.holdout < 1.0, "config: encoding.holdout must lie in (0, 1)");
  validate_delays(c.delays);
  require(c.words_per_second > 0.0, "config: encoding.words_per_second must be positive");
  require(c.majority_threshold >= 1, "config: brainmap.majority_threshold must be >= 1");
  if (c.data) {
    auto exists = [](const fs::path& p, const std::string& what) {
      if (!fs::exists(p)) throw ValidationError("config: " + what + " '" + p.string() + "' does not exist");
    };
    exists(c.data->corpus, "corpus manifest");
    for (const auto& b : c.data->bundles) exists(b, "bundle");
    for (const auto& r : c.data->responses) exists(r.path, "response file");
  }
  if (c.synthetic) {
    require(!c.synthetic->reps.empty(), "config: synthetic.reps is empty");
    if (c.synthetic->responses) {
      const auto& r = *c.synthetic->responses;
      require(r.subjects >= 1 && r.channels >= 1, "config: synthetic.responses needs subjects and channels >= 1");
      require(!r.drivers.empty(), "config: synthetic.responses.drivers is empty");
      require(r.drivers.size() <= r.channels, "config: more drivers than channels");
    }
  }
}

/// Applies environment overrides (REPSPACE_OUTPUT_DIR, REPSPACE_WORKERS).
inline void apply_env_overrides(RunConfig& c) {
  if (const char* d = std::getenv("REPSPACE_OUTPUT_DIR"); d && *d) c.output_dir = d;
  if (const char* w = std::getenv("REPSPACE_WORKERS"); w && *w) {
    try {
      c.workers = static_cast<std::size_t>(std::stoul(w));
    } catch (const std::exception&) {
      throw ValidationError(std::string("REPSPACE_WORKERS is not a number: ") + w);
    }
  }
}

inline RunConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  try {
    return config_from_json(j, path.parent_path());
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

/// Hash of every setting that can change an output. Output location, worker
/// count and retry limit are excluded.
inline std::string config_section_hash(const RunConfig& c, const std::string& section) {
  json j = to_json(c);
  json part = section.empty() ? j : (j.contains(section) ? j.at(section) : json());
  if (section.empty()) {
    part.erase("output_dir");
    part.erase("workers");
    part.erase("max_retries");
  }
  return sha256_hex(part.dump() + "|seed=" + std::to_string(c.seed)).substr(0, 16);
}

inline std::string config_hash(const RunConfig& c) { return config_section_hash(c, ""); }

// ---------------------------------------------------------------------------
// Manifest

struct StageRecord {
  std::string inputs_hash;
  std::map<std::string, std::string> outputs;  // relative path -> sha256
  std::string outputs_hash;
  double wall_seconds = 0.0;
};

struct RunManifest {
  std::string config_hash;
  std::string toolkit_version = kToolkitVersion;
  std::map<std::string, StageRecord> stages;
};

inline json to_json(const RunManifest& m) {
  json j;
  j["config_hash"] = m.config_hash;
  j["toolkit_version"] = m.toolkit_version;
  j["stages"] = json::object();
  for (const auto& [name, r] : m.stages)
    j["stages"][name] = {{"inputs_hash", r.inputs_hash},
                         {"outputs", r.outputs},
                         {"outputs_hash", r.outputs_hash},
                         {"wall_seconds", r.wall_seconds}};
  return j;
}

inline RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.toolkit_version = j.at("toolkit_version").get<std::string>();
  for (const auto& [name, r] : j.at("stages").items())
    m.stages[name] = {r.at("inputs_hash").get<std::string>(), r.at("outputs").get<std::map<std::string, std::string>>(),
                      r.at("outputs_hash").get<std::string>(), r.at("wall_seconds").get<double>()};
  return m;
}

// ---------------------------------------------------------------------------
// Stage graph

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"ingest",  "synth",  "train-encoders", "train-decoders",
                                              "tournament", "embed", "mds",           "scree",
                                              "encode",  "project", "discriminate",  "report"};
  return names;
}

/// "data" stands for whichever of ingest/synth produced the run's inputs.
inline std::vector<std::string> stage_dependencies(const std::string& stage) {
  static const std::map<std::string, std::vector<std::string>> deps{
      {"ingest", {}},
      {"synth", {}},
      {"train-encoders", {"data"}},
      {"train-decoders", {"train-encoders"}},
      {"tournament", {"train-decoders"}},
      {"embed", {"tournament"}},
      {"mds", {"embed"}},
      {"scree", {"embed"}},
      {"encode", {"data"}},
      {"project", {"mds", "encode"}},
      {"discriminate", {"embed", "encode"}},
      {"report", {"embed", "mds", "scree", "discriminate"}},
  };
  const auto it = deps.find(stage);
  if (it == deps.end()) throw ValidationError("unknown stage '" + stage + "'");
  return it->second;
}

inline std::string stage_config_section(const std::string& stage) {
  static const std::map<std::string, std::string> sections{
      {"ingest", "data"},         {"synth", "synthetic"},    {"train-encoders", "train"}, {"train-decoders", "train"},
      {"tournament", "tournament"}, {"embed", "tournament"}, {"mds", "geometry"},         {"scree", "geometry"},
      {"encode", "encoding"},     {"project", "geometry"},   {"discriminate", "brainmap"}, {"report", "geometry"}};
  return sections.at(stage);
}

/// Fault hooks for the decoder grid. `fail_after_jobs` simulates a crash once
/// that many jobs have completed in this invocation; `transient_failures`
/// makes the first k attempts of the named job ("source/target") throw.
struct SchedulerHooks {
  std::optional<std::size_t> fail_after_jobs;
  std::map<std::string, std::size_t> transient_failures;
};

/// REPSPACE_FAIL_AFTER_JOBS=N and REPSPACE_FAIL_JOB=source/target[:k].
inline SchedulerHooks hooks_from_env() {
  SchedulerHooks h;
  if (const char* n = std::getenv("REPSPACE_FAIL_AFTER_JOBS"); n && *n) h.fail_after_jobs = std::stoul(n);
  if (const char* f = std::getenv("REPSPACE_FAIL_JOB"); f && *f) {
    std::string s = f;
    std::size_t k = 1;
    if (const auto c = s.rfind(':'); c != std::string::npos) {
      k = std::stoul(s.substr(c + 1));
      s = s.substr(0, c);
    }
    h.transient_failures[s] = k;
  }
  return h;
}

struct StageOutcome {
  std::string stage;
  bool skipped = false;
  std::vector<std::string> outputs;
  std::vector<std::string> messages;
};

struct GridReport {
  std::size_t total = 0;
  std::size_t resumed = 0;   // already persisted when the stage started
  std::size_t trained = 0;
  std::size_t retries = 0;
};

// ---------------------------------------------------------------------------

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, SchedulerHooks hooks = {}, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), hooks_(std::move(hooks)), log_(log) {
    validate(cfg_);
    cfg_.train.seed = cfg_.seed;
    cfg_.cv.seed = cfg_.seed;
  }

  const RunConfig& config() const { return cfg_; }
  const fs::path& dir() const { return cfg_.output_dir; }
  fs::path manifest_path() const { return dir() / "manifest.json"; }
  const GridReport& last_grid() const { return grid_; }

  RunManifest load_manifest() const {
    if (!fs::exists(manifest_path())) return RunManifest{config_hash(cfg_), kToolkitVersion, {}};
    try {
      return manifest_from_json(json::parse(read_file(manifest_path())));
    } catch (const json::exception& e) {
      throw IoError(manifest_path().string() + ": " + e.what());
    }
  }

  /// Runs one stage. A completed stage whose inputs are unchanged and whose
  /// outputs still verify is a no-op unless `force` is set.
  StageOutcome run(const std::string& stage, bool force = false) {
    stage_dependencies(stage);  // validates the name
    RunManifest m = load_manifest();
    const std::string chash = config_hash(cfg_);
    if (m.config_hash != chash) {
      if (!force)
        throw ConfigMismatchError("stage '" + stage + "': run directory " + dir().string() +
                                  " was created with a different configuration (hash " + m.config_hash + ", now " +
                                  chash + "); rerun with --force to recompute under the new configuration");
      m.config_hash = chash;
    }

    std::vector<std::string> missing;
    std::string upstream;
    for (const auto& dep : stage_dependencies(stage)) {
      const std::string name = dep == "data" ? data_stage(m) : dep;
      if (name.empty() || !record_valid(m, name)) {
        missing.push_back(dep == "data" ? "ingest (or synth)" : dep);
        continue;
      }
      upstream += name + "=" + m.stages.at(name).outputs_hash + ";";
    }
    if (!missing.empty()) {
      std::string list;
      for (const auto& s : missing) list += (list.empty() ? "" : ", ") + ("\"" + s + "\"");
      throw DependencyError("stage '" + stage + "' requires " + list + " to complete first");
    }
    const std::string inputs = sha256_hex(stage + "|" + config_section_hash(cfg_, stage_config_section(stage)) + "|" + upstream)
                                   .substr(0, 16);

    StageOutcome out;
    out.stage = stage;
    if (!force && m.stages.count(stage) && m.stages.at(stage).inputs_hash == inputs && record_valid(m, stage)) {
      out.skipped = true;
      for (const auto& [p, h] : m.stages.at(stage).outputs) out.outputs.push_back(p);
      say(stage + ": up to date");
      return out;
    }

    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(dir());
    std::vector<std::string> produced = dispatch(stage, out.messages);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    StageRecord rec;
    rec.inputs_hash = inputs;
    rec.wall_seconds = wall;
    std::string all;
    for (const auto& rel : produced) {
      rec.outputs[rel] = sha256_file(dir() / rel);
    }
    for (const auto& [rel, h] : rec.outputs) all += rel + "=" + h + "\n";
    rec.outputs_hash = sha256_hex(all).substr(0, 16);

    const bool changed = !m.stages.count(stage) || m.stages.at(stage).outputs_hash != rec.outputs_hash;
    m.stages[stage] = rec;
    if (stage == "ingest") m.stages.erase("synth");
    if (stage == "synth") m.stages.erase("ingest");
    if (changed) invalidate_downstream(m, stage == "ingest" || stage == "synth" ? "data" : stage);
    atomic_write(manifest_path(), to_json(m).dump(2) + "\n");
    out.outputs.assign(produced.begin(), produced.end());
    say(stage + ": done (" + std::to_string(produced.size()) + " outputs)");
    return out;
  }

  /// Data stage, then every analysis stage in order. The encoding branch runs
  /// only when responses are configured.
  std::vector<StageOutcome> run_all(bool force = false) {
    std::vector<StageOutcome> out;
    const bool synthetic = cfg_.synthetic.has_value();
    out.push_back(run(synthetic ? "synth" : "ingest", force));
    for (const char* s : {"train-encoders", "train-decoders", "tournament", "embed", "mds", "scree"})
      out.push_back(run(s, force));
    if (has_responses()) {
      for (const char* s : {"encode", "project", "discriminate", "report"}) out.push_back(run(s, force));
    }
    return out;
  }

  bool has_responses() const {
    return (cfg_.synthetic && cfg_.synthetic->responses) || (cfg_.data && !cfg_.data->responses.empty());
  }

  // Dataset access for stages and tests.
  AlignedDataset load_dataset() const {
    const json meta = json::parse(read_file(dir() / "data" / "dataset.json"));
    const TokenCorpus corpus = corpus_from_json(json::parse(read_file(dir() / "data" / "corpus.json")));
    std::vector<FeatureBundle> bundles;
    for (const auto& id : meta.at("ids")) bundles.push_back(read_bundle(dir() / "data" / "bundles" / (id.get<std::string>() + ".fbn")));
    return align(corpus, std::move(bundles), meta.at("universal_id").get<std::string>());
  }

  std::vector<std::string> subjects() const {
    const json meta = json::parse(read_file(dir() / "data" / "dataset.json"));
    return meta.at("subjects").get<std::vector<std::string>>();
  }

 private:
  RunConfig cfg_;
  SchedulerHooks hooks_;
  std::ostream* log_;
  GridReport grid_;
  std::mutex log_mutex_;

  void say(const std::string& s) {
    if (!log_) return;
    std::lock_guard lock(log_mutex_);
    *log_ << s << "\n";
  }

  static std::string data_stage(const RunManifest& m) {
    if (m.stages.count("ingest")) return "ingest";
    if (m.stages.count("synth")) return "synth";
    return "";
  }

  bool record_valid(const RunManifest& m, const std::string& stage) const {
    const auto it = m.stages.find(stage);
    if (it == m.stages.end()) return false;
    for (const auto& [rel, h] : it->second.outputs) {
      const fs::path p = dir() / rel;
      if (!fs::exists(p) || sha256_file(p) != h) return false;
    }
    return true;
  }

  static void invalidate_downstream(RunManifest& m, const std::string& changed) {
    std::set<std::string> stale{changed};
    bool grew = true;
    while (grew) {
      grew = false;
      for (const auto& s : stage_names())
        for (const auto& d : stage_dependencies(s))
          if (stale.count(d) && stale.insert(s).second) grew = true;
    }
    for (const auto& s : stale)
      if (s != changed && s != "ingest" && s != "synth") m.stages.erase(s);
  }

  std::vector<std::string> dispatch(const std::string& stage, std::vector<std::string>& messages) {
    if (stage == "ingest") return stage_ingest();
    if (stage == "synth") return stage_synth();
    if (stage == "train-encoders") return stage_encoders();
    if (stage == "train-decoders") return stage_decoders();
    if (stage == "tournament") return stage_tournament();
    if (stage == "embed") return stage_embed();
    if (stage == "mds") return stage_mds(messages);
    if (stage == "scree") return stage_scree();
    if (stage == "encode") return stage_encode();
    if (stage == "project") return stage_project();
    if (stage == "discriminate") return stage_discriminate();
    return stage_report();
  }

  std::string write_text(const std::string& rel, const std::string& content) {
    fs::create_directories((dir() / rel).parent_path());
    atomic_write(dir() / rel, content);
    return rel;
  }

  static void check_id(const std::string& id) {
    require(!id.empty(), "representation and subject ids must be nonempty");
    for (char c : id)
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'))
        throw ValidationError("id '" + id + "' contains characters outside [A-Za-z0-9._-]");
  }

  std::vector<std::string> write_dataset(const TokenCorpus& corpus, const std::vector<FeatureBundle>& bundles,
                                         const std::string& universal,
                                         const std::vector<std::pair<std::string, ResponseDataset>>& responses) {
    std::vector<std::string> out;
    fs::create_directories(dir() / "data" / "bundles");
    out.push_back(write_text("data/corpus.json", corpus_to_json(corpus).dump(2) + "\n"));
    json meta;
    meta["universal_id"] = universal;
    meta["ids"] = json::array();
    for (const auto& b : bundles) {
      check_id(b.spec.id);
      const std::string rel = "data/bundles/" + b.spec.id + ".fbn";
      write_bundle(b, dir() / rel);
      out.push_back(rel);
      meta["ids"].push_back(b.spec.id);
    }
    meta["subjects"] = json::array();
    for (const auto& [subject, r] : responses) {
      check_id(subject);
      const std::string rel = "data/responses/" + subject + ".fbn";
      fs::create_directories(dir() / "data" / "responses");
      write_responses(r, dir() / rel, {});
      out.push_back(rel);
      meta["subjects"].push_back(subject);
    }
    out.push_back(write_text("data/dataset.json", meta.dump(2) + "\n"));
    return out;
  }

  std::vector<std::string> stage_ingest() {
    require(cfg_.data.has_value(), "ingest: config has no 'data' section");
    const auto& d = *cfg_.data;
    const TokenCorpus corpus = corpus_from_json(json::parse(read_file(d.corpus)));
    std::vector<FeatureBundle> bundles;
    for (const auto& p : d.bundles) bundles.push_back(read_bundle(p));
    const AlignedDataset ds = align(corpus, bundles, d.universal_id);
    std::vector<std::pair<std::string, ResponseDataset>> responses;
    for (const auto& r : d.responses) {
      ResponseDataset rd = read_responses(r.path);
      const auto tl = tr_timeline(corpus, rd.tr_seconds, cfg_.words_per_second);
      if (static_cast<std::size_t>(rd.responses.rows()) != tl.total_trs)
        throw ValidationError("ingest: responses for '" + r.subject + "' have " + std::to_string(rd.responses.rows()) +
                              " TRs but the corpus spans " + std::to_string(tl.total_trs));
      responses.emplace_back(r.subject, std::move(rd));
    }
    return write_dataset(ds.corpus(), ds.bundles(), ds.universal_id(), responses);
  }

  std::vector<std::string> stage_synth() {
    require(cfg_.synthetic.has_value(), "synth: config has no 'synthetic' section");
    const auto& s = *cfg_.synthetic;
    const TokenCorpus corpus = synthetic_corpus(s.train_tokens, s.train_stories, s.test_tokens);
    NestedFamilySpec spec{s.seed, s.latent_dim, corpus.total_tokens(), s.reps};
    std::vector<FeatureBundle> bundles = gen_nested_reps(spec);
    for (auto& b : bundles)
      if (auto it = s.mds_weights.find(b.spec.id); it != s.mds_weights.end()) b.spec.mds_weight = it->second;
    const AlignedDataset ds = align(corpus, bundles, s.universal_id);
    std::vector<std::pair<std::string, ResponseDataset>> responses;
    if (s.responses) {
      const auto& rc = *s.responses;
      for (std::size_t subj = 0; subj < rc.subjects; ++subj) {
        const std::string name = "s" + std::to_string(subj + 1);
        ResponseDataset merged;
        const std::size_t nd = rc.drivers.size();
        for (std::size_t k = 0; k < nd; ++k) {
          const std::size_t begin = k * rc.channels / nd, end = (k + 1) * rc.channels / nd;
          SyntheticResponseSpec rs;
          rs.seed = derive_seed(s.seed, {"subject", name});
          rs.source_rep = rc.drivers[k];
          rs.channels = end - begin;
          rs.noise_sd = rc.noise_sd;
          rs.tr_seconds = rc.tr_seconds;
          rs.delays = cfg_.delays;
          rs.words_per_second = cfg_.words_per_second;
          rs.normalize_signal = rc.normalize_signal;
          rs.padding_trs = static_cast<std::size_t>(*std::max_element(cfg_.delays.begin(), cfg_.delays.end()));
          SyntheticResponses part = gen_synthetic_responses(rs, ds.bundle(rc.drivers[k]), ds.corpus());
          if (k == 0) {
            merged = part.data;
            merged.responses.resize(part.data.responses.rows(), static_cast<Eigen::Index>(rc.channels));
            merged.channel_ids.clear();
          }
          merged.responses.middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
              part.data.responses;
          for (std::size_t v = begin; v < end; ++v) {
            merged.channel_ids.push_back("ch" + std::to_string(v));
            merged.channel_labels.push_back(rc.drivers[k]);
          }
        }
        responses.emplace_back(name, std::move(merged));
      }
    }
    return write_dataset(ds.corpus(), ds.bundles(), ds.universal_id(), responses);
  }

  fs::path encoder_path(const std::string& id) const { return dir() / "encoders" / (id + ".fbn"); }
  fs::path decoder_path(const std::string& s, const std::string& t) const { return dir() / "decoders" / s / (t + ".fbn"); }
  fs::path mse_path(const std::string& s, const std::string& t) const { return dir() / "decoders" / s / (t + ".mse.fbn"); }
  static std::string rel(const std::string& a, const std::string& b) { return a + "/" + b; }

  std::vector<std::string> stage_encoders() {
    const AlignedDataset ds = load_dataset();
    const Split sp = split(ds);
    const auto ids = ds.ids();
    fs::create_directories(dir() / "encoders");
    parallel_for(ids.size(), cfg_.workers, [&](std::size_t k) {
      const EncoderTraining et = train_encoder(ds, ids[k], cfg_.train, &sp);
      Header h;
      h.set("target", ids[k]);
      h.set("universal", ds.universal_id());
      h.set("train_config", cfg_.train.hash());
      h.set("retained_rank", static_cast<long long>(et.retained_rank));
      h.set("batches", static_cast<long long>(et.log.batches));
      write_linear_map(et.encoder, encoder_path(ids[k]), h);
      say("train-encoders: " + ids[k] + " (rank " + std::to_string(et.retained_rank) + ", " +
          std::to_string(et.log.batches) + " batches)");
    });
    std::vector<std::string> out;
    for (const auto& id : ids) out.push_back(rel("encoders", id + ".fbn"));
    return out;
  }

  /// n² independent decoder jobs over the worker pool. A job is complete when
  /// its decoder file exists with the current job stamp; the per-row MSE file
  /// is written first, so a decoder file implies its MSE file.
  std::vector<std::string> stage_decoders() {
    const AlignedDataset ds = load_dataset();
    const Split sp = split(ds);
    const auto ids = ds.ids();
    const std::size_t n = ids.size();
    const std::string stamp = cfg_.train.hash() + "-" + encoder_stamp(ids);

    std::vector<LatentDataset> latents;
    for (const auto& id : ids) latents.push_back(encode(read_linear_map(encoder_path(id)), id, ds.universal().values));

    grid_ = {};
    grid_.total = n * n;
    std::vector<std::size_t> pending;
    for (std::size_t job = 0; job < n * n; ++job) {
      const auto& s = ids[job / n];
      const auto& t = ids[job % n];
      if (job_complete(s, t, stamp))
        ++grid_.resumed;
      else
        pending.push_back(job);
    }
    say("train-decoders: " + std::to_string(pending.size()) + " of " + std::to_string(n * n) + " jobs to run");

    std::atomic<std::size_t> completed{0}, retries{0};
    std::mutex fault_mutex;
    std::map<std::string, std::size_t> failures_left = hooks_.transient_failures;
    std::vector<std::string> failure_log;
    parallel_for(pending.size(), cfg_.workers, [&](std::size_t p) {
      const std::size_t job = pending[p];
      const std::size_t si = job / n, ti = job % n;
      const std::string key = ids[si] + "/" + ids[ti];
      for (std::size_t attempt = 0;; ++attempt) {
        try {
          {
            std::lock_guard lock(fault_mutex);
            auto it = failures_left.find(key);
            if (it != failures_left.end() && it->second > 0) {
              --it->second;
              throw NumericError("injected transient failure in job " + key);
            }
          }
          run_decoder_job(ds, sp, latents[si], ids[ti], stamp);
          break;
        } catch (const InjectedCrash&) {
          throw;
        } catch (const std::exception& e) {
          std::lock_guard lock(fault_mutex);
          failure_log.push_back(key + "\tattempt " + std::to_string(attempt + 1) + "\t" + e.what());
          if (attempt >= cfg_.max_retries)
            throw std::runtime_error("decoder job " + key + " failed after " + std::to_string(attempt + 1) +
                                     " attempts: " + e.what());
          ++retries;
        }
      }
      const std::size_t done = ++completed;
      if (hooks_.fail_after_jobs && done >= *hooks_.fail_after_jobs)
        throw InjectedCrash("injected crash after " + std::to_string(done) + " decoder jobs");
    });
    grid_.trained = completed.load();
    grid_.retries = retries.load();
    if (!failure_log.empty()) {
      std::sort(failure_log.begin(), failure_log.end());
      std::string text;
      for (const auto& l : failure_log) text += l + "\n";
      say("train-decoders: " + std::to_string(failure_log.size()) + " failed attempts retried");
      atomic_write(dir() / "decoders" / "failures.log", text);
    }

    std::vector<std::string> out;
    for (const auto& s : ids)
      for (const auto& t : ids) {
        out.push_back(rel("decoders", s + "/" + t + ".fbn"));
        out.push_back(rel("decoders", s + "/" + t + ".mse.fbn"));
      }
    return out;
  }

  std::string encoder_stamp(const std::vector<std::string>& ids) const {
    std::string all;
    for (const auto& id : ids) all += sha256_file(encoder_path(id));
    return sha256_hex(all).substr(0, 16);
  }

  bool job_complete(const std::string& s, const std::string& t, const std::string& stamp) const {
    if (!fs::exists(decoder_path(s, t)) || !fs::exists(mse_path(s, t))) return false;
    try {
      Header h;
      read_linear_map(decoder_path(s, t), &h);
      read_matrix_file(mse_path(s, t));
      return h.get_or("job_stamp", "") == stamp;
    } catch (const std::exception&) {
      return false;
    }
  }

  void run_decoder_job(const AlignedDataset& ds, const Split& sp, const LatentDataset& latent, const std::string& target,
                       const std::string& stamp) {
    const FeatureBundle& tb = ds.bundle(target);
    const DecoderTraining dt = train_decoder(latent, tb, ds.corpus(), sp.train, cfg_.train);
    const Vector mse = decoder_sample_mse(dt.decoder, take_rows(latent.values, sp.test), take_rows(tb.values, sp.test));
    fs::create_directories(decoder_path(latent.rep_id, target).parent_path());
    Header mh;
    mh.set("kind", "decoder-test-mse");
    mh.set("source", latent.rep_id);
    mh.set("target", target);
    write_matrix_file(mse_path(latent.rep_id, target), Matrix(mse.transpose()), mh, DType::F64);
    Header h;
    h.set("source", latent.rep_id);
    h.set("target", target);
    h.set("train_config", cfg_.train.hash());
    h.set("job_stamp", stamp);
    h.set("batches", static_cast<long long>(dt.log.batches));
    write_linear_map(dt.decoder, decoder_path(latent.rep_id, target), h);
  }

  std::vector<std::string> ids_from_dataset() const {
    const json meta = json::parse(read_file(dir() / "data" / "dataset.json"));
    return meta.at("ids").get<std::vector<std::string>>();
  }

  std::vector<std::string> stage_tournament() {
    const auto ids = ids_from_dataset();
    const std::size_t n = ids.size();
    fs::create_directories(dir() / "tournament");
    Matrix weights(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    std::vector<std::string> out;
    Matrix iterations(static_cast<Eigen::Index>(n), 1);
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<Vector> mse;
      for (const auto& s : ids) mse.push_back(read_matrix_file(mse_path(s, ids[t])).data.row(0).transpose());
      const TournamentMatrix tm = build_tournament(ids[t], mse);
      const AhpResult a = ahp_weights(tm);
      weights.row(static_cast<Eigen::Index>(t)) = a.weights.transpose();
      iterations(static_cast<Eigen::Index>(t), 0) = static_cast<double>(a.iterations);
      Header h;
      h.set("kind", "tournament");
      h.set("target", ids[t]);
      h.set("test_rows", static_cast<long long>(tm.test_count));
      write_matrix_file(dir() / "tournament" / (ids[t] + ".fbn"), tm.W, h, DType::F64);
      out.push_back(rel("tournament", ids[t] + ".fbn"));
    }
    Header h;
    h.set("kind", "ahp-weights");
    h.set("ids", join(ids));
    write_matrix_file(dir() / "tournament" / "weights.fbn", weights, h, DType::F64);
    out.push_back("tournament/weights.fbn");
    out.push_back(write_text("tables/ahp_weights.tsv", format_table(ids, ids, weights, "target\\source")));
    out.push_back(write_text("tables/ahp_iterations.tsv", format_table({"iterations"}, ids, iterations, "target")));
    return out;
  }

  std::vector<std::string> stage_embed() {
    const auto f = read_matrix_file(dir() / "tournament" / "weights.fbn");
    const auto ids = split_list(f.header.get("ids"));
    std::vector<Vector> w;
    for (Eigen::Index t = 0; t < f.data.rows(); ++t) w.push_back(f.data.row(t).transpose());
    const EmbeddingMatrix e = assemble_embedding(ids, w, cfg_.diag_value, cfg_.renormalize);
    fs::create_directories(dir() / "embed");
    write_embedding(e, dir() / "embed" / "R.fbn");
    return {"embed/R.fbn", write_text("tables/R.tsv", format_table(ids, ids, e.R, "target\\source"))};
  }

  std::vector<double> mds_weights(const AlignedDataset& ds) const {
    if (cfg_.mds_weights == "uniform") return std::vector<double>(ds.size(), 1.0);
    return ds.mds_weights();
  }

  std::vector<std::string> stage_mds(std::vector<std::string>& messages) {
    const EmbeddingMatrix e = read_embedding(dir() / "embed" / "R.fbn");
    const AlignedDataset ds = load_dataset();
    const std::size_t n = e.ids.size();
    MdsOptions opt;
    opt.dims = std::min(cfg_.mds_dims, n);
    const EmbeddingCoords c = weighted_mds(row_distances(e.R), mds_weights(ds), opt);
    const std::string anchor = cfg_.anchor.empty() ? ds.universal_id() : cfg_.anchor;
    const Orientation o = orient(c, ds.index_of(anchor), cfg_.anchor_sign);
    for (const auto& w : o.warnings) {
      messages.push_back(w);
      say("mds: warning: " + w);
    }
    fs::create_directories(dir() / "mds");
    Header h;
    h.set("kind", "mds-coords");
    h.set("ids", join(e.ids));
    h.set("anchor", anchor);
    h.set("stress", o.coords.stress);
    h.set("iterations", static_cast<long long>(o.coords.iterations));
    write_matrix_file(dir() / "mds" / "coords.fbn", o.coords.coords, h, DType::F64);

    std::string table = "id";
    for (std::size_t k = 0; k < opt.dims; ++k) table += "\tdim" + std::to_string(k + 1);
    table += "\tmodel_group\tlayer_index\tmds_weight\n";
    const auto w = mds_weights(ds);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& spec = ds.bundle(e.ids[i]).spec;
      table += e.ids[i];
      for (std::size_t k = 0; k < opt.dims; ++k)
        table += "\t" + Header::format_double(o.coords.coords(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
      table += "\t" + spec.model_group + "\t" + (spec.layer_index ? std::to_string(*spec.layer_index) : "none") + "\t" +
               Header::format_double(w[i]) + "\n";
    }
    std::string stress = "iteration\tstress\n";
    for (std::size_t k = 0; k < o.coords.stress_history.size(); ++k)
      stress += std::to_string(k) + "\t" + Header::format_double(o.coords.stress_history[k]) + "\n";
    std::string var = "dim\tfraction\n";
    for (std::size_t k = 0; k < o.coords.dim_variances.size(); ++k)
      var += "dim" + std::to_string(k + 1) + "\t" + Header::format_double(o.coords.dim_variances[k]) + "\n";
    return {"mds/coords.fbn", write_text("tables/mds_coords.tsv", table), write_text("tables/mds_stress.tsv", stress),
            write_text("tables/mds_dim_variances.tsv", var)};
  }

  std::vector<std::string> stage_scree() {
    const EmbeddingMatrix e = read_embedding(dir() / "embed" / "R.fbn");
    const Scree s = scree(e.R, std::min<std::size_t>(cfg_.scree_k, e.ids.size()));
    std::string t = "factor\tfraction\n";
    for (std::size_t k = 0; k < s.fractions.size(); ++k) t += std::to_string(k + 1) + "\t" + Header::format_double(s.fractions[k]) + "\n";
    if (s.degenerate) say("scree: warning: R has zero variance");
    return {write_text("tables/scree.tsv", t)};
  }

  fs::path encoding_path(const std::string& subject, const std::string& rep) const {
    return dir() / "encoding" / subject / (rep + ".fbn");
  }

  std::vector<std::string> stage_encode() {
    const AlignedDataset ds = load_dataset();
    const auto subj = subjects();
    require(!subj.empty(), "encode: the run has no response datasets");
    const auto ids = ds.ids();
    std::vector<ResponseDataset> responses;
    for (const auto& s : subj) responses.push_back(read_responses(dir() / "data" / "responses" / (s + ".fbn")));
    const std::size_t jobs = subj.size() * ids.size();
    parallel_for(jobs, cfg_.workers, [&](std::size_t job) {
      const std::size_t si = job / ids.size(), ri = job % ids.size();
      const ResponseDataset& r = responses[si];
      const TrTimeline tl = tr_timeline(ds.corpus(), r.tr_seconds, cfg_.words_per_second);
      const Matrix xtr = downsample_corpus(ds.bundles()[ri].values, ds.corpus(), r.tr_seconds, cfg_.words_per_second);
      const Matrix X = delay_expand_stories(xtr, tl.story_trs, cfg_.delays).X;
      CvOptions cv = cfg_.cv;
      cv.seed = derive_seed(cfg_.seed, {"cv", subj[si], ids[ri]});
      const EncodingResult res = fit_encoding_model(ids[ri], take_rows(X, r.train_trs), take_rows(r.responses, r.train_trs),
                                                    take_rows(X, r.test_trs), take_rows(r.responses, r.test_trs), cv);
      fs::create_directories(encoding_path(subj[si], ids[ri]).parent_path());
      Header h;
      h.set("subject", subj[si]);
      write_encoding_result(res, encoding_path(subj[si], ids[ri]), h);
    });
    std::vector<std::string> out;
    for (std::size_t si = 0; si < subj.size(); ++si) {
      const Matrix rho = rho_matrix(subj[si], ids);
      out.push_back(write_text("tables/rho_" + subj[si] + ".tsv", format_table(ids, responses[si].channel_ids,
                                                                                Matrix(rho.transpose()), "channel")));
      for (const auto& id : ids) out.push_back(rel("encoding", subj[si] + "/" + id + ".fbn"));
    }
    return out;
  }

  Matrix rho_matrix(const std::string& subject, const std::vector<std::string>& ids) const {
    Matrix rho;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const EncodingResult e = read_encoding_result(encoding_path(subject, ids[k]));
      if (k == 0) rho.resize(static_cast<Eigen::Index>(ids.size()), e.rho.size());
      rho.row(static_cast<Eigen::Index>(k)) = e.rho.transpose();
    }
    return rho;
  }

  std::vector<std::string> stage_project() {
    const auto f = read_matrix_file(dir() / "mds" / "coords.fbn");
    const auto ids = split_list(f.header.get("ids"));
    const Vector dim1 = f.data.col(0);
    std::vector<std::string> out;
    for (const auto& s : subjects()) {
      const ResponseDataset r = read_responses(dir() / "data" / "responses" / (s + ".fbn"));
      const PerformanceProfile p = perf_profile(s, ids, rho_matrix(s, ids));
      const Vector proj = project_dim1(p, ids, dim1);
      std::string t = "channel\tlabel\tprojection\tconstant\n";
      for (Eigen::Index v = 0; v < proj.size(); ++v)
        t += r.channel_ids[static_cast<std::size_t>(v)] + "\t" +
             (r.channel_labels.empty() ? std::string("none") : r.channel_labels[static_cast<std::size_t>(v)]) + "\t" +
             Header::format_double(proj(v)) + "\t" + (p.constant[static_cast<std::size_t>(v)] ? "1" : "0") + "\n";
      out.push_back(write_text("tables/projection_" + s + ".tsv", t));
      if (!r.channel_labels.empty()) {
        std::string g = "label\tmean_projection\n";
        for (const auto& [label, mean] : group_mean(proj, r.channel_labels)) g += label + "\t" + Header::format_double(mean) + "\n";
        out.push_back(write_text("tables/projection_groups_" + s + ".tsv", g));
      }
    }
    return out;
  }

  std::vector<std::string> stage_discriminate() {
    const EmbeddingMatrix e = read_embedding(dir() / "embed" / "R.fbn");
    const auto subj = subjects();
    require(!subj.empty(), "discriminate: the run has no response datasets");
    std::vector<std::string> out;
    std::vector<Matrix> Ms;
    fs::create_directories(dir() / "discriminate");
    for (const auto& s : subj) {
      const Matrix rho = rho_matrix(s, e.ids);
      const DiscriminabilityMatrix dm = discriminability_matrix(s, e.R, rho, cfg_.workers);
      if (dm.flagged) say("discriminate: " + s + ": " + std::to_string(dm.flagged) + " pairs with undefined correlations");
      Header h;
      h.set("kind", "discriminability");
      h.set("subject", s);
      h.set("ids", join(e.ids));
      h.set("flagged", static_cast<long long>(dm.flagged));
      write_matrix_file(dir() / "discriminate" / ("M_" + s + ".fbn"), dm.M, h, DType::F64);
      out.push_back("discriminate/M_" + s + ".fbn");
      out.push_back(write_text("tables/M_" + s + ".tsv", format_table(e.ids, e.ids, dm.M)));
      out.push_back(write_text("tables/similarity_" + s + ".tsv", format_table(e.ids, e.ids, perf_similarity(rho).S)));
      Ms.push_back(dm.M);
    }
    const auto pct = majority_match(Ms, cfg_.majority_threshold);
    Matrix pm(static_cast<Eigen::Index>(pct.size()), 1);
    for (std::size_t k = 0; k < pct.size(); ++k) pm(static_cast<Eigen::Index>(k), 0) = pct[k];
    out.push_back(write_text("tables/majority.tsv", format_table({"percent_matched"}, e.ids, pm)));
    return out;
  }

  std::vector<std::string> stage_report() {
    const EmbeddingMatrix e = read_embedding(dir() / "embed" / "R.fbn");
    const AlignedDataset ds = load_dataset();
    const auto subj = subjects();
    const std::size_t n = e.ids.size();
    std::vector<std::string> out;

    out.push_back(write_text("report/R_heatmap.svg", svg::heatmap("Representation embedding R (diagonal " +
                                                                       svg::num(e.diag_value) + ")", e.ids, e.ids, e.R)));
    out.push_back(write_text("report/R.tsv", format_table(e.ids, e.ids, e.R, "target\\source")));

    const auto cf = read_matrix_file(dir() / "mds" / "coords.fbn");
    std::vector<svg::ScatterPoint> pts;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& spec = ds.bundle(e.ids[i]).spec;
      const auto r = static_cast<Eigen::Index>(i);
      pts.push_back({e.ids[i], cf.data(r, 0), cf.data.cols() > 1 ? cf.data(r, 1) : 0.0,
                     spec.model_group.empty() ? spec.id : spec.model_group, spec.layer_index});
    }
    out.push_back(write_text("report/mds_scatter.svg",
                             svg::scatter("MDS of R (anchor " + cf.header.get("anchor") + ")", pts, "MDS dim 1", "MDS dim 2")));
    out.push_back(write_text("report/mds_coords.tsv", read_file(dir() / "tables" / "mds_coords.tsv")));

    const std::string scree_text = read_file(dir() / "tables" / "scree.tsv");
    std::vector<std::string> labels;
    std::vector<double> fractions;
    {
      std::istringstream in(scree_text);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        const auto tab = line.find('\t');
        labels.push_back(line.substr(0, tab));
        fractions.push_back(std::stod(line.substr(tab + 1)));
      }
    }
    out.push_back(write_text("report/scree.svg", svg::bars("Variance explained by factor", labels, fractions, "fraction", 1.0)));
    out.push_back(write_text("report/scree.tsv", scree_text));

    Matrix M = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    Matrix S = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (const auto& s : subj) {
      M += read_matrix_file(dir() / "discriminate" / ("M_" + s + ".fbn")).data;
      S += perf_similarity(rho_matrix(s, e.ids)).S;
    }
    M /= static_cast<double>(subj.size());
    S /= static_cast<double>(subj.size());
    out.push_back(write_text("report/M_heatmap.svg", svg::heatmap("Discriminability M (mean over subjects)", e.ids, e.ids, M)));
    out.push_back(write_text("report/M_mean.tsv", format_table(e.ids, e.ids, M)));

    const std::string maj = read_file(dir() / "tables" / "majority.tsv");
    std::vector<double> pct;
    {
      std::istringstream in(maj);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) pct.push_back(std::stod(line.substr(line.find('\t') + 1)));
    }
    out.push_back(write_text("report/majority.svg",
                             svg::bars("Pairwise matches in >= " + std::to_string(cfg_.majority_threshold) + " subjects",
                                       e.ids, pct, "percent", 100.0)));
    out.push_back(write_text("report/majority.tsv", maj));
    out.push_back(write_text("report/similarity.svg",
                             svg::heatmap("Performance similarity (mean over subjects)", e.ids, e.ids, S)));
    out.push_back(write_text("report/similarity_mean.tsv", format_table(e.ids, e.ids, S)));
    return out;
  }
};

}  // namespace repspace
