#pragma once
// Run configuration files.
//
// A run config is a JSON object naming the inputs, the output directory and
// the model/training settings. Relative paths resolve against the workspace
// root. Precedence: built-in defaults < config file < command-line flags.

#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "veracity/corpus.hpp"
#include "veracity/model.hpp"
#include "veracity/train.hpp"

namespace veracity {

struct RunConfig {
  std::filesystem::path workspace = ".";
  std::filesystem::path corpus;
  std::optional<std::filesystem::path> snippets;
  std::optional<std::filesystem::path> entities;
  std::optional<std::filesystem::path> label_map;
  std::filesystem::path output = "runs/default";
  std::uint64_t split_seed = 1;
  std::size_t min_label_count = reference::kMinLabelCount;
  std::optional<std::set<std::string>> domains;
  ModelConfig model;
  TrainingMode mode = TrainingMode::kMtlLel;
  std::string target = "all";
  std::string precision = "float";
  std::size_t jobs = 1;

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : workspace / p;
  }
  std::filesystem::path output_dir() const { return resolve(output); }
};

namespace detail {

inline const nlohmann::json& expect(const nlohmann::json& j, const std::string& key, bool ok, const char* what) {
  if (!ok) throw ConfigError("config key '" + key + "' must be " + what);
  return j;
}

inline std::size_t get_count(const nlohmann::json& v, const std::string& key) {
  expect(v, key, v.is_number_integer() && v.get<long long>() >= 0, "a non-negative integer");
  return v.get<std::size_t>();
}
inline double get_number(const nlohmann::json& v, const std::string& key) {
  expect(v, key, v.is_number(), "a number");
  return v.get<double>();
}
inline bool get_bool(const nlohmann::json& v, const std::string& key) {
  expect(v, key, v.is_boolean(), "a boolean");
  return v.get<bool>();
}
inline std::string get_string(const nlohmann::json& v, const std::string& key) {
  expect(v, key, v.is_string(), "a string");
  return v.get<std::string>();
}

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& known, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, _] : obj.items())
    if (!known.count(k)) throw ConfigError("unknown config key '" + (where == "config" ? k : where + "." + k) + "'");
}

inline void apply_model(const nlohmann::json& m, ModelConfig& c) {
  reject_unknown(m, {"word_emb", "hidden", "layers", "dropout", "attention", "skip_connections", "batch",
                     "label_emb", "cnn_filters", "cnn_kernel", "metadata_emb", "lr", "patience", "max_epochs",
                     "max_tokens", "variant", "use_metadata", "metadata_fields", "seed"},
                 "model");
  for (const auto& [k, v] : m.items()) {
    const std::string key = "model." + k;
    if (k == "word_emb") c.word_emb = get_count(v, key);
    else if (k == "hidden") c.hidden = get_count(v, key);
    else if (k == "layers") c.layers = get_count(v, key);
    else if (k == "dropout") c.dropout = get_number(v, key);
    else if (k == "attention") c.attention = get_bool(v, key);
    else if (k == "skip_connections") c.skip_connections = get_bool(v, key);
    else if (k == "batch") c.batch = get_count(v, key);
    else if (k == "label_emb") c.label_emb = get_count(v, key);
    else if (k == "cnn_filters") c.cnn_filters = get_count(v, key);
    else if (k == "cnn_kernel") c.cnn_kernel = get_count(v, key);
    else if (k == "metadata_emb") c.metadata_emb = get_count(v, key);
    else if (k == "lr") c.lr = get_number(v, key);
    else if (k == "patience") c.patience = get_count(v, key);
    else if (k == "max_epochs") c.max_epochs = get_count(v, key);
    else if (k == "max_tokens") c.max_tokens = get_count(v, key);
    else if (k == "variant") c.variant = parse_variant(get_string(v, key));
    else if (k == "use_metadata") c.use_metadata = get_bool(v, key);
    else if (k == "metadata_fields") c.metadata_fields = MetaFields::parse(get_string(v, key));
    else if (k == "seed") c.seed = get_count(v, key);
  }
}

}  // namespace detail

/// Applies a parsed JSON config on top of `base`.
inline RunConfig parse_run_config(const nlohmann::json& j, RunConfig base = {}) {
  detail::reject_unknown(j, {"workspace", "corpus", "snippets", "entities", "label_map", "output", "split_seed",
                             "min_label_count", "domains", "model", "training"},
                         "config");
  RunConfig c = std::move(base);
  for (const auto& [k, v] : j.items()) {
    if (k == "workspace") c.workspace = detail::get_string(v, k);
    else if (k == "corpus") c.corpus = detail::get_string(v, k);
    else if (k == "snippets") c.snippets = detail::get_string(v, k);
    else if (k == "entities") c.entities = detail::get_string(v, k);
    else if (k == "label_map") c.label_map = detail::get_string(v, k);
    else if (k == "output") c.output = detail::get_string(v, k);
    else if (k == "split_seed") c.split_seed = detail::get_count(v, k);
    else if (k == "min_label_count") c.min_label_count = detail::get_count(v, k);
    else if (k == "domains") {
      detail::expect(v, k, v.is_array(), "an array of domain codes");
      std::set<std::string> codes;
      for (const auto& d : v) codes.insert(detail::get_string(d, "domains[]"));
      c.domains = std::move(codes);
    } else if (k == "model") {
      detail::apply_model(v, c.model);
    } else if (k == "training") {
      detail::reject_unknown(v, {"mode", "target", "precision", "jobs"}, "training");
      for (const auto& [tk, tv] : v.items()) {
        const std::string key = "training." + tk;
        if (tk == "mode") c.mode = parse_training_mode(detail::get_string(tv, key));
        else if (tk == "target") c.target = detail::get_string(tv, key);
        else if (tk == "precision") c.precision = detail::get_string(tv, key);
        else if (tk == "jobs") c.jobs = detail::get_count(tv, key);
      }
    }
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, std::move(base));
}

/// Checks values and input paths. `needs` selects which inputs must exist.
struct ConfigNeeds {
  bool corpus = false;
  bool snippets_for_evidence = false;
};

inline void validate_run_config(const RunConfig& c, ConfigNeeds needs = {}) {
  c.model.validate();
  if (c.precision != "float" && c.precision != "double")
    throw ConfigError("training.precision must be 'float' or 'double'");
  if (c.jobs == 0) throw ConfigError("training.jobs must be positive");
  if (c.mode == TrainingMode::kStl && c.target == "all")
    throw ConfigError("STL training needs a single target task (training.target)");
  if (c.domains)
    for (const auto& d : *c.domains)
      if (!default_domain_codes().count(d)) throw ConfigError("unknown domain code '" + d + "'");
  if (needs.corpus) {
    if (c.corpus.empty()) throw ConfigError("config has no corpus path");
    if (!std::filesystem::is_regular_file(c.resolve(c.corpus)))
      throw ConfigError("corpus file not found: " + c.resolve(c.corpus).string());
    if (c.entities && !std::filesystem::is_regular_file(c.resolve(*c.entities)))
      throw ConfigError("entity file not found: " + c.resolve(*c.entities).string());
    if (c.label_map && !std::filesystem::is_regular_file(c.resolve(*c.label_map)))
      throw ConfigError("label map not found: " + c.resolve(*c.label_map).string());
  }
  if (needs.snippets_for_evidence && uses_evidence(c.model.variant)) {
    if (!c.snippets) throw ConfigError("variant " + to_string(c.model.variant) + " needs a snippets directory");
    if (!std::filesystem::is_directory(c.resolve(*c.snippets)))
      throw ConfigError("snippets directory not found: " + c.resolve(*c.snippets).string());
  }
}

}  // namespace veracity
