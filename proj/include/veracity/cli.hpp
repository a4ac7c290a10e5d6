#pragma once
// Command-line front end: prepare, train, evaluate, ablate, predict, report.
//
// Exit codes: 0 success, 1 validation (bad config, missing inputs, hash
// mismatch), 2 runtime failure. Every invocation that writes into an output
// directory holds <output>/.lock for its duration.

#include <cerrno>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "veracity/ablation.hpp"
#include "veracity/config.hpp"
#include "veracity/evidence_live.hpp"
#include "veracity/pipeline.hpp"
#include "veracity/train.hpp"

namespace veracity::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2 };

/// Exclusive claim on an output directory.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::filesystem::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      if (errno == EEXIST)
        throw Error("output directory " + dir.string() + " is locked by another invocation (" + path_.string() +
                    ")");
      throw Error("cannot create lock file " + path_.string());
    }
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Where each artifact lives under an output directory.
struct Layout {
  std::filesystem::path root;
  std::filesystem::path prepared() const { return root / "prepared"; }
  std::filesystem::path corpus() const { return prepared() / "corpus.tsv"; }
  std::filesystem::path entities() const { return prepared() / "entities.tsv"; }
  std::filesystem::path splits() const { return prepared() / "splits"; }
  std::filesystem::path fingerprint() const { return prepared() / "fingerprint"; }
  std::filesystem::path summary() const { return prepared() / "summary.txt"; }
  std::filesystem::path domains() const { return prepared() / "domains.tsv"; }
  std::filesystem::path models() const { return root / "models"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path ablations() const { return root / "ablations"; }
  std::filesystem::path report() const { return root / "report"; }
  std::filesystem::path run_log() const { return root / "runs.jsonl"; }
};

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& content) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << content;
}

inline std::string model_name(const RunConfig& c) {
  return to_string(c.model.variant) + (c.model.use_metadata ? "+meta" : "") + "_" + to_string(c.mode) + "_" +
         c.target;
}

// ---------------------------------------------------------------------------
// prepare

inline std::uint64_t prepare_fingerprint(const RunConfig& c) {
  Fnv1a h;
  h.update(read_text(c.resolve(c.corpus)));
  h.update("\x1f");
  if (c.entities) h.update(read_text(c.resolve(*c.entities)));
  h.update("\x1f");
  if (c.label_map) h.update(read_text(c.resolve(*c.label_map)));
  h.update("\x1fsplit_seed=" + std::to_string(c.split_seed) + ";min_label_count=" + std::to_string(c.min_label_count) +
           ";domains=");
  if (c.domains) h.update(join(std::vector<std::string>(c.domains->begin(), c.domains->end()), ","));
  return h.digest();
}

inline void write_entity_sidecar(const std::filesystem::path& path, const std::vector<ClaimRecord>& records) {
  std::ostringstream s;
  for (const auto& r : records) {
    if (r.entities.empty()) continue;
    s << escape_field(r.claim_id) << '\t';
    for (std::size_t i = 0; i < r.entities.size(); ++i) s << (i ? "|" : "") << escape_field(r.entities[i]);
    s << '\n';
  }
  write_text(path, s.str());
}

struct FetchOptions {
  bool enabled = false;
  std::string endpoint;
  std::string engine_id;
};

inline int cmd_prepare(const RunConfig& cfg, const FetchOptions& fetch, std::ostream& out, Diagnostics& diag) {
  validate_run_config(cfg, {.corpus = true});
  const Layout lay{cfg.output_dir()};
  OutputLock lock(lay.root);

  const auto fp = to_hex(prepare_fingerprint(cfg));
  const bool complete = std::filesystem::exists(lay.corpus()) && std::filesystem::exists(lay.splits() / "test.ids") &&
                        std::filesystem::exists(lay.summary());
  if (complete && std::filesystem::exists(lay.fingerprint()) && trim(read_text(lay.fingerprint())) == fp &&
      !fetch.enabled) {
    out << "up to date\n";
    return kOk;
  }

  PrepareOptions opts;
  opts.corpus = cfg.resolve(cfg.corpus);
  if (cfg.entities) opts.entities = cfg.resolve(*cfg.entities);
  if (cfg.label_map) opts.merge_table = cfg.resolve(*cfg.label_map);
  if (cfg.domains) opts.domains = *cfg.domains;
  opts.min_label_count = cfg.min_label_count;
  opts.split_seed = cfg.split_seed;
  auto prepared = prepare_corpus(opts, &diag);

  if (fetch.enabled) {
    if (!cfg.snippets) throw ConfigError("--fetch needs a snippets directory in the config");
    LiveSearchConfig live;
    if (!fetch.endpoint.empty()) live.endpoint = fetch.endpoint;
    live.engine_id = fetch.engine_id;
    live.cache_dir = cfg.resolve(*cfg.snippets);
    std::filesystem::create_directories(*live.cache_dir);
    LiveSearchClient client(live);
    std::size_t fetched = 0;
    detail::stage("fetch-snippets", [&] {
      for (const auto& r : prepared.records) {
        if (try_load_fixture(*live.cache_dir, r.claim_id)) continue;
        store_fixture(fetch_snippets(r.claim_id, r.claim_text, client, &diag), *live.cache_dir);
        ++fetched;
      }
      return 0;
    });
    out << "fetched snippets for " << fetched << " claims\n";
  }

  std::filesystem::create_directories(lay.prepared());
  write_corpus(lay.corpus(), prepared.records);
  write_entity_sidecar(lay.entities(), prepared.records);
  write_split_manifests(prepared.split, lay.splits());
  std::ostringstream summary, domains;
  prepared.summary.write_text(summary);
  prepared.summary.write_tsv(domains);
  write_text(lay.summary(), summary.str());
  write_text(lay.domains(), domains.str());
  write_text(lay.fingerprint(), fp + "\n");
  out << summary.str();
  return kOk;
}

// ---------------------------------------------------------------------------
// Loading prepared data and models

struct PreparedData {
  std::vector<ClaimRecord> records;
  CorpusSplit split;
  std::map<std::string, EvidenceSet> evidence;
};

inline PreparedData load_prepared(const RunConfig& cfg, Diagnostics& diag) {
  const Layout lay{cfg.output_dir()};
  if (!std::filesystem::exists(lay.corpus()) || !std::filesystem::exists(lay.splits() / "train.ids"))
    throw ConfigError("no prepared corpus in " + lay.root.string() + "; run 'veracity prepare' first");
  PreparedData d;
  d.records = load_corpus(lay.corpus(), default_domain_codes());
  if (std::filesystem::exists(lay.entities())) {
    attach_entities(d.records, load_entity_annotations(lay.entities(), {}, &diag));
  }
  d.split = read_split_manifests(lay.splits());
  if (uses_evidence(cfg.model.variant)) d.evidence = load_evidence(cfg.resolve(*cfg.snippets), d.records);
  return d;
}

inline std::optional<std::size_t> find_target(const std::vector<DomainTask>& tasks, const std::string& target) {
  if (target == "all") return std::nullopt;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (tasks[i].code == target) return i;
  throw ConfigError("target task '" + target + "' is not in the prepared corpus");
}

inline nlohmann::json tasks_json(const std::vector<DomainTask>& tasks) {
  auto arr = nlohmann::json::array();
  for (const auto& t : tasks) arr.push_back({{"code", t.code}, {"labels", t.labels}});
  return arr;
}

inline std::vector<DomainTask> tasks_from_json(const nlohmann::json& arr) {
  std::vector<DomainTask> tasks;
  std::size_t offset = 0;
  for (const auto& j : arr) {
    DomainTask t;
    t.code = j.at("code").get<std::string>();
    t.labels = j.at("labels").get<std::vector<std::string>>();
    t.global_offset = offset;
    offset += t.labels.size();
    tasks.push_back(std::move(t));
  }
  return tasks;
}

template <typename T>
struct LoadedModel {
  std::unique_ptr<ClaimModel<T>> model;
  Vocabulary vocab;
  MetadataInventories inventories;
  nlohmann::json manifest;
};

/// Loads a trained model, refusing to run when the config or vocabulary
/// no longer matches what the checkpoint was trained with.
template <typename T>
LoadedModel<T> load_model(const RunConfig& cfg, const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw ConfigError("no trained model at " + dir.string() + "; run 'veracity train' first");
  LoadedModel<T> m;
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(read_text(dir / "manifest.json"));
    man.at("config_hash").get<std::string>();
    man.at("vocab_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("model manifest at " + dir.string() + " is unreadable: " + std::string(e.what()));
  }
  m.manifest = man;
  const auto want = to_hex(cfg.model.hash());
  const auto have = man.at("config_hash").get<std::string>();
  if (want != have)
    throw ConfigError("config hash mismatch: checkpoint trained with " + have + ", current config is " + want +
                      "; refusing to run");
  if (man.at("mode").get<std::string>() != to_string(cfg.mode) ||
      man.at("target").get<std::string>() != cfg.target)
    throw ConfigError("model manifest training mode/target differ from the config; refusing to run");
  m.vocab = Vocabulary::load(dir / "vocab.txt");
  if (to_hex(m.vocab.hash()) != man.at("vocab_hash").get<std::string>())
    throw ConfigError("vocabulary hash mismatch for model at " + dir.string() + "; refusing to run");
  m.inventories = MetadataInventories::load(dir / "inventories");
  const auto tasks = tasks_from_json(man.at("tasks"));
  const auto head = man.at("head").get<std::string>() == "label_embedding" ? HeadKind::kLabelEmbedding
                                                                                  : HeadKind::kTaskSoftmax;
  m.model = std::make_unique<ClaimModel<T>>(cfg.model, head, tasks, m.vocab.size(), m.inventories.total_size());
  load_checkpoint(m.model->params(), dir / "model.ckpt");
  return m;
}

/// The prepared corpus encoded with a model's own vocabulary, restricted to
/// the model's task view.
inline TrainingSet encode_for_model(const RunConfig& cfg, const PreparedData& d, const Vocabulary& vocab,
                                    const MetadataInventories& inv, const std::vector<DomainTask>& model_tasks,
                                    Diagnostics& diag) {
  auto enc = encode_corpus(d.records, d.split, d.evidence, cfg.model, vocab, inv, &diag);
  TrainingSet set = std::move(enc.set);
  if (cfg.mode == TrainingMode::kStl) set = restrict_to_task(set, *find_target(set.tasks, cfg.target));
  if (set.tasks.size() != model_tasks.size())
    throw ConfigError("prepared corpus tasks differ from the model's tasks; refusing to run");
  for (std::size_t i = 0; i < set.tasks.size(); ++i)
    if (set.tasks[i].code != model_tasks[i].code || set.tasks[i].labels != model_tasks[i].labels)
      throw ConfigError("prepared corpus labels for '" + set.tasks[i].code +
                        "' differ from the model's; refusing to run");
  return set;
}

// ---------------------------------------------------------------------------
// train

template <typename T>
int train_impl(const RunConfig& cfg, std::ostream& out, Diagnostics& diag, bool verbose) {
  const Layout lay{cfg.output_dir()};
  OutputLock lock(lay.root);
  const auto data = load_prepared(cfg, diag);
  auto enc = encode_corpus(data.records, data.split, data.evidence, cfg.model, std::nullopt, std::nullopt, &diag);
  const auto target = find_target(enc.set.tasks, cfg.target);

  RunLog log(lay.run_log());
  TrainOptions opts;
  opts.log = &log;
  opts.diag = &diag;
  opts.verbose = verbose;
  TrainedModel<T> trained = cfg.mode == TrainingMode::kStl ? train_stl<T>(enc.set, cfg.model, *target, opts)
                                                           : train_mtl<T>(enc.set, cfg.model, target, cfg.mode, opts);

  const auto dir = lay.models() / model_name(cfg);
  std::filesystem::create_directories(dir);
  save_checkpoint(trained.model->params(), dir / "model.ckpt");
  enc.vocab.save(dir / "vocab.txt");
  enc.inventories.save(dir / "inventories");
  nlohmann::json manifest = {
      {"variant", to_string(cfg.model.variant)},
      {"use_metadata", cfg.model.use_metadata},
      {"metadata_fields", cfg.model.metadata_fields.name()},
      {"mode", to_string(cfg.mode)},
      {"head", trained.model->head() == HeadKind::kLabelEmbedding ? "label_embedding" : "task_softmax"},
      {"target", cfg.target},
      {"precision", cfg.precision},
      {"config", cfg.model.canonical()},
      {"config_hash", to_hex(cfg.model.hash())},
      {"vocab_hash", to_hex(enc.vocab.hash())},
      {"vocab_size", enc.vocab.size()},
      {"metadata_size", enc.inventories.total_size()},
      {"split_hash", to_hex(split_hash(enc.set))},
      {"tasks", tasks_json(trained.model->tasks())},
      {"best_epoch", trained.run.best_epoch},
      {"stop_epoch", trained.run.stop_epoch},
      {"best_dev_macro_f1", trained.run.best_dev_macro_f1}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  std::ostringstream hist;
  hist << "epoch\ttrain_loss\tdev_micro_f1\tdev_macro_f1\n";
  for (const auto& e : trained.run.history)
    hist << e.epoch << '\t' << SuiteReport::fixed(e.train_loss, 6) << '\t' << SuiteReport::fixed(e.dev_micro_f1, 6)
         << '\t' << SuiteReport::fixed(e.dev_macro_f1, 6) << '\n';
  write_text(dir / "history.tsv", hist.str());
  out << "trained " << model_name(cfg) << ": best epoch " << trained.run.best_epoch << " of "
      << trained.run.stop_epoch << ", dev macro F1 " << SuiteReport::fixed(trained.run.best_dev_macro_f1) << "\n"
      << "model written to " << dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// evaluate

inline void write_suite(const std::filesystem::path& dir, const std::string& split, const SuiteReport& rep) {
  std::ostringstream tsv, md;
  rep.write_tsv(tsv);
  rep.write_markdown(md);
  write_text(dir / (split + ".tsv"), tsv.str());
  write_text(dir / (split + ".md"), md.str());
  for (const auto& d : rep.domains) write_text(dir / "confusion" / split / (d.domain + ".csv"), d.confusion.csv());
}

template <typename T>
int evaluate_impl(const RunConfig& cfg, const std::string& split, std::ostream& out, Diagnostics& diag) {
  const Layout lay{cfg.output_dir()};
  OutputLock lock(lay.root);
  const auto name = model_name(cfg);
  auto m = load_model<T>(cfg, lay.models() / name);
  const auto data = load_prepared(cfg, diag);
  const auto set = encode_for_model(cfg, data, m.vocab, m.inventories, m.model->tasks(), diag);
  std::optional<std::size_t> only;
  if (cfg.mode != TrainingMode::kStl) only = find_target(set.tasks, cfg.target);
  const auto rep = evaluate_model(*m.model, split == "dev" ? set.dev : set.test, only);
  write_suite(lay.reports() / name, split, rep);
  rep.write_tsv(out);
  return kOk;
}

// ---------------------------------------------------------------------------
// ablate

template <typename T>
int ablate_impl(const RunConfig& cfg, const std::string& kind, bool per_target, std::ostream& out,
                Diagnostics& diag) {
  const Layout lay{cfg.output_dir()};
  OutputLock lock(lay.root);
  const RunConfig& c = cfg;
  const auto data = load_prepared(c, diag);
  RunLog log(lay.run_log());
  AblationOptions opts;
  opts.per_target = per_target;
  opts.mode = c.mode;
  opts.jobs = c.jobs;
  opts.log = &log;
  opts.diag = &diag;
  const auto table = kind == "training" ? run_training_ablation<T>(data.records, data.split, data.evidence, c.model, opts)
                                        : run_metadata_ablation<T>(data.records, data.split, data.evidence, c.model, opts);
  std::ostringstream tsv, md;
  table.write_tsv(tsv);
  table.write_markdown(md);
  write_text(lay.ablations() / (kind + ".tsv"), tsv.str());
  write_text(lay.ablations() / (kind + ".md"), md.str());
  out << md.str();
  return kOk;
}

// ---------------------------------------------------------------------------
// predict

struct PredictInput {
  std::string claim;
  std::string domain;
  std::string claim_id = "input";
  std::optional<std::string> speaker, category;
  std::vector<std::string> tags, entities;
  std::optional<std::filesystem::path> snippets_file;
};

template <typename T>
int predict_impl(const RunConfig& cfg, const PredictInput& in, std::ostream& out, Diagnostics& diag) {
  const Layout lay{cfg.output_dir()};
  auto m = load_model<T>(cfg, lay.models() / model_name(cfg));
  const auto& tasks = m.model->tasks();
  std::optional<std::size_t> task;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (tasks[i].code == in.domain) task = i;
  if (!task) throw ConfigError("domain '" + in.domain + "' is not covered by this model");
  if (trim(in.claim).empty()) throw ConfigError("claim text is empty");

  ClaimRecord r;
  r.claim_id = in.claim_id;
  r.claim_text = in.claim;
  r.domain = in.domain;
  r.label = tasks[*task].labels.front();  // placeholder; never read
  r.speaker = in.speaker;
  r.category = in.category;
  r.tags = in.tags;
  r.entities = in.entities;

  std::map<std::string, EvidenceSet> evidence;
  if (uses_evidence(cfg.model.variant)) {
    if (in.snippets_file) {
      evidence[r.claim_id] = parse_fixture(read_text(*in.snippets_file), r.claim_id, in.snippets_file->string());
    } else if (cfg.snippets) {
      if (auto set = try_load_fixture(cfg.resolve(*cfg.snippets), r.claim_id)) evidence[r.claim_id] = *set;
    }
    if (!evidence.count(r.claim_id)) warn(&diag, "no snippets for claim; scoring from the claim alone");
  }
  InstanceEncoding enc;
  enc.max_tokens = cfg.model.max_tokens;
  enc.metadata_fields = cfg.model.use_metadata ? cfg.model.metadata_fields : MetaFields::none();
  const auto insts = encode_instances({r}, evidence, m.vocab, m.inventories, tasks, enc, &diag);
  const auto pred = predict(*m.model, insts);

  const auto& t = tasks[*task];
  nlohmann::ordered_json probs = nlohmann::ordered_json::object();
  for (std::size_t l = 0; l < t.labels.size(); ++l)
    probs[t.labels[l]] = static_cast<double>(pred.probabilities[0][t.global_offset + l]);
  nlohmann::ordered_json ranking = nlohmann::ordered_json::array();
  for (const auto& e : insts[0].evidence)
    ranking.push_back({{"rank", e.rank}, {"url", e.url}, {"weight", static_cast<double>(pred.ranking[0][e.rank - 1])}});
  nlohmann::ordered_json result = {{"claim_id", r.claim_id},
                                   {"domain", t.code},
                                   {"predicted", tasks[*task].labels[pred.labels[0] - t.global_offset]},
                                   {"probabilities", probs},
                                   {"ranking", ranking},
                                   {"fallback", static_cast<bool>(pred.fallback[0])}};
  out << result.dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// report

/// Splits one CSV line, honouring double-quoted fields.
inline std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

inline ConfusionMatrix read_confusion_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  ConfusionMatrix m;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "empty confusion matrix");
  auto header = parse_csv_line(line);
  m.labels.assign(header.begin() + 1, header.end());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    chomp(line);
    if (line.empty()) continue;
    auto cells = parse_csv_line(line);
    if (cells.size() != m.labels.size() + 1) throw ParseError(path.string(), line_no, "wrong column count");
    std::vector<std::size_t> row;
    for (std::size_t i = 1; i < cells.size(); ++i) row.push_back(std::stoull(cells[i]));
    m.counts.push_back(std::move(row));
  }
  if (m.counts.size() != m.labels.size()) throw ParseError(path.string(), line_no, "matrix is not square");
  return m;
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Row-normalised heatmap; rows are gold labels, columns predictions.
inline std::string confusion_svg(const ConfusionMatrix& m, const std::string& title) {
  const int cell = 36, left = 170, top = 150, n = static_cast<int>(m.size());
  const int width = left + n * cell + 20, height = top + n * cell + 40;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"10\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  for (int c = 0; c < n; ++c) {
    const int x = left + c * cell + cell / 2;
    s << "<text transform=\"translate(" << x << "," << top - 6 << ") rotate(-60)\">" << xml_escape(m.labels[c])
      << "</text>\n";
  }
  for (int r = 0; r < n; ++r) {
    const double total = static_cast<double>(m.row_sum(r));
    s << "<text x=\"" << left - 6 << "\" y=\"" << top + r * cell + cell / 2 + 4 << "\" text-anchor=\"end\">"
      << xml_escape(m.labels[r]) << "</text>\n";
    for (int c = 0; c < n; ++c) {
      const auto count = m.counts[r][c];
      const double frac = total > 0 ? static_cast<double>(count) / total : 0.0;
      const int shade = static_cast<int>(std::lround(255 - 200 * frac));
      s << "<rect x=\"" << left + c * cell << "\" y=\"" << top + r * cell << "\" width=\"" << cell << "\" height=\""
        << cell << "\" fill=\"rgb(" << shade << "," << shade << ",255)\" stroke=\"#ccc\"/>";
      s << "<text x=\"" << left + c * cell + cell / 2 << "\" y=\"" << top + r * cell + cell / 2 + 4
        << "\" text-anchor=\"middle\"" << (frac > 0.6 ? " fill=\"white\"" : "") << ">" << count << "</text>\n";
    }
  }
  s << "<text x=\"" << left + n * cell / 2 << "\" y=\"" << height - 10
    << "\" text-anchor=\"middle\">predicted</text>\n";
  s << "</svg>\n";
  return s.str();
}

inline std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

struct SuiteRow {
  std::string domain;
  std::string support, labels, micro, macro;
};

inline std::vector<SuiteRow> read_suite_tsv(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  std::vector<SuiteRow> rows;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    chomp(line);
    if (line.empty()) continue;
    auto c = split(line, '\t');
    if (c.size() != 5) throw ParseError(path.string(), rows.size() + 2, "expected 5 columns");
    rows.push_back({c[0], c[1], c[2], c[3], c[4]});
  }
  return rows;
}

/// One row per completed training run in runs.jsonl. A start event pairs
/// with the next end event carrying the same mode and target.
inline std::string training_runs_table(const std::filesystem::path& log_path) {
  std::istringstream in(read_text(log_path));
  std::ostringstream table;
  table << "| Run | Mode | Target | Config | Seed | Best epoch | Stopped | Dev Macro F1 |\n"
           "|---:|---|---|---|---:|---:|---:|---:|\n";
  std::vector<nlohmann::json> open;
  std::string line;
  std::size_t n = 0, line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json ev;
    try {
      ev = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw ParseError(log_path.string(), line_no, "not a JSON object");
    }
    const auto kind = ev.value("event", "");
    if (kind == "start") {
      open.push_back(ev);
    } else if (kind == "end") {
      auto it = std::find_if(open.begin(), open.end(), [&](const nlohmann::json& s) {
        return s.value("mode", "") == ev.value("mode", "") && s.value("target", "") == ev.value("target", "");
      });
      if (it == open.end()) continue;
      table << "| " << ++n << " | " << it->value("mode", "") << " | " << it->value("target", "") << " | "
            << it->value("config_hash", "") << " | " << it->value("seed", 0) << " | " << ev.value("best_epoch", 0)
            << " | " << ev.value("stop_epoch", 0) << " | "
            << SuiteReport::fixed(ev.value("best_dev_macro_f1", 0.0)) << " |\n";
      open.erase(it);
    }
  }
  return n == 0 ? std::string() : table.str();
}

inline int cmd_report(const std::filesystem::path& run_dir, std::ostream& out) {
  const Layout lay{run_dir};
  std::vector<std::filesystem::path> model_dirs;
  for (const auto& p : sorted_entries(lay.reports()))
    if (std::filesystem::exists(p / "test.tsv") || std::filesystem::exists(p / "dev.tsv")) model_dirs.push_back(p);
  std::vector<std::filesystem::path> ablations;
  for (const auto& p : sorted_entries(lay.ablations()))
    if (p.extension() == ".md") ablations.push_back(p);
  const std::string runs =
      std::filesystem::exists(lay.run_log()) ? training_runs_table(lay.run_log()) : std::string();
  if (model_dirs.empty() && ablations.empty() && runs.empty()) {
    out << "no runs found\n";
    return kOk;
  }
  OutputLock lock(lay.root);

  std::ostringstream results;
  std::size_t heatmaps = 0;
  for (const char* split : {"test", "dev"}) {
    std::ostringstream table;
    bool any = false;
    table << "| Model | Micro F1 | Macro F1 |\n|---|---:|---:|\n";
    for (const auto& dir : model_dirs) {
      const auto tsv = dir / (std::string(split) + ".tsv");
      if (!std::filesystem::exists(tsv)) continue;
      any = true;
      const auto rows = read_suite_tsv(tsv);
      const auto name = dir.filename().string();
      for (const auto& r : rows)
        if (r.domain == "avg") table << "| " << name << " | " << r.micro << " | " << r.macro << " |\n";

      std::ostringstream per_domain;
      per_domain << "| Domain | # Test | # Labels | Micro F1 | Macro F1 |\n|---|---:|---:|---:|---:|\n";
      for (const auto& r : rows)
        per_domain << "| " << r.domain << " | " << r.support << " | " << r.labels << " | " << r.micro << " | "
                   << r.macro << " |\n";
      write_text(lay.report() / name / (std::string(split) + "_domains.md"), per_domain.str());

      for (const auto& csv : sorted_entries(dir / "confusion" / split)) {
        if (csv.extension() != ".csv") continue;
        const auto m = read_confusion_csv(csv);
        const auto domain = csv.stem().string();
        write_text(lay.report() / name / "heatmaps" / split / (domain + ".svg"),
                   confusion_svg(m, name + " / " + domain + " (" + split + ")"));
        ++heatmaps;
      }
    }
    if (any) results << "## Results (" << split << ")\n\n" << table.str() << '\n';
  }
  for (const auto& md : ablations)
    results << "## Ablation: " << md.stem().string() << "\n\n" << read_text(md) << '\n';
  if (!runs.empty()) results << "## Training runs\n\n" << runs << '\n';
  write_text(lay.report() / "results.md", results.str());
  out << results.str() << "wrote " << (lay.report() / "results.md").string() << " and " << heatmaps
      << " heatmaps\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

struct Overrides {
  std::optional<std::string> workspace, output, variant, training_mode, target, precision, metadata_fields;
  std::optional<std::uint64_t> seed, split_seed;
  std::optional<std::size_t> epochs, batch, patience, jobs;
  std::optional<double> lr;
  bool metadata = false;

  void add_to(CLI::App& app) {
    app.add_option("--workspace", workspace, "root for relative paths (default: config value or .)");
    app.add_option("--output", output, "output directory");
    app.add_option("--variant", variant, "claim_only | claim_only_embavg | crawled_avg | crawled_ranked");
    app.add_option("--training-mode", training_mode, "stl | mtl | mtl_lel");
    app.add_option("--target", target, "target task code or 'all'");
    app.add_option("--precision", precision, "float | double");
    app.add_option("--seed", seed, "model seed");
    app.add_option("--split-seed", split_seed, "split seed");
    app.add_option("--epochs", epochs, "maximum epochs");
    app.add_option("--batch", batch, "batch size");
    app.add_option("--patience", patience, "early stopping patience");
    app.add_option("--lr", lr, "learning rate");
    app.add_option("--jobs", jobs, "concurrent training jobs");
    app.add_flag("--metadata", metadata, "encode claim metadata");
    app.add_option("--metadata-fields", metadata_fields, "e.g. speaker+tags, entity, all");
  }

  void apply(RunConfig& c) const {
    if (workspace) c.workspace = *workspace;
    if (output) c.output = *output;
    if (variant) c.model.variant = parse_variant(*variant);
    if (training_mode) c.mode = parse_training_mode(*training_mode);
    if (target) c.target = *target;
    if (precision) c.precision = *precision;
    if (seed) c.model.seed = *seed;
    if (split_seed) c.split_seed = *split_seed;
    if (epochs) c.model.max_epochs = *epochs;
    if (batch) c.model.batch = *batch;
    if (patience) c.model.patience = *patience;
    if (lr) c.model.lr = *lr;
    if (jobs) c.jobs = *jobs;
    if (metadata) c.model.use_metadata = true;
    if (metadata_fields) {
      c.model.metadata_fields = MetaFields::parse(*metadata_fields);
      c.model.use_metadata = c.model.metadata_fields != MetaFields::none();
    }
  }
};

template <typename F>
int with_precision(const RunConfig& c, F&& f) {
  return c.precision == "double" ? f(double{}) : f(float{});
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-domain claim veracity prediction"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "veracity 1.0.0");

  std::string config_path;
  bool verbose = false;
  Overrides ov;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config (JSON)")->required();
    sub->add_flag("-v,--verbose", verbose, "print per-epoch progress");
    ov.add_to(*sub);
  };

  FetchOptions fetch;
  auto* prepare = app.add_subcommand("prepare", "cleanse the corpus, split it and write manifests");
  with_config(prepare);
  prepare->add_flag("--fetch", fetch.enabled, "fetch missing snippets from the live search API");
  prepare->add_option("--search-endpoint", fetch.endpoint, "search API endpoint");
  prepare->add_option("--engine-id", fetch.engine_id, "search engine id");

  auto* train_cmd = app.add_subcommand("train", "train a model on the prepared corpus");
  with_config(train_cmd);

  std::string split = "test";
  auto* eval_cmd = app.add_subcommand("evaluate", "score a trained model");
  with_config(eval_cmd);
  eval_cmd->add_option("--split", split, "dev | test")->check(CLI::IsMember({"dev", "test"}));

  std::string kind = "training";
  bool per_target = false;
  auto* ablate = app.add_subcommand("ablate", "metadata or training-mode ablation");
  with_config(ablate);
  ablate->add_option("--mode", kind, "training | metadata")->check(CLI::IsMember({"training", "metadata"}));
  ablate->add_flag("--per-target", per_target, "train one model per target task");

  PredictInput pin;
  std::string tags, entities, speaker, category, snippets_file;
  auto* predict_cmd = app.add_subcommand("predict", "predict the veracity of one claim");
  with_config(predict_cmd);
  predict_cmd->add_option("--claim", pin.claim, "claim text")->required();
  predict_cmd->add_option("--domain", pin.domain, "domain code")->required();
  predict_cmd->add_option("--claim-id", pin.claim_id, "claim id (used to find snippet fixtures)");
  predict_cmd->add_option("--speaker", speaker);
  predict_cmd->add_option("--category", category);
  predict_cmd->add_option("--tags", tags, "'|'-separated");
  predict_cmd->add_option("--entities", entities, "'|'-separated");
  predict_cmd->add_option("--snippets", snippets_file, "snippet fixture file for this claim");

  std::string run_dir;
  auto* report = app.add_subcommand("report", "render tables and confusion heatmaps for a run directory");
  report->add_option("run_dir", run_dir, "output directory of earlier runs")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kValidation;
  }

  Diagnostics diag(&err);
  try {
    if (report->parsed()) return cmd_report(run_dir, out);

    RunConfig cfg;
    if (ov.workspace) cfg.workspace = *ov.workspace;
    cfg = load_run_config(config_path, cfg);
    ov.apply(cfg);
    const bool needs_corpus = prepare->parsed();
    validate_run_config(cfg, {.corpus = needs_corpus, .snippets_for_evidence = !prepare->parsed()});

    if (prepare->parsed()) return cmd_prepare(cfg, fetch, out, diag);
    if (train_cmd->parsed())
      return with_precision(cfg, [&](auto t) { return train_impl<decltype(t)>(cfg, out, diag, verbose); });
    if (eval_cmd->parsed())
      return with_precision(cfg, [&](auto t) { return evaluate_impl<decltype(t)>(cfg, split, out, diag); });
    if (ablate->parsed())
      return with_precision(cfg, [&](auto t) { return ablate_impl<decltype(t)>(cfg, kind, per_target, out, diag); });
    if (predict_cmd->parsed()) {
      if (!speaker.empty()) pin.speaker = speaker;
      if (!category.empty()) pin.category = category;
      for (auto& t : veracity::split(tags, '|')) if (!trim(t).empty()) pin.tags.push_back(trim(t));
      for (auto& e : veracity::split(entities, '|')) if (!trim(e).empty()) pin.entities.push_back(trim(e));
      if (!snippets_file.empty()) pin.snippets_file = cfg.resolve(snippets_file);
      return with_precision(cfg, [&](auto t) { return predict_impl<decltype(t)>(cfg, pin, out, diag); });
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const StageError& e) {
    err << "error in stage " << e.stage() << ": " << e.what() << '\n';
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace veracity::cli
