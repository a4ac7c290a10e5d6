#pragma once
// Claim veracity models.
//
// Four instance encoders share one output stage:
//   claim_only         r = [h_a ; h_m]
//   claim_only_embavg  r = [mean word embedding ; h_m]
//   crawled_avg        r = [h_a ; mean_j h_e_j ; h_m]
//   crawled_ranked     s_j = [h_a ; h_e_j ; h_a - h_e_j ; h_a * h_e_j ; h_m]
//                      o_j = sigmoid(w . s_j + b)
//                      scores = sum_j o_j * C(s_j)
// Output scores cover the global label space; a per-task mask restricts the
// softmax to the instance's own labels. C is either the shared label
// embedding layer (scores = L P r) or per-task softmax rows (W r + b).

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "veracity/autograd.hpp"
#include "veracity/corpus.hpp"
#include "veracity/features.hpp"
#include "veracity/params.hpp"

namespace veracity {

enum class Variant { kClaimOnly, kClaimOnlyEmbAvg, kCrawledAvg, kCrawledRanked };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kClaimOnly: return "claim_only";
    case Variant::kClaimOnlyEmbAvg: return "claim_only_embavg";
    case Variant::kCrawledAvg: return "crawled_avg";
    case Variant::kCrawledRanked: return "crawled_ranked";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "claim_only") return Variant::kClaimOnly;
  if (s == "claim_only_embavg") return Variant::kClaimOnlyEmbAvg;
  if (s == "crawled_avg" || s == "crawled_docavg") return Variant::kCrawledAvg;
  if (s == "crawled_ranked") return Variant::kCrawledRanked;
  throw ConfigError("unknown model variant '" + std::string(s) + "'");
}

inline bool uses_evidence(Variant v) {
  return v == Variant::kCrawledAvg || v == Variant::kCrawledRanked;
}

enum class HeadKind { kLabelEmbedding, kTaskSoftmax };

/// Full hyperparameter record. Defaults are the selected grid values.
struct ModelConfig {
  std::size_t word_emb = 128;
  std::size_t hidden = 128;
  std::size_t layers = 2;
  double dropout = 0.1;
  bool attention = false;
  bool skip_connections = true;
  std::size_t batch = 32;
  std::size_t label_emb = 16;
  std::size_t cnn_filters = 32;
  std::size_t cnn_kernel = 32;
  std::size_t metadata_emb = 64;  // must be >= cnn_kernel
  double lr = 0.001;
  std::size_t patience = 3;
  std::size_t max_epochs = 100;
  std::size_t max_tokens = 100;
  Variant variant = Variant::kCrawledRanked;
  bool use_metadata = false;
  MetaFields metadata_fields = MetaFields::all();
  std::uint64_t seed = 1;

  void validate() const {
    if (attention) throw ConfigError("word-by-word attention is not supported");
    if (word_emb == 0 || hidden == 0 || layers == 0 || batch == 0 || label_emb == 0)
      throw ConfigError("model dimensions must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (use_metadata && (cnn_filters == 0 || cnn_kernel == 0 || metadata_emb < cnn_kernel))
      throw ConfigError("metadata_emb must be at least cnn_kernel");
    if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
  }

  /// Stable text form, used for hashing and manifests.
  std::string canonical() const {
    std::ostringstream s;
    s << "word_emb=" << word_emb << ";hidden=" << hidden << ";layers=" << layers
      << ";dropout=" << dropout << ";attention=" << attention << ";skip=" << skip_connections
      << ";batch=" << batch << ";label_emb=" << label_emb << ";cnn_filters=" << cnn_filters
      << ";cnn_kernel=" << cnn_kernel << ";metadata_emb=" << metadata_emb << ";lr=" << lr
      << ";patience=" << patience << ";max_epochs=" << max_epochs << ";max_tokens=" << max_tokens
      << ";variant=" << to_string(variant) << ";use_metadata=" << use_metadata
      << ";metadata_fields=" << metadata_fields.name() << ";seed=" << seed;
    return s.str();
  }
  std::uint64_t hash() const { return fnv1a(canonical()); }
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// [a ; e ; a - e ; a * e], row-wise.
template <typename T>
ad::Tensor<T> match_pair(ad::Graph<T>& g, const ad::Tensor<T>& claim, const ad::Tensor<T>& evidence) {
  if (claim.shape() != evidence.shape())
    throw ShapeError("match_pair dimension mismatch " + claim.shape().str() + " vs " + evidence.shape().str());
  return ad::concat_cols(g, {claim, evidence, ad::sub(g, claim, evidence), ad::mul(g, claim, evidence)});
}

/// [a ; mean of the evidence rows]. No evidence gives a zero evidence half.
template <typename T>
ad::Tensor<T> combine_avg(ad::Graph<T>& g, const ad::Tensor<T>& claim, const ad::Tensor<T>& evidence_rows) {
  if (claim.rows() != 1) throw ShapeError("combine_avg expects a single claim row");
  ad::Tensor<T> avg = evidence_rows.rows() == 0
                          ? ad::Tensor<T>::zeros({1, claim.cols()})
                          : ad::segment_mean(g, evidence_rows, {{0, evidence_rows.rows()}});
  if (avg.cols() != claim.cols()) throw ShapeError("combine_avg dimension mismatch");
  return ad::concat_cols(g, {claim, avg});
}

/// o_j = sigmoid(pairs_j . w + b) for each pair row -> (pairs x 1).
template <typename T>
ad::Tensor<T> rank_evidence(ad::Graph<T>& g, const ad::Tensor<T>& pairs, const ad::Tensor<T>& w,
                            const ad::Tensor<T>& b) {
  return ad::sigmoid(g, ad::add_row(g, ad::matmul(g, pairs, w), b));
}

/// Pads a label embedding matrix with zero columns up to `dim`.
template <typename T>
ad::Tensor<T> pad_label_embeddings(ad::Graph<T>& g, const ad::Tensor<T>& labels, std::size_t dim) {
  if (labels.cols() > dim)
    throw ShapeError("label embeddings wider (" + std::to_string(labels.cols()) +
                     ") than representation (" + std::to_string(dim) + ")");
  if (labels.cols() == dim) return labels;
  return ad::concat_cols(g, {labels, ad::Tensor<T>::zeros({labels.rows(), dim - labels.cols()})});
}

/// masked_softmax(h L^T, mask) with L zero-padded to the width of h.
template <typename T>
ad::Tensor<T> label_scores(ad::Graph<T>& g, const ad::Tensor<T>& h, const ad::Tensor<T>& labels,
                           const std::vector<std::uint8_t>& mask) {
  auto padded = pad_label_embeddings(g, labels, h.cols());
  return ad::masked_softmax(g, ad::matmul_nt(g, h, padded), mask);
}

/// masked_softmax(sum_j o_j * (L s_j)) over the k pair rows of one instance.
template <typename T>
ad::Tensor<T> joint_predict(ad::Graph<T>& g, const ad::Tensor<T>& pairs, const ad::Tensor<T>& ranking,
                            const ad::Tensor<T>& labels, const std::vector<std::uint8_t>& mask) {
  auto padded = pad_label_embeddings(g, labels, pairs.cols());
  auto per_pair = ad::matmul_nt(g, pairs, padded);
  auto summed = ad::segment_sum(g, ad::mul_col(g, per_pair, ranking), {{0, pairs.rows()}});
  return ad::masked_softmax(g, summed, mask);
}

/// softmax(h W^T + b): a task-specific output layer.
template <typename T>
ad::Tensor<T> stl_predict(ad::Graph<T>& g, const ad::Tensor<T>& h, const ad::Tensor<T>& w,
                          const ad::Tensor<T>& b) {
  return ad::softmax(g, ad::add_row(g, ad::matmul_nt(g, h, w), b));
}

/// Mask over the global label space selecting one task's labels.
inline std::vector<std::uint8_t> task_mask(const std::vector<DomainTask>& tasks, std::size_t task) {
  std::vector<std::uint8_t> mask(total_labels(tasks), 0);
  const auto& t = tasks.at(task);
  for (std::size_t i = 0; i < t.labels.size(); ++i) mask[t.global_offset + i] = 1;
  return mask;
}

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

/// Stacked bidirectional LSTM over a batch of token sequences. Sequences are
/// padded to a common length; padded steps carry the state through
/// unchanged, so each direction ends on its last real token.
template <typename T>
class BiLstmEncoder {
 public:
  BiLstmEncoder() = default;
  BiLstmEncoder(ParameterSet<T>& params, const ModelConfig& cfg) : cfg_(cfg) {
    std::size_t in = cfg.word_emb;
    const std::size_t h = cfg.hidden;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      for (const char* dir : {"fwd", "bwd"}) {
        const std::string p = "lstm." + std::to_string(l) + "." + dir + ".";
        params.add(p + "wx", {in, 4 * h});
        params.add(p + "wh", {h, 4 * h});
        params.add(p + "b", {1, 4 * h});
      }
      in = cfg.skip_connections ? in + 2 * h : 2 * h;
    }
    params.add("lstm.proj.w", {2 * h, 2 * h});
    params.add("lstm.proj.b", {1, 2 * h});
  }

  std::size_t output_dim() const { return 2 * cfg_.hidden; }

  /// (sequences x 2H). Empty sequences encode to zero rows.
  ad::Tensor<T> encode(ad::Graph<T>& g, ParameterSet<T>& params, const ad::Tensor<T>& embedding,
                       const std::vector<const std::vector<TokenId>*>& seqs) const {
    const std::size_t n = seqs.size();
    const std::size_t h = cfg_.hidden;
    std::size_t steps = 1;
    for (const auto* s : seqs) steps = std::max(steps, s->size());

    // Step-major token ids: rows [t*n, (t+1)*n) hold position t.
    std::vector<TokenId> ids(steps * n, Vocabulary::kPad);
    std::vector<std::vector<std::uint8_t>> live(steps, std::vector<std::uint8_t>(n, 0));
    std::vector<std::uint8_t> nonempty(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      nonempty[i] = seqs[i]->empty() ? 0 : 1;
      for (std::size_t t = 0; t < seqs[i]->size(); ++t) {
        ids[t * n + i] = (*seqs[i])[t];
        live[t][i] = 1;
      }
    }
    auto input = ad::dropout(g, ad::embedding_lookup(g, embedding, ids), cfg_.dropout);

    ad::Tensor<T> last_fwd, last_bwd;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "lstm." + std::to_string(l) + ".";
      std::vector<ad::Tensor<T>> out_fwd(steps), out_bwd(steps);
      last_fwd = run_direction(g, params, p + "fwd.", input, live, n, steps, false, out_fwd);
      last_bwd = run_direction(g, params, p + "bwd.", input, live, n, steps, true, out_bwd);
      if (l + 1 < cfg_.layers) {
        auto fwd = ad::concat_rows(g, out_fwd);
        auto bwd = ad::concat_rows(g, out_bwd);
        input = cfg_.skip_connections ? ad::concat_cols(g, {input, fwd, bwd}) : ad::concat_cols(g, {fwd, bwd});
      }
    }
    auto final_state = ad::concat_cols(g, {last_fwd, last_bwd});
    auto projected = ad::relu(
        g, ad::add_row(g, ad::matmul(g, final_state, params.get("lstm.proj.w")), params.get("lstm.proj.b")));
    projected = ad::dropout(g, projected, cfg_.dropout);
    return ad::blend(g, nonempty, projected, ad::Tensor<T>::zeros({n, 2 * h}));
  }

 private:
  ad::Tensor<T> run_direction(ad::Graph<T>& g, ParameterSet<T>& params, const std::string& prefix,
                              const ad::Tensor<T>& input,
                              const std::vector<std::vector<std::uint8_t>>& live, std::size_t n,
                              std::size_t steps, bool reverse, std::vector<ad::Tensor<T>>& outputs) const {
    const std::size_t h = cfg_.hidden;
    auto projected_in = ad::add_row(g, ad::matmul(g, input, params.get(prefix + "wx")), params.get(prefix + "b"));
    const auto& wh = params.get(prefix + "wh");
    auto state_h = ad::Tensor<T>::zeros({n, h});
    auto state_c = ad::Tensor<T>::zeros({n, h});
    for (std::size_t k = 0; k < steps; ++k) {
      const std::size_t t = reverse ? steps - 1 - k : k;
      auto gates = ad::add(g, slice_step(g, projected_in, t, n), ad::matmul(g, state_h, wh));
      auto in_gate = ad::sigmoid(g, ad::slice_cols(g, gates, 0, h));
      auto forget_gate = ad::sigmoid(g, ad::slice_cols(g, gates, h, h));
      auto cell_in = ad::tanh(g, ad::slice_cols(g, gates, 2 * h, h));
      auto out_gate = ad::sigmoid(g, ad::slice_cols(g, gates, 3 * h, h));
      auto c_new = ad::add(g, ad::mul(g, forget_gate, state_c), ad::mul(g, in_gate, cell_in));
      auto h_new = ad::mul(g, out_gate, ad::tanh(g, c_new));
      state_c = ad::blend(g, live[t], c_new, state_c);
      state_h = ad::blend(g, live[t], h_new, state_h);
      outputs[t] = state_h;
    }
    return state_h;
  }

  static ad::Tensor<T> slice_step(ad::Graph<T>& g, const ad::Tensor<T>& x, std::size_t t, std::size_t n) {
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = t * n + i;
    return ad::gather_rows(g, x, std::move(rows));
  }

  ModelConfig cfg_;
};

/// Metadata encoder: each active metadata value is one embedded token; a
/// bank of filters slides along every token's embedding, followed by ReLU
/// and a max over all tokens and positions. The result is independent of
/// token order and multiplicity.
template <typename T>
class MetadataCnn {
 public:
  MetadataCnn() = default;
  MetadataCnn(ParameterSet<T>& params, const ModelConfig& cfg, std::size_t metadata_size) : cfg_(cfg) {
    params.add("meta.embedding", {std::max<std::size_t>(metadata_size, 1), cfg.metadata_emb});
    params.add("meta.conv.w", {cfg.cnn_kernel, cfg.cnn_filters});
    params.add("meta.conv.b", {1, cfg.cnn_filters});
  }

  std::size_t output_dim() const { return cfg_.cnn_filters; }

  /// (instances x filters); instances without metadata give zero rows.
  ad::Tensor<T> encode(ad::Graph<T>& g, ParameterSet<T>& params,
                       const std::vector<const std::vector<std::size_t>*>& active) const {
    std::vector<std::int32_t> ids;
    std::vector<ad::Segment> segments;
    const std::size_t positions = cfg_.metadata_emb - cfg_.cnn_kernel + 1;
    for (const auto* a : active) {
      const std::size_t begin = ids.size() * positions;
      for (auto idx : *a) ids.push_back(static_cast<std::int32_t>(idx));
      segments.push_back({begin, ids.size() * positions});
    }
    if (ids.empty()) return ad::Tensor<T>::zeros({active.size(), cfg_.cnn_filters});
    auto tokens = ad::embedding_lookup(g, params.get("meta.embedding"), ids);
    auto windows = ad::unfold_cols(g, tokens, cfg_.cnn_kernel);
    auto conv = ad::relu(g, ad::add_row(g, ad::matmul(g, windows, params.get("meta.conv.w")),
                                        params.get("meta.conv.b")));
    return ad::segment_max(g, conv, std::move(segments));
  }

 private:
  ModelConfig cfg_;
};

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardResult {
  ad::Tensor<T> scores;  // (batch x total labels), pre-softmax
  ad::Tensor<T> probs;   // masked softmax of scores
  /// Ranking weight per evidence position (rank - 1); zero where absent.
  std::vector<std::array<T, kMaxEvidence>> ranking;
  /// Evidence-based instance with no evidence, scored from the claim alone.
  std::vector<bool> fallback;
};

template <typename T>
class ClaimModel {
 public:
  ClaimModel(ModelConfig cfg, HeadKind head, std::vector<DomainTask> tasks, std::size_t vocab_size,
             std::size_t metadata_size)
      : cfg_(std::move(cfg)), head_(head), tasks_(std::move(tasks)), vocab_size_(vocab_size),
        metadata_size_(metadata_size) {
    cfg_.validate();
    if (tasks_.empty()) throw ConfigError("model needs at least one task");
    params_.add("embedding", {vocab_size_, cfg_.word_emb});
    if (cfg_.variant != Variant::kClaimOnlyEmbAvg) encoder_ = BiLstmEncoder<T>(params_, cfg_);
    if (cfg_.use_metadata) meta_ = MetadataCnn<T>(params_, cfg_, metadata_size_);

    const std::size_t sentence = cfg_.variant == Variant::kClaimOnlyEmbAvg ? cfg_.word_emb : 2 * cfg_.hidden;
    std::size_t dim = sentence;
    if (cfg_.variant == Variant::kCrawledAvg) dim = 2 * sentence;
    if (cfg_.variant == Variant::kCrawledRanked) dim = 4 * sentence;
    if (cfg_.use_metadata) dim += cfg_.cnn_filters;
    rep_dim_ = dim;

    if (cfg_.variant == Variant::kCrawledRanked) {
      params_.add("rank.w", {rep_dim_, 1});
      params_.add("rank.b", {1, 1});
    }
    const std::size_t labels = total_labels(tasks_);
    if (head_ == HeadKind::kLabelEmbedding) {
      params_.add("lel.proj", {rep_dim_, cfg_.label_emb});
      params_.add("lel.labels", {labels, cfg_.label_emb});
    } else {
      params_.add("out.w", {labels, rep_dim_});
      params_.add("out.b", {1, labels});
    }
    initialize(cfg_.seed);
  }

  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : params_) {
      if (name == "embedding" || name == "meta.embedding") {
        init_uniform(t, rng, 0.1);
      } else if (t.rows() == 1) {
        std::fill(t.values().begin(), t.values().end(), T(0));
        if (name.rfind("lstm.", 0) == 0 && name.size() > 2 && name.substr(name.size() - 2) == ".b") {
          const std::size_t h = cfg_.hidden;  // forget-gate bias
          for (std::size_t i = h; i < 2 * h; ++i) t.values()[i] = T(1);
        }
      } else {
        init_glorot(t, rng);
      }
    }
  }

  void zero_parameters() {
    for (auto& [name, t] : params_) std::fill(t.values().begin(), t.values().end(), T(0));
  }

  ParameterSet<T>& params() noexcept { return params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }
  const ModelConfig& config() const noexcept { return cfg_; }
  HeadKind head() const noexcept { return head_; }
  const std::vector<DomainTask>& tasks() const noexcept { return tasks_; }
  std::size_t representation_dim() const noexcept { return rep_dim_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }
  std::size_t metadata_size() const noexcept { return metadata_size_; }

  /// Sentence embeddings for raw token sequences (BiLSTM variants only).
  ad::Tensor<T> encode_sentences(ad::Graph<T>& g, const std::vector<const std::vector<TokenId>*>& seqs) {
    if (!encoder_) throw Error("variant has no sentence encoder");
    return encoder_->encode(g, params_, params_.get("embedding"), seqs);
  }

  /// Mean word embedding per sequence; empty sequences give zero rows.
  ad::Tensor<T> encode_embavg(ad::Graph<T>& g, const std::vector<const std::vector<TokenId>*>& seqs) {
    std::vector<TokenId> ids;
    std::vector<ad::Segment> segments;
    for (const auto* s : seqs) {
      const std::size_t begin = ids.size();
      ids.insert(ids.end(), s->begin(), s->end());
      segments.push_back({begin, ids.size()});
    }
    if (ids.empty()) return ad::Tensor<T>::zeros({seqs.size(), cfg_.word_emb});
    auto emb = ad::dropout(g, ad::embedding_lookup(g, params_.get("embedding"), ids), cfg_.dropout);
    return ad::segment_mean(g, emb, std::move(segments));
  }

  /// Label scores over the global label space for representation rows.
  ad::Tensor<T> head_scores(ad::Graph<T>& g, const ad::Tensor<T>& rep) {
    if (head_ == HeadKind::kLabelEmbedding) {
      auto projected = ad::matmul(g, rep, params_.get("lel.proj"));
      return ad::matmul_nt(g, projected, params_.get("lel.labels"));
    }
    return ad::add_row(g, ad::matmul_nt(g, rep, params_.get("out.w")), params_.get("out.b"));
  }

  std::vector<std::uint8_t> batch_mask(std::span<const Instance* const> batch) const {
    const std::size_t labels = total_labels(tasks_);
    std::vector<std::uint8_t> mask(batch.size() * labels, 0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& t = tasks_.at(batch[i]->task);
      for (std::size_t j = 0; j < t.labels.size(); ++j) mask[i * labels + t.global_offset + j] = 1;
    }
    return mask;
  }

  ForwardResult<T> forward(ad::Graph<T>& g, std::span<const Instance* const> batch) {
    const std::size_t n = batch.size();
    if (n == 0) throw Error("empty batch");
    ForwardResult<T> out;
    out.ranking.assign(n, {});
    out.fallback.assign(n, false);

    std::optional<ad::Tensor<T>> meta;
    if (cfg_.use_metadata) {
      std::vector<const std::vector<std::size_t>*> active;
      for (const auto* inst : batch) active.push_back(&inst->metadata);
      meta = meta_->encode(g, params_, active);
    }
    auto with_meta = [&](std::vector<ad::Tensor<T>> parts, const std::vector<std::size_t>& rows) {
      if (meta) parts.push_back(ad::gather_rows(g, *meta, rows));
      return parts.size() == 1 ? parts.front() : ad::concat_cols(g, parts);
    };
    std::vector<std::size_t> identity(n);
    for (std::size_t i = 0; i < n; ++i) identity[i] = i;

    std::vector<const std::vector<TokenId>*> seqs;
    for (const auto* inst : batch) seqs.push_back(&inst->claim);

    switch (cfg_.variant) {
      case Variant::kClaimOnly: {
        auto h = encode_sentences(g, seqs);
        out.scores = head_scores(g, with_meta({h}, identity));
        break;
      }
      case Variant::kClaimOnlyEmbAvg: {
        auto h = encode_embavg(g, seqs);
        out.scores = head_scores(g, with_meta({h}, identity));
        break;
      }
      case Variant::kCrawledAvg: {
        std::vector<ad::Segment> segments;
        for (const auto* inst : batch) {
          const std::size_t begin = seqs.size();
          for (const auto& e : inst->evidence) seqs.push_back(&e.ids);
          segments.push_back({begin - n, seqs.size() - n});
        }
        auto all = encode_sentences(g, seqs);
        auto claims = ad::gather_rows(g, all, identity);
        ad::Tensor<T> evidence_avg = ad::Tensor<T>::zeros({n, all.cols()});
        if (all.rows() > n) {
          std::vector<std::size_t> ev_rows(all.rows() - n);
          for (std::size_t r = 0; r < ev_rows.size(); ++r) ev_rows[r] = n + r;
          evidence_avg = ad::segment_mean(g, ad::gather_rows(g, all, ev_rows), segments);
        }
        out.scores = head_scores(g, with_meta({claims, evidence_avg}, identity));
        break;
      }
      case Variant::kCrawledRanked:
        out.scores = forward_ranked(g, batch, seqs, with_meta, out);
        break;
    }
    out.probs = ad::masked_softmax(g, out.scores, batch_mask(batch));
    return out;
  }

  /// Mean negative log-likelihood of the gold labels under the task mask.
  ad::Tensor<T> loss(ad::Graph<T>& g, const ForwardResult<T>& fr, std::span<const Instance* const> batch) {
    std::vector<std::size_t> targets;
    for (const auto* inst : batch) targets.push_back(inst->label);
    return ad::masked_softmax_cross_entropy(g, fr.scores, batch_mask(batch), targets);
  }

 private:
  template <typename WithMeta>
  ad::Tensor<T> forward_ranked(ad::Graph<T>& g, std::span<const Instance* const> batch,
                               std::vector<const std::vector<TokenId>*>& seqs, WithMeta& with_meta,
                               ForwardResult<T>& out) {
    const std::size_t n = batch.size();
    std::vector<std::size_t> pair_claim, pair_evidence, fallback_rows;
    std::vector<ad::Segment> segments;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t begin = pair_claim.size();
      for (const auto& e : batch[i]->evidence) {
        pair_claim.push_back(i);
        pair_evidence.push_back(seqs.size());
        seqs.push_back(&e.ids);
      }
      segments.push_back({begin, pair_claim.size()});
      if (batch[i]->evidence.empty()) {
        out.fallback[i] = true;
        fallback_rows.push_back(i);
      }
    }
    auto all = encode_sentences(g, seqs);
    const std::size_t labels = total_labels(tasks_);

    std::vector<ad::Tensor<T>> blocks;  // row order: paired instances, then fallbacks
    std::vector<std::size_t> block_row(n);
    if (!pair_claim.empty()) {
      auto claims = ad::gather_rows(g, all, pair_claim);
      auto evidence = ad::gather_rows(g, all, pair_evidence);
      auto pairs = with_meta(std::vector<ad::Tensor<T>>{match_pair(g, claims, evidence)}, pair_claim);
      auto o = rank_evidence(g, pairs, params_.get("rank.w"), params_.get("rank.b"));
      auto weighted = ad::mul_col(g, head_scores(g, pairs), o);
      blocks.push_back(ad::segment_sum(g, weighted, segments));
      for (std::size_t i = 0; i < n; ++i) {
        block_row[i] = i;
        for (std::size_t r = segments[i].begin; r < segments[i].end; ++r) {
          const int rank = batch[i]->evidence[r - segments[i].begin].rank;
          const std::size_t pos = rank >= 1 && rank <= static_cast<int>(kMaxEvidence)
                                      ? static_cast<std::size_t>(rank - 1)
                                      : r - segments[i].begin;
          if (pos < kMaxEvidence) out.ranking[i][pos] = o.values()[r];
        }
      }
    }
    if (!fallback_rows.empty()) {
      auto claims = ad::gather_rows(g, all, fallback_rows);
      auto zero = ad::Tensor<T>::zeros(claims.shape());
      auto pairs = with_meta(std::vector<ad::Tensor<T>>{match_pair(g, claims, zero)}, fallback_rows);
      const std::size_t base = pair_claim.empty() ? 0 : n;
      blocks.push_back(head_scores(g, pairs));
      for (std::size_t k = 0; k < fallback_rows.size(); ++k) block_row[fallback_rows[k]] = base + k;
    }
    auto stacked = blocks.size() == 1 ? blocks.front() : ad::concat_rows(g, blocks);
    if (stacked.cols() != labels) throw ShapeError("unexpected score width");
    if (blocks.size() == 1) return stacked;  // rows already in batch order
    return ad::gather_rows(g, stacked, block_row);
  }

  ModelConfig cfg_;
  HeadKind head_;
  std::vector<DomainTask> tasks_;
  std::size_t vocab_size_;
  std::size_t metadata_size_;
  std::size_t rep_dim_ = 0;
  ParameterSet<T> params_;
  std::optional<BiLstmEncoder<T>> encoder_;
  std::optional<MetadataCnn<T>> meta_;
};

}  // namespace veracity
