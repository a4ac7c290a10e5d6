#pragma once
// Named parameter registry, RMSProp, and the binary checkpoint format.
//
// Checkpoint layout (little-endian):
//   magic "VRCK" | u32 version | u32 count
//   per tensor: u32 name_len | name | u64 rows | u64 cols | u8 dtype (4=f32, 8=f64) | raw values
//   u64 FNV-1a checksum of every preceding byte

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "veracity/autograd.hpp"

namespace veracity {

template <typename T>
class ParameterSet {
 public:
  using Tensor = ad::Tensor<T>;

  /// Registers a trainable tensor. Names must be unique.
  Tensor& add(const std::string& name, ad::Shape shape) {
    if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor::zeros(shape, true)});
    return entries_.back().second;
  }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  using Snapshot = std::vector<std::vector<T>>;
  Snapshot snapshot() const {
    Snapshot s;
    for (const auto& e : entries_) s.push_back(e.second.values());
    return s;
  }
  void restore(const Snapshot& s) {
    if (s.size() != entries_.size()) throw Error("snapshot does not match parameter set");
    for (std::size_t i = 0; i < s.size(); ++i) entries_[i].second.values() = s[i];
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Glorot-uniform fill.
template <typename T>
void init_glorot(ad::Tensor<T>& t, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-a, a));
}

template <typename T>
void init_uniform(ad::Tensor<T>& t, Rng& rng, double a) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-a, a));
}

struct RmsPropConfig {
  double learning_rate = 0.001;
  double decay = 0.9;
  double epsilon = 1e-8;
  bool checked = false;
};

/// s <- decay*s + (1-decay)*g^2 ; theta <- theta - lr*g/sqrt(s+eps)
template <typename T>
class RmsProp {
 public:
  explicit RmsProp(RmsPropConfig config = {}) : config_(config) {}

  void step(ParameterSet<T>& params) {
    if (accumulators_.size() != params.size()) {
      accumulators_.clear();
      for (const auto& [name, t] : params) accumulators_.emplace_back(t.size(), T(0));
    }
    const T lr = T(config_.learning_rate), decay = T(config_.decay), eps = T(config_.epsilon);
    std::size_t k = 0;
    for (auto& [name, t] : params) {
      auto& acc = accumulators_[k++];
      if (!t.has_grad()) continue;
      const auto& grad = t.grad_buffer();
      auto& value = t.values();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const T g = grad[i];
        acc[i] = decay * acc[i] + (T(1) - decay) * g * g;
        const T delta = lr * g / std::sqrt(acc[i] + eps);
        if (config_.checked && !std::isfinite(static_cast<double>(delta)))
          throw NumericError("non-finite RMSProp update for '" + name + "'");
        value[i] -= delta;
      }
    }
  }

  const RmsPropConfig& config() const noexcept { return config_; }

 private:
  RmsPropConfig config_;
  std::vector<std::vector<T>> accumulators_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian host");

template <typename V>
void put(std::string& buf, V v) {
  char raw[sizeof(V)];
  std::memcpy(raw, &v, sizeof(V));
  buf.append(raw, sizeof(V));
}

template <typename V>
V take(std::string_view buf, std::size_t& pos) {
  if (pos + sizeof(V) > buf.size()) throw CorruptionError("checkpoint truncated");
  V v;
  std::memcpy(&v, buf.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const ParameterSet<T>& params) {
  std::string buf = "VRCK";
  detail::put<std::uint32_t>(buf, 1);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put<std::uint64_t>(buf, t.rows());
    detail::put<std::uint64_t>(buf, t.cols());
    detail::put<std::uint8_t>(buf, static_cast<std::uint8_t>(sizeof(T)));
    buf.append(reinterpret_cast<const char*>(t.values().data()), t.size() * sizeof(T));
  }
  detail::put<std::uint64_t>(buf, fnv1a(buf));
  return buf;
}

/// Loads values into an already-shaped parameter set. Values stored at a
/// different precision are converted.
template <typename T>
void deserialize_checkpoint(std::string_view buf, ParameterSet<T>& params) {
  if (buf.size() < 8 + 4 + 4 || buf.substr(0, 4) != "VRCK") throw CorruptionError("not a checkpoint");
  const std::size_t body = buf.size() - 8;
  std::size_t tail = body;
  if (detail::take<std::uint64_t>(buf, tail) != fnv1a(buf.substr(0, body)))
    throw CorruptionError("checkpoint checksum mismatch");
  std::size_t pos = 4;
  if (detail::take<std::uint32_t>(buf, pos) != 1) throw CorruptionError("unsupported checkpoint version");
  const auto count = detail::take<std::uint32_t>(buf, pos);
  if (count != params.size())
    throw Error("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                std::to_string(params.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::take<std::uint32_t>(buf, pos);
    if (pos + len > body) throw CorruptionError("checkpoint truncated");
    std::string name(buf.substr(pos, len));
    pos += len;
    const auto rows = detail::take<std::uint64_t>(buf, pos);
    const auto cols = detail::take<std::uint64_t>(buf, pos);
    const auto width = detail::take<std::uint8_t>(buf, pos);
    auto& t = params.get(name);
    if (t.rows() != rows || t.cols() != cols)
      throw Error("checkpoint tensor '" + name + "' has shape " + ad::Shape{rows, cols}.str() +
                  ", model expects " + t.shape().str());
    if (width != 4 && width != 8) throw CorruptionError("unknown dtype width");
    const std::size_t n = rows * cols;
    if (pos + n * width > body) throw CorruptionError("checkpoint truncated");
    auto& values = t.values();
    for (std::size_t k = 0; k < n; ++k) {
      if (width == 4) {
        float f;
        std::memcpy(&f, buf.data() + pos + k * 4, 4);
        values[k] = static_cast<T>(f);
      } else {
        double d;
        std::memcpy(&d, buf.data() + pos + k * 8, 8);
        values[k] = static_cast<T>(d);
      }
    }
    pos += n * width;
  }
  if (pos != body) throw CorruptionError("trailing bytes in checkpoint");
}

template <typename T>
void save_checkpoint(const ParameterSet<T>& params, const std::filesystem::path& path) {
  const auto buf = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <typename T>
void load_checkpoint(ParameterSet<T>& params, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  deserialize_checkpoint(ss.str(), params);
}

}  // namespace veracity
