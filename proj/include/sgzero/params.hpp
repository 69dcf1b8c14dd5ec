#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sgzero/autograd.hpp"

namespace sgz {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named tensors in insertion order. Iteration order is fixed, which keeps
/// optimizer updates and checkpoint bytes reproducible.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw std::invalid_argument("params: duplicate name " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) { return entries_.at(lookup(name)).second; }
  const Tensor& at(const std::string& name) const { return entries_.at(lookup(name)).second; }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("params: unknown name " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters registered as differentiable leaves of one graph.
class BoundParams {
 public:
  BoundParams(Graph& g, const ParamStore& store) {
    for (const auto& [name, t] : store) vars_.emplace(name, g.variable(t));
  }

  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("params: unbound name " + name);
    return it->second;
  }

  /// Gradients after Graph::backward, keyed like the store.
  ParamStore gradients(const ParamStore& store) const {
    ParamStore out;
    for (const auto& [name, _] : store) out.add(name, vars_.at(name).grad());
    return out;
  }

 private:
  std::map<std::string, Var> vars_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
template <class Rng>
Tensor init_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t({rows, cols}, 0.0);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Checkpoint format:
//   "SGCK" | version u32 | records...
//   record: name_len u32 | name bytes | rank u32 | dims u32 x rank | values f64 x count
// All integers and floats little-endian. Records run to end of file.

inline constexpr char kCheckpointMagic[4] = {'S', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(T)];
  const auto offset = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw FormatError(std::string("truncated input reading ") + what + " at byte offset " +
                      std::to_string(offset));
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParamStore& store) {
  os.write(kCheckpointMagic, 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  for (const auto& [name, t] : store) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.values()) detail::write_le<double>(os, v);
  }
}

inline ParamStore read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic bytes (expected SGCK)");
  }
  const auto version = detail::read_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  ParamStore store;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = detail::read_le<std::uint32_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("checkpoint: truncated name");
    const auto rank = detail::read_le<std::uint32_t>(is, "rank");
    if (rank > 8) throw FormatError("checkpoint: implausible rank for " + name);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = detail::read_le<std::uint32_t>(is, "dimension");
    Tensor t(shape, 0.0);
    for (auto& v : t.values()) v = detail::read_le<double>(is, "value");
    store.add(name, std::move(t));
  }
  return store;
}

inline void save_checkpoint(const std::string& path, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(os, store);
}

inline ParamStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace sgz
