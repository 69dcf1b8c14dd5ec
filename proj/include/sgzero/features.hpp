#pragma once

// File-backed visual features and linguistic embeddings.
//
// Feature file (binary, little-endian):
//   "SGFT" | version u32 | dim u32 | count u64 | records...
//   record: image_id u64 | entity_index u32 | partner_index u32 | dim x f32
// Entity records carry partner_index = 0xFFFFFFFF. Union-box records carry the
// subject in entity_index and the object in partner_index.
//
// Embedding file (text): one token per line followed by dim decimal reals.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "sgzero/params.hpp"

namespace sgz {

inline constexpr std::uint32_t kNoPartner = 0xFFFFFFFFu;
inline constexpr char kFeatureMagic[4] = {'S', 'G', 'F', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureKey {
  std::uint64_t image_id = 0;
  std::uint32_t entity = 0;
  std::uint32_t partner = kNoPartner;
  friend auto operator<=>(const FeatureKey&, const FeatureKey&) = default;
};

class FeatureStore {
 public:
  FeatureStore() = default;
  explicit FeatureStore(std::uint32_t dim) : dim_(dim) {}

  std::uint32_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return records_.size(); }

  void put(const FeatureKey& key, std::vector<float> v) {
    if (v.size() != dim_) {
      throw DimensionError("feature store: vector length " + std::to_string(v.size()) +
                           " != dim " + std::to_string(dim_));
    }
    records_[key] = std::move(v);
  }
  void put_entity(std::uint64_t image, std::uint32_t index, std::vector<float> v) {
    put({image, index, kNoPartner}, std::move(v));
  }
  void put_union(std::uint64_t image, std::uint32_t subj, std::uint32_t obj, std::vector<float> v) {
    put({image, subj, obj}, std::move(v));
  }

  const std::vector<float>& get(const FeatureKey& key) const {
    auto it = records_.find(key);
    if (it == records_.end()) {
      throw std::out_of_range("feature store: missing key (image " + std::to_string(key.image_id) +
                              ", entity " + std::to_string(key.entity) + ", partner " +
                              (key.partner == kNoPartner ? std::string("none")
                                                         : std::to_string(key.partner)) +
                              ")");
    }
    return it->second;
  }
  const std::vector<float>& entity(std::uint64_t image, std::uint32_t index) const {
    return get({image, index, kNoPartner});
  }
  const std::vector<float>& union_feature(std::uint64_t image, std::uint32_t s, std::uint32_t o) const {
    return get({image, s, o});
  }
  bool contains(const FeatureKey& key) const { return records_.count(key) != 0; }

  const std::map<FeatureKey, std::vector<float>>& records() const { return records_; }

  friend bool operator==(const FeatureStore&, const FeatureStore&) = default;

  class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
  };

 private:
  std::uint32_t dim_ = 0;
  std::map<FeatureKey, std::vector<float>> records_;
};

inline void write_features(std::ostream& os, const FeatureStore& fs) {
  os.write(kFeatureMagic, 4);
  detail::write_le<std::uint32_t>(os, kFeatureVersion);
  detail::write_le<std::uint32_t>(os, fs.dim());
  detail::write_le<std::uint64_t>(os, fs.size());
  for (const auto& [k, v] : fs.records()) {
    detail::write_le<std::uint64_t>(os, k.image_id);
    detail::write_le<std::uint32_t>(os, k.entity);
    detail::write_le<std::uint32_t>(os, k.partner);
    for (float x : v) detail::write_le<float>(os, x);
  }
}

inline FeatureStore read_features(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kFeatureMagic, 4) != 0) {
    throw FormatError("features: bad magic bytes (expected SGFT)");
  }
  const auto version = detail::read_le<std::uint32_t>(is, "version");
  if (version != kFeatureVersion) {
    throw FormatError("features: unsupported version " + std::to_string(version));
  }
  const auto dim = detail::read_le<std::uint32_t>(is, "dim");
  const auto count = detail::read_le<std::uint64_t>(is, "count");
  FeatureStore fs(dim);
  for (std::uint64_t r = 0; r < count; ++r) {
    FeatureKey k;
    k.image_id = detail::read_le<std::uint64_t>(is, "image_id");
    k.entity = detail::read_le<std::uint32_t>(is, "entity_index");
    k.partner = detail::read_le<std::uint32_t>(is, "partner_index");
    std::vector<float> v(dim);
    for (auto& x : v) x = detail::read_le<float>(is, "feature value");
    fs.put(k, std::move(v));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("features: trailing bytes after " + std::to_string(count) + " records");
  }
  return fs;
}

inline void save_features(const std::string& path, const FeatureStore& fs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_features(os, fs);
}

inline FeatureStore load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_features(is);
}

// ---------------------------------------------------------------------------

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return table_.size(); }
  bool contains(const std::string& token) const { return table_.count(token) != 0; }

  void put(const std::string& token, std::vector<double> v) {
    if (v.size() != dim_) {
      throw FormatError("embeddings: token '" + token + "' has " + std::to_string(v.size()) +
                        " values, expected " + std::to_string(dim_));
    }
    table_[token] = std::move(v);
  }

  /// Vector for a class name. Names absent from the table are split on spaces
  /// and underscores and their known words averaged; a name with no known word
  /// maps to the zero vector and increments warnings().
  std::vector<double> lookup(const std::string& name) const {
    if (auto it = table_.find(name); it != table_.end()) return it->second;
    std::vector<double> acc(dim_, 0.0);
    std::size_t known = 0;
    std::string word;
    std::istringstream ss(name);
    auto flush = [&]() {
      if (word.empty()) return;
      if (auto it = table_.find(word); it != table_.end()) {
        for (std::size_t i = 0; i < dim_; ++i) acc[i] += it->second[i];
        ++known;
      }
      word.clear();
    };
    for (char ch : name) {
      if (ch == ' ' || ch == '_') {
        flush();
      } else {
        word.push_back(ch);
      }
    }
    flush();
    if (known == 0) {
      ++warnings_;
      return acc;
    }
    for (auto& v : acc) v /= static_cast<double>(known);
    return acc;
  }

  /// True when `name` resolves to a known token directly or through its words.
  bool resolvable(const std::string& name) const {
    if (contains(name)) return true;
    std::string word;
    for (char ch : name + " ") {
      if (ch == ' ' || ch == '_') {
        if (!word.empty() && contains(word)) return true;
        word.clear();
      } else {
        word.push_back(ch);
      }
    }
    return false;
  }

  std::size_t warnings() const noexcept { return warnings_; }
  const std::map<std::string, std::vector<double>>& entries() const { return table_; }

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
    return a.dim_ == b.dim_ && a.table_ == b.table_;
  }

 private:
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<double>> table_;
  mutable std::size_t warnings_ = 0;
};

inline EmbeddingTable read_embeddings(std::istream& is, std::size_t expected_dim = 0) {
  EmbeddingTable table;
  bool sized = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string token;
    if (!(ss >> token)) continue;
    std::vector<double> v;
    std::string num;
    while (ss >> num) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(num, &used));
        if (used != num.size()) throw std::invalid_argument(num);
      } catch (const std::exception&) {
        throw FormatError("embeddings: line " + std::to_string(line_no) + ": bad number '" + num + "'");
      }
    }
    if (!sized) {
      const std::size_t dim = expected_dim ? expected_dim : v.size();
      if (dim == 0) throw FormatError("embeddings: line " + std::to_string(line_no) + ": no values");
      table = EmbeddingTable(dim);
      sized = true;
    }
    if (v.size() != table.dim()) {
      throw FormatError("embeddings: line " + std::to_string(line_no) + ": expected " +
                        std::to_string(table.dim()) + " values, got " + std::to_string(v.size()));
    }
    table.put(token, std::move(v));
  }
  if (!sized) throw FormatError("embeddings: empty file");
  return table;
}

inline void write_embeddings(std::ostream& os, const EmbeddingTable& table) {
  os << std::setprecision(17);
  for (const auto& [token, v] : table.entries()) {
    os << token;
    for (double x : v) os << ' ' << x;
    os << '\n';
  }
}

inline EmbeddingTable load_embeddings(const std::string& path, std::size_t expected_dim = 0) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_embeddings(is, expected_dim);
}

inline void save_embeddings(const std::string& path, const EmbeddingTable& table) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_embeddings(os, table);
}

}  // namespace sgz
