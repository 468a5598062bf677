#pragma once

#include <Eigen/Dense>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <queue>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kt/embed.hpp"

namespace kt {

/// How the level-probability factor is derived from M. Both produce the tail
/// P(level >= l) = exp(-l * lambda); they differ only in lambda.
enum class LevelRule {
  inverse_log_m,  ///< lambda = 1 / ln M (default)
  log_m,          ///< lambda = ln M, the conventional HNSW normalization
};

struct HnswParams {
  int M = 8;
  int M0 = 16;
  int l_max = 64;
  double lambda = 1.0 / std::log(8.0);
  int ef_construction = 200;
  int ef_search = 64;
  std::uint64_t rng_seed = 0x5eed;

  /// M0 = 2M and lambda per `rule`; other fields keep their defaults.
  static HnswParams for_degree(int M, LevelRule rule = LevelRule::inverse_log_m) {
    HnswParams p;
    p.M = M;
    p.M0 = 2 * M;
    p.lambda = rule == LevelRule::inverse_log_m ? 1.0 / std::log(double(M)) : std::log(double(M));
    return p;
  }

  int cap(int layer) const { return layer == 0 ? M0 : M; }

  void validate() const {
    if (M < 2) throw std::invalid_argument("HNSW M must be >= 2");
    if (M0 < M) throw std::invalid_argument("HNSW M0 must be >= M");
    if (l_max < 1) throw std::invalid_argument("HNSW l_max must be >= 1");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) {
      throw std::invalid_argument("HNSW lambda must be positive");
    }
    if (ef_construction < M) throw std::invalid_argument("HNSW ef_construction must be >= M");
    if (ef_search < 1) throw std::invalid_argument("HNSW ef_search must be >= 1");
  }
};

/// Level for a uniform draw u in (0, 1]: min(floor(-ln u / lambda), l_max).
inline int level_from_uniform(double u, const HnswParams& params) {
  if (!(u > 0.0)) return params.l_max;
  const double level = std::floor(-std::log(u) / params.lambda);
  return level >= params.l_max ? params.l_max : static_cast<int>(level);
}

/// Uniform double in (0, 1] from the top 53 bits of one engine draw.
inline double uniform_open_closed(std::mt19937_64& rng) {
  return static_cast<double>((rng() >> 11) + 1) * 0x1.0p-53;
}

inline int sample_level(std::mt19937_64& rng, const HnswParams& params) {
  return level_from_uniform(uniform_open_closed(rng), params);
}

/// Candidate pruning shared by insertion and neighbor-list repair.
///
/// `candidates` are (id, distance-to-target) sorted ascending. A candidate is
/// admitted when it is farther from every already admitted neighbor than from
/// the target; admission stops at `cap`. Remaining slots are backfilled with
/// the nearest rejected candidates.
template <typename Id, typename Dist, typename PairDistance>
std::vector<Id> select_neighbors_heuristic(std::span<const std::pair<Id, Dist>> candidates,
                                           int cap, PairDistance&& pair_distance) {
  std::vector<Id> admitted;
  std::vector<Id> rejected;
  const auto limit = static_cast<std::size_t>(std::max(cap, 0));
  admitted.reserve(limit);
  for (const auto& [id, to_target] : candidates) {
    if (admitted.size() >= limit) break;
    bool diverse = true;
    for (const Id& kept : admitted) {
      if (!(pair_distance(id, kept) > to_target)) {
        diverse = false;
        break;
      }
    }
    (diverse ? admitted : rejected).push_back(id);
  }
  for (const Id& id : rejected) {
    if (admitted.size() >= limit) break;
    admitted.push_back(id);
  }
  return admitted;
}

class HnswFormatError : public std::runtime_error {
 public:
  HnswFormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i64(std::int64_t v) { put(static_cast<std::uint64_t>(v), 8); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put(bits, 8);
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put(bits, 4);
  }
  void raw(std::string_view bytes) { buffer_.append(bytes); }
  std::string& buffer() { return buffer_; }

 private:
  void put(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) buffer_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buffer_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  std::int64_t i64(const char* what) { return static_cast<std::int64_t>(get(8, what)); }
  double f64(const char* what) {
    const std::uint64_t bits = get(8, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  float f32(const char* what) {
    const auto bits = static_cast<std::uint32_t>(get(4, what));
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::uint64_t offset() const { return offset_; }
  std::uint64_t remaining() const { return bytes_.size() - offset_; }

 private:
  std::uint64_t get(int n, const char* what) {
    if (remaining() < static_cast<std::uint64_t>(n)) {
      throw HnswFormatError(std::string("truncated index file reading ") + what, offset_);
    }
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[offset_ + i])) << (8 * i);
    }
    offset_ += n;
    return v;
  }

  std::string_view bytes_;
  std::uint64_t offset_ = 0;
};

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded pieces
  constexpr std::size_t kPiece = 1u << 30;
  for (std::size_t pos = 0; pos < bytes.size(); pos += kPiece) {
    const std::size_t n = std::min(kPiece, bytes.size() - pos);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

/// Hierarchical navigable small-world graph over unit vectors with cosine
/// distance. Node ids are caller-assigned 64-bit integers.
///
/// Not internally synchronized: concurrent const calls (search, accessors) are
/// safe, mutation needs exclusive access.
template <typename Scalar = float>
class HnswIndex {
 public:
  using VectorType = Vector<Scalar>;

  struct Hit {
    std::uint64_t id;
    Scalar distance;
    bool operator==(const Hit&) const = default;
  };

  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr char kMagic[4] = {'K', 'T', 'H', 'N'};

  HnswIndex(int dim, HnswParams params = {})
      : dim_(dim), params_(params), rng_(params.rng_seed), data_(dim, 0) {
    if (dim < 1) throw std::invalid_argument("HNSW dimension must be >= 1");
    params_.validate();
  }

  int dim() const { return dim_; }
  const HnswParams& params() const { return params_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  bool contains(std::uint64_t id) const { return slot_of_.contains(id); }

  std::optional<std::uint64_t> entry_point() const {
    if (!entry_) return std::nullopt;
    return ids_[*entry_];
  }
  int max_level() const { return entry_ ? levels_[*entry_] : -1; }

  /// Ids in insertion order.
  const std::vector<std::uint64_t>& ids() const { return ids_; }

  int level(std::uint64_t id) const { return levels_[slot(id)]; }

  std::vector<std::uint64_t> neighbors(std::uint64_t id, int layer) const {
    const auto s = slot(id);
    if (layer < 0 || layer > levels_[s]) throw std::out_of_range("layer above node level");
    std::vector<std::uint64_t> out;
    out.reserve(links_[s][layer].size());
    for (std::uint32_t n : links_[s][layer]) out.push_back(ids_[n]);
    return out;
  }

  auto vector(std::uint64_t id) const { return data_.col(slot(id)); }

  void set_ef_search(int ef) {
    if (ef < 1) throw std::invalid_argument("ef_search must be >= 1");
    params_.ef_search = ef;
  }

  template <typename Derived>
  void insert(std::uint64_t id, const Eigen::MatrixBase<Derived>& vec) {
    insert_with_level(id, vec, sample_level(rng_, params_));
  }

  /// Insertion with an explicit level (tests and rebuilds).
  template <typename Derived>
  void insert_with_level(std::uint64_t id, const Eigen::MatrixBase<Derived>& vec, int level) {
    if (vec.size() != dim_) throw DimensionMismatch(dim_, vec.size());
    if (contains(id)) throw std::invalid_argument("duplicate HNSW id " + std::to_string(id));
    level = std::clamp(level, 0, params_.l_max);

    const VectorType q = vec.template cast<Scalar>();
    const auto s = append_slot(id, q, level);
    if (!entry_) {
      entry_ = s;
      return;
    }

    std::uint32_t ep = *entry_;
    const int top = levels_[*entry_];
    for (int layer = top; layer > level; --layer) ep = greedy_closest(q, ep, layer);

    std::vector<std::uint32_t> entries{ep};
    for (int layer = std::min(level, top); layer >= 0; --layer) {
      const auto found = search_layer(q, entries, params_.ef_construction, layer);
      const auto chosen = prune(found, params_.cap(layer));
      links_[s][layer] = chosen;
      for (std::uint32_t n : chosen) connect(n, s, layer);
      entries.clear();
      for (const auto& c : found) entries.push_back(c.slot);
    }
    if (level > top) entry_ = s;
  }

  /// Greedy descent to layer 1, then ef-bounded best-first search on layer 0.
  /// Results ascend by distance, ties by id.
  template <typename Derived>
  std::vector<Hit> search(const Eigen::MatrixBase<Derived>& query, int topk, int ef) const {
    if (topk < 1) throw std::invalid_argument("topk must be >= 1");
    if (query.size() != dim_) throw DimensionMismatch(dim_, query.size());
    if (!entry_) return {};
    const VectorType q = query.template cast<Scalar>();
    std::uint32_t ep = *entry_;
    for (int layer = levels_[*entry_]; layer > 0; --layer) ep = greedy_closest(q, ep, layer);
    const std::uint32_t entries[] = {ep};
    auto found = search_layer(q, entries, std::max(ef, topk), 0);
    if (found.size() > static_cast<std::size_t>(topk)) found.resize(topk);
    std::vector<Hit> hits;
    hits.reserve(found.size());
    for (const auto& c : found) hits.push_back({c.id, std::clamp(c.distance, Scalar(0), Scalar(2))});
    return hits;
  }

  template <typename Derived>
  std::vector<Hit> search(const Eigen::MatrixBase<Derived>& query, int topk) const {
    return search(query, topk, std::max(topk, params_.ef_search));
  }

  // --- persistence -------------------------------------------------------

  std::string serialize() const {
    detail::ByteWriter w;
    w.raw(std::string_view(kMagic, 4));
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(dim_));
    w.u32(static_cast<std::uint32_t>(params_.M));
    w.u32(static_cast<std::uint32_t>(params_.M0));
    w.u32(static_cast<std::uint32_t>(params_.l_max));
    w.u32(static_cast<std::uint32_t>(params_.ef_construction));
    w.f64(params_.lambda);
    w.u64(params_.rng_seed);
    w.u64(ids_.size());
    w.i64(entry_ ? static_cast<std::int64_t>(ids_[*entry_]) : -1);
    for (std::size_t s = 0; s < ids_.size(); ++s) {
      w.u64(ids_[s]);
      w.u32(static_cast<std::uint32_t>(levels_[s]));
      for (int layer = 0; layer <= levels_[s]; ++layer) {
        w.u32(static_cast<std::uint32_t>(links_[s][layer].size()));
        for (std::uint32_t n : links_[s][layer]) w.u64(ids_[n]);
      }
    }
    for (std::size_t s = 0; s < ids_.size(); ++s) {
      for (int d = 0; d < dim_; ++d) w.f32(static_cast<float>(data_(d, s)));
    }
    const std::uint32_t crc = detail::crc32_of(w.buffer());
    w.u32(crc);
    return std::move(w.buffer());
  }

  /// Parses a serialized index. Throws HnswFormatError; nothing is returned
  /// unless the whole file validates.
  static HnswIndex deserialize(std::string_view bytes, int ef_search = HnswParams{}.ef_search) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
      throw HnswFormatError("bad index magic", 0);
    }
    r.u32("magic");
    const std::uint32_t version = r.u32("version");
    if (version != kFormatVersion) {
      throw HnswFormatError("unsupported index format version " + std::to_string(version), 4);
    }
    if (bytes.size() < 8 + 4) throw HnswFormatError("truncated index file", bytes.size());
    const std::string_view body = bytes.substr(0, bytes.size() - 4);
    detail::ByteReader crc_reader(bytes.substr(bytes.size() - 4));
    if (crc_reader.u32("crc") != detail::crc32_of(body)) {
      throw HnswFormatError("index checksum mismatch (corrupt or truncated file)",
                            bytes.size() - 4);
    }

    detail::ByteReader in(body);
    in.u32("magic");
    in.u32("version");
    const std::uint32_t dim = in.u32("dim");
    HnswParams params;
    params.M = static_cast<int>(in.u32("M"));
    params.M0 = static_cast<int>(in.u32("M0"));
    params.l_max = static_cast<int>(in.u32("l_max"));
    params.ef_construction = static_cast<int>(in.u32("ef_construction"));
    params.lambda = in.f64("lambda");
    params.rng_seed = in.u64("rng_seed");
    params.ef_search = ef_search;
    const std::uint64_t params_end = in.offset();
    if (dim == 0 || dim > (1u << 20)) throw HnswFormatError("invalid dimension", 8);
    try {
      params.validate();
    } catch (const std::invalid_argument& e) {
      throw HnswFormatError(e.what(), params_end);
    }
    const std::uint64_t count = in.u64("count");
    const std::int64_t entry = in.i64("entry_point");
    if (count > in.remaining()) throw HnswFormatError("node count exceeds file size", in.offset());

    HnswIndex index(static_cast<int>(dim), params);
    std::vector<std::vector<std::vector<std::uint64_t>>> raw_links(count);
    index.ids_.reserve(count);
    index.levels_.reserve(count);
    for (std::uint64_t s = 0; s < count; ++s) {
      const std::uint64_t node_offset = in.offset();
      const std::uint64_t id = in.u64("node id");
      const std::uint32_t level = in.u32("node level");
      if (level > static_cast<std::uint32_t>(params.l_max)) {
        throw HnswFormatError("node level exceeds l_max", node_offset + 8);
      }
      if (index.slot_of_.contains(id)) throw HnswFormatError("duplicate node id", node_offset);
      index.slot_of_[id] = static_cast<std::uint32_t>(s);
      index.ids_.push_back(id);
      index.levels_.push_back(static_cast<int>(level));
      raw_links[s].resize(level + 1);
      for (std::uint32_t layer = 0; layer <= level; ++layer) {
        const std::uint64_t at = in.offset();
        const std::uint32_t n = in.u32("neighbor count");
        if (n > static_cast<std::uint32_t>(params.cap(static_cast<int>(layer)))) {
          throw HnswFormatError("neighbor count exceeds degree cap", at);
        }
        raw_links[s][layer].reserve(n);
        for (std::uint32_t k = 0; k < n; ++k) raw_links[s][layer].push_back(in.u64("neighbor id"));
      }
    }
    const std::uint64_t vectors_at = in.offset();
    if (in.remaining() != count * dim * 4) {
      throw HnswFormatError("vector section size mismatch", vectors_at);
    }
    index.data_.resize(dim, static_cast<Eigen::Index>(count));
    for (std::uint64_t s = 0; s < count; ++s) {
      for (std::uint32_t d = 0; d < dim; ++d) index.data_(d, s) = static_cast<Scalar>(in.f32("vector"));
    }

    index.links_.resize(count);
    for (std::uint64_t s = 0; s < count; ++s) {
      index.links_[s].resize(raw_links[s].size());
      for (std::size_t layer = 0; layer < raw_links[s].size(); ++layer) {
        for (std::uint64_t nid : raw_links[s][layer]) {
          const auto it = index.slot_of_.find(nid);
          if (it == index.slot_of_.end() ||
              index.levels_[it->second] < static_cast<int>(layer)) {
            throw HnswFormatError("adjacency references unknown node " + std::to_string(nid),
                                  vectors_at);
          }
          index.links_[s][layer].push_back(it->second);
        }
      }
    }
    if (entry < 0) {
      if (count != 0) throw HnswFormatError("missing entry point", params_end + 8);
    } else {
      const auto it = index.slot_of_.find(static_cast<std::uint64_t>(entry));
      if (it == index.slot_of_.end()) throw HnswFormatError("unknown entry point", params_end + 8);
      const int top = *std::max_element(index.levels_.begin(), index.levels_.end());
      if (index.levels_[it->second] != top) {
        throw HnswFormatError("entry point is not at the top level", params_end + 8);
      }
      index.entry_ = it->second;
    }
    index.rng_.seed(params.rng_seed ^ (0x9e3779b97f4a7c15ULL * (count + 1)));
    return index;
  }

  void save(const std::filesystem::path& path) const {
    const std::string bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write index file " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing index file " + path.string());
  }

  static HnswIndex load(const std::filesystem::path& path, int ef_search = HnswParams{}.ef_search) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open index file " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes, ef_search);
  }

 private:
  struct Candidate {
    Scalar distance;
    std::uint64_t id;
    std::uint32_t slot;

    bool operator<(const Candidate& o) const {
      return distance < o.distance || (distance == o.distance && id < o.id);
    }
    bool operator>(const Candidate& o) const { return o < *this; }
  };

  std::uint32_t slot(std::uint64_t id) const {
    const auto it = slot_of_.find(id);
    if (it == slot_of_.end()) throw std::out_of_range("unknown HNSW id " + std::to_string(id));
    return it->second;
  }

  std::uint32_t append_slot(std::uint64_t id, const VectorType& v, int level) {
    const auto s = static_cast<std::uint32_t>(ids_.size());
    if (static_cast<Eigen::Index>(s) >= data_.cols()) {
      data_.conservativeResize(Eigen::NoChange, std::max<Eigen::Index>(16, data_.cols() * 2));
    }
    data_.col(s) = v;
    ids_.push_back(id);
    levels_.push_back(level);
    links_.emplace_back(level + 1);
    slot_of_[id] = s;
    return s;
  }

  Scalar distance(const VectorType& q, std::uint32_t s) const {
    return Scalar(1) - data_.col(s).dot(q);
  }
  Scalar distance(std::uint32_t a, std::uint32_t b) const {
    return Scalar(1) - data_.col(a).dot(data_.col(b));
  }

  Candidate candidate(const VectorType& q, std::uint32_t s) const {
    return {distance(q, s), ids_[s], s};
  }

  std::uint32_t greedy_closest(const VectorType& q, std::uint32_t start, int layer) const {
    Candidate best = candidate(q, start);
    for (bool moved = true; moved;) {
      moved = false;
      for (std::uint32_t n : links_[best.slot][layer]) {
        const Candidate c = candidate(q, n);
        if (c < best) {
          best = c;
          moved = true;
        }
      }
    }
    return best.slot;
  }

  /// ef-bounded best-first search on one layer; ascending results.
  std::vector<Candidate> search_layer(const VectorType& q, std::span<const std::uint32_t> entries,
                                      int ef, int layer) const {
    std::vector<bool> visited(ids_.size(), false);
    std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> frontier;
    std::priority_queue<Candidate> best;  // worst on top
    for (std::uint32_t e : entries) {
      if (visited[e]) continue;
      visited[e] = true;
      const Candidate c = candidate(q, e);
      frontier.push(c);
      best.push(c);
      if (best.size() > static_cast<std::size_t>(ef)) best.pop();
    }
    while (!frontier.empty()) {
      const Candidate current = frontier.top();
      if (best.size() >= static_cast<std::size_t>(ef) && best.top() < current) break;
      frontier.pop();
      for (std::uint32_t n : links_[current.slot][layer]) {
        if (visited[n]) continue;
        visited[n] = true;
        const Candidate c = candidate(q, n);
        if (best.size() < static_cast<std::size_t>(ef) || c < best.top()) {
          frontier.push(c);
          best.push(c);
          if (best.size() > static_cast<std::size_t>(ef)) best.pop();
        }
      }
    }
    std::vector<Candidate> out(best.size());
    for (auto it = out.rbegin(); it != out.rend(); ++it) {
      *it = best.top();
      best.pop();
    }
    return out;
  }

  std::vector<std::uint32_t> prune(std::span<const Candidate> sorted, int cap) const {
    std::vector<std::pair<std::uint32_t, Scalar>> pairs;
    pairs.reserve(sorted.size());
    for (const auto& c : sorted) pairs.emplace_back(c.slot, c.distance);
    return select_neighbors_heuristic<std::uint32_t, Scalar>(
        pairs, cap, [this](std::uint32_t a, std::uint32_t b) { return distance(a, b); });
  }

  /// Adds the edge from <-> to on `layer`, re-pruning `from` if it overflows.
  /// Edges pruned away are removed in both directions.
  void connect(std::uint32_t from, std::uint32_t to, int layer) {
    auto& list = links_[from][layer];
    list.push_back(to);
    const int cap = params_.cap(layer);
    if (static_cast<int>(list.size()) <= cap) return;

    std::vector<Candidate> cands;
    cands.reserve(list.size());
    for (std::uint32_t n : list) cands.push_back({distance(from, n), ids_[n], n});
    std::sort(cands.begin(), cands.end());
    std::vector<std::uint32_t> kept = prune(cands, cap);
    for (const auto& c : cands) {
      if (std::find(kept.begin(), kept.end(), c.slot) != kept.end()) continue;
      auto& back = links_[c.slot][layer];
      back.erase(std::remove(back.begin(), back.end(), from), back.end());
    }
    list = std::move(kept);
  }

  int dim_;
  HnswParams params_;
  std::mt19937_64 rng_;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> data_;  // one column per slot
  std::vector<std::uint64_t> ids_;
  std::vector<int> levels_;
  std::vector<std::vector<std::vector<std::uint32_t>>> links_;  // [slot][layer] -> slots
  std::unordered_map<std::uint64_t, std::uint32_t> slot_of_;
  std::optional<std::uint32_t> entry_;
};

}  // namespace kt
