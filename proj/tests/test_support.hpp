#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <unistd.h>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kt/backend.hpp"
#include "kt/kb.hpp"

namespace kt::testing {

/// Backend whose replies come from test-supplied callbacks.
class ScriptedBackend final : public InferenceBackend {
 public:
  using CompleteFn = std::function<std::string(const CompletionRequest&, const TokenCallback&)>;
  using EmbedFn = std::function<std::vector<float>(const std::string&)>;

  CompleteFn on_complete = [](const CompletionRequest&, const TokenCallback&) { return std::string(); };
  EmbedFn on_embed = [](const std::string&) { return std::vector<float>{1.0f, 0.0f}; };
  bool up = true;

  std::string complete(const CompletionRequest& request, const TokenCallback& on_token = {}) override {
    {
      std::lock_guard lock(mu_);
      requests_.push_back(request);
    }
    ++completions;
    return on_complete(request, on_token);
  }
  std::vector<float> embed(const std::string&, const std::string& text) override {
    ++embeddings;
    return on_embed(text);
  }
  bool reachable() override { return up; }
  std::string describe() const override { return "scripted"; }

  std::vector<CompletionRequest> requests() const {
    std::lock_guard lock(mu_);
    return requests_;
  }

  std::atomic<int> completions{0};
  std::atomic<int> embeddings{0};

 private:
  mutable std::mutex mu_;
  std::vector<CompletionRequest> requests_;
};

/// Replies with the same text for every completion.
inline ScriptedBackend::CompleteFn reply(std::string text) {
  return [text](const CompletionRequest&, const TokenCallback&) { return text; };
}

/// Replies by throwing a BackendError.
inline ScriptedBackend::CompleteFn fail_with(std::string message, bool retriable = true) {
  return [message, retriable](const CompletionRequest&, const TokenCallback&) -> std::string {
    throw BackendError(message, retriable);
  };
}

/// Retriever answering from a fixed table; counts calls.
class TableRetriever final : public Retriever {
 public:
  std::map<std::string, std::vector<RetrievalHit>> table;
  std::vector<RetrievalHit> fallback;
  std::function<void(const std::string&)> before;  // may throw

  std::vector<RetrievalHit> retrieve(const std::string& query, int topk) override {
    {
      std::lock_guard lock(mu_);
      ++calls_;
      queries_.push_back(query);
    }
    if (before) before(query);
    auto it = table.find(query);
    std::vector<RetrievalHit> hits = it == table.end() ? fallback : it->second;
    if (static_cast<int>(hits.size()) > topk) hits.resize(topk);
    return hits;
  }

  int calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }
  std::vector<std::string> queries() const {
    std::lock_guard lock(mu_);
    return queries_;
  }

 private:
  mutable std::mutex mu_;
  int calls_ = 0;
  std::vector<std::string> queries_;
};

/// Wraps another retriever and counts calls.
class CountingRetriever final : public Retriever {
 public:
  explicit CountingRetriever(Retriever& inner) : inner_(inner) {}
  std::vector<RetrievalHit> retrieve(const std::string& query, int topk) override {
    ++calls;
    return inner_.retrieve(query, topk);
  }
  std::atomic<int> calls{0};

 private:
  Retriever& inner_;
};

inline RetrievalHit hit(SnippetId id, double distance, std::string text = {}) {
  RetrievalHit h;
  h.snippet_id = id;
  h.distance = distance;
  h.text = text.empty() ? "snippet " + std::to_string(id) : std::move(text);
  h.doc_id = 1;
  h.doc_title = "doc";
  h.source_path = "doc.txt";
  return h;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("kt_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Columns are unit vectors drawn from an isotropic Gaussian.
template <typename Scalar = float>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> random_unit_vectors(int n, int dim,
                                                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd m(dim, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < dim; ++i) m(i, j) = gauss(rng);
    m.col(j).normalize();
  }
  return m.cast<Scalar>();
}

/// Exhaustive scan oracle: (id, distance) of the k nearest columns by cosine
/// distance, computed in double, ties by id. Column j has id ids[j].
template <typename DerivedData, typename DerivedQuery>
std::vector<std::pair<std::uint64_t, double>> brute_force_topk(const Eigen::MatrixBase<DerivedData>& data,
                                                               const std::vector<std::uint64_t>& ids,
                                                               const Eigen::MatrixBase<DerivedQuery>& q,
                                                               int k) {
  std::vector<std::pair<std::uint64_t, double>> all;
  const Eigen::VectorXd qd = q.template cast<double>();
  for (Eigen::Index j = 0; j < data.cols(); ++j) {
    const double d = 1.0 - data.col(j).template cast<double>().dot(qd);
    all.emplace_back(ids[static_cast<std::size_t>(j)], std::clamp(d, 0.0, 2.0));
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second < b.second : a.first < b.first;
  });
  if (static_cast<int>(all.size()) > k) all.resize(k);
  return all;
}

struct SseEvent {
  std::string type;
  nlohmann::json data;
};

/// Splits an event-stream body into frames of `event:` and `data:` lines.
inline std::vector<SseEvent> parse_sse(const std::string& body) {
  std::vector<SseEvent> out;
  std::size_t pos = 0;
  while (pos < body.size()) {
    std::size_t end = body.find("\n\n", pos);
    if (end == std::string::npos) end = body.size();
    const std::string frame = body.substr(pos, end - pos);
    pos = end + 2;
    if (frame.empty()) continue;
    SseEvent ev;
    std::istringstream lines(frame);
    std::string line;
    std::string data;
    while (std::getline(lines, line)) {
      if (line.rfind("event: ", 0) == 0) ev.type = line.substr(7);
      else if (line.rfind("data: ", 0) == 0) data += line.substr(6);
    }
    ev.data = nlohmann::json::parse(data);
    out.push_back(std::move(ev));
  }
  return out;
}

}  // namespace kt::testing
