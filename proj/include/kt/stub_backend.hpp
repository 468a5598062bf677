#pragma once

#include <array>
#include <atomic>
#include <cstdint>

#include "kt/backend.hpp"

namespace kt {

/// Deterministic in-process backend for tests and offline runs.
///
/// Completions depend only on the request's role and bindings:
///   filter       "Y" iff the snippet contains "med", else "N"
///   query_refine "REFINED:" + query
///   divergent    m lines "DT<i>:" + query
///   judge        "Y: stub-reason" iff snippet and query share a token, else "N"
///   answer       "ANSWER(" + query + ")[" + snippet_count + "]"
///
/// Embeddings are a sum of seeded per-word hash vectors, so texts sharing words
/// land close together and identical texts embed identically.
class StubBackend final : public InferenceBackend {
 public:
  struct Options {
    int dim = 64;
    std::uint64_t seed = 0x6b74'5354'5542ULL;
  };

  struct CallCounts {
    std::array<std::uint64_t, 5> completions{};  // indexed by AgentRole
    std::uint64_t embeddings = 0;

    std::uint64_t total_completions() const;
  };

  StubBackend();
  explicit StubBackend(Options options);

  std::string complete(const CompletionRequest& request,
                       const TokenCallback& on_token = {}) override;
  std::vector<float> embed(const std::string& model, const std::string& text) override;
  bool reachable() override { return !unreachable_; }
  std::string describe() const override;

  /// Makes every subsequent call fail with a retriable BackendError.
  void set_unreachable(bool unreachable) { unreachable_ = unreachable; }

  CallCounts counts() const;
  void reset_counts();

  int dim() const { return options_.dim; }

 private:
  Options options_;
  std::atomic<bool> unreachable_{false};
  std::array<std::atomic<std::uint64_t>, 5> completion_counts_{};
  std::atomic<std::uint64_t> embedding_count_{0};
};

}  // namespace kt
