#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "kt/agents.hpp"
#include "kt/backend.hpp"
#include "kt/embed.hpp"
#include "kt/hnsw.hpp"
#include "kt/ingest.hpp"

namespace kt {

using DocId = std::int64_t;
using SnippetId = std::uint64_t;

struct DocumentRecord {
  DocId doc_id = 0;
  std::string title;
  std::string source_path;
  DocumentFormat format = DocumentFormat::txt;
  bool enabled = true;
  std::string created_at;  // ISO-8601 UTC
  int snippet_count = 0;
  int dropped_by_rule = 0;
  int dropped_by_agent = 0;

  bool operator==(const DocumentRecord&) const = default;
};

struct SnippetRecord {
  SnippetId snippet_id = 0;
  DocId doc_id = 0;
  int seq = 0;
  std::string text;

  bool operator==(const SnippetRecord&) const = default;
};

struct RetrievalHit {
  SnippetId snippet_id = 0;
  std::string text;
  double distance = 0.0;
  DocId doc_id = 0;
  std::string doc_title;
  std::string source_path;

  bool operator==(const RetrievalHit&) const = default;
};

/// Anything that answers R(query, topk) with hits ascending by distance.
class Retriever {
 public:
  virtual ~Retriever() = default;
  virtual std::vector<RetrievalHit> retrieve(const std::string& query, int topk) = 0;
};

class KbError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotFoundError : public KbError {
 public:
  using KbError::KbError;
};

struct KbOptions {
  std::string embedding_model = "bge-m3";
  HnswParams hnsw{};
  std::size_t filter_parallelism = 4;
  int embed_retries = 2;
  double rebuild_tombstone_fraction = 0.2;
};

struct KbCounts {
  std::size_t documents = 0;
  std::size_t enabled_documents = 0;
  std::size_t snippets = 0;
  std::size_t tombstones = 0;
};

/// Document/snippet store plus HNSW index. Writers (ingest, delete, toggle)
/// are serialized; retrieval runs concurrently with other reads and observes
/// each toggle atomically.
class KnowledgeBase final : public Retriever {
 public:
  KnowledgeBase(std::shared_ptr<InferenceBackend> backend,
                std::shared_ptr<const AgentRegistry> agents, KbOptions options = {});

  /// chunk -> rule filter -> optional filter agent -> embed -> index. Nothing
  /// becomes visible unless the whole document succeeds. Throws IngestError.
  DocumentRecord ingest_document(const RawDocument& raw, const ChunkingConfig& cfg,
                                 bool filter_agent_enabled);

  /// Over-fetches 4*topk from the index and drops disabled/deleted documents.
  std::vector<RetrievalHit> retrieve(const std::string& query, int topk) override;

  void set_document_enabled(DocId doc_id, bool enabled);
  /// Tombstones the document's snippets; rebuilds the index once tombstones
  /// exceed the configured fraction of live snippets.
  void delete_document(DocId doc_id);

  std::vector<DocumentRecord> list_documents() const;
  std::optional<DocumentRecord> document(DocId doc_id) const;
  std::vector<SnippetRecord> snippets_of(DocId doc_id) const;
  KbCounts counts() const;
  std::optional<std::int64_t> embedding_dim() const { return latch_.get(); }
  /// Nodes in the HNSW graph, tombstoned ones included.
  std::size_t index_size() const;
  const KbOptions& options() const { return options_; }

  /// Writes manifest.json and index.kthn into `dir`.
  void save(const std::filesystem::path& dir) const;

  /// Reads a directory written by save(). Corruption is a KbError; an
  /// embedding-model mismatch only adds a warning.
  static std::unique_ptr<KnowledgeBase> load(const std::filesystem::path& dir,
                                             std::shared_ptr<InferenceBackend> backend,
                                             std::shared_ptr<const AgentRegistry> agents,
                                             KbOptions options = {},
                                             std::vector<std::string>* warnings = nullptr);

  static constexpr int kManifestVersion = 1;
  static constexpr const char* kManifestFile = "manifest.json";
  static constexpr const char* kIndexFile = "index.kthn";

 private:
  EmbeddingVector embed_with_retry(const std::string& text);
  void rebuild_index_locked();

  std::shared_ptr<InferenceBackend> backend_;
  std::shared_ptr<const AgentRegistry> agents_;
  KbOptions options_;
  DimensionLatch latch_;

  std::mutex write_mutex_;               // serializes writers end to end
  mutable std::shared_mutex state_mutex_;  // guards everything below
  std::optional<HnswIndex<float>> index_;
  std::map<DocId, DocumentRecord> documents_;
  std::map<SnippetId, SnippetRecord> snippets_;
  std::set<SnippetId> tombstones_;
  DocId next_doc_id_ = 1;
  SnippetId next_snippet_id_ = 1;
};

}  // namespace kt
