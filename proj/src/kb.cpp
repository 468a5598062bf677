#include "kt/kb.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <ctime>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "kt/json_io.hpp"
#include "kt/parallel.hpp"

namespace kt {

using nlohmann::json;

namespace {

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_file_atomically(const std::filesystem::path& path, std::string_view bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw KbError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw KbError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

KnowledgeBase::KnowledgeBase(std::shared_ptr<InferenceBackend> backend,
                             std::shared_ptr<const AgentRegistry> agents, KbOptions options)
    : backend_(std::move(backend)), agents_(std::move(agents)), options_(std::move(options)) {
  if (!backend_) throw std::invalid_argument("knowledge base requires a backend");
  if (!agents_) throw std::invalid_argument("knowledge base requires an agent registry");
  options_.hnsw.validate();
}

EmbeddingVector KnowledgeBase::embed_with_retry(const std::string& text) {
  for (int attempt = 0;; ++attempt) {
    try {
      return embed_text(*backend_, options_.embedding_model, text, latch_);
    } catch (const EmbeddingError& e) {
      if (!e.retriable() || attempt >= options_.embed_retries) throw;
      spdlog::warn("embedding attempt {} failed, retrying: {}", attempt + 1, e.what());
      std::this_thread::sleep_for(std::chrono::milliseconds(50 << attempt));
    }
  }
}

DocumentRecord KnowledgeBase::ingest_document(const RawDocument& raw, const ChunkingConfig& cfg,
                                              bool filter_agent_enabled) {
  std::lock_guard writer(write_mutex_);

  const std::vector<Chunk> chunks = chunk_document(raw, cfg);
  std::vector<const Chunk*> survivors;
  int dropped_by_rule = 0;
  for (const Chunk& c : chunks) {
    if (rule_filter(c, cfg) == FilterDecision::keep) {
      survivors.push_back(&c);
    } else {
      ++dropped_by_rule;
    }
  }

  int dropped_by_agent = 0;
  if (filter_agent_enabled && !survivors.empty()) {
    const auto filter_cfg = agents_->get(AgentRole::filter);
    std::vector<FilterDecision> decisions(survivors.size(), FilterDecision::keep);
    parallel_for(survivors.size(), options_.filter_parallelism, [&](std::size_t i) {
      decisions[i] = filter_snippet(*backend_, *filter_cfg, survivors[i]->text).decision;
    });
    std::vector<const Chunk*> kept;
    for (std::size_t i = 0; i < survivors.size(); ++i) {
      if (decisions[i] == FilterDecision::keep) {
        kept.push_back(survivors[i]);
      } else {
        ++dropped_by_agent;
      }
    }
    survivors = std::move(kept);
  }

  std::vector<EmbeddingVector> vectors;
  vectors.reserve(survivors.size());
  try {
    for (const Chunk* c : survivors) vectors.push_back(embed_with_retry(c->text));
  } catch (const EmbeddingError& e) {
    // Callers can still reach the EmbeddingError via std::rethrow_if_nested.
    std::throw_with_nested(IngestError("ingesting '" + raw.source_id + "' failed: " + e.what()));
  }

  std::unique_lock lock(state_mutex_);
  if (index_ && !vectors.empty() && vectors.front().size() != index_->dim()) {
    throw IngestError("ingesting '" + raw.source_id + "' failed: " +
                      DimensionMismatch(index_->dim(), vectors.front().size()).what());
  }
  if (!index_ && !vectors.empty()) {
    index_.emplace(static_cast<int>(vectors.front().size()), options_.hnsw);
  }

  DocumentRecord record;
  record.doc_id = next_doc_id_++;
  record.title = raw.title;
  record.source_path = raw.source_id;
  record.format = raw.format;
  record.enabled = true;
  record.created_at = utc_now();
  record.snippet_count = static_cast<int>(survivors.size());
  record.dropped_by_rule = dropped_by_rule;
  record.dropped_by_agent = dropped_by_agent;

  for (std::size_t i = 0; i < survivors.size(); ++i) {
    const SnippetId id = next_snippet_id_++;
    index_->insert(id, vectors[i]);
    snippets_[id] = SnippetRecord{id, record.doc_id, survivors[i]->seq, survivors[i]->text};
  }
  documents_[record.doc_id] = record;
  return record;
}

std::vector<RetrievalHit> KnowledgeBase::retrieve(const std::string& query, int topk) {
  if (topk < 1) throw std::invalid_argument("topk must be >= 1");
  {
    std::shared_lock lock(state_mutex_);
    if (snippets_.empty()) return {};
  }
  const EmbeddingVector q = embed_with_retry(query);

  std::shared_lock lock(state_mutex_);
  if (!index_ || snippets_.empty()) return {};
  const int fetch = 4 * topk;
  const auto raw = index_->search(q, fetch, std::max(index_->params().ef_search, fetch));
  std::vector<RetrievalHit> hits;
  for (const auto& h : raw) {
    if (tombstones_.contains(h.id)) continue;
    const auto snippet = snippets_.find(h.id);
    if (snippet == snippets_.end()) continue;
    const auto doc = documents_.find(snippet->second.doc_id);
    if (doc == documents_.end() || !doc->second.enabled) continue;
    hits.push_back(RetrievalHit{h.id, snippet->second.text, static_cast<double>(h.distance),
                                doc->second.doc_id, doc->second.title, doc->second.source_path});
    if (static_cast<int>(hits.size()) == topk) break;
  }
  return hits;
}

void KnowledgeBase::set_document_enabled(DocId doc_id, bool enabled) {
  std::lock_guard writer(write_mutex_);
  std::unique_lock lock(state_mutex_);
  const auto it = documents_.find(doc_id);
  if (it == documents_.end()) throw NotFoundError("unknown document id " + std::to_string(doc_id));
  it->second.enabled = enabled;
}

void KnowledgeBase::delete_document(DocId doc_id) {
  std::lock_guard writer(write_mutex_);
  std::unique_lock lock(state_mutex_);
  const auto it = documents_.find(doc_id);
  if (it == documents_.end()) throw NotFoundError("unknown document id " + std::to_string(doc_id));
  documents_.erase(it);
  for (auto s = snippets_.begin(); s != snippets_.end();) {
    if (s->second.doc_id == doc_id) {
      tombstones_.insert(s->first);
      s = snippets_.erase(s);
    } else {
      ++s;
    }
  }
  if (!tombstones_.empty() && static_cast<double>(tombstones_.size()) >
                                  options_.rebuild_tombstone_fraction * snippets_.size()) {
    rebuild_index_locked();
  }
}

void KnowledgeBase::rebuild_index_locked() {
  if (!index_) {
    tombstones_.clear();
    return;
  }
  HnswIndex<float> fresh(index_->dim(), index_->params());
  for (const auto& [id, _] : snippets_) fresh.insert(id, index_->vector(id));
  spdlog::info("rebuilt index: {} live snippets, {} tombstones purged", snippets_.size(),
               tombstones_.size());
  index_.emplace(std::move(fresh));
  tombstones_.clear();
}

std::vector<DocumentRecord> KnowledgeBase::list_documents() const {
  std::shared_lock lock(state_mutex_);
  std::vector<DocumentRecord> out;
  out.reserve(documents_.size());
  for (const auto& [_, d] : documents_) out.push_back(d);
  return out;
}

std::optional<DocumentRecord> KnowledgeBase::document(DocId doc_id) const {
  std::shared_lock lock(state_mutex_);
  const auto it = documents_.find(doc_id);
  if (it == documents_.end()) return std::nullopt;
  return it->second;
}

std::vector<SnippetRecord> KnowledgeBase::snippets_of(DocId doc_id) const {
  std::shared_lock lock(state_mutex_);
  std::vector<SnippetRecord> out;
  for (const auto& [_, s] : snippets_) {
    if (s.doc_id == doc_id) out.push_back(s);
  }
  return out;
}

KbCounts KnowledgeBase::counts() const {
  std::shared_lock lock(state_mutex_);
  KbCounts c;
  c.documents = documents_.size();
  for (const auto& [_, d] : documents_) c.enabled_documents += d.enabled ? 1 : 0;
  c.snippets = snippets_.size();
  c.tombstones = tombstones_.size();
  return c;
}

std::size_t KnowledgeBase::index_size() const {
  std::shared_lock lock(state_mutex_);
  return index_ ? index_->size() : 0;
}

void KnowledgeBase::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::shared_lock lock(state_mutex_);
  json manifest;
  manifest["manifest_version"] = kManifestVersion;
  const auto dim = latch_.get();
  manifest["embedding_dim"] = dim ? json(*dim) : json(nullptr);
  manifest["embedding_model"] = options_.embedding_model;
  manifest["next_doc_id"] = next_doc_id_;
  manifest["next_snippet_id"] = next_snippet_id_;
  manifest["ef_search"] = options_.hnsw.ef_search;
  manifest["documents"] = json::array();
  for (const auto& [_, d] : documents_) manifest["documents"].push_back(d);
  manifest["snippets"] = json::array();
  for (const auto& [_, s] : snippets_) manifest["snippets"].push_back(s);
  manifest["tombstones"] = tombstones_;
  manifest["index_file"] = index_ ? json(kIndexFile) : json(nullptr);

  if (index_) write_file_atomically(dir / kIndexFile, index_->serialize());
  write_file_atomically(dir / kManifestFile, manifest.dump(2));
}

std::unique_ptr<KnowledgeBase> KnowledgeBase::load(const std::filesystem::path& dir,
                                                   std::shared_ptr<InferenceBackend> backend,
                                                   std::shared_ptr<const AgentRegistry> agents,
                                                   KbOptions options,
                                                   std::vector<std::string>* warnings) {
  std::ifstream in(dir / kManifestFile);
  if (!in) throw KbError("cannot open " + (dir / kManifestFile).string());
  std::ostringstream text;
  text << in.rdbuf();

  auto kb = std::make_unique<KnowledgeBase>(std::move(backend), std::move(agents), options);
  try {
    const json manifest = json::parse(text.str());
    if (manifest.at("manifest_version").get<int>() != kManifestVersion) {
      throw KbError("unsupported manifest version");
    }
    const std::string model = manifest.at("embedding_model").get<std::string>();
    if (model != kb->options_.embedding_model) {
      const std::string msg = "knowledge base was embedded with model '" + model +
                              "' but '" + kb->options_.embedding_model + "' is configured";
      spdlog::warn("{}", msg);
      if (warnings) warnings->push_back(msg);
    }
    kb->next_doc_id_ = manifest.at("next_doc_id").get<DocId>();
    kb->next_snippet_id_ = manifest.at("next_snippet_id").get<SnippetId>();
    kb->options_.hnsw.ef_search = manifest.value("ef_search", kb->options_.hnsw.ef_search);
    for (const auto& d : manifest.at("documents")) {
      auto record = d.get<DocumentRecord>();
      kb->documents_[record.doc_id] = std::move(record);
    }
    for (const auto& s : manifest.at("snippets")) {
      auto record = s.get<SnippetRecord>();
      if (!kb->documents_.contains(record.doc_id)) {
        throw KbError("snippet " + std::to_string(record.snippet_id) + " references unknown document");
      }
      kb->snippets_[record.snippet_id] = std::move(record);
    }
    kb->tombstones_ = manifest.at("tombstones").get<std::set<SnippetId>>();

    const json& dim = manifest.at("embedding_dim");
    if (!dim.is_null()) kb->latch_.enforce(dim.get<std::int64_t>());

    const json& index_file = manifest.at("index_file");
    if (!index_file.is_null()) {
      auto index = HnswIndex<float>::load(dir / index_file.get<std::string>(),
                                          kb->options_.hnsw.ef_search);
      if (!dim.is_null() && index.dim() != dim.get<std::int64_t>()) {
        throw KbError("index dimension " + std::to_string(index.dim()) +
                      " does not match manifest dimension " + std::to_string(dim.get<int>()));
      }
      kb->options_.hnsw = index.params();
      kb->index_.emplace(std::move(index));
    }
    for (const auto& [id, _] : kb->snippets_) {
      if (!kb->index_ || !kb->index_->contains(id)) {
        throw KbError("snippet " + std::to_string(id) + " is missing from the index");
      }
    }
  } catch (const json::exception& e) {
    throw KbError(std::string("corrupt manifest: ") + e.what());
  } catch (const HnswFormatError& e) {
    throw KbError(std::string("corrupt index: ") + e.what());
  } catch (const KbError&) {
    throw;
  } catch (const std::exception& e) {
    throw KbError(std::string("cannot load knowledge base: ") + e.what());
  }
  return kb;
}

}  // namespace kt
