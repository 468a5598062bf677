#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <thread>

#include "kt/kb.hpp"
#include "kt/stub_backend.hpp"
#include "test_support.hpp"

namespace kt {
namespace {

std::string repeat_word(const std::string& word, int n) {
  std::string out;
  for (int i = 0; i < n; ++i) out += (i ? " " : "") + word + std::to_string(i);
  return out;
}

// Window 10, no overlap: one chunk per ten words.
const ChunkingConfig kTenWords{10, 0.0, 10};

struct KbFixture : ::testing::Test {
  std::shared_ptr<StubBackend> backend = std::make_shared<StubBackend>();
  std::shared_ptr<AgentRegistry> agents = std::make_shared<AgentRegistry>();
  KnowledgeBase kb{backend, agents};

  DocumentRecord add(const std::string& title, const std::string& body, bool filter = false,
                     const ChunkingConfig& cfg = kTenWords) {
    return kb.ingest_document(make_document(title + ".txt", title, DocumentFormat::txt, body), cfg, filter);
  }
};

TEST_F(KbFixture, EmptyFileGivesEmptyRecord) {
  const auto rec = add("empty", "");
  EXPECT_EQ(rec.snippet_count, 0);
  EXPECT_EQ(rec.dropped_by_rule, 0);
  EXPECT_EQ(kb.list_documents().size(), 1u);
  EXPECT_TRUE(kb.retrieve("anything", 5).empty());
}

TEST_F(KbFixture, StubFilterAgentDropsChunksWithoutMed) {
  const std::string body =
      repeat_word("medicine", 10) + " " + repeat_word("cooking", 10) + " " + repeat_word("medical", 10);
  const auto rec = add("mixed", body, true);
  EXPECT_EQ(rec.snippet_count, 2);
  EXPECT_EQ(rec.dropped_by_agent, 1);
  EXPECT_EQ(rec.dropped_by_rule, 0);
  const auto snippets = kb.snippets_of(rec.doc_id);
  ASSERT_EQ(snippets.size(), 2u);
  EXPECT_EQ(snippets[0].seq, 0);
  EXPECT_EQ(snippets[1].seq, 2);
}

TEST_F(KbFixture, CountsAreConserved) {
  // 3 chunks; the last is a single short word and fails the rule filter
  const auto rec = add("d", repeat_word("medicine", 20) + " x", true);
  EXPECT_EQ(rec.snippet_count + rec.dropped_by_rule + rec.dropped_by_agent, 3);
  EXPECT_EQ(rec.dropped_by_rule, 1);
}

TEST_F(KbFixture, DuplicateUploadCreatesNewDocument) {
  const auto a = add("same", repeat_word("medicine", 10));
  const auto b = add("same", repeat_word("medicine", 10));
  EXPECT_NE(a.doc_id, b.doc_id);
  EXPECT_EQ(a.source_path, b.source_path);
  EXPECT_EQ(kb.counts().snippets, 2u);
}

TEST_F(KbFixture, IdenticalQueryRanksFirst) {
  add("a", repeat_word("kidney", 10) + " " + repeat_word("liver", 10) + " " + repeat_word("heart", 10));
  const auto target = kb.snippets_of(1).at(1);
  const auto hits = kb.retrieve(target.text, 3);
  ASSERT_FALSE(hits.empty());
  EXPECT_EQ(hits[0].snippet_id, target.snippet_id);
  EXPECT_NEAR(hits[0].distance, 0.0, 1e-5);
  EXPECT_EQ(hits[0].doc_title, "a");
  EXPECT_EQ(hits[0].source_path, "a.txt");
  for (std::size_t i = 1; i < hits.size(); ++i) EXPECT_LE(hits[i - 1].distance, hits[i].distance);
}

TEST_F(KbFixture, TopkTruncatesToLiveSnippets) {
  add("a", repeat_word("kidney", 20));
  EXPECT_EQ(kb.retrieve("kidney0", 5).size(), 2u);
  EXPECT_THROW(kb.retrieve("x", 0), std::invalid_argument);
}

TEST_F(KbFixture, ToggleExcludesAndRestores) {
  const auto a = add("a", repeat_word("kidney", 10));
  const auto b = add("b", repeat_word("liver", 10));
  const auto before = kb.retrieve("kidney3", 5);
  kb.set_document_enabled(a.doc_id, false);
  for (const auto& h : kb.retrieve("kidney3", 5)) EXPECT_NE(h.doc_id, a.doc_id);
  EXPECT_EQ(kb.counts().enabled_documents, 1u);
  kb.set_document_enabled(a.doc_id, true);
  EXPECT_EQ(kb.retrieve("kidney3", 5), before);
  kb.set_document_enabled(b.doc_id, false);
  kb.set_document_enabled(a.doc_id, false);
  EXPECT_TRUE(kb.retrieve("kidney3", 5).empty());
  EXPECT_THROW(kb.set_document_enabled(99, true), NotFoundError);
}

TEST_F(KbFixture, DeleteExcludesAndRebuilds) {
  std::vector<DocId> ids;
  for (int d = 0; d < 10; ++d) ids.push_back(add("d" + std::to_string(d), repeat_word("w" + std::to_string(d) + "x", 10)).doc_id);
  EXPECT_EQ(kb.index_size(), 10u);
  kb.delete_document(ids[0]);
  // 1 tombstone vs 9 live: below the 20% threshold
  EXPECT_EQ(kb.counts().tombstones, 1u);
  EXPECT_EQ(kb.index_size(), 10u);
  for (const auto& h : kb.retrieve("w0x1", 10)) EXPECT_NE(h.doc_id, ids[0]);
  kb.delete_document(ids[1]);
  // 2 vs 8 live: over 20%, rebuilt
  EXPECT_EQ(kb.counts().tombstones, 0u);
  EXPECT_EQ(kb.index_size(), 8u);
  EXPECT_EQ(kb.retrieve("w5x1", 10).size(), 8u);
  kb.delete_document(ids[2]);
  EXPECT_EQ(kb.counts().tombstones, 1u);
  EXPECT_EQ(kb.index_size(), 8u);
  EXPECT_EQ(kb.retrieve("w5x1", 10).size(), 7u);
  EXPECT_FALSE(kb.document(ids[2]));
  EXPECT_THROW(kb.delete_document(ids[2]), NotFoundError);
}

TEST_F(KbFixture, SaveLoadRoundTrip) {
  testing::TempDir dir;
  add("a", repeat_word("kidney", 30));
  const auto b = add("b", repeat_word("liver", 30));
  add("c", repeat_word("heart", 30));
  kb.set_document_enabled(b.doc_id, false);
  kb.delete_document(1);
  kb.save(dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir / KnowledgeBase::kManifestFile));
  EXPECT_TRUE(std::filesystem::exists(dir / KnowledgeBase::kIndexFile));

  std::vector<std::string> warnings;
  auto back = KnowledgeBase::load(dir.path(), backend, agents, {}, &warnings);
  EXPECT_TRUE(warnings.empty());
  EXPECT_EQ(back->list_documents(), kb.list_documents());
  EXPECT_EQ(back->counts().tombstones, kb.counts().tombstones);
  EXPECT_EQ(back->embedding_dim(), kb.embedding_dim());
  for (const std::string q : {"kidney1", "liver4 heart2", "heart9", "nothing"}) {
    EXPECT_EQ(back->retrieve(q, 4), kb.retrieve(q, 4)) << q;
  }
  // ids keep increasing after reload
  const auto d = back->ingest_document(make_document("d", "d", DocumentFormat::txt, repeat_word("lung", 10)),
                                       kTenWords, false);
  EXPECT_EQ(d.doc_id, 4);
}

TEST_F(KbFixture, ModelMismatchWarnsOnly) {
  testing::TempDir dir;
  add("a", repeat_word("kidney", 10));
  kb.save(dir.path());
  KbOptions other;
  other.embedding_model = "other-model";
  std::vector<std::string> warnings;
  auto back = KnowledgeBase::load(dir.path(), backend, agents, other, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("other-model"), std::string::npos);
  EXPECT_EQ(back->counts().snippets, 1u);
}

TEST_F(KbFixture, CorruptFilesAreRejected) {
  testing::TempDir dir;
  add("a", repeat_word("kidney", 30));
  kb.save(dir.path());
  {
    std::fstream f(dir / KnowledgeBase::kIndexFile, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  EXPECT_THROW(KnowledgeBase::load(dir.path(), backend, agents), KbError);
  std::ofstream(dir / KnowledgeBase::kManifestFile) << "{not json";
  EXPECT_THROW(KnowledgeBase::load(dir.path(), backend, agents), KbError);
  EXPECT_THROW(KnowledgeBase::load(dir / "missing", backend, agents), KbError);
}

TEST_F(KbFixture, EmptyKbSavesAndLoads) {
  testing::TempDir dir;
  kb.save(dir.path());
  auto back = KnowledgeBase::load(dir.path(), backend, agents);
  EXPECT_EQ(back->counts().documents, 0u);
  EXPECT_TRUE(back->retrieve("x", 3).empty());
}

TEST(KnowledgeBase, FailedIngestLeavesNothingBehind) {
  auto backend = std::make_shared<testing::ScriptedBackend>();
  backend->on_embed = [](const std::string& text) -> std::vector<float> {
    if (text.find("poison") != std::string::npos) throw BackendError("embedding failed", false);
    return {1.0f, static_cast<float>(text.size() % 7)};
  };
  KnowledgeBase kb(backend, std::make_shared<AgentRegistry>());
  kb.ingest_document(make_document("ok", "ok", DocumentFormat::txt, repeat_word("good", 10)), kTenWords, false);
  const auto before_docs = kb.list_documents();
  const auto before_hits = kb.retrieve("good1", 5);
  const std::string body = repeat_word("fine", 10) + " " + repeat_word("poison", 10);
  try {
    kb.ingest_document(make_document("bad", "bad", DocumentFormat::txt, body), kTenWords, false);
    FAIL();
  } catch (const IngestError& e) {
    bool nested_embedding_error = false;
    try {
      std::rethrow_if_nested(e);
    } catch (const EmbeddingError&) {
      nested_embedding_error = true;
    }
    EXPECT_TRUE(nested_embedding_error);
  }
  EXPECT_EQ(kb.list_documents(), before_docs);
  EXPECT_EQ(kb.retrieve("good1", 5), before_hits);
  EXPECT_EQ(kb.index_size(), 1u);
}

TEST(KnowledgeBase, DimensionChangeIsAnIngestError) {
  auto backend = std::make_shared<testing::ScriptedBackend>();
  KnowledgeBase kb(backend, std::make_shared<AgentRegistry>());
  kb.ingest_document(make_document("a", "a", DocumentFormat::txt, repeat_word("alpha", 10)), kTenWords, false);
  backend->on_embed = [](const std::string&) { return std::vector<float>{1.0f, 0.0f, 0.0f}; };
  EXPECT_THROW(
      kb.ingest_document(make_document("b", "b", DocumentFormat::txt, repeat_word("beta", 10)), kTenWords, false),
      IngestError);
  EXPECT_EQ(kb.counts().documents, 1u);
}

TEST(KnowledgeBase, RetrySucceedsAfterTransientFailure) {
  auto backend = std::make_shared<testing::ScriptedBackend>();
  std::atomic<int> calls{0};
  backend->on_embed = [&](const std::string&) -> std::vector<float> {
    if (calls++ == 0) throw BackendError("blip", true);
    return {0.0f, 1.0f};
  };
  KnowledgeBase kb(backend, std::make_shared<AgentRegistry>());
  const auto rec =
      kb.ingest_document(make_document("a", "a", DocumentFormat::txt, repeat_word("alpha", 10)), kTenWords, false);
  EXPECT_EQ(rec.snippet_count, 1);
  EXPECT_EQ(calls.load(), 2);
}

TEST_F(KbFixture, ToggleIsAtomicForConcurrentRetrieve) {
  const auto a = add("a", repeat_word("kidney", 40));
  add("b", repeat_word("kidney", 40).substr(7) + " renal1 renal2");
  const std::string q = "kidney5 kidney12";
  const auto on = kb.retrieve(q, 6);
  kb.set_document_enabled(a.doc_id, false);
  const auto off = kb.retrieve(q, 6);
  kb.set_document_enabled(a.doc_id, true);
  ASSERT_NE(on, off);

  std::atomic<bool> stop{false};
  std::thread toggler([&] {
    bool enabled = true;
    while (!stop) kb.set_document_enabled(a.doc_id, enabled = !enabled);
  });
  int mixed = 0;
  for (int i = 0; i < 400; ++i) {
    const auto got = kb.retrieve(q, 6);
    if (got != on && got != off) ++mixed;
  }
  stop = true;
  toggler.join();
  EXPECT_EQ(mixed, 0);
}

TEST_F(KbFixture, ConcurrentIngestAndRetrieve) {
  std::vector<std::thread> writers;
  for (int t = 0; t < 3; ++t) {
    writers.emplace_back([&, t] {
      for (int i = 0; i < 5; ++i) add("t" + std::to_string(t) + "_" + std::to_string(i), repeat_word("topic" + std::to_string(t), 20));
    });
  }
  std::atomic<bool> stop{false};
  std::thread reader([&] {
    while (!stop) {
      for (const auto& h : kb.retrieve("topic1x", 5)) EXPECT_TRUE(kb.document(h.doc_id));
    }
  });
  for (auto& w : writers) w.join();
  stop = true;
  reader.join();
  EXPECT_EQ(kb.counts().documents, 15u);
  EXPECT_EQ(kb.counts().snippets, 30u);
  std::set<SnippetId> ids;
  for (const auto& d : kb.list_documents()) {
    for (const auto& s : kb.snippets_of(d.doc_id)) ids.insert(s.snippet_id);
  }
  EXPECT_EQ(ids.size(), 30u);
}

}  // namespace
}  // namespace kt
