#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kt/text.hpp"

namespace kt {

enum class DocumentFormat { txt, markdown, external_text };

std::string_view to_string(DocumentFormat format);
DocumentFormat parse_document_format(std::string_view name);

struct RawDocument {
  std::string source_id;
  std::string title;
  DocumentFormat format = DocumentFormat::txt;
  std::string body;
  std::size_t byte_size = 0;
  /// Extractor command that produced `body` when format is external_text.
  std::string extractor;
};

struct ChunkingConfig {
  int max_tokens = 512;
  double overlap_fraction = 0.25;
  int min_chars = 10;

  int overlap_tokens() const;
  int stride() const;
  /// Throws std::invalid_argument when the window cannot advance.
  void validate() const;
};

struct Chunk {
  std::string doc_source_id;
  int seq = 0;
  std::string text;
  int token_count = 0;
  /// Index of the first token of this chunk within the document.
  int first_token = 0;

  bool operator==(const Chunk&) const = default;
};

enum class FilterDecision { keep, drop };

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reduces Markdown to plain text: drops heading, list, quote and fence
/// markers and emphasis, keeps link and image text.
std::string strip_markdown(std::string_view markdown);

/// Builds a RawDocument from in-memory text. Markdown bodies are stripped of
/// markup; every body is sanitized.
RawDocument make_document(std::string source_id, std::string title, DocumentFormat format,
                          std::string_view body);

std::vector<Chunk> chunk_document(const RawDocument& doc, const ChunkingConfig& cfg);

FilterDecision rule_filter(const Chunk& chunk, const ChunkingConfig& cfg);

/// Runs `command` through the shell with `bytes` on standard input and returns
/// its standard output. A nonzero exit status is an IngestError.
std::string run_extractor(const std::string& command, std::string_view bytes);

/// Loads .txt and .md/.markdown natively; anything else requires an extractor.
RawDocument load_document(const std::filesystem::path& path,
                          const std::optional<std::string>& extractor_command = std::nullopt);

}  // namespace kt
