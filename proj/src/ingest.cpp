#include "kt/ingest.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace kt {

std::string_view to_string(DocumentFormat format) {
  switch (format) {
    case DocumentFormat::txt:
      return "txt";
    case DocumentFormat::markdown:
      return "markdown";
    case DocumentFormat::external_text:
      return "external_text";
  }
  return "txt";
}

DocumentFormat parse_document_format(std::string_view name) {
  const std::string lower = to_lower_ascii(name);
  if (lower == "txt" || lower == "text") return DocumentFormat::txt;
  if (lower == "markdown" || lower == "md") return DocumentFormat::markdown;
  if (lower == "external_text") return DocumentFormat::external_text;
  throw std::invalid_argument("unknown document format: " + std::string(name));
}

int ChunkingConfig::overlap_tokens() const {
  return static_cast<int>(std::floor(max_tokens * overlap_fraction));
}

int ChunkingConfig::stride() const { return max_tokens - overlap_tokens(); }

void ChunkingConfig::validate() const {
  if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 0.5)) {
    throw std::invalid_argument("overlap_fraction must lie in [0, 0.5)");
  }
  if (min_chars < 0) throw std::invalid_argument("min_chars must be >= 0");
  if (stride() < 1) throw std::invalid_argument("chunk stride must be >= 1");
}

RawDocument make_document(std::string source_id, std::string title, DocumentFormat format,
                          std::string_view body) {
  RawDocument doc;
  doc.source_id = std::move(source_id);
  doc.title = std::move(title);
  doc.format = format;
  doc.byte_size = body.size();
  const std::string clean = sanitize_text(body);
  doc.body = format == DocumentFormat::markdown ? strip_markdown(clean) : clean;
  return doc;
}

std::vector<Chunk> chunk_document(const RawDocument& doc, const ChunkingConfig& cfg) {
  cfg.validate();
  const std::vector<TokenSpan> tokens = tokenize(doc.body);
  const int total = static_cast<int>(tokens.size());
  const int stride = cfg.stride();

  std::vector<Chunk> chunks;
  for (int start = 0; start < total; start += stride) {
    const int end = std::min(start + cfg.max_tokens, total);
    const std::size_t byte_begin = tokens[start].begin;
    const std::size_t byte_end = tokens[end - 1].end;
    chunks.push_back(Chunk{doc.source_id, static_cast<int>(chunks.size()),
                           doc.body.substr(byte_begin, byte_end - byte_begin), end - start,
                           start});
    if (end == total) break;
  }
  return chunks;
}

FilterDecision rule_filter(const Chunk& chunk, const ChunkingConfig& cfg) {
  const std::string_view trimmed = trim(chunk.text);
  if (trimmed.empty()) return FilterDecision::drop;
  if (utf8::count_code_points(trimmed) < static_cast<std::size_t>(cfg.min_chars)) {
    return FilterDecision::drop;
  }
  return FilterDecision::keep;
}

std::string run_extractor(const std::string& command, std::string_view bytes) {
  char input_path[] = "/tmp/kt-extract-XXXXXX";
  const int fd = ::mkstemp(input_path);
  if (fd < 0) throw IngestError("extractor: cannot create temporary input file");
  {
    std::size_t written = 0;
    while (written < bytes.size()) {
      const ssize_t n = ::write(fd, bytes.data() + written, bytes.size() - written);
      if (n <= 0) {
        ::close(fd);
        ::unlink(input_path);
        throw IngestError("extractor: cannot write temporary input file");
      }
      written += static_cast<std::size_t>(n);
    }
    ::close(fd);
  }

  const std::string shell = "(" + command + ") < '" + input_path + "'";
  FILE* pipe = ::popen(shell.c_str(), "r");
  if (pipe == nullptr) {
    ::unlink(input_path);
    throw IngestError("extractor: cannot start '" + command + "'");
  }
  std::string output;
  char buffer[4096];
  std::size_t n = 0;
  while ((n = std::fread(buffer, 1, sizeof(buffer), pipe)) > 0) output.append(buffer, n);
  const int status = ::pclose(pipe);
  ::unlink(input_path);

  if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    const int code = (status != -1 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
    throw IngestError("extractor '" + command + "' failed with exit status " +
                      std::to_string(code));
  }
  return output;
}

RawDocument load_document(const std::filesystem::path& path,
                          const std::optional<std::string>& extractor_command) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open document: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  const std::string bytes = buffer.str();

  const std::string ext = to_lower_ascii(path.extension().string());
  const std::string title = path.stem().string();
  if (ext == ".txt" || ext == ".text") {
    return make_document(path.string(), title, DocumentFormat::txt, bytes);
  }
  if (ext == ".md" || ext == ".markdown") {
    return make_document(path.string(), title, DocumentFormat::markdown, bytes);
  }
  if (!extractor_command) {
    throw IngestError("unsupported document format '" + ext +
                      "' (configure an extractor command for binary formats)");
  }
  RawDocument doc = make_document(path.string(), title, DocumentFormat::external_text,
                                  run_extractor(*extractor_command, bytes));
  doc.byte_size = bytes.size();
  doc.extractor = *extractor_command;
  return doc;
}

}  // namespace kt
