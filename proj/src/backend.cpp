#include <cctype>
#include <cmath>
#include <string>

#include "kt/backend.hpp"
#include "kt/stub_backend.hpp"
#include "kt/text.hpp"

namespace kt {

std::string_view to_string(AgentRole role) {
  switch (role) {
    case AgentRole::filter:
      return "filter";
    case AgentRole::query_refine:
      return "query_refine";
    case AgentRole::divergent:
      return "divergent";
    case AgentRole::judge:
      return "judge";
    case AgentRole::answer:
      return "answer";
  }
  return "filter";
}

AgentRole parse_agent_role(std::string_view name) {
  for (AgentRole role : kAllAgentRoles) {
    if (to_string(role) == name) return role;
  }
  throw std::invalid_argument("unknown agent role: " + std::string(name));
}

std::string_view to_string(MessageRole role) {
  switch (role) {
    case MessageRole::system:
      return "system";
    case MessageRole::user:
      return "user";
    case MessageRole::assistant:
      return "assistant";
  }
  return "user";
}

MessageRole parse_message_role(std::string_view name) {
  if (name == "system") return MessageRole::system;
  if (name == "user") return MessageRole::user;
  if (name == "assistant") return MessageRole::assistant;
  throw std::invalid_argument("unknown message role: " + std::string(name));
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Lowercased ASCII alphanumeric runs and single CJK code points.
std::vector<std::string> stub_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (std::size_t pos = 0; pos < text.size();) {
    std::size_t len = 0;
    const char32_t cp = utf8::decode(text, pos, len);
    if (cp < 0x80 && std::isalnum(static_cast<int>(cp))) {
      current.push_back(static_cast<char>(std::tolower(static_cast<int>(cp))));
    } else {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
      if (utf8::is_cjk(cp) || (cp >= 0x80 && !utf8::is_whitespace(cp))) {
        words.emplace_back(text.substr(pos, len));
      }
    }
    pos += len;
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::string binding(const CompletionRequest& request, const std::string& key) {
  const auto it = request.bindings.find(key);
  return it == request.bindings.end() ? std::string() : it->second;
}

}  // namespace

std::uint64_t StubBackend::CallCounts::total_completions() const {
  std::uint64_t total = 0;
  for (auto c : completions) total += c;
  return total;
}

StubBackend::StubBackend() : StubBackend(Options{}) {}

StubBackend::StubBackend(Options options) : options_(options) {
  if (options_.dim < 1) throw std::invalid_argument("stub embedding dim must be >= 1");
}

std::string StubBackend::complete(const CompletionRequest& request,
                                  const TokenCallback& on_token) {
  if (unreachable_) throw BackendError("stub backend marked unreachable", true);
  if (!request.role) return {};
  completion_counts_[static_cast<std::size_t>(*request.role)].fetch_add(1);

  const std::string query = binding(request, "query");
  std::string out;
  switch (*request.role) {
    case AgentRole::filter:
      out = binding(request, "snippet").find("med") != std::string::npos ? "Y" : "N";
      break;
    case AgentRole::query_refine:
      out = "REFINED:" + query;
      break;
    case AgentRole::divergent: {
      const std::string m_text = binding(request, "m");
      const int m = m_text.empty() ? 0 : std::stoi(m_text);
      for (int i = 1; i <= m; ++i) {
        if (i > 1) out.push_back('\n');
        out += "DT" + std::to_string(i) + ":" + query;
      }
      break;
    }
    case AgentRole::judge: {
      const std::string snippet = binding(request, "snippet");
      bool shared = false;
      for (const TokenSpan& q : tokenize(query)) {
        const std::string qt = to_lower_ascii(std::string_view(query).substr(q.begin, q.end - q.begin));
        for (const TokenSpan& s : tokenize(snippet)) {
          if (qt == to_lower_ascii(std::string_view(snippet).substr(s.begin, s.end - s.begin))) {
            shared = true;
            break;
          }
        }
        if (shared) break;
      }
      out = shared ? "Y: stub-reason" : "N";
      break;
    }
    case AgentRole::answer:
      out = "ANSWER(" + query + ")[" + binding(request, "snippet_count") + "]";
      break;
  }
  if (on_token) on_token(out);
  return out;
}

std::vector<float> StubBackend::embed(const std::string& /*model*/, const std::string& text) {
  if (unreachable_) throw BackendError("stub backend marked unreachable", true);
  embedding_count_.fetch_add(1);

  std::vector<double> acc(static_cast<std::size_t>(options_.dim), 0.0);
  for (const std::string& word : stub_words(text)) {
    std::uint64_t state = fnv1a(word, options_.seed);
    for (double& v : acc) {
      const double unit = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
      v += 2.0 * unit - 1.0;
    }
  }
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

std::string StubBackend::describe() const { return "stub://" + std::to_string(options_.dim); }

StubBackend::CallCounts StubBackend::counts() const {
  CallCounts c;
  for (std::size_t i = 0; i < c.completions.size(); ++i) c.completions[i] = completion_counts_[i];
  c.embeddings = embedding_count_;
  return c;
}

void StubBackend::reset_counts() {
  for (auto& c : completion_counts_) c = 0;
  embedding_count_ = 0;
}

}  // namespace kt
