#include "kt/eval.hpp"

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <mutex>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "kt/json_io.hpp"
#include "kt/parallel.hpp"
#include "kt/text.hpp"

namespace kt {

using nlohmann::json;

std::string_view to_string(QuestionType t) {
  switch (t) {
    case QuestionType::A1A2: return "A1A2";
    case QuestionType::A3A4: return "A3A4";
    case QuestionType::X: return "X";
    case QuestionType::CaseStudy: return "CaseStudy";
  }
  return "?";
}

QuestionType parse_question_type(std::string_view name) {
  for (QuestionType t : kAllQuestionTypes) {
    if (to_string(t) == name) return t;
  }
  throw std::invalid_argument("unknown question type: " + std::string(name));
}

// --- dataset -----------------------------------------------------------------

namespace {

McqItem item_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("item must be a JSON object");
  McqItem item;
  j.at("id").get_to(item.id);
  if (item.id.empty()) throw std::invalid_argument("id must not be empty");
  item.qtype = parse_question_type(j.at("qtype").get<std::string>());
  j.at("stem").get_to(item.stem);
  if (trim(item.stem).empty()) throw std::invalid_argument("stem must not be empty");

  const json& options = j.at("options");
  if (!options.is_object() || options.empty()) {
    throw std::invalid_argument("options must be a non-empty object");
  }
  for (const auto& [key, text] : options.items()) {
    if (key.size() != 1 || key[0] < 'A' || key[0] > 'Z') {
      throw std::invalid_argument("option key must be a single capital letter: " + key);
    }
    item.options[key[0]] = text.get<std::string>();
  }

  for (const auto& g : j.at("gold")) {
    const std::string letter = g.get<std::string>();
    if (letter.size() != 1 || !item.options.count(letter[0])) {
      throw std::invalid_argument("gold letter not among options: " + letter);
    }
    item.gold.insert(letter[0]);
  }
  if (item.gold.empty()) throw std::invalid_argument("gold must not be empty");
  item.multi = j.value("multi", item.gold.size() > 1);
  if (!item.multi && item.gold.size() != 1) {
    throw std::invalid_argument("single-answer item must have exactly one gold letter");
  }
  return item;
}

}  // namespace

std::vector<McqItem> load_dataset(std::istream& in, const std::string& source) {
  std::vector<McqItem> items;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      McqItem item = item_from_json(json::parse(line));
      if (!seen.insert(item.id).second) throw std::invalid_argument("duplicate id " + item.id);
      items.push_back(std::move(item));
    } catch (const std::exception& e) {
      throw DatasetError(fmt::format("{}:{}: {}", source, lineno, e.what()));
    }
  }
  return items;
}

std::vector<McqItem> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open dataset " + path.string());
  return load_dataset(in, path.string());
}

// --- prompting / parsing -------------------------------------------------------

std::string build_eval_query(const McqItem& item) { return item.stem; }

std::string build_answer_prompt(const McqItem& item, std::span<const ContextSnippet> snippets,
                                bool allow_reject) {
  std::string out = item.multi
                        ? "Answer the multiple-choice question below. More than one option may be correct.\n\n"
                        : "Answer the multiple-choice question below. Exactly one option is correct.\n\n";
  out += "Question: " + item.stem + "\n\nOptions:\n";
  for (const auto& [letter, text] : item.options) {
    out += fmt::format("{}. {}\n", letter, text);
  }
  if (!snippets.empty()) {
    out += "\nReference passages:\n";
    out += format_context(snippets);
    out += "\n";
  }
  out += "\nReply with the letter(s) of the correct option(s), for example \"B\" or \"ACD\". "
         "End with a line of the form \"Answer: <letters>\".\n";
  if (allow_reject) {
    out += "If you are not confident in any answer, reply with the single token [REJECT] instead of guessing.\n";
  }
  return out;
}

namespace {

bool is_ascii_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

struct Word {
  std::size_t begin;
  std::size_t end;
};

std::vector<Word> ascii_words(std::string_view s) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < s.size()) {
    if (!is_ascii_alpha(s[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && is_ascii_alpha(s[j])) ++j;
    words.push_back({i, j});
    i = j;
  }
  return words;
}

bool letter_word(std::string_view w, const std::set<char>& letters) {
  if (w.empty() || w.size() > letters.size()) return false;
  std::set<char> seen;
  for (char c : w) {
    if (!letters.count(c) || !seen.insert(c).second) return false;
  }
  return true;
}

// Only separators may sit between letter groups of one answer.
bool separator_gap(std::string_view gap) {
  for (char c : gap) {
    if (!(c == ' ' || c == ',' || c == '/' || c == '&' || c == ';' || c == '+' || c == '\t')) {
      return false;
    }
  }
  return true;
}

// Reads letter groups starting at `pos` (after skipping filler such as "is",
// ":" or "**"). Empty when the text there is not a letter answer.
std::set<char> letters_from(std::string_view s, std::size_t pos, const std::set<char>& letters) {
  std::set<char> out;
  auto words = ascii_words(s.substr(pos));
  std::size_t last_end = 0;
  bool started = false;
  for (const auto& w : words) {
    std::string_view word = s.substr(pos + w.begin, w.end - w.begin);
    std::string_view gap = s.substr(pos + last_end, w.begin - last_end);
    if (!started) {
      std::string lower = to_lower_ascii(word);
      bool filler_gap = true;
      for (char c : gap) {
        if (!(c == ' ' || c == ':' || c == '*' || c == '\t' || c == '=' || c == '-' || c == '(')) {
          filler_gap = false;
        }
      }
      // Full-width colon etc. after the keyword.
      if (gap.find("\xEF\xBC\x9A") != std::string_view::npos) filler_gap = true;
      if (!filler_gap) return {};
      if (lower == "is" || lower == "are" || lower == "option" || lower == "options") {
        last_end = w.end;
        continue;
      }
      if (!letter_word(word, letters)) return {};
      started = true;
    } else {
      if (to_lower_ascii(word) == "and" || to_lower_ascii(word) == "or") {
        if (!separator_gap(gap)) break;
        last_end = w.end;
        continue;
      }
      if (!separator_gap(gap) || !letter_word(word, letters)) break;
    }
    out.insert(word.begin(), word.end());
    last_end = w.end;
  }
  return out;
}

std::set<char> explicit_answer_line(std::string_view text, const std::set<char>& letters) {
  static constexpr std::string_view kKeywords[] = {"final answer", "answer", "\xE7\xAD\x94\xE6\xA1\x88"};
  std::set<char> found;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string_view line = text.substr(start, nl - start);
    const std::string lower = to_lower_ascii(line);
    for (std::string_view kw : kKeywords) {
      std::size_t at = lower.rfind(kw);
      if (at == std::string::npos) continue;
      auto picked = letters_from(line, at + kw.size(), letters);
      if (!picked.empty()) {
        found = std::move(picked);
        break;
      }
    }
    start = nl + 1;
  }
  return found;
}

std::set<char> trailing_letter_run(std::string_view text, const std::set<char>& letters) {
  const auto words = ascii_words(text);
  std::size_t i = words.size();
  while (i > 0) {
    --i;
    const auto& w = words[i];
    if (!letter_word(text.substr(w.begin, w.end - w.begin), letters)) continue;
    std::set<char> out;
    std::size_t k = i;
    for (;;) {
      const auto& cur = words[k];
      std::string_view word = text.substr(cur.begin, cur.end - cur.begin);
      out.insert(word.begin(), word.end());
      if (k == 0) break;
      const auto& prev = words[k - 1];
      std::string_view prev_word = text.substr(prev.begin, prev.end - prev.begin);
      if (!separator_gap(text.substr(prev.end, cur.begin - prev.end))) break;
      if (!letter_word(prev_word, letters)) break;
      --k;
    }
    return out;
  }
  return {};
}

}  // namespace

Prediction parse_answer(const std::string& item_id, std::string_view raw,
                        const std::set<char>& option_letters) {
  Prediction p;
  p.item_id = item_id;
  p.raw_response = std::string(raw);
  const std::string visible = strip_reasoning(raw);
  if (to_lower_ascii(visible).find("[reject]") != std::string::npos) {
    p.rejected = true;
    return p;
  }
  p.selected = explicit_answer_line(visible, option_letters);
  if (p.selected.empty()) p.selected = trailing_letter_run(visible, option_letters);
  return p;
}

// --- scoring -------------------------------------------------------------------

double question_f1(const std::set<char>& selected, const std::set<char>& gold) {
  if (selected.empty() || gold.empty()) return 0.0;
  std::size_t tp = 0;
  for (char c : selected) tp += gold.count(c);
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(selected.size());
  const double recall = static_cast<double>(tp) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

EvalReport score(std::span<const McqItem> items, std::span<const Prediction> predictions) {
  std::unordered_map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) {
    if (!by_id.emplace(p.item_id, &p).second) {
      throw std::invalid_argument("duplicate prediction for item '" + p.item_id + "'");
    }
  }
  if (by_id.size() != items.size()) {
    throw std::invalid_argument("prediction count does not match item count");
  }

  EvalReport r;
  r.n = items.size();
  std::map<QuestionType, std::size_t> type_correct;
  for (QuestionType t : kAllQuestionTypes) r.per_type[t] = {};

  std::size_t correct = 0, rejected = 0, tp = 0, fp = 0, fn = 0;
  double f1_sum = 0.0;
  for (const auto& item : items) {
    ItemScore s;
    s.id = item.id;
    s.qtype = item.qtype;
    s.gold = item.gold;
    const auto it = by_id.find(item.id);
    if (it == by_id.end()) throw std::invalid_argument("no prediction for item '" + item.id + "'");
    s.rejected = it->second->rejected;
    if (!s.rejected) s.selected = it->second->selected;
    s.correct = !s.rejected && s.selected == s.gold;
    s.f1 = s.rejected ? 0.0 : question_f1(s.selected, s.gold);

    std::size_t hit = 0;
    for (char c : s.selected) hit += s.gold.count(c);
    tp += hit;
    fp += s.selected.size() - hit;
    fn += s.gold.size() - hit;

    correct += s.correct;
    rejected += s.rejected;
    f1_sum += s.f1;
    r.per_type[item.qtype].n += 1;
    type_correct[item.qtype] += s.correct;
    r.items.push_back(std::move(s));
  }

  if (r.n > 0) {
    const double n = static_cast<double>(r.n);
    r.accuracy = static_cast<double>(correct) / n;
    r.rejection_rate = static_cast<double>(rejected) / n;
    r.wrong_rate = static_cast<double>(r.n - correct - rejected) / n;
    r.macro_f1 = f1_sum / n;
  }
  const std::size_t denom = 2 * tp + fp + fn;
  r.micro_f1 = denom == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(denom);
  for (auto& [t, stats] : r.per_type) {
    if (stats.n > 0) {
      stats.accuracy = static_cast<double>(type_correct[t]) / static_cast<double>(stats.n);
    }
  }
  return r;
}

namespace {
std::string letters(const std::set<char>& s) { return std::string(s.begin(), s.end()); }

std::string csv_field(std::string_view v) {
  if (v.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(v);
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}
}  // namespace

json report_json(const EvalReport& r) {
  json per_type = json::object();
  for (const auto& [t, stats] : r.per_type) {
    per_type[std::string(to_string(t))] = {{"n", stats.n}, {"accuracy", stats.accuracy}};
  }
  return json{{"metric_version", EvalReport::kMetricVersion},
              {"mode", to_string(r.mode)},
              {"model", r.model},
              {"n", r.n},
              {"accuracy", r.accuracy},
              {"per_type", per_type},
              {"rejection_rate", r.rejection_rate},
              {"wrong_rate", r.wrong_rate},
              {"macro_f1", r.macro_f1},
              {"micro_f1", r.micro_f1}};
}

std::string report_csv(const EvalReport& r) {
  std::string out = "id,qtype,gold,selected,rejected,correct,f1\n";
  for (const auto& s : r.items) {
    out += fmt::format("{},{},{},{},{},{},{}\n", csv_field(s.id), to_string(s.qtype), letters(s.gold),
                       letters(s.selected), s.rejected ? 1 : 0, s.correct ? 1 : 0, s.f1);
  }
  return out;
}

// --- running -------------------------------------------------------------------

std::filesystem::path csv_path_for(const std::filesystem::path& report_path) {
  std::filesystem::path p = report_path;
  if (p.extension() == ".json") return p.replace_extension(".csv");
  return std::filesystem::path(p.string() + ".csv");
}

std::filesystem::path cache_path_for(const std::filesystem::path& report_path) {
  return std::filesystem::path(report_path.string() + ".cache.jsonl");
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

EvalReport run_eval(std::span<const McqItem> dataset, const Pipeline& pipeline,
                    Retriever* retriever, const AgentRegistry& agents, const EvalConfig& cfg,
                    const std::filesystem::path& report_path, EvalRunStats* stats) {
  cfg.pipeline.validate();
  if (cfg.pipeline.mode != PipelineMode::baseline && retriever == nullptr) {
    throw std::invalid_argument("retrieval modes need a knowledge base");
  }
  const std::string model = agents.get(AgentRole::answer)->model_name;
  const std::string mode(to_string(cfg.pipeline.mode));
  if (report_path.has_parent_path()) std::filesystem::create_directories(report_path.parent_path());

  // Cached raw responses for this (mode, model). Malformed lines, e.g. a
  // torn final write, are ignored.
  std::unordered_map<std::string, std::string> cached;
  const auto cache_path = cache_path_for(report_path);
  if (cfg.use_cache) {
    std::ifstream in(cache_path);
    std::string line;
    while (std::getline(in, line)) {
      try {
        const json j = json::parse(line);
        if (j.at("mode") == mode && j.at("model") == model) {
          cached[j.at("item_id").get<std::string>()] = j.at("raw_response").get<std::string>();
        }
      } catch (const std::exception&) {
        continue;
      }
    }
  }

  std::vector<std::string> raw(dataset.size());
  std::vector<std::size_t> pending;
  EvalRunStats local;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (auto it = cached.find(dataset[i].id); it != cached.end()) {
      raw[i] = it->second;
      ++local.cached;
    } else {
      pending.push_back(i);
    }
  }

  std::ofstream cache_out;
  if (cfg.use_cache) cache_out.open(cache_path, std::ios::app);
  std::mutex mu;
  parallel_for(pending.size(), cfg.parallelism, [&](std::size_t k) {
    const McqItem& item = dataset[pending[k]];
    PipelineRequest req;
    req.query = build_eval_query(item);
    req.answer_prompt = [&item, &cfg](std::span<const UsedSnippet> used) {
      std::vector<ContextSnippet> ctx;
      for (const auto& u : used) ctx.push_back({u.hit.text, u.hit.doc_title});
      return build_answer_prompt(item, ctx, cfg.allow_reject);
    };
    bool ok = true;
    std::string response;
    try {
      PipelineResult result = pipeline.run(req, retriever, cfg.pipeline);
      response = std::move(result.answer);
      ok = !result.error.has_value();
      if (!ok) spdlog::warn("item {}: {}", item.id, *result.error);
    } catch (const std::exception& e) {
      ok = false;
      spdlog::warn("item {}: {}", item.id, e.what());
    }
    std::lock_guard lock(mu);
    raw[pending[k]] = response;
    if (!ok) {
      ++local.failed;
      return;
    }
    ++local.executed;
    if (cache_out.is_open()) {
      cache_out << json{{"item_id", item.id}, {"mode", mode}, {"model", model}, {"raw_response", response}}.dump()
                << '\n';
      cache_out.flush();
    }
  });

  std::vector<Prediction> predictions;
  predictions.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    std::set<char> option_letters;
    for (const auto& [letter, _] : dataset[i].options) option_letters.insert(letter);
    predictions.push_back(parse_answer(dataset[i].id, raw[i], option_letters));
  }

  EvalReport report = score(dataset, predictions);
  report.mode = cfg.pipeline.mode;
  report.model = model;
  write_file(report_path, report_json(report).dump(2) + "\n");
  write_file(csv_path_for(report_path), report_csv(report));
  if (stats) *stats = local;
  return report;
}

}  // namespace kt
