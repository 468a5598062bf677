#pragma once

#include <array>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kt/addrep.hpp"

namespace kt {

enum class QuestionType { A1A2, A3A4, X, CaseStudy };
inline constexpr std::array<QuestionType, 4> kAllQuestionTypes = {
    QuestionType::A1A2, QuestionType::A3A4, QuestionType::X, QuestionType::CaseStudy};

std::string_view to_string(QuestionType t);
QuestionType parse_question_type(std::string_view name);

struct McqItem {
  std::string id;
  QuestionType qtype = QuestionType::A1A2;
  std::string stem;
  std::map<char, std::string> options;  // letter -> text, ordered
  std::set<char> gold;
  bool multi = false;
};

struct Prediction {
  std::string item_id;
  std::set<char> selected;
  bool rejected = false;
  std::string raw_response;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// JSON lines; blank lines are skipped. Errors name `source:line`.
std::vector<McqItem> load_dataset(std::istream& in, const std::string& source = "<stream>");
std::vector<McqItem> load_dataset(const std::filesystem::path& path);

/// The retrieval query for an item: its stem, options excluded.
std::string build_eval_query(const McqItem& item);

std::string build_answer_prompt(const McqItem& item, std::span<const ContextSnippet> snippets,
                                bool allow_reject);

/// "[REJECT]" anywhere (any case) rejects. Otherwise an explicit answer line
/// ("answer: B", "the answer is A, C") wins; failing that, the last run of
/// tokens made only of option letters. Nothing found -> empty selection.
Prediction parse_answer(const std::string& item_id, std::string_view raw,
                        const std::set<char>& option_letters = {'A', 'B', 'C', 'D', 'E'});

/// 0 for rejected or empty selections.
double question_f1(const std::set<char>& selected, const std::set<char>& gold);

struct TypeStats {
  std::size_t n = 0;
  double accuracy = 0.0;  // 0 when n == 0
};

struct ItemScore {
  std::string id;
  QuestionType qtype = QuestionType::A1A2;
  std::set<char> gold;
  std::set<char> selected;
  bool rejected = false;
  bool correct = false;
  double f1 = 0.0;
};

struct EvalReport {
  static constexpr int kMetricVersion = 1;

  PipelineMode mode = PipelineMode::addrep;
  std::string model;
  std::size_t n = 0;
  double accuracy = 0.0;
  double rejection_rate = 0.0;
  double wrong_rate = 0.0;
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  std::map<QuestionType, TypeStats> per_type;
  std::vector<ItemScore> items;  // dataset order
};

/// Predictions are matched by item id, one per item; any mismatch throws
/// std::invalid_argument.
EvalReport score(std::span<const McqItem> items, std::span<const Prediction> predictions);

nlohmann::json report_json(const EvalReport& report);
std::string report_csv(const EvalReport& report);

struct EvalConfig {
  AddRepConfig pipeline{};
  bool allow_reject = true;
  std::size_t parallelism = 1;
  bool use_cache = true;
};

struct EvalRunStats {
  std::size_t cached = 0;
  std::size_t executed = 0;
  std::size_t failed = 0;  // pipeline errors; not cached
};

/// report_path.json-style sibling for the CSV: "x.json" -> "x.csv", else "x.csv" appended.
std::filesystem::path csv_path_for(const std::filesystem::path& report_path);
std::filesystem::path cache_path_for(const std::filesystem::path& report_path);

/// Runs every item through the pipeline in cfg.pipeline.mode, scores, and
/// writes the JSON report plus CSV. Raw responses are cached per
/// (item_id, mode, model) next to the report so an interrupted run resumes.
EvalReport run_eval(std::span<const McqItem> dataset, const Pipeline& pipeline,
                    Retriever* retriever, const AgentRegistry& agents, const EvalConfig& cfg,
                    const std::filesystem::path& report_path, EvalRunStats* stats = nullptr);

}  // namespace kt
