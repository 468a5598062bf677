#include "kt/addrep.hpp"

#include <algorithm>
#include <exception>
#include <map>
#include <set>
#include <stdexcept>

#include "kt/parallel.hpp"
#include "kt/text.hpp"

namespace kt {

std::string_view to_string(PipelineMode mode) {
  switch (mode) {
    case PipelineMode::baseline: return "baseline";
    case PipelineMode::baseline_rs: return "baseline_rs";
    case PipelineMode::addrep: return "addrep";
  }
  return "?";
}

PipelineMode parse_pipeline_mode(std::string_view name) {
  if (name == "baseline") return PipelineMode::baseline;
  if (name == "baseline_rs" || name == "baseline-rs") return PipelineMode::baseline_rs;
  if (name == "addrep") return PipelineMode::addrep;
  throw std::invalid_argument("unknown pipeline mode: " + std::string(name));
}

void AddRepConfig::validate() const {
  if (topk_per_query < 1) throw std::invalid_argument("topk_per_query must be >= 1");
  if (m < 0) throw std::invalid_argument("m must be >= 0");
  if (!(distance_threshold > 0.0 && distance_threshold <= 2.0)) {
    throw std::invalid_argument("distance_threshold must be in (0, 2]");
  }
}

std::string_view event_type(const TraceEvent& event) {
  struct Name {
    std::string_view operator()(const trace::RefinedQuery&) const { return "refined_query"; }
    std::string_view operator()(const trace::DivergentQuery&) const { return "divergent_query"; }
    std::string_view operator()(const trace::Retrieval&) const { return "retrieval"; }
    std::string_view operator()(const trace::ThresholdDrop&) const { return "threshold_drop"; }
    std::string_view operator()(const trace::Judgement&) const { return "judgement"; }
    std::string_view operator()(const trace::ReasoningDelta&) const { return "reasoning_delta"; }
    std::string_view operator()(const trace::AnswerDelta&) const { return "answer_delta"; }
    std::string_view operator()(const trace::Error&) const { return "error"; }
  };
  return std::visit(Name{}, event);
}

namespace {

bool by_distance_then_id(const UsedSnippet& a, const UsedSnippet& b) {
  if (a.hit.distance != b.hit.distance) return a.hit.distance < b.hit.distance;
  return a.hit.snippet_id < b.hit.snippet_id;
}

std::string provenance_of(const RetrievalHit& hit) {
  if (hit.source_path.empty() || hit.source_path == hit.doc_title) return hit.doc_title;
  return hit.doc_title + " (" + hit.source_path + ")";
}

void check_run(const PipelineRequest& request, const AddRepConfig& cfg, PipelineMode expected) {
  if (cfg.mode != expected) {
    throw std::invalid_argument("pipeline mode is " + std::string(to_string(cfg.mode)) + ", expected " +
                                std::string(to_string(expected)));
  }
  cfg.validate();
  if (trim(request.query).empty()) throw std::invalid_argument("query must not be empty");
}

// Collects events into the result and forwards them to the caller's sink.
std::function<void(TraceEvent)> make_emitter(PipelineResult& result, const TraceSink& sink) {
  return [&result, &sink](TraceEvent ev) {
    result.trace.push_back(ev);
    if (sink) sink(result.trace.back());
  };
}

void fail(PipelineResult& result, const std::function<void(TraceEvent)>& emit, std::string message) {
  result.error = message;
  emit(trace::Error{std::move(message)});
}

}  // namespace

void Pipeline::answer(const PipelineRequest& request, std::vector<UsedSnippet> used,
                      PipelineResult& result, const std::function<void(TraceEvent)>& emit) const {
  std::sort(used.begin(), used.end(), by_distance_then_id);
  std::vector<ContextSnippet> ctx;
  ctx.reserve(used.size());
  for (const auto& u : used) ctx.push_back({u.hit.text, provenance_of(u.hit)});

  std::optional<std::string> prompt;
  if (request.answer_prompt) prompt = request.answer_prompt(used);

  const auto cfg = agents_.get(AgentRole::answer);
  AnswerResult ar = generate_answer(
      backend_, *cfg, request.query, ctx,
      [&](const AnswerEvent& ev) {
        switch (ev.type) {
          case AnswerEvent::Type::reasoning: emit(trace::ReasoningDelta{ev.text}); break;
          case AnswerEvent::Type::answer: emit(trace::AnswerDelta{ev.text}); break;
          case AnswerEvent::Type::error: break;  // recorded below, as the last event
        }
      },
      prompt);

  result.answer = std::move(ar.answer);
  result.reasoning = std::move(ar.reasoning);
  result.used_snippets = std::move(used);
  result.no_context = result.used_snippets.empty();
  if (ar.error) fail(result, emit, *ar.error);
}

PipelineResult Pipeline::run(const PipelineRequest& request, Retriever* retriever,
                             const AddRepConfig& cfg, const TraceSink& sink) const {
  if (cfg.mode == PipelineMode::baseline) return run_baseline(request, cfg, sink);
  if (retriever == nullptr) throw std::invalid_argument("retrieval modes need a retriever");
  if (cfg.mode == PipelineMode::baseline_rs) return run_baseline_rs(request, *retriever, cfg, sink);
  return run_addrep(request, *retriever, cfg, sink);
}

PipelineResult Pipeline::run_baseline(const PipelineRequest& request, const AddRepConfig& cfg,
                                      const TraceSink& sink) const {
  check_run(request, cfg, PipelineMode::baseline);
  PipelineResult result;
  result.mode = PipelineMode::baseline;
  auto emit = make_emitter(result, sink);
  answer(request, {}, result, emit);
  return result;
}

PipelineResult Pipeline::run_baseline_rs(const PipelineRequest& request, Retriever& retriever,
                                         const AddRepConfig& cfg, const TraceSink& sink) const {
  check_run(request, cfg, PipelineMode::baseline_rs);
  PipelineResult result;
  result.mode = PipelineMode::baseline_rs;
  auto emit = make_emitter(result, sink);

  std::vector<RetrievalHit> hits;
  try {
    ++result.retrieval_calls;
    hits = retriever.retrieve(request.query, cfg.topk_per_query);
  } catch (const std::exception& e) {
    fail(result, emit, std::string("retrieval failed: ") + e.what());
    return result;
  }
  emit(trace::Retrieval{request.query, hits});

  std::vector<UsedSnippet> used;
  for (const auto& h : hits) {
    if (h.distance > cfg.distance_threshold) {
      emit(trace::ThresholdDrop{h.snippet_id, h.distance});
    } else {
      used.push_back({h, ""});
    }
  }
  answer(request, std::move(used), result, emit);
  return result;
}

PipelineResult Pipeline::run_addrep(const PipelineRequest& request, Retriever& retriever,
                                    const AddRepConfig& cfg, const TraceSink& sink) const {
  check_run(request, cfg, PipelineMode::addrep);
  PipelineResult result;
  result.mode = PipelineMode::addrep;
  auto emit = make_emitter(result, sink);

  // Snapshot configs so a concurrent PUT does not change agents mid-run.
  const auto refine_cfg = agents_.get(AgentRole::query_refine);
  const auto divergent_cfg = agents_.get(AgentRole::divergent);
  const auto judge_cfg = agents_.get(AgentRole::judge);

  const std::string refined =
      refine_query(backend_, *refine_cfg, request.query, request.history, cfg.history_window);
  emit(trace::RefinedQuery{refined});

  std::vector<RetrievalHit> first;
  try {
    ++result.retrieval_calls;
    first = retriever.retrieve(refined, cfg.topk_per_query);
  } catch (const std::exception& e) {
    fail(result, emit, std::string("retrieval failed: ") + e.what());
    return result;
  }
  emit(trace::Retrieval{refined, first});

  std::vector<std::string> first_texts;
  for (const auto& h : first) first_texts.push_back(h.text);
  const auto dts = cfg.m > 0 ? divergent_queries(backend_, *divergent_cfg, refined, first_texts, cfg.m)
                             : std::vector<std::string>{};
  for (std::size_t i = 0; i < dts.size(); ++i) {
    emit(trace::DivergentQuery{static_cast<int>(i + 1), dts[i]});
  }

  std::vector<std::vector<RetrievalHit>> dt_hits(dts.size());
  std::vector<std::exception_ptr> dt_errors(dts.size());
  parallel_for(dts.size(), cfg.retrieval_parallelism, [&](std::size_t i) {
    try {
      dt_hits[i] = retriever.retrieve(dts[i], cfg.topk_per_query);
    } catch (...) {
      dt_errors[i] = std::current_exception();
    }
  });
  for (std::size_t i = 0; i < dts.size(); ++i) {
    ++result.retrieval_calls;
    if (dt_errors[i]) {
      try {
        std::rethrow_exception(dt_errors[i]);
      } catch (const std::exception& e) {
        fail(result, emit, std::string("retrieval failed: ") + e.what());
      } catch (...) {
        fail(result, emit, "retrieval failed");
      }
      return result;
    }
    emit(trace::Retrieval{dts[i], dt_hits[i]});
  }

  // Union keyed by snippet id; a snippet reached by several queries keeps its
  // smallest distance.
  std::map<SnippetId, RetrievalHit> pool;
  auto add = [&](const std::vector<RetrievalHit>& hits) {
    for (const auto& h : hits) {
      auto [it, inserted] = pool.emplace(h.snippet_id, h);
      if (!inserted && h.distance < it->second.distance) it->second = h;
    }
  };
  add(first);
  for (const auto& hs : dt_hits) add(hs);

  std::vector<RetrievalHit> survivors;
  for (const auto& [id, h] : pool) {
    if (h.distance > cfg.distance_threshold) {
      emit(trace::ThresholdDrop{id, h.distance});
    } else {
      survivors.push_back(h);
    }
  }

  std::vector<Judgement> verdicts(survivors.size());
  parallel_for(survivors.size(), cfg.judge_parallelism, [&](std::size_t i) {
    verdicts[i] = judge_snippet(backend_, *judge_cfg, request.query, survivors[i].text);
  });

  std::vector<UsedSnippet> used;
  for (std::size_t i = 0; i < survivors.size(); ++i) {
    emit(trace::Judgement{survivors[i].snippet_id, verdicts[i].helpful, verdicts[i].reason});
    if (verdicts[i].helpful) used.push_back({survivors[i], verdicts[i].reason});
  }

  answer(request, std::move(used), result, emit);
  return result;
}

std::vector<UsedSnippet> replay_used_snippets(std::span<const TraceEvent> trace,
                                              PipelineMode mode) {
  std::map<SnippetId, RetrievalHit> pool;
  std::set<SnippetId> dropped;
  std::map<SnippetId, const trace::Judgement*> judged;
  for (const auto& ev : trace) {
    if (const auto* r = std::get_if<trace::Retrieval>(&ev)) {
      for (const auto& h : r->hits) {
        auto [it, inserted] = pool.emplace(h.snippet_id, h);
        if (!inserted && h.distance < it->second.distance) it->second = h;
      }
    } else if (const auto* d = std::get_if<trace::ThresholdDrop>(&ev)) {
      dropped.insert(d->snippet_id);
    } else if (const auto* j = std::get_if<trace::Judgement>(&ev)) {
      judged[j->snippet_id] = j;
    }
  }

  std::vector<UsedSnippet> used;
  for (const auto& [id, h] : pool) {
    if (dropped.count(id)) continue;
    std::string reason;
    if (mode == PipelineMode::addrep) {
      auto it = judged.find(id);
      if (it == judged.end() || !it->second->helpful) continue;
      reason = it->second->reason;
    }
    used.push_back({h, std::move(reason)});
  }
  std::sort(used.begin(), used.end(), by_distance_then_id);
  return used;
}

}  // namespace kt
