#include "prisp/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace prisp {

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::kClassification: return "classification";
    case TaskKind::kOrdinal: return "ordinal";
    case TaskKind::kGeneration: return "generation";
  }
  throw ConfigError("unknown task kind value");
}

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "classification") return TaskKind::kClassification;
  if (name == "ordinal") return TaskKind::kOrdinal;
  if (name == "generation") return TaskKind::kGeneration;
  throw ConfigError("unknown task kind '" + name +
                    "' (expected classification|ordinal|generation)");
}

ClassifyScore classify_score(const std::vector<std::string>& preds,
                             const std::vector<std::string>& golds,
                             const std::vector<std::string>& label_space) {
  if (preds.size() != golds.size()) {
    throw ConfigError("classify_score: " + std::to_string(preds.size()) +
                      " predictions vs " + std::to_string(golds.size()) +
                      " golds");
  }
  if (preds.empty()) throw ConfigError("classify_score: empty inputs");
  if (label_space.empty()) throw ConfigError("classify_score: empty label space");

  std::map<std::string, int> label_idx;
  for (size_t i = 0; i < label_space.size(); ++i) {
    label_idx[label_space[i]] = int(i);
  }

  const size_t k = label_space.size();
  std::vector<long> tp(k, 0), fp(k, 0), fn(k, 0);
  long hits = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    auto g = label_idx.find(golds[i]);
    if (g == label_idx.end()) {
      throw ConfigError("classify_score: gold label '" + golds[i] +
                        "' outside the label space");
    }
    auto p = label_idx.find(preds[i]);
    if (p != label_idx.end() && p->second == g->second) {
      ++hits;
      ++tp[size_t(g->second)];
    } else {
      ++fn[size_t(g->second)];
      if (p != label_idx.end()) ++fp[size_t(p->second)];
    }
  }

  double f1_sum = 0.0;
  for (size_t c = 0; c < k; ++c) {
    double denom = double(2 * tp[c] + fp[c] + fn[c]);
    f1_sum += denom > 0.0 ? 2.0 * double(tp[c]) / denom : 0.0;
  }
  return {double(hits) / double(preds.size()), f1_sum / double(k)};
}

int parse_rating(const std::string& text) {
  size_t i = 0;
  while (i < text.size() && !std::isdigit(static_cast<unsigned char>(text[i])))
    ++i;
  if (i == text.size()) return 3;
  long v = 0;
  while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) {
    v = std::min<long>(v * 10 + (text[i] - '0'), 99);
    ++i;
  }
  return int(std::clamp<long>(v, 1, 5));
}

OrdinalScore ordinal_score(const std::vector<std::string>& preds,
                           const std::vector<std::string>& golds) {
  if (preds.size() != golds.size()) {
    throw ConfigError("ordinal_score: " + std::to_string(preds.size()) +
                      " predictions vs " + std::to_string(golds.size()) +
                      " golds");
  }
  if (preds.empty()) throw ConfigError("ordinal_score: empty inputs");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    double d = double(parse_rating(preds[i]) - parse_rating(golds[i]));
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  double n = double(preds.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

namespace {

std::vector<std::string> rouge_tokens(const std::string& text) {
  std::string lowered = text;
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  std::istringstream in(lowered);
  std::vector<std::string> toks;
  std::string t;
  while (in >> t) toks.push_back(t);
  return toks;
}

double f1(double overlap, double n_cand, double n_ref) {
  if (overlap <= 0.0) return 0.0;
  double p = overlap / n_cand;
  double r = overlap / n_ref;
  return 2.0 * p * r / (p + r);
}

}  // namespace

RougeScore rouge(const std::string& candidate, const std::string& reference) {
  std::vector<std::string> c = rouge_tokens(candidate);
  std::vector<std::string> r = rouge_tokens(reference);
  if (c.empty() && r.empty()) return {1.0, 1.0};
  if (c.empty() || r.empty()) return {0.0, 0.0};

  std::map<std::string, long> ref_counts;
  for (const std::string& t : r) ++ref_counts[t];
  double overlap = 0.0;
  for (const std::string& t : c) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      overlap += 1.0;
    }
  }

  // LCS over token sequences, one rolling row.
  std::vector<long> prev(r.size() + 1, 0), cur(r.size() + 1, 0);
  for (size_t i = 1; i <= c.size(); ++i) {
    for (size_t j = 1; j <= r.size(); ++j) {
      cur[j] = c[i - 1] == r[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  double lcs = double(prev[r.size()]);

  double nc = double(c.size()), nr = double(r.size());
  return {f1(overlap, nc, nr), f1(lcs, nc, nr)};
}

double aggregate_task(TaskKind kind, double m1, double m2) {
  switch (kind) {
    case TaskKind::kClassification:
    case TaskKind::kGeneration:
      if (m1 < 0.0 || m1 > 1.0 || m2 < 0.0 || m2 > 1.0) {
        throw ConfigError(std::string("aggregate_task: ") +
                          task_kind_name(kind) +
                          " metrics must lie in [0, 1]");
      }
      return 0.5 * (m1 + m2);
    case TaskKind::kOrdinal:
      if (m1 < 0.0 || m2 < 0.0) {
        throw ConfigError("aggregate_task: ordinal errors must be >= 0");
      }
      return 1.0 - 0.5 * (m1 + m2);
  }
  throw ConfigError("unknown task kind value");
}

double overall_average(const std::vector<double>& task_scores) {
  if (task_scores.empty()) {
    throw ConfigError("overall_average: no task scores");
  }
  double sum = 0.0;
  for (double s : task_scores) sum += s;
  return sum / double(task_scores.size());
}

double adaptability(double perf_src_on_target, double perf_tgt_on_target) {
  if (!(perf_tgt_on_target > 0.0)) {
    throw ConfigError("adaptability: reference performance must be positive, got " +
                      std::to_string(perf_tgt_on_target));
  }
  return perf_src_on_target / perf_tgt_on_target;
}

std::vector<CostRow> cost_report(std::vector<CostRow> rows) {
  if (rows.empty()) throw ConfigError("cost_report: no rows");
  double max_mem = 0.0, max_time = 0.0;
  for (const CostRow& r : rows) {
    max_mem = std::max(max_mem, double(r.trainable_params + r.optimizer_state));
    max_time = std::max(max_time, r.train_seconds);
  }
  for (CostRow& r : rows) {
    double mem = max_mem > 0.0
                     ? double(r.trainable_params + r.optimizer_state) / max_mem
                     : 0.0;
    double time = max_time > 0.0 ? r.train_seconds / max_time : 0.0;
    r.composite = 0.5 * (mem + time);
  }
  return rows;
}

TaskMetrics score_task(const std::string& task_id, TaskKind kind,
                       const std::vector<std::string>& preds,
                       const std::vector<std::string>& golds,
                       const std::vector<std::string>& label_space) {
  TaskMetrics out;
  out.task_id = task_id;
  out.kind = kind;
  switch (kind) {
    case TaskKind::kClassification: {
      ClassifyScore s = classify_score(preds, golds, label_space);
      out.m1 = s.accuracy;
      out.m2 = s.macro_f1;
      break;
    }
    case TaskKind::kOrdinal: {
      OrdinalScore s = ordinal_score(preds, golds);
      out.m1 = s.mae;
      out.m2 = s.rmse;
      break;
    }
    case TaskKind::kGeneration: {
      if (preds.size() != golds.size() || preds.empty()) {
        throw ConfigError("score_task: prediction/gold size mismatch");
      }
      double r1 = 0.0, rl = 0.0;
      for (size_t i = 0; i < preds.size(); ++i) {
        RougeScore s = rouge(preds[i], golds[i]);
        r1 += s.r1_f;
        rl += s.rl_f;
      }
      out.m1 = r1 / double(preds.size());
      out.m2 = rl / double(preds.size());
      break;
    }
  }
  out.aggregate = aggregate_task(kind, out.m1, out.m2);
  return out;
}

MetricReport build_report(std::vector<TaskMetrics> tasks,
                          std::vector<CostRow> costs) {
  MetricReport rep;
  rep.tasks = std::move(tasks);
  std::vector<double> scores;
  scores.reserve(rep.tasks.size());
  for (const TaskMetrics& t : rep.tasks) scores.push_back(t.aggregate);
  rep.overall = overall_average(scores);
  rep.costs = costs.empty() ? costs : cost_report(std::move(costs));
  return rep;
}

}  // namespace prisp
