#pragma once

#include "prisp/matrix.hpp"

#include <map>
#include <string>
#include <vector>

namespace prisp {

// The three benchmark families and their scoring conventions.
enum class TaskKind { kClassification, kOrdinal, kGeneration };

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

struct ClassifyScore {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

// Accuracy plus macro-F1 over the full label space. Every label in the space
// contributes to the macro mean; a label no one predicted and no one holds
// scores F1 = 0. Predictions outside the space count as plain misses: wrong
// for accuracy, a false negative for the gold label, a false positive for
// nothing.
ClassifyScore classify_score(const std::vector<std::string>& preds,
                             const std::vector<std::string>& golds,
                             const std::vector<std::string>& label_space);

struct OrdinalScore {
  double mae = 0.0;
  double rmse = 0.0;
};

// First run of digits in the text, clamped to the 1..5 scale; text with no
// digits lands on the scale midpoint 3.
int parse_rating(const std::string& text);

OrdinalScore ordinal_score(const std::vector<std::string>& preds,
                           const std::vector<std::string>& golds);

struct RougeScore {
  double r1_f = 0.0;
  double rl_f = 0.0;
};

// Unigram-overlap F1 (clipped counts) and LCS F1 over lowercased
// whitespace tokens. Two empty texts score 1; one empty text scores 0.
RougeScore rouge(const std::string& candidate, const std::string& reference);

// Task-level aggregate: mean of the pair for classification/generation,
// 1 - mean for the ordinal error pair. Can go negative for bad ordinal
// models; reported unclipped.
double aggregate_task(TaskKind kind, double m1, double m2);

// Arithmetic mean of task aggregates.
double overall_average(const std::vector<double>& task_scores);

// perf(source-adapted on target) / perf(target-adapted on target).
double adaptability(double perf_src_on_target, double perf_tgt_on_target);

// One method's resource row: parameter/optimizer-state counts stand in for
// memory, wall-clock for time.
struct CostRow {
  std::string name;
  long trainable_params = 0;
  long optimizer_state = 0;  // moment entries (2 per trainable under AdamW)
  double train_seconds = 0.0;
  double composite = 0.0;  // filled by cost_report
};

// Max-normalizes memory (params + optimizer state) and time across rows and
// averages the two with equal weight, so the costliest method on both axes
// lands exactly at 1.
std::vector<CostRow> cost_report(std::vector<CostRow> rows);

// One task's scores inside a run report.
struct TaskMetrics {
  std::string task_id;
  TaskKind kind = TaskKind::kClassification;
  double m1 = 0.0;  // accuracy | MAE | ROUGE-1
  double m2 = 0.0;  // macro-F1 | RMSE | ROUGE-L
  double aggregate = 0.0;
};

struct MetricReport {
  std::vector<TaskMetrics> tasks;
  double overall = 0.0;
  std::vector<CostRow> costs;
};

TaskMetrics score_task(const std::string& task_id, TaskKind kind,
                       const std::vector<std::string>& preds,
                       const std::vector<std::string>& golds,
                       const std::vector<std::string>& label_space);

MetricReport build_report(std::vector<TaskMetrics> tasks,
                          std::vector<CostRow> costs);

}  // namespace prisp
