#pragma once

#include "prisp/backbone.hpp"
#include "prisp/hypernet.hpp"
#include "prisp/metrics.hpp"
#include "prisp/personalize.hpp"
#include "prisp/synthbench.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace prisp::lab {

// Experiment harness: glue between the benchmark, the adapter machinery and
// the metrics. Everything here is pure compute — commands own all file IO.

// Runs fn(0..n-1) across up to `jobs` threads. Callers write only their own
// result slot, so outputs stay deterministic regardless of schedule; the
// first exception thrown by any job is re-thrown after all of them finish.
void parallel_for(int jobs, int n, const std::function<void(int)>& fn);

// How the evaluated model is assembled for one run.
enum class RunMode {
  kBase,          // bare backbone, no adapters
  kAnchorOnly,    // task anchor attached, no user training
  kPersonalized,  // anchor + per-user training under `variant`
};

struct Method {
  RunMode mode = RunMode::kPersonalized;
  Variant variant = Variant::kBridged;
};

// "base" and "anchor" name the untrained modes; "ours" is the bridged
// variant and "oppu" the fresh per-user baseline; the remaining adapter
// variant names (full, nobridge, bridgeonly) pass through.
Method method_from_name(const std::string& name);
std::string method_name(const Method& m);

struct RunOptions {
  Method method;
  int shots = 10;
  int epochs = 1;
  int batch = 2;
  double lr = 3e-3;
  OptKind opt = OptKind::kAdamW;
  int rank = 8;                   // fresh-baseline adapter rank
  bool fresh_rides_anchor = true; // keep the task anchor under fresh adapters
  uint64_t seed = 0;              // stage-2 shuffle seed
  int jobs = 1;
  int max_new = 24;               // decode budget per eval query
};

struct UserRunSummary {
  std::string user_id;
  long steps = 0;
  bool shot_shortfall = false;
  double final_loss = 0.0;   // last step loss; 0 when no steps ran
  double mean_b_norm = 0.0;  // gradient-trace means; 0 when absent
  double mean_c_norm = 0.0;
};

// One (benchmark, method) evaluation: personalize every target user, decode
// their held-out queries, score the pooled predictions.
struct TaskRun {
  std::string task_id;
  Method method;
  TaskMetrics metrics;
  std::vector<UserRunSummary> users;
  std::vector<AdapterSet> user_sets;  // index-aligned with users; empty when
                                      // nothing trained
  long trainable_params = 0;  // per-user stage-2 trainable entries
  long optimizer_state = 0;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
};

// "<kind>-<task_seed>"; stable name for reports and adaptability axes.
std::string bench_id(const bench::Benchmark& bench);

// The benchmark's task-adaptation split as a training set (full-data
// baselines, anchor refinement).
Dataset task_dataset(const bench::Benchmark& bench);

// Rule-consistent supervision synthesized from the benchmark's global rule,
// seeded by the task seed alone. Sharer histories all carry user biases —
// for ordinal tasks every row is offset by +-1, so the pooled task split's
// argmax never matches the rule it is meant to teach; task-level generator
// training needs rows the rule actually produced.
Dataset rule_dataset(const bench::Benchmark& bench, int n);

// PretrainTask views over several benchmarks: train = synthesized rule rows,
// val = pooled user eval queries.
std::vector<PretrainTask> pretrain_tasks(
    const std::vector<bench::Benchmark>& benches, int rows_per_task = 150);

// Greedy-decoded completion per input.
std::vector<std::string> predict(const Backbone& model,
                                 std::span<const AdapterSet* const> sets,
                                 const Dataset& data, int max_new);

// Stage-1 anchor for a benchmark, generated from its canonical description
// unless an override (a rewritten description) is supplied.
AdapterSet bench_anchor(const Hypernet& h, const Backbone& model,
                        const bench::Benchmark& bench,
                        const std::string& desc_override = "");

// `anchor` may be null only for base runs and anchor-free fresh baselines.
TaskRun run_task(const Backbone& model, const AdapterSet* anchor,
                 const bench::Benchmark& bench, const RunOptions& opt);

struct PipelineResult {
  std::vector<TaskRun> runs;  // one per benchmark
  MetricReport report;        // score rows + a single cost row
};

// Anchors come from the hypernet per benchmark; h may be null for base runs.
PipelineResult run_pipeline(const Backbone& model, const Hypernet* h,
                            const std::vector<bench::Benchmark>& benches,
                            const RunOptions& opt);

struct AblationResult {
  std::vector<std::string> methods;
  std::vector<PipelineResult> per_method;  // aligned with `methods`
};

// Side-by-side methods under shared seeds and shot selection. The default
// list is the four anchored variants plus the fresh per-user baseline.
AblationResult run_ablation(const Backbone& model, const Hypernet& h,
                            const std::vector<bench::Benchmark>& benches,
                            const RunOptions& base,
                            const std::vector<std::string>& methods = {
                                "full", "nobridge", "bridgeonly", "ours",
                                "oppu"});

struct SweepPoint {
  int shots = 0;
  std::string method;
  uint64_t seed = 0;
  double score = 0.0;  // overall average across the given benchmarks
};

// One pipeline per (shot size, method, seed). Histories must cover the
// largest requested shot count.
std::vector<SweepPoint> run_shot_sweep(
    const Backbone& model, const Hypernet& h,
    const std::vector<bench::Benchmark>& benches, const RunOptions& base,
    const std::vector<int>& shot_sizes,
    const std::vector<std::string>& methods,
    const std::vector<uint64_t>& seeds);

struct AdaptabilityCell {
  std::string source, target;
  double source_score = 0.0;  // source-task anchor personalized on target
  double target_score = 0.0;  // target's own anchor personalized on target
  double ratio = 0.0;         // diagonal pinned to exactly 1
};

struct AdaptabilityMatrix {
  std::vector<std::string> tasks;
  std::vector<AdaptabilityCell> cells;  // row-major source x target
  double mean_off_diagonal = 0.0;
};

// Personalizes each benchmark's users from every other benchmark's anchor
// and reports relative performance retained. Needs >= 2 benchmarks.
AdaptabilityMatrix run_adaptability(const Backbone& model, const Hypernet& h,
                                    const std::vector<bench::Benchmark>& benches,
                                    const RunOptions& opt);

struct RobustnessRow {
  bench::DescVariant variant = bench::DescVariant::kCanonical;
  double stage1 = 0.0;  // anchor-only aggregate
  double stage2 = 0.0;  // after personalization
};

// Anchors generated from each description rewrite, scored before and after
// stage-2 training.
std::vector<RobustnessRow> run_robustness(const Backbone& model,
                                          const Hypernet& h,
                                          const bench::Benchmark& bench,
                                          const RunOptions& opt,
                                          uint64_t desc_seed);

}  // namespace prisp::lab
