#include "prisp/experiment.hpp"

#include "prisp/manifest.hpp"
#include "prisp/tokenizer.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace prisp::lab {

namespace {

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / double(xs.size());
}

void check_finite(double x, const char* what) {
  if (!std::isfinite(x)) {
    throw NumericError(std::string(what) + " is not finite");
  }
}

UserRunSummary summarize(const std::string& user_id,
                         const PersonalizeResult& res) {
  UserRunSummary s;
  s.user_id = user_id;
  s.steps = res.steps;
  s.shot_shortfall = res.shot_shortfall;
  if (!res.step_losses.empty()) s.final_loss = res.step_losses.back();
  s.mean_b_norm = mean_of(res.trace.b_norms);
  s.mean_c_norm = mean_of(res.trace.c_norms);
  check_finite(s.final_loss, "training loss");
  return s;
}

PersonalizeConfig stage2_config(const RunOptions& opt) {
  PersonalizeConfig cfg;
  cfg.variant = opt.method.variant;
  cfg.epochs = opt.epochs;
  cfg.batch = opt.batch;
  cfg.lr = opt.lr;
  cfg.shots = opt.shots;
  cfg.shuffle_seed = opt.seed;
  cfg.rank = opt.rank;
  cfg.opt = opt.opt;
  return cfg;
}

}  // namespace

void parallel_for(int jobs, int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  if (jobs < 1) throw ConfigError("parallel_for: jobs must be >= 1");
  int workers = std::min(jobs, n);
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto body = [&] {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(size_t(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

Method method_from_name(const std::string& name) {
  if (name == "base") return {RunMode::kBase, Variant::kAnchor};
  if (name == "anchor") return {RunMode::kAnchorOnly, Variant::kAnchor};
  if (name == "ours") return {RunMode::kPersonalized, Variant::kBridged};
  if (name == "oppu") return {RunMode::kPersonalized, Variant::kFresh};
  Variant v = variant_from_name(name);
  if (v == Variant::kAnchor) return {RunMode::kAnchorOnly, v};
  return {RunMode::kPersonalized, v};
}

std::string method_name(const Method& m) {
  switch (m.mode) {
    case RunMode::kBase:
      return "base";
    case RunMode::kAnchorOnly:
      return "anchor";
    case RunMode::kPersonalized:
      if (m.variant == Variant::kBridged) return "ours";
      if (m.variant == Variant::kFresh) return "oppu";
      return variant_name(m.variant);
  }
  throw ConfigError("method_name: bad mode");
}

std::string bench_id(const bench::Benchmark& bench) {
  return std::string(task_kind_name(bench.spec.kind)) + "-" +
         std::to_string(bench.settings.task_seed);
}

Dataset task_dataset(const bench::Benchmark& bench) {
  Dataset out;
  out.reserve(bench.splits.task.size());
  for (const bench::SplitRow& row : bench.splits.task) {
    out.push_back({row.input, row.output});
  }
  return out;
}

Dataset rule_dataset(const bench::Benchmark& bench, int n) {
  if (n < 1) throw ConfigError("rule_dataset: need at least one row");
  Rng rng = Rng(bench.settings.task_seed).split("rule-rows");
  Dataset out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    std::string in = bench::sample_input(bench.spec, rng);
    out.push_back({in, bench::global_output(bench.spec, in)});
  }
  return out;
}

std::vector<PretrainTask> pretrain_tasks(
    const std::vector<bench::Benchmark>& benches, int rows_per_task) {
  std::vector<PretrainTask> tasks;
  tasks.reserve(benches.size());
  for (const bench::Benchmark& b : benches) {
    PretrainTask t;
    t.task_id = bench_id(b);
    t.description = b.spec.description;
    t.train = rule_dataset(b, rows_per_task);
    for (const auto& [user, eval] : b.splits.evals) {
      t.val.insert(t.val.end(), eval.begin(), eval.end());
    }
    tasks.push_back(std::move(t));
  }
  return tasks;
}

std::vector<std::string> predict(const Backbone& model,
                                 std::span<const AdapterSet* const> sets,
                                 const Dataset& data, int max_new) {
  std::vector<std::string> preds;
  preds.reserve(data.size());
  for (const Example& ex : data) {
    TokenSeq out = generate(model, sets, encode_prompt(ex.input), max_new);
    preds.push_back(detokenize(
        std::vector<int>(out.ids.begin() + out.prompt_len, out.ids.end())));
  }
  return preds;
}

AdapterSet bench_anchor(const Hypernet& h, const Backbone& model,
                        const bench::Benchmark& bench,
                        const std::string& desc_override) {
  const std::string& desc =
      desc_override.empty() ? bench.spec.description : desc_override;
  return stage1_anchor(h, desc, model);
}

TaskRun run_task(const Backbone& model, const AdapterSet* anchor,
                 const bench::Benchmark& bench, const RunOptions& opt) {
  int n = bench.settings.plan.target_users;
  if (n < 1 || size_t(n) > bench.users.size()) {
    throw ConfigError("run_task: benchmark has no target users");
  }
  bool needs_anchor =
      opt.method.mode == RunMode::kAnchorOnly ||
      (opt.method.mode == RunMode::kPersonalized &&
       (opt.method.variant != Variant::kFresh || opt.fresh_rides_anchor));
  if (needs_anchor && anchor == nullptr) {
    throw ConfigError("run_task: method '" + method_name(opt.method) +
                      "' needs a task anchor");
  }

  TaskRun out;
  out.task_id = bench_id(bench);
  out.method = opt.method;
  out.users.resize(size_t(n));

  std::vector<AdapterSet> user_sets(static_cast<size_t>(n));
  Stopwatch trained;
  if (opt.method.mode == RunMode::kPersonalized) {
    PersonalizeConfig cfg = stage2_config(opt);
    parallel_for(opt.jobs, n, [&](int i) {
      const bench::SynthUser& user = bench.users[size_t(i)];
      PersonalizeResult res =
          opt.method.variant == Variant::kFresh
              ? oppu_baseline(model, user.history, cfg,
                              opt.fresh_rides_anchor ? anchor : nullptr)
              : personalize_user(model, *anchor, user.history, cfg);
      user_sets[size_t(i)] = std::move(res.set);
      out.users[size_t(i)] = summarize(user.id, res);
    });
    out.trainable_params = user_sets[0].trainable_param_count();
    out.optimizer_state =
        opt.opt == OptKind::kAdamW ? 2 * out.trainable_params : 0;
  } else {
    for (int i = 0; i < n; ++i) out.users[size_t(i)].user_id = bench.users[size_t(i)].id;
  }
  out.train_seconds = trained.seconds();

  Stopwatch evaled;
  std::vector<std::vector<std::string>> preds(static_cast<size_t>(n));
  parallel_for(opt.jobs, n, [&](int i) {
    std::vector<const AdapterSet*> sets;
    switch (opt.method.mode) {
      case RunMode::kBase:
        break;
      case RunMode::kAnchorOnly:
        sets.push_back(anchor);
        break;
      case RunMode::kPersonalized:
        if (opt.method.variant == Variant::kFresh && opt.fresh_rides_anchor) {
          sets.push_back(anchor);
        }
        sets.push_back(&user_sets[size_t(i)]);
        break;
    }
    preds[size_t(i)] =
        predict(model, sets, bench.users[size_t(i)].eval, opt.max_new);
  });
  out.eval_seconds = evaled.seconds();

  std::vector<std::string> pooled_preds, pooled_golds;
  for (int i = 0; i < n; ++i) {
    const bench::SynthUser& user = bench.users[size_t(i)];
    pooled_preds.insert(pooled_preds.end(), preds[size_t(i)].begin(),
                        preds[size_t(i)].end());
    for (const Example& ex : user.eval) pooled_golds.push_back(ex.output);
  }
  out.metrics = score_task(out.task_id, bench.spec.kind, pooled_preds,
                           pooled_golds, bench.spec.labels);
  check_finite(out.metrics.aggregate, "task aggregate");
  if (opt.method.mode == RunMode::kPersonalized) {
    out.user_sets = std::move(user_sets);
  }
  return out;
}

PipelineResult run_pipeline(const Backbone& model, const Hypernet* h,
                            const std::vector<bench::Benchmark>& benches,
                            const RunOptions& opt) {
  if (benches.empty()) throw ConfigError("run_pipeline: no benchmarks");
  PipelineResult out;
  std::vector<TaskMetrics> rows;
  double train_total = 0.0;
  for (const bench::Benchmark& b : benches) {
    AdapterSet anchor;
    bool have_anchor = false;
    if (opt.method.mode != RunMode::kBase) {
      if (h == nullptr) {
        throw ConfigError("run_pipeline: method '" + method_name(opt.method) +
                          "' needs a hypernetwork");
      }
      anchor = bench_anchor(*h, model, b);
      have_anchor = true;
    }
    TaskRun run = run_task(model, have_anchor ? &anchor : nullptr, b, opt);
    rows.push_back(run.metrics);
    train_total += run.train_seconds;
    out.runs.push_back(std::move(run));
  }
  CostRow cost;
  cost.name = method_name(opt.method);
  cost.trainable_params = out.runs[0].trainable_params;
  cost.optimizer_state = out.runs[0].optimizer_state;
  cost.train_seconds = train_total;
  out.report = build_report(std::move(rows), {cost});
  return out;
}

AblationResult run_ablation(const Backbone& model, const Hypernet& h,
                            const std::vector<bench::Benchmark>& benches,
                            const RunOptions& base,
                            const std::vector<std::string>& methods) {
  if (methods.empty()) throw ConfigError("run_ablation: no methods");
  AblationResult out;
  out.methods = methods;
  for (const std::string& name : methods) {
    RunOptions opt = base;
    opt.method = method_from_name(name);
    out.per_method.push_back(run_pipeline(model, &h, benches, opt));
  }
  return out;
}

std::vector<SweepPoint> run_shot_sweep(
    const Backbone& model, const Hypernet& h,
    const std::vector<bench::Benchmark>& benches, const RunOptions& base,
    const std::vector<int>& shot_sizes,
    const std::vector<std::string>& methods,
    const std::vector<uint64_t>& seeds) {
  if (shot_sizes.empty() || methods.empty() || seeds.empty()) {
    throw ConfigError("run_shot_sweep: empty shot/method/seed list");
  }
  int max_shots = *std::max_element(shot_sizes.begin(), shot_sizes.end());
  for (const bench::Benchmark& b : benches) {
    if (b.settings.history_len < max_shots) {
      throw ConfigError("run_shot_sweep: history length " +
                        std::to_string(b.settings.history_len) +
                        " is too short for " + std::to_string(max_shots) +
                        " shots");
    }
  }
  std::vector<SweepPoint> points;
  for (int shots : shot_sizes) {
    for (const std::string& name : methods) {
      for (uint64_t seed : seeds) {
        RunOptions opt = base;
        opt.method = method_from_name(name);
        opt.shots = shots;
        opt.seed = seed;
        PipelineResult res = run_pipeline(model, &h, benches, opt);
        points.push_back({shots, name, seed, res.report.overall});
      }
    }
  }
  return points;
}

AdaptabilityMatrix run_adaptability(const Backbone& model, const Hypernet& h,
                                    const std::vector<bench::Benchmark>& benches,
                                    const RunOptions& opt) {
  if (benches.size() < 2) {
    throw ConfigError("run_adaptability: need at least two benchmarks");
  }
  size_t k = benches.size();
  std::vector<AdapterSet> anchors;
  anchors.reserve(k);
  AdaptabilityMatrix out;
  for (const bench::Benchmark& b : benches) {
    anchors.push_back(bench_anchor(h, model, b));
    out.tasks.push_back(bench_id(b));
  }
  std::vector<double> own(k, 0.0);
  for (size_t j = 0; j < k; ++j) {
    own[j] = run_task(model, &anchors[j], benches[j], opt).metrics.aggregate;
  }
  double off_sum = 0.0;
  int off_n = 0;
  for (size_t i = 0; i < k; ++i) {
    for (size_t j = 0; j < k; ++j) {
      AdaptabilityCell cell;
      cell.source = out.tasks[i];
      cell.target = out.tasks[j];
      cell.target_score = own[j];
      if (i == j) {
        cell.source_score = own[j];
        cell.ratio = 1.0;
      } else {
        cell.source_score =
            run_task(model, &anchors[i], benches[j], opt).metrics.aggregate;
        cell.ratio = adaptability(cell.source_score, cell.target_score);
        off_sum += cell.ratio;
        ++off_n;
      }
      out.cells.push_back(cell);
    }
  }
  out.mean_off_diagonal = off_n > 0 ? off_sum / double(off_n) : 0.0;
  return out;
}

std::vector<RobustnessRow> run_robustness(const Backbone& model,
                                          const Hypernet& h,
                                          const bench::Benchmark& bench,
                                          const RunOptions& opt,
                                          uint64_t desc_seed) {
  RunOptions stage1 = opt;
  stage1.method = {RunMode::kAnchorOnly, Variant::kAnchor};
  RunOptions stage2 = opt;
  if (stage2.method.mode != RunMode::kPersonalized) {
    stage2.method = {RunMode::kPersonalized, Variant::kBridged};
  }
  std::vector<RobustnessRow> rows;
  for (bench::DescVariant v :
       {bench::DescVariant::kCanonical, bench::DescVariant::kGeneratedStyle,
        bench::DescVariant::kImprecise}) {
    std::string desc = bench::perturb_description(bench.spec, v, desc_seed);
    AdapterSet anchor = bench_anchor(h, model, bench, desc);
    RobustnessRow row;
    row.variant = v;
    row.stage1 = run_task(model, &anchor, bench, stage1).metrics.aggregate;
    row.stage2 = run_task(model, &anchor, bench, stage2).metrics.aggregate;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace prisp::lab
