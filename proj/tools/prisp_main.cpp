// prisp: desk-scale personalization laboratory.
//
// Command surface over the library: benchmark generation, generator
// pretraining, anchor generation, per-user personalization, the full
// two-stage pipeline, ablations, shot sweeps, cross-task adaptability,
// description robustness, reporting and artifact inspection.
//
// Exit codes: 0 success, 2 usage/config, 3 I/O or malformed artifact,
// 4 numeric failure. PRISP_SEED overrides every seed-valued option.

#include "prisp/container.hpp"
#include "prisp/experiment.hpp"
#include "prisp/manifest.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prisp;
using namespace prisp::lab;

namespace {

// ---------------------------------------------------------------------------
// config plumbing

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  json cfg = json::parse(read_bytes(path), nullptr, false);
  if (cfg.is_discarded()) {
    throw ConfigError("config " + path + ": not valid JSON");
  }
  if (!cfg.is_object()) {
    throw ConfigError("config " + path + ": expected a JSON object");
  }
  return cfg;
}

template <class T>
T cfg_get(const json& cfg, const char* key, T fallback) {
  if (!cfg.contains(key)) return fallback;
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "': wrong type");
  }
}

BackboneConfig backbone_from_config(const json& cfg) {
  BackboneConfig bc;
  if (!cfg.contains("backbone")) return bc;
  const json& b = cfg.at("backbone");
  bc.n_layers = cfg_get(b, "n_layers", bc.n_layers);
  bc.d_model = cfg_get(b, "d_model", bc.d_model);
  bc.n_heads = cfg_get(b, "n_heads", bc.n_heads);
  bc.d_ff = cfg_get(b, "d_ff", bc.d_ff);
  bc.vocab_size = cfg_get(b, "vocab_size", bc.vocab_size);
  bc.max_seq = cfg_get(b, "max_seq", bc.max_seq);
  bc.validate();
  return bc;
}

json backbone_to_json(const BackboneConfig& bc) {
  return {{"n_layers", bc.n_layers}, {"d_model", bc.d_model},
          {"n_heads", bc.n_heads},   {"d_ff", bc.d_ff},
          {"vocab_size", bc.vocab_size}, {"max_seq", bc.max_seq}};
}

// PRISP_SEED beats flags and config alike.
uint64_t final_seed(uint64_t from_flags) {
  if (const char* env = std::getenv("PRISP_SEED")) {
    char* end = nullptr;
    unsigned long long v = strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
      throw ConfigError("PRISP_SEED must be an unsigned integer");
    }
    return uint64_t(v);
  }
  return from_flags;
}

uint64_t derive_seed(uint64_t base, std::string_view label) {
  return Rng(base).split(label).next_u64();
}

// ---------------------------------------------------------------------------
// artifact plumbing

// The model a run executes against: an explicit file wins; otherwise a
// sibling backbone.prsp of the hypernet (written at pretraining time);
// otherwise a fresh build from the config's backbone section and seed.
Backbone resolve_backbone(const json& cfg, const std::string& backbone_file,
                          const std::string& hypernet_file,
                          std::map<std::string, std::string>& inputs) {
  std::string path = backbone_file;
  if (path.empty() && !hypernet_file.empty()) {
    fs::path sibling = fs::path(hypernet_file).parent_path() / "backbone.prsp";
    if (fs::exists(sibling)) path = sibling.string();
  }
  if (!path.empty()) {
    inputs["backbone"] = hash_file(path);
    return load_backbone(path);
  }
  BackboneConfig bc = backbone_from_config(cfg);
  uint64_t seed = cfg_get<uint64_t>(cfg, "backbone_seed", 101);
  inputs["backbone"] =
      content_hash(backbone_to_json(bc).dump() + "#" + std::to_string(seed));
  return build_backbone(bc, Rng(seed));
}

bench::Benchmark load_bench_path(const std::string& path) {
  fs::path p(path);
  if (p.filename() == "data.jsonl" || p.filename() == "manifest.json") {
    p = p.parent_path();
  }
  return bench::load_benchmark(p);
}

void hash_bench_inputs(const std::string& dir,
                       std::map<std::string, std::string>& inputs) {
  fs::path p(dir);
  if (p.filename() == "data.jsonl" || p.filename() == "manifest.json") {
    p = p.parent_path();
  }
  inputs["bench:" + p.filename().string() + "/data.jsonl"] =
      hash_file(p / "data.jsonl");
  inputs["bench:" + p.filename().string() + "/manifest.json"] =
      hash_file(p / "manifest.json");
}

Hypernet load_hypernet_checked(const std::string& path, const Backbone& model,
                               std::map<std::string, std::string>& inputs) {
  Hypernet h = load_hypernet(path);
  inputs["hypernet"] = hash_file(path);
  const BackboneConfig& a = h.cfg;
  const BackboneConfig& b = model.cfg;
  if (a.n_layers != b.n_layers || a.d_model != b.d_model ||
      a.n_heads != b.n_heads || a.d_ff != b.d_ff ||
      a.vocab_size != b.vocab_size || a.max_seq != b.max_seq) {
    throw ConfigError("hypernet " + path +
                      " was pretrained against a different backbone shape");
  }
  return h;
}

json task_metrics_json(const TaskMetrics& t) {
  return {{"task_id", t.task_id},
          {"kind", task_kind_name(t.kind)},
          {"m1", t.m1},
          {"m2", t.m2},
          {"aggregate", t.aggregate}};
}

json report_json(const MetricReport& rep) {
  json tasks = json::array();
  for (const TaskMetrics& t : rep.tasks) tasks.push_back(task_metrics_json(t));
  json costs = json::array();
  for (const CostRow& c : rep.costs) {
    // Wall-clock and the composite derived from it live in the timings
    // sidecar; this body must be byte-identical across reruns.
    costs.push_back({{"name", c.name},
                     {"trainable_params", c.trainable_params},
                     {"optimizer_state", c.optimizer_state}});
  }
  return {{"tasks", tasks}, {"overall", rep.overall}, {"costs", costs}};
}

json users_json(const TaskRun& run) {
  json users = json::array();
  for (const UserRunSummary& u : run.users) {
    users.push_back({{"user", u.user_id},
                     {"steps", u.steps},
                     {"shot_shortfall", u.shot_shortfall},
                     {"final_loss", u.final_loss},
                     {"mean_b_grad_norm", u.mean_b_norm},
                     {"mean_c_grad_norm", u.mean_c_norm}});
  }
  return users;
}

void write_json_atomic(const fs::path& path, const json& body) {
  write_bytes_atomic(path, body.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// shared option bundles

struct Stage2Opts {
  std::string variant = "ours";
  int shots = 10;
  int epochs = 1;
  int batch = 2;
  double lr = 3e-3;
  int rank = 8;
  std::string opt = "adamw";
  uint64_t seed = 1;
  int jobs = 1;
  int max_new = 24;

  RunOptions to_run_options() const {
    RunOptions o;
    o.method = method_from_name(variant);
    o.shots = shots;
    o.epochs = epochs;
    o.batch = batch;
    o.lr = lr;
    o.rank = rank;
    if (opt == "adamw") {
      o.opt = OptKind::kAdamW;
    } else if (opt == "sgd") {
      o.opt = OptKind::kSgd;
    } else {
      throw ConfigError("unknown optimizer '" + opt + "' (adamw|sgd)");
    }
    o.seed = final_seed(seed);
    o.jobs = jobs;
    o.max_new = max_new;
    return o;
  }

  json to_json() const {
    return {{"variant", variant}, {"shots", shots},   {"epochs", epochs},
            {"batch", batch},     {"lr", lr},         {"rank", rank},
            {"opt", opt},         {"seed", final_seed(seed)},
            {"max_new", max_new}};
  }
};

void add_stage2_flags(CLI::App* cmd, Stage2Opts& s, bool with_variant = true) {
  if (with_variant) {
    cmd->add_option("--variant", s.variant,
                    "base|anchor|ours|full|nobridge|bridgeonly|oppu");
  }
  cmd->add_option("--shots", s.shots, "history suffix length per user");
  cmd->add_option("--epochs", s.epochs, "stage-2 epochs");
  cmd->add_option("--batch", s.batch, "stage-2 batch size");
  cmd->add_option("--lr", s.lr, "stage-2 learning rate");
  cmd->add_option("--rank", s.rank, "fresh-baseline adapter rank");
  cmd->add_option("--opt", s.opt, "adamw|sgd");
  cmd->add_option("--seed", s.seed, "run seed (PRISP_SEED overrides)");
  cmd->add_option("--jobs", s.jobs, "worker threads for per-user jobs");
  cmd->add_option("--max-new", s.max_new, "decode budget per eval query");
}

// ---------------------------------------------------------------------------
// gen-bench

struct GenBenchOpts {
  std::string kind;
  std::string out;
  std::string config_path;
  int users = 20;
  int classes = 4;
  int history = 60;
  int n_eval = 6;
  uint64_t task_seed = 1;
  uint64_t seed = 1;
  int task_budget = 50;
  int user_shots = 10;
  int targets = 8;
  int sharers = 12;
};

void write_one_bench(const fs::path& dir, TaskKind kind,
                     const GenBenchOpts& o, uint64_t task_seed,
                     uint64_t run_seed, json& outputs) {
  bench::BenchSettings s;
  s.kind = kind;
  s.n_classes = o.classes;
  s.task_seed = task_seed;
  s.users_seed = derive_seed(run_seed, std::string("users:") +
                                           task_kind_name(kind) + ":" +
                                           std::to_string(task_seed));
  s.splits_seed = derive_seed(run_seed, std::string("splits:") +
                                            task_kind_name(kind) + ":" +
                                            std::to_string(task_seed));
  s.n_users = o.users;
  s.history_len = o.history;
  s.n_eval = o.n_eval;
  s.plan.task_budget = o.task_budget;
  s.plan.user_shots = o.user_shots;
  s.plan.target_users = o.targets;
  s.plan.sharer_pool = o.sharers;
  bench::Benchmark b = bench::build_benchmark(s);
  bench::write_benchmark(dir, b);
  std::string label = dir.filename().string();
  outputs[label + "/data.jsonl"] = hash_file(dir / "data.jsonl");
  outputs[label + "/manifest.json"] = hash_file(dir / "manifest.json");
}

void run_gen_bench(const GenBenchOpts& o) {
  json cfg = load_config_file(o.config_path);
  (void)cfg;  // gen-bench is fully flag-driven; config kept for symmetry
  uint64_t run_seed = final_seed(o.seed);
  fs::path out(o.out);
  Stopwatch watch;
  json outputs = json::object();
  if (o.kind == "all") {
    uint64_t ts = o.task_seed;
    write_one_bench(out / "classification", TaskKind::kClassification, o, ts,
                    run_seed, outputs);
    write_one_bench(out / "ordinal", TaskKind::kOrdinal, o, ts + 1, run_seed,
                    outputs);
    write_one_bench(out / "generation", TaskKind::kGeneration, o, ts + 2,
                    run_seed, outputs);
  } else {
    write_one_bench(out, task_kind_from_name(o.kind), o, o.task_seed, run_seed,
                    outputs);
  }
  RunManifest m;
  m.command = "gen-bench";
  m.config_json = json{{"kind", o.kind},
                       {"users", o.users},
                       {"classes", o.classes},
                       {"history", o.history},
                       {"eval", o.n_eval},
                       {"task_seed", o.task_seed},
                       {"seed", run_seed},
                       {"plan",
                        {{"task_budget", o.task_budget},
                         {"user_shots", o.user_shots},
                         {"target_users", o.targets},
                         {"sharer_pool", o.sharers}}}}
                      .dump();
  m.output_hashes = outputs.get<std::map<std::string, std::string>>();
  write_run_manifest(out, m);
  write_timings(out, {{"generate", watch.seconds()}});
  std::printf("wrote %s\n", out.string().c_str());
}

// ---------------------------------------------------------------------------
// pretrain-hypernet

struct PretrainOpts {
  std::vector<std::string> bench_dirs;
  std::string out;
  std::string config_path;
  std::string backbone_file;
  std::string mode = "end2end";
  int epochs = 30;
  int batch = 16;
  double lr = 1e-3;
  int rank = 8;
  uint64_t seed = 7;
  int oracle_epochs = 35;
  double oracle_lr = 2e-3;
  int rows = 200;
};

void run_pretrain(const PretrainOpts& o) {
  json cfg = load_config_file(o.config_path);
  std::map<std::string, std::string> inputs;
  Backbone model = resolve_backbone(cfg, o.backbone_file, "", inputs);
  std::vector<bench::Benchmark> benches;
  for (const std::string& dir : o.bench_dirs) {
    benches.push_back(load_bench_path(dir));
    hash_bench_inputs(dir, inputs);
  }
  PretrainConfig pc;
  pc.mode = pretrain_mode_from_name(o.mode);
  pc.epochs = o.epochs;
  pc.batch = o.batch;
  pc.lr = o.lr;
  pc.rank = o.rank;
  pc.seed = final_seed(o.seed);
  pc.oracle_epochs = o.oracle_epochs;
  pc.oracle_lr = o.oracle_lr;
  pc.validate();

  Stopwatch watch;
  PretrainLog log;
  Hypernet h =
      pretrain_hypernet(model, pretrain_tasks(benches, o.rows), pc, &log);
  double train_seconds = watch.seconds();

  fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_hypernet(out, h);
  fs::path run_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  std::map<std::string, std::string> outputs;
  outputs["hypernet"] = hash_file(out);
  if (o.backbone_file.empty()) {
    // Anchors are only meaningful against these exact weights; ship them.
    save_backbone(run_dir / "backbone.prsp", model);
    outputs["backbone"] = hash_file(run_dir / "backbone.prsp");
  }

  RunManifest m;
  m.command = "pretrain-hypernet";
  m.config_json = json{{"backbone", backbone_to_json(model.cfg)},
                       {"mode", o.mode},
                       {"epochs", o.epochs},
                       {"batch", o.batch},
                       {"lr", o.lr},
                       {"rank", o.rank},
                       {"seed", pc.seed},
                       {"oracle_epochs", o.oracle_epochs},
                       {"oracle_lr", o.oracle_lr},
                       {"rows", o.rows}}
                      .dump();
  m.input_hashes = inputs;
  m.output_hashes = outputs;
  m.extra_json = json{{"epoch_losses", log.epoch_losses}}.dump();
  write_run_manifest(run_dir, m);
  write_timings(run_dir, {{"pretrain", train_seconds}});
  std::printf("wrote %s (%zu tasks, %d epochs, %.1fs)\n",
              out.string().c_str(), benches.size(), o.epochs, train_seconds);
}

// ---------------------------------------------------------------------------
// make-anchor

struct MakeAnchorOpts {
  std::string hypernet_file;
  std::string bench_dir;
  std::string out;
  std::string config_path;
  std::string backbone_file;
  std::string desc_variant = "canonical";
  uint64_t desc_seed = 0;
  bool refine = false;
  int epochs = 5;
  int batch = 8;
  double lr = 1e-3;
  uint64_t seed = 1;
};

void run_make_anchor(const MakeAnchorOpts& o) {
  json cfg = load_config_file(o.config_path);
  std::map<std::string, std::string> inputs;
  Backbone model =
      resolve_backbone(cfg, o.backbone_file, o.hypernet_file, inputs);
  Hypernet h = load_hypernet_checked(o.hypernet_file, model, inputs);
  bench::Benchmark b = load_bench_path(o.bench_dir);
  hash_bench_inputs(o.bench_dir, inputs);

  std::string desc = bench::perturb_description(
      b.spec, bench::desc_variant_from_name(o.desc_variant), o.desc_seed);
  Stopwatch watch;
  AdapterSet anchor = stage1_anchor(h, desc, model);
  std::vector<StageTiming> times{{"generate", watch.seconds()}};
  if (o.refine) {
    PersonalizeConfig pcfg;
    pcfg.epochs = o.epochs;
    pcfg.batch = o.batch;
    pcfg.lr = o.lr;
    pcfg.shots = 10;
    pcfg.shuffle_seed = final_seed(o.seed);
    watch.restart();
    anchor = refine_anchor(model, anchor, task_dataset(b), pcfg);
    times.push_back({"refine", watch.seconds()});
  }

  fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_adapter_set(out, anchor);
  fs::path run_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");

  RunManifest m;
  m.command = "make-anchor";
  m.config_json = json{{"backbone", backbone_to_json(model.cfg)},
                       {"desc_variant", o.desc_variant},
                       {"desc_seed", o.desc_seed},
                       {"refine", o.refine},
                       {"epochs", o.epochs},
                       {"batch", o.batch},
                       {"lr", o.lr},
                       {"seed", final_seed(o.seed)}}
                      .dump();
  m.input_hashes = inputs;
  m.output_hashes = {{"anchor", hash_file(out)}};
  m.extra_json = json{{"description", desc}}.dump();
  write_run_manifest(run_dir, m);
  write_timings(run_dir, times);
  std::printf("wrote %s\n", out.string().c_str());
}

// ---------------------------------------------------------------------------
// personalize

struct PersonalizeOpts {
  std::string anchor_file;
  std::string users_path;
  std::string out;
  std::string config_path;
  std::string backbone_file;
  Stage2Opts s2;
};

void run_personalize(const PersonalizeOpts& o) {
  json cfg = load_config_file(o.config_path);
  std::map<std::string, std::string> inputs;
  Backbone model = resolve_backbone(cfg, o.backbone_file, "", inputs);
  AdapterSet anchor = load_adapter_set(o.anchor_file);
  inputs["anchor"] = hash_file(o.anchor_file);
  bench::Benchmark b = load_bench_path(o.users_path);
  hash_bench_inputs(o.users_path, inputs);

  RunOptions opt = o.s2.to_run_options();
  if (opt.method.mode != RunMode::kPersonalized) {
    throw ConfigError("personalize: --variant must name a trainable variant");
  }
  TaskRun run = run_task(model, &anchor, b, opt);

  fs::path out(o.out);
  fs::create_directories(out);
  std::map<std::string, std::string> outputs;
  for (size_t i = 0; i < run.user_sets.size(); ++i) {
    std::string name = run.users[i].user_id + ".prsp";
    save_adapter_set(out / name, run.user_sets[i]);
    outputs[name] = hash_file(out / name);
  }

  RunManifest m;
  m.command = "personalize";
  m.config_json = o.s2.to_json().dump();
  m.input_hashes = inputs;
  m.output_hashes = outputs;
  m.extra_json = json{{"users", users_json(run)},
                      {"metrics", task_metrics_json(run.metrics)},
                      {"trainable_params", run.trainable_params},
                      {"optimizer_state", run.optimizer_state}}
                     .dump();
  write_run_manifest(out, m);
  write_timings(out, {{"personalize", run.train_seconds},
                      {"evaluate", run.eval_seconds}});
  std::printf("wrote %zu user adapters to %s (aggregate %.4f)\n",
              run.user_sets.size(), out.string().c_str(),
              run.metrics.aggregate);
}

// ---------------------------------------------------------------------------
// pipeline / ablate / sweep-shots / adaptability / robustness

struct PipelineOpts {
  std::string hypernet_file;
  std::vector<std::string> bench_dirs;
  std::string out;
  std::string config_path;
  std::string backbone_file;
  Stage2Opts s2;
  std::string methods;       // ablate
  std::string shot_list;     // sweep-shots
  int n_seeds = 1;           // sweep-shots
  uint64_t desc_seed = 0;    // robustness
};

struct PipelineContext {
  Backbone model;
  std::optional<Hypernet> h;
  std::vector<bench::Benchmark> benches;
  std::map<std::string, std::string> inputs;
};

PipelineContext load_pipeline_context(const PipelineOpts& o,
                                      bool need_hypernet) {
  json cfg = load_config_file(o.config_path);
  PipelineContext ctx;
  ctx.model = resolve_backbone(cfg, o.backbone_file, o.hypernet_file,
                               ctx.inputs);
  if (need_hypernet || !o.hypernet_file.empty()) {
    ctx.h = load_hypernet_checked(o.hypernet_file, ctx.model, ctx.inputs);
  }
  for (const std::string& dir : o.bench_dirs) {
    ctx.benches.push_back(load_bench_path(dir));
    hash_bench_inputs(dir, ctx.inputs);
  }
  return ctx;
}

void finish_pipeline_manifest(const PipelineOpts& o, const char* command,
                              const PipelineContext& ctx,
                              const std::map<std::string, std::string>& outputs,
                              const json& extra,
                              const std::vector<StageTiming>& times) {
  RunManifest m;
  m.command = command;
  json config = o.s2.to_json();
  config["backbone"] = backbone_to_json(ctx.model.cfg);
  if (!o.methods.empty()) config["methods"] = o.methods;
  if (!o.shot_list.empty()) config["shot_list"] = o.shot_list;
  if (o.n_seeds != 1) config["n_seeds"] = o.n_seeds;
  m.config_json = config.dump();
  m.input_hashes = ctx.inputs;
  m.output_hashes = outputs;
  m.extra_json = extra.dump();
  write_run_manifest(o.out, m);
  write_timings(o.out, times);
}

void run_cmd_pipeline(const PipelineOpts& o) {
  RunOptions opt = o.s2.to_run_options();
  PipelineContext ctx =
      load_pipeline_context(o, opt.method.mode != RunMode::kBase);
  PipelineResult res = run_pipeline(
      ctx.model, ctx.h ? &*ctx.h : nullptr, ctx.benches, opt);
  fs::path out(o.out);
  fs::create_directories(out);
  write_json_atomic(out / "report.json", report_json(res.report));
  json extra = json::object();
  std::vector<StageTiming> times;
  for (const TaskRun& run : res.runs) {
    extra[run.task_id] = {{"users", users_json(run)}};
    times.push_back({run.task_id + ":train", run.train_seconds});
    times.push_back({run.task_id + ":eval", run.eval_seconds});
  }
  finish_pipeline_manifest(
      o, "pipeline", ctx,
      {{"report.json", hash_file(out / "report.json")}}, extra, times);
  std::printf("overall %.4f -> %s\n", res.report.overall,
              (out / "report.json").string().c_str());
}

void run_cmd_ablate(const PipelineOpts& o) {
  PipelineContext ctx = load_pipeline_context(o, true);
  RunOptions base = o.s2.to_run_options();
  std::vector<std::string> methods;
  for (auto part : CLI::detail::split(o.methods, ',')) {
    if (!part.empty()) methods.push_back(part);
  }
  AblationResult res =
      run_ablation(ctx.model, *ctx.h, ctx.benches, base, methods);
  json rows = json::array();
  std::vector<StageTiming> times;
  for (size_t i = 0; i < res.methods.size(); ++i) {
    const PipelineResult& pr = res.per_method[i];
    json tasks = json::array();
    double secs = 0.0;
    for (const TaskRun& run : pr.runs) {
      tasks.push_back(task_metrics_json(run.metrics));
      secs += run.train_seconds + run.eval_seconds;
    }
    rows.push_back({{"method", res.methods[i]},
                    {"tasks", tasks},
                    {"overall", pr.report.overall},
                    {"trainable_params", pr.report.costs[0].trainable_params},
                    {"optimizer_state", pr.report.costs[0].optimizer_state}});
    times.push_back({res.methods[i], secs});
  }
  fs::path out(o.out);
  fs::create_directories(out);
  write_json_atomic(out / "ablation.json", json{{"rows", rows}});
  finish_pipeline_manifest(
      o, "ablate", ctx,
      {{"ablation.json", hash_file(out / "ablation.json")}}, json::object(),
      times);
  std::printf("%zu methods -> %s\n", res.methods.size(),
              (out / "ablation.json").string().c_str());
}

void run_cmd_sweep(const PipelineOpts& o) {
  PipelineContext ctx = load_pipeline_context(o, true);
  RunOptions base = o.s2.to_run_options();
  std::vector<int> shot_sizes;
  for (auto part : CLI::detail::split(o.shot_list, ',')) {
    if (!part.empty()) shot_sizes.push_back(std::stoi(part));
  }
  std::vector<std::string> methods;
  for (auto part : CLI::detail::split(o.methods, ',')) {
    if (!part.empty()) methods.push_back(part);
  }
  std::vector<uint64_t> seeds;
  for (int i = 0; i < o.n_seeds; ++i) seeds.push_back(base.seed + uint64_t(i));
  Stopwatch watch;
  std::vector<SweepPoint> points =
      run_shot_sweep(ctx.model, *ctx.h, ctx.benches, base, shot_sizes,
                     methods, seeds);
  std::string csv = "shot,variant,score,seed\n";
  for (const SweepPoint& p : points) {
    char line[128];
    std::snprintf(line, sizeof(line), "%d,%s,%.6f,%" PRIu64 "\n", p.shots,
                  p.method.c_str(), p.score, p.seed);
    csv += line;
  }
  fs::path out(o.out);
  fs::create_directories(out);
  write_bytes_atomic(out / "curve.csv", csv);
  finish_pipeline_manifest(o, "sweep-shots", ctx,
                           {{"curve.csv", hash_file(out / "curve.csv")}},
                           json::object(), {{"sweep", watch.seconds()}});
  std::printf("%zu points -> %s\n", points.size(),
              (out / "curve.csv").string().c_str());
}

void run_cmd_adaptability(const PipelineOpts& o) {
  PipelineContext ctx = load_pipeline_context(o, true);
  RunOptions opt = o.s2.to_run_options();
  Stopwatch watch;
  AdaptabilityMatrix mat =
      run_adaptability(ctx.model, *ctx.h, ctx.benches, opt);
  json cells = json::array();
  for (const AdaptabilityCell& c : mat.cells) {
    cells.push_back({{"source", c.source},
                     {"target", c.target},
                     {"source_score", c.source_score},
                     {"target_score", c.target_score},
                     {"ratio", c.ratio}});
  }
  fs::path out(o.out);
  fs::create_directories(out);
  write_json_atomic(out / "matrix.json",
                    json{{"tasks", mat.tasks},
                         {"cells", cells},
                         {"mean_off_diagonal", mat.mean_off_diagonal}});
  finish_pipeline_manifest(o, "adaptability", ctx,
                           {{"matrix.json", hash_file(out / "matrix.json")}},
                           json::object(), {{"matrix", watch.seconds()}});
  std::printf("mean off-diagonal %.4f -> %s\n", mat.mean_off_diagonal,
              (out / "matrix.json").string().c_str());
}

void run_cmd_robustness(const PipelineOpts& o) {
  PipelineContext ctx = load_pipeline_context(o, true);
  if (ctx.benches.size() != 1) {
    throw ConfigError("robustness: exactly one --bench");
  }
  RunOptions opt = o.s2.to_run_options();
  Stopwatch watch;
  std::vector<RobustnessRow> rows =
      run_robustness(ctx.model, *ctx.h, ctx.benches[0], opt, o.desc_seed);
  json body = json::array();
  for (const RobustnessRow& r : rows) {
    body.push_back({{"variant", bench::desc_variant_name(r.variant)},
                    {"stage1", r.stage1},
                    {"stage2", r.stage2}});
  }
  fs::path out(o.out);
  fs::create_directories(out);
  write_json_atomic(out / "two_stage.json", json{{"rows", body}});
  finish_pipeline_manifest(
      o, "robustness", ctx,
      {{"two_stage.json", hash_file(out / "two_stage.json")}},
      json{{"desc_seed", o.desc_seed}}, {{"robustness", watch.seconds()}});
  std::printf("%zu description variants -> %s\n", rows.size(),
              (out / "two_stage.json").string().c_str());
}

// ---------------------------------------------------------------------------
// report / validate / adapters inspect

struct ReportOpts {
  std::string run_dir;
  std::string format = "table";
};

void run_cmd_report(const ReportOpts& o) {
  fs::path dir(o.run_dir);
  json merged = json::object();
  for (const char* name :
       {"report.json", "ablation.json", "matrix.json", "two_stage.json"}) {
    if (fs::exists(dir / name)) {
      json body = json::parse(read_bytes(dir / name), nullptr, false);
      if (body.is_discarded()) {
        throw CorruptionError(std::string(name) + ": not valid JSON");
      }
      merged[fs::path(name).stem().string()] = body;
    }
  }
  if (merged.empty()) {
    throw IoError("report: no report artifacts in " + dir.string());
  }
  std::vector<StageTiming> times;
  if (fs::exists(dir / "timings.json")) {
    times = load_timings(dir / "timings.json");
    json t = json::array();
    for (const StageTiming& row : times) {
      t.push_back({{"stage", row.stage}, {"seconds", row.seconds}});
    }
    merged["timings"] = t;
  }
  if (o.format == "json") {
    std::printf("%s\n", merged.dump(2).c_str());
    return;
  }
  if (o.format != "table") {
    throw ConfigError("report: --format must be json or table");
  }
  if (merged.contains("report")) {
    const json& rep = merged["report"];
    std::printf("%-22s %-16s %8s %8s %10s\n", "task", "kind", "m1", "m2",
                "aggregate");
    for (const json& t : rep.at("tasks")) {
      std::printf("%-22s %-16s %8.4f %8.4f %10.4f\n",
                  t.at("task_id").get<std::string>().c_str(),
                  t.at("kind").get<std::string>().c_str(),
                  t.at("m1").get<double>(), t.at("m2").get<double>(),
                  t.at("aggregate").get<double>());
    }
    std::printf("overall %.4f\n", rep.at("overall").get<double>());
    // Join the deterministic cost body with measured wall-clock, then
    // max-normalize into the composite.
    std::vector<CostRow> rows;
    for (const json& c : rep.at("costs")) {
      CostRow r;
      r.name = c.at("name").get<std::string>();
      r.trainable_params = c.at("trainable_params").get<long>();
      r.optimizer_state = c.at("optimizer_state").get<long>();
      for (const StageTiming& t : times) {
        if (t.stage.ends_with(":train")) r.train_seconds += t.seconds;
      }
      rows.push_back(r);
    }
    if (!rows.empty()) {
      rows = cost_report(std::move(rows));
      std::printf("\n%-12s %12s %12s %10s %10s\n", "method", "trainable",
                  "opt-state", "seconds", "composite");
      for (const CostRow& r : rows) {
        std::printf("%-12s %12ld %12ld %10.2f %10.4f\n", r.name.c_str(),
                    r.trainable_params, r.optimizer_state, r.train_seconds,
                    r.composite);
      }
    }
  }
  if (merged.contains("ablation")) {
    std::printf("%-12s %10s %12s\n", "method", "overall", "trainable");
    for (const json& row : merged["ablation"].at("rows")) {
      std::printf("%-12s %10.4f %12ld\n",
                  row.at("method").get<std::string>().c_str(),
                  row.at("overall").get<double>(),
                  row.at("trainable_params").get<long>());
    }
  }
  if (merged.contains("matrix")) {
    for (const json& c : merged["matrix"].at("cells")) {
      std::printf("%-22s -> %-22s ratio %8.4f\n",
                  c.at("source").get<std::string>().c_str(),
                  c.at("target").get<std::string>().c_str(),
                  c.at("ratio").get<double>());
    }
    std::printf("mean off-diagonal %.4f\n",
                merged["matrix"].at("mean_off_diagonal").get<double>());
  }
  if (merged.contains("two_stage")) {
    std::printf("%-12s %10s %10s\n", "description", "stage1", "stage2");
    for (const json& r : merged["two_stage"].at("rows")) {
      std::printf("%-12s %10.4f %10.4f\n",
                  r.at("variant").get<std::string>().c_str(),
                  r.at("stage1").get<double>(), r.at("stage2").get<double>());
    }
  }
}

void run_cmd_validate(const std::string& dir) {
  // Byte-exact regeneration from the manifest, then a row-level schema pass.
  bench::Benchmark b = bench::load_benchmark(dir);
  std::string data = read_bytes(fs::path(dir) / "data.jsonl");
  size_t rows = 0, at = 0;
  while (at < data.size()) {
    size_t end = data.find('\n', at);
    if (end == std::string::npos) end = data.size();
    std::string line = data.substr(at, end - at);
    at = end + 1;
    if (line.empty()) continue;
    json row = json::parse(line, nullptr, false);
    if (row.is_discarded()) {
      throw CorruptionError("data.jsonl row " + std::to_string(rows) +
                            ": not valid JSON");
    }
    for (const char* key : {"id", "user", "input", "output", "split"}) {
      if (!row.contains(key) || !row.at(key).is_string()) {
        throw CorruptionError("data.jsonl row " + std::to_string(rows) +
                              ": missing string field '" + key + "'");
      }
    }
    std::string split = row.at("split").get<std::string>();
    if (split != "task" && split != "history" && split != "eval") {
      throw CorruptionError("data.jsonl row " + std::to_string(rows) +
                            ": bad split '" + split + "'");
    }
    ++rows;
  }
  std::printf("ok: %s (%zu rows, kind %s, %zu users)\n", dir.c_str(), rows,
              task_kind_name(b.spec.kind), b.users.size());
}

void run_cmd_inspect(const std::string& file) {
  AdapterSet set = load_adapter_set(file);
  std::printf("tag      %s\nvariant  %s\nadapters %zu\n", set.tag.c_str(),
              variant_name(set.variant), set.items.size());
  std::printf("%-8s %-6s %12s %12s %12s %6s %8s\n", "layer", "site", "|a|",
              "|b|", "|c|", "mask", "scale");
  for (const auto& [key, ad] : set.items) {
    char mask[4] = {ad.mask.a ? 'a' : '-', ad.mask.b ? 'b' : '-',
                    ad.mask.c ? 'c' : '-', '\0'};
    char cnorm[24] = "-";
    if (ad.c) std::snprintf(cnorm, sizeof(cnorm), "%.5f", ad.c->norm());
    std::printf("%-8d %-6s %12.5f %12.5f %12s %6s %8.3f\n", key.first,
                site_name(site_from_u8(uint8_t(key.second))), ad.a.norm(),
                ad.b.norm(), cnorm, mask, ad.scale);
  }
  std::printf("trainable %ld of %ld\n", set.trainable_param_count(),
              set.total_param_count());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prisp: desk-scale two-stage personalization laboratory"};
  app.require_subcommand(1);

  GenBenchOpts gb;
  CLI::App* gen = app.add_subcommand("gen-bench", "generate a benchmark");
  gen->add_option("--kind", gb.kind, "classification|ordinal|generation|all")
      ->required();
  gen->add_option("--out", gb.out, "output directory")->required();
  gen->add_option("--config", gb.config_path, "config JSON");
  gen->add_option("--users", gb.users);
  gen->add_option("--classes", gb.classes);
  gen->add_option("--history", gb.history);
  gen->add_option("--eval", gb.n_eval);
  gen->add_option("--task-seed", gb.task_seed, "fixes the global rule");
  gen->add_option("--seed", gb.seed, "fixes users and splits");
  gen->add_option("--task-budget", gb.task_budget);
  gen->add_option("--shots", gb.user_shots);
  gen->add_option("--targets", gb.targets);
  gen->add_option("--sharers", gb.sharers);
  gen->callback([&] { run_gen_bench(gb); });

  PretrainOpts pt;
  CLI::App* pre =
      app.add_subcommand("pretrain-hypernet", "pretrain the adapter generator");
  pre->add_option("--bench", pt.bench_dirs, "benchmark dirs")->required();
  pre->add_option("--out", pt.out, "hypernet output file")->required();
  pre->add_option("--config", pt.config_path);
  pre->add_option("--backbone", pt.backbone_file, "load instead of building");
  pre->add_option("--mode", pt.mode, "end2end|reconstruction");
  pre->add_option("--epochs", pt.epochs);
  pre->add_option("--batch", pt.batch);
  pre->add_option("--lr", pt.lr);
  pre->add_option("--rank", pt.rank);
  pre->add_option("--seed", pt.seed);
  pre->add_option("--oracle-epochs", pt.oracle_epochs);
  pre->add_option("--oracle-lr", pt.oracle_lr);
  pre->add_option("--rows", pt.rows, "rule rows per task");
  pre->callback([&] { run_pretrain(pt); });

  MakeAnchorOpts ma;
  CLI::App* mk = app.add_subcommand("make-anchor", "generate a task anchor");
  mk->add_option("--hypernet", ma.hypernet_file)->required();
  mk->add_option("--bench", ma.bench_dir)->required();
  mk->add_option("--out", ma.out)->required();
  mk->add_option("--config", ma.config_path);
  mk->add_option("--backbone", ma.backbone_file);
  mk->add_option("--desc-variant", ma.desc_variant,
                 "canonical|generated|imprecise");
  mk->add_option("--desc-seed", ma.desc_seed);
  mk->add_flag("--refine", ma.refine, "train a/b on the task split");
  mk->add_option("--epochs", ma.epochs);
  mk->add_option("--batch", ma.batch);
  mk->add_option("--lr", ma.lr);
  mk->add_option("--seed", ma.seed);
  mk->callback([&] { run_make_anchor(ma); });

  PersonalizeOpts ps;
  CLI::App* per = app.add_subcommand("personalize", "stage-2 user training");
  per->add_option("--anchor", ps.anchor_file)->required();
  per->add_option("--users", ps.users_path, "benchmark dir or data.jsonl")
      ->required();
  per->add_option("--out", ps.out)->required();
  per->add_option("--config", ps.config_path);
  per->add_option("--backbone", ps.backbone_file);
  add_stage2_flags(per, ps.s2);
  per->callback([&] { run_personalize(ps); });

  PipelineOpts pl;
  CLI::App* pip = app.add_subcommand("pipeline", "anchor + personalize + score");
  pip->add_option("--hypernet", pl.hypernet_file)->required();
  pip->add_option("--bench", pl.bench_dirs)->required();
  pip->add_option("--out", pl.out)->required();
  pip->add_option("--config", pl.config_path);
  pip->add_option("--backbone", pl.backbone_file);
  add_stage2_flags(pip, pl.s2);
  pip->callback([&] { run_cmd_pipeline(pl); });

  PipelineOpts ab;
  ab.methods = "full,nobridge,bridgeonly,ours,oppu";
  CLI::App* abl = app.add_subcommand("ablate", "side-by-side variants");
  abl->add_option("--hypernet", ab.hypernet_file)->required();
  abl->add_option("--bench", ab.bench_dirs)->required();
  abl->add_option("--out", ab.out)->required();
  abl->add_option("--config", ab.config_path);
  abl->add_option("--backbone", ab.backbone_file);
  abl->add_option("--methods", ab.methods, "comma-separated method list");
  add_stage2_flags(abl, ab.s2, /*with_variant=*/false);
  abl->callback([&] { run_cmd_ablate(ab); });

  PipelineOpts sw;
  sw.methods = "ours";
  sw.shot_list = "1,5,10,30,50";
  CLI::App* swp = app.add_subcommand("sweep-shots", "score vs shot count");
  swp->add_option("--hypernet", sw.hypernet_file)->required();
  swp->add_option("--bench", sw.bench_dirs)->required();
  swp->add_option("--out", sw.out)->required();
  swp->add_option("--config", sw.config_path);
  swp->add_option("--backbone", sw.backbone_file);
  swp->add_option("--shot-list", sw.shot_list, "comma-separated shot sizes");
  swp->add_option("--methods", sw.methods, "comma-separated method list");
  swp->add_option("--seeds", sw.n_seeds, "number of consecutive run seeds");
  add_stage2_flags(swp, sw.s2, /*with_variant=*/false);
  swp->callback([&] { run_cmd_sweep(sw); });

  PipelineOpts ad;
  CLI::App* adp = app.add_subcommand("adaptability", "cross-task reuse matrix");
  adp->add_option("--hypernet", ad.hypernet_file)->required();
  adp->add_option("--bench", ad.bench_dirs, "two or more benchmark dirs")
      ->required();
  adp->add_option("--out", ad.out)->required();
  adp->add_option("--config", ad.config_path);
  adp->add_option("--backbone", ad.backbone_file);
  add_stage2_flags(adp, ad.s2);
  adp->callback([&] { run_cmd_adaptability(ad); });

  PipelineOpts rb;
  CLI::App* rob =
      app.add_subcommand("robustness", "description-variant two-stage table");
  rob->add_option("--hypernet", rb.hypernet_file)->required();
  rob->add_option("--bench", rb.bench_dirs)->required();
  rob->add_option("--out", rb.out)->required();
  rob->add_option("--config", rb.config_path);
  rob->add_option("--backbone", rb.backbone_file);
  rob->add_option("--desc-seed", rb.desc_seed, "rewrite seed");
  add_stage2_flags(rob, rb.s2);
  rob->callback([&] { run_cmd_robustness(rb); });

  ReportOpts rp;
  CLI::App* rep = app.add_subcommand("report", "print run artifacts");
  rep->add_option("run_dir", rp.run_dir)->required();
  rep->add_option("--format", rp.format, "json|table");
  rep->callback([&] { run_cmd_report(rp); });

  std::string validate_dir;
  CLI::App* val = app.add_subcommand("validate", "check a benchmark dir");
  val->add_option("bench_dir", validate_dir)->required();
  val->callback([&] { run_cmd_validate(validate_dir); });

  std::string inspect_file;
  CLI::App* adapters = app.add_subcommand("adapters", "adapter utilities");
  adapters->require_subcommand(1);
  CLI::App* ins = adapters->add_subcommand("inspect", "describe a .prsp file");
  ins->add_option("file", inspect_file)->required();
  ins->callback([&] { run_cmd_inspect(inspect_file); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "artifact error: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
