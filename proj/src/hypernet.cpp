#include "prisp/hypernet.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace prisp {

Mat embed_description(const std::string& text, int d_task) {
  if (d_task < 1) throw ConfigError("embed_description: d_task must be >= 1");
  for (char c : text) (void)tok::char_id(c);  // enforce alphabet membership
  Mat e = Mat::Zero(1, d_task);
  std::string padded = "^" + text + "$";
  for (size_t i = 0; i + 3 <= padded.size(); ++i) {
    uint64_t h = Rng::fnv1a64(std::string_view(padded).substr(i, 3));
    int bucket = int(h % uint64_t(d_task));
    double sign = (h >> 63) ? -1.0 : 1.0;
    e(0, bucket) += sign;
  }
  double norm = e.norm();
  if (norm > 0.0) e /= norm;
  return e;
}

long Hypernet::param_count() const {
  return long(desc_proj.size()) + long(e_layer.size()) + long(e_site.size()) +
         long(e_role.size()) + long(w1.size()) + long(w2.size()) +
         long(head_a.size()) + long(head_b.size());
}

Hypernet build_hypernet(const BackboneConfig& cfg, int rank, Rng rng) {
  cfg.validate();
  if (rank < 1 || rank > cfg.d_model) {
    throw ConfigError("build_hypernet: rank must be in [1, d_model]");
  }
  Hypernet h;
  h.cfg = cfg;
  h.rank = rank;
  auto fan_in_init = [&](int rows, int cols) {
    return rng.normal_mat(rows, cols, 1.0 / std::sqrt(double(cols)));
  };
  h.desc_proj = fan_in_init(h.d_embed, h.d_task);
  h.e_layer = rng.normal_mat(cfg.n_layers, h.d_embed, 1.0);
  h.e_site = rng.normal_mat(2, h.d_embed, 1.0);
  h.e_role = rng.normal_mat(2, h.d_embed, 1.0);
  h.w1 = fan_in_init(h.d_hidden, 4 * h.d_embed);
  h.w2 = fan_in_init(h.d_hidden, h.d_hidden);
  // Head init mirrors a fresh adapter: the A-side head is small-random and
  // the B-side head is zero, so every generated delta B*A is exactly zero
  // (untrained net = no-op) while gradients through the product still reach
  // the B head. Zeroing both heads would pin the product at a saddle where
  // neither side ever receives a gradient.
  h.head_a = fan_in_init(rank * cfg.d_model, h.d_hidden);
  h.head_b = Mat::Zero(cfg.d_model * rank, h.d_hidden);
  return h;
}

HypernetVars bind_hypernet(Tape& tape, const Hypernet& h) {
  HypernetVars v;
  v.desc_proj = tape.constant(h.desc_proj);
  v.e_layer = tape.constant(h.e_layer);
  v.e_site = tape.constant(h.e_site);
  v.e_role = tape.constant(h.e_role);
  v.w1 = tape.constant(h.w1);
  v.w2 = tape.constant(h.w2);
  v.head_a = tape.constant(h.head_a);
  v.head_b = tape.constant(h.head_b);
  return v;
}

HypernetVars bind_hypernet(Tape& tape, Hypernet& h, ParamRegistry& reg) {
  HypernetVars v;
  v.desc_proj = reg.bind(tape, h.desc_proj, "hn.desc_proj", true);
  v.e_layer = reg.bind(tape, h.e_layer, "hn.e_layer", true);
  v.e_site = reg.bind(tape, h.e_site, "hn.e_site", true);
  v.e_role = reg.bind(tape, h.e_role, "hn.e_role", true);
  v.w1 = reg.bind(tape, h.w1, "hn.w1", true);
  v.w2 = reg.bind(tape, h.w2, "hn.w2", true);
  v.head_a = reg.bind(tape, h.head_a, "hn.head_a", true);
  v.head_b = reg.bind(tape, h.head_b, "hn.head_b", true);
  return v;
}

namespace {

std::string trimmed(const std::string& s) {
  size_t b = s.find_first_not_of(' ');
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(' ');
  return s.substr(b, e - b + 1);
}

// One trunk pass: conditioning row -> two tanh layers -> one role head.
Var trunk_factor(const HypernetVars& hv, Var desc_row, int layer, int site_idx,
                 int role_idx, Var head, int rows, int cols) {
  std::vector<Var> parts{
      desc_row,
      take_rows(hv.e_layer, {layer}),
      take_rows(hv.e_site, {site_idx}),
      take_rows(hv.e_role, {role_idx}),
  };
  Var in = concat_cols(parts);                        // 1 x 4*d_embed
  Var h1 = tanh_act(matmul(in, transpose(hv.w1)));    // 1 x d_hidden
  Var h2 = tanh_act(matmul(h1, transpose(hv.w2)));    // 1 x d_hidden
  Var flat = matmul(h2, transpose(head));             // 1 x rows*cols
  return reshape(flat, rows, cols);
}

}  // namespace

AdapterVarMap generate_adapter_vars(Tape& tape, const Hypernet& h,
                                    const HypernetVars& hv,
                                    const std::string& description) {
  if (trimmed(description).empty()) {
    throw ConfigError("generate: blank task description");
  }
  Var desc = matmul(tape.constant(embed_description(description, h.d_task)),
                    transpose(hv.desc_proj));  // 1 x d_embed
  AdapterVarMap out;
  const Site sites[] = {Site::kQ, Site::kV};
  for (int l = 0; l < h.cfg.n_layers; ++l) {
    for (int si = 0; si < 2; ++si) {
      AdapterPathVars p;
      p.a = trunk_factor(hv, desc, l, si, 0, hv.head_a, h.rank, h.cfg.d_model);
      p.b = trunk_factor(hv, desc, l, si, 1, hv.head_b, h.cfg.d_model, h.rank);
      p.scale = 1.0;
      p.dropout = 0.0;
      out[{l, int(sites[si])}].push_back(p);
    }
  }
  return out;
}

AdapterSet generate_anchor(const Hypernet& h, const std::string& description,
                           const BackboneConfig& cfg) {
  if (cfg.n_layers != h.cfg.n_layers || cfg.d_model != h.cfg.d_model) {
    throw ConfigError("generate_anchor: backbone config (" +
                      std::to_string(cfg.n_layers) + " layers, d_model " +
                      std::to_string(cfg.d_model) +
                      ") does not match the hypernet's build config");
  }
  Tape tape;
  HypernetVars hv = bind_hypernet(tape, h);
  AdapterVarMap vars = generate_adapter_vars(tape, h, hv, description);
  AdapterSet set;
  set.variant = Variant::kAnchor;
  set.tag = "anchor";
  for (const auto& [key, paths] : vars) {
    LoraAdapter ad;
    ad.a = tape.value(paths[0].a);
    ad.b = tape.value(paths[0].b);
    ad.scale = 1.0;
    ad.dropout = 0.05;
    set.items[key] = std::move(ad);
  }
  return set;
}

AdapterSet stage1_anchor(const Hypernet& h, const std::string& description,
                         const Backbone& model) {
  AdapterSet set = generate_anchor(h, description, model.cfg);
  set.tag = "anchor:" + trimmed(description).substr(0, 24);
  return set;
}

PretrainMode pretrain_mode_from_name(const std::string& name) {
  if (name == "end2end") return PretrainMode::kEnd2End;
  if (name == "reconstruction") return PretrainMode::kReconstruction;
  throw ConfigError("unknown pretraining mode '" + name +
                    "' (expected end2end|reconstruction)");
}

const char* pretrain_mode_name(PretrainMode m) {
  return m == PretrainMode::kEnd2End ? "end2end" : "reconstruction";
}

void PretrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
  if (batch < 1) throw ConfigError("pretrain: batch must be >= 1");
  if (rank < 1) throw ConfigError("pretrain: rank must be >= 1");
  if (oracle_epochs < 1) throw ConfigError("pretrain: oracle_epochs must be >= 1");
}

namespace {

struct ScheduledBatch {
  int task = 0;
  std::vector<int> indices;
};

// Every epoch reshuffles each task's examples, chunks them into batches, and
// interleaves all tasks' batches in random order, so steps sample tasks
// without ever starving one.
std::vector<ScheduledBatch> epoch_schedule(const std::vector<PretrainTask>& tasks,
                                           int batch, Rng& rng) {
  std::vector<ScheduledBatch> out;
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    const Dataset& data = tasks[ti].train;
    std::vector<int> order(data.size());
    for (size_t i = 0; i < data.size(); ++i) order[i] = int(i);
    Rng task_rng = rng.split("task-order").split(uint64_t(ti));
    task_rng.shuffle(order);
    for (size_t at = 0; at < order.size(); at += size_t(batch)) {
      ScheduledBatch b;
      b.task = int(ti);
      size_t end = std::min(order.size(), at + size_t(batch));
      b.indices.assign(order.begin() + long(at), order.begin() + long(end));
      out.push_back(std::move(b));
    }
  }
  Rng sched = rng.split("schedule");
  sched.shuffle(out);
  return out;
}

Hypernet pretrain_end2end(const Backbone& model,
                          const std::vector<PretrainTask>& tasks,
                          const PretrainConfig& cfg, PretrainLog* log) {
  Hypernet h = build_hypernet(model.cfg, cfg.rank, Rng(cfg.seed).split("init"));
  Optimizer opt(OptimizerConfig{.kind = OptKind::kAdamW, .lr = cfg.lr});
  Rng run_rng = Rng(cfg.seed).split("pretrain");

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Cosine decay to zero: interleaving tasks means the shared trunk and
    // heads take conflicting steps every batch, and a constant adaptive rate
    // leaves an oscillation floor proportional to that rate.
    opt.set_lr(cfg.lr * 0.5 *
               (1.0 + std::cos(std::numbers::pi * double(epoch) / double(cfg.epochs))));
    Rng epoch_rng = run_rng.split(uint64_t(epoch));
    auto schedule = epoch_schedule(tasks, cfg.batch, epoch_rng);
    double epoch_loss = 0.0;
    for (const ScheduledBatch& sb : schedule) {
      const PretrainTask& task = tasks[size_t(sb.task)];
      Tape tape;
      ParamRegistry reg;
      BackboneVars bb = bind_backbone(tape, model);
      HypernetVars hv = bind_hypernet(tape, h, reg);
      AdapterVarMap av = generate_adapter_vars(tape, h, hv, task.description);

      std::optional<Var> weighted;
      long total_tokens = 0;
      std::vector<std::pair<Var, long>> parts;
      for (int idx : sb.indices) {
        const Example& ex = task.train[size_t(idx)];
        TokenSeq seq = encode_example(ex.input, ex.output);
        Var loss = lm_loss_graph(
            tape, forward_tokens(tape, model.cfg, bb, av, seq.ids, {}), seq);
        long toks = long(seq.ids.size()) - seq.prompt_len;
        parts.emplace_back(loss, toks);
        total_tokens += toks;
      }
      for (auto& [loss, toks] : parts) {
        Var scaled = scalar_mul(loss, double(toks) / double(total_tokens));
        weighted = weighted ? add(*weighted, scaled) : scaled;
      }
      GradMap grads = tape.backward(*weighted);
      opt.step(reg.items(), grads);
      double step_loss = tape.value(*weighted)(0, 0);
      epoch_loss += step_loss;
      if (log) log->step_losses.push_back(step_loss);
    }
    if (log && !schedule.empty()) {
      log->epoch_losses.push_back(epoch_loss / double(schedule.size()));
    }
  }
  return h;
}

Hypernet pretrain_reconstruction(const Backbone& model,
                                 const std::vector<PretrainTask>& tasks,
                                 const PretrainConfig& cfg, PretrainLog* log) {
  // One oracle per distinct description. Identical instructions name the
  // same underlying rule, so their rows pool into a single target; training
  // separate adapters and regressing one input onto both would average
  // factorizations that agree as functions but not as matrices.
  std::vector<std::string> descriptions;
  std::vector<std::string> tags;
  std::vector<Dataset> pooled;
  std::map<std::string, size_t> by_desc;
  for (const PretrainTask& t : tasks) {
    auto [it, inserted] = by_desc.try_emplace(t.description, pooled.size());
    if (inserted) {
      descriptions.push_back(t.description);
      tags.push_back(t.task_id);
      pooled.push_back(t.train);
    } else {
      Dataset& rows = pooled[it->second];
      rows.insert(rows.end(), t.train.begin(), t.train.end());
    }
  }

  // Oracle pass: directly train one full LoRA set per distinct description.
  std::vector<AdapterSet> oracles;
  oracles.reserve(pooled.size());
  for (size_t ti = 0; ti < pooled.size(); ++ti) {
    Rng init = Rng(cfg.seed).split("oracle-init").split(uint64_t(ti));
    AdapterSet set;
    set.variant = Variant::kFullLora;
    set.tag = tags[ti];
    for (int l = 0; l < model.cfg.n_layers; ++l) {
      for (Site s : {Site::kQ, Site::kV}) {
        LoraAdapter ad =
            init_lora(model.cfg.d_model, model.cfg.d_model, cfg.rank, init);
        ad.mask = {.a = true, .b = true, .c = false};
        set.put(l, s, ad);
      }
    }
    Rng order = Rng(cfg.seed).split("oracle-order").split(uint64_t(ti));
    train_adapters(model, set, {}, pooled[ti], cfg.oracle_epochs,
                   cfg.batch, cfg.oracle_lr, OptKind::kAdamW, order, false);
    oracles.push_back(std::move(set));
  }

  Hypernet h = build_hypernet(model.cfg, cfg.rank, Rng(cfg.seed).split("init"));
  fit_hypernet_to_sets(h, descriptions, oracles, cfg.epochs, cfg.lr, cfg.seed,
                       log);
  return h;
}

}  // namespace

void fit_hypernet_to_sets(Hypernet& h,
                          const std::vector<std::string>& descriptions,
                          const std::vector<AdapterSet>& targets, int epochs,
                          double lr, uint64_t seed, PretrainLog* log) {
  if (descriptions.size() != targets.size() || descriptions.empty()) {
    throw ConfigError("fit_hypernet_to_sets: need one target set per "
                      "description, at least one pair");
  }
  Optimizer opt(OptimizerConfig{.kind = OptKind::kAdamW, .lr = lr});
  Rng run_rng = Rng(seed).split("recon");
  for (int epoch = 0; epoch < epochs; ++epoch) {
    // One step per pair pulls the shared weights toward a different target
    // each time; decay the rate to zero so the oscillation floor vanishes.
    opt.set_lr(lr * 0.5 *
               (1.0 + std::cos(std::numbers::pi * double(epoch) / double(epochs))));
    std::vector<int> order(descriptions.size());
    for (size_t i = 0; i < descriptions.size(); ++i) order[i] = int(i);
    Rng epoch_rng = run_rng.split(uint64_t(epoch));
    epoch_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (int ti : order) {
      Tape tape;
      ParamRegistry reg;
      HypernetVars hv = bind_hypernet(tape, h, reg);
      AdapterVarMap av =
          generate_adapter_vars(tape, h, hv, descriptions[size_t(ti)]);
      std::optional<Var> total;
      long factors = 0;
      for (const auto& [key, paths] : av) {
        auto it = targets[size_t(ti)].items.find(key);
        if (it == targets[size_t(ti)].items.end()) {
          throw ConfigError("fit_hypernet_to_sets: target set lacks an "
                            "adapter the generator emits");
        }
        const LoraAdapter& target = it->second;
        for (const auto& [gen, tgt] :
             {std::pair<Var, const Mat*>{paths[0].a, &target.a},
              std::pair<Var, const Mat*>{paths[0].b, &target.b}}) {
          const Mat& gv = tape.value(gen);
          require_shape(*tgt, gv.rows(), gv.cols(),
                        "fit_hypernet_to_sets target factor");
          Var diff = sub(gen, tape.constant(*tgt));
          Var mse = scalar_mul(sum(hadamard(diff, diff)),
                               1.0 / double(tgt->size()));
          total = total ? add(*total, mse) : mse;
          ++factors;
        }
      }
      Var loss = scalar_mul(*total, 1.0 / double(factors));
      GradMap grads = tape.backward(loss);
      opt.step(reg.items(), grads);
      double step_loss = tape.value(loss)(0, 0);
      epoch_loss += step_loss;
      if (log) log->step_losses.push_back(step_loss);
    }
    if (log) {
      log->epoch_losses.push_back(epoch_loss / double(descriptions.size()));
    }
  }
}

Hypernet pretrain_hypernet(const Backbone& model,
                           const std::vector<PretrainTask>& tasks,
                           const PretrainConfig& cfg, PretrainLog* log) {
  cfg.validate();
  if (tasks.empty()) throw ConfigError("pretrain_hypernet: empty task list");
  for (const PretrainTask& t : tasks) {
    if (t.train.empty()) {
      throw ConfigError("pretrain_hypernet: task '" + t.task_id +
                        "' has no training examples");
    }
  }
  if (cfg.mode == PretrainMode::kEnd2End) {
    return pretrain_end2end(model, tasks, cfg, log);
  }
  return pretrain_reconstruction(model, tasks, cfg, log);
}

void save_hypernet(const std::filesystem::path& path, const Hypernet& h) {
  container::File f;
  f.kind = container::kKindHypernet;
  f.tag = "hypernet";
  auto rec = [&](Mat m) {
    container::Record r;
    r.layer = uint16_t(f.records.size());
    r.role = container::kRoleGeneric;
    r.payload = std::move(m);
    f.records.push_back(std::move(r));
  };
  Mat meta(1, 10);
  meta << h.cfg.n_layers, h.cfg.d_model, h.cfg.n_heads, h.cfg.d_ff,
      h.cfg.vocab_size, h.cfg.max_seq, h.rank, h.d_task, h.d_embed, h.d_hidden;
  rec(std::move(meta));
  rec(h.desc_proj);
  rec(h.e_layer);
  rec(h.e_site);
  rec(h.e_role);
  rec(h.w1);
  rec(h.w2);
  rec(h.head_a);
  rec(h.head_b);
  container::write_file(path, f);
}

Hypernet load_hypernet(const std::filesystem::path& path) {
  container::File f = container::read_file(path);
  if (f.kind != container::kKindHypernet) {
    throw CorruptionError("expected a hypernet checkpoint, found kind " +
                          std::to_string(f.kind));
  }
  if (f.records.size() != 9) {
    throw CorruptionError("hypernet checkpoint must have 9 records, found " +
                          std::to_string(f.records.size()));
  }
  const Mat& meta = f.records[0].payload;
  require_shape(meta, 1, 10, "hypernet meta record");
  Hypernet h;
  h.cfg = BackboneConfig{int(meta(0, 0)), int(meta(0, 1)), int(meta(0, 2)),
                         int(meta(0, 3)), int(meta(0, 4)), int(meta(0, 5))};
  h.rank = int(meta(0, 6));
  h.d_task = int(meta(0, 7));
  h.d_embed = int(meta(0, 8));
  h.d_hidden = int(meta(0, 9));
  h.desc_proj = f.records[1].payload;
  h.e_layer = f.records[2].payload;
  h.e_site = f.records[3].payload;
  h.e_role = f.records[4].payload;
  h.w1 = f.records[5].payload;
  h.w2 = f.records[6].payload;
  h.head_a = f.records[7].payload;
  h.head_b = f.records[8].payload;
  return h;
}

}  // namespace prisp
