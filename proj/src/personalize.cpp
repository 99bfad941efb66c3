#include "prisp/personalize.hpp"

#include <algorithm>
#include <cmath>

namespace prisp {

void PersonalizeConfig::validate() const {
  if (shots < 1) throw ConfigError("personalize: shots must be >= 1");
  if (epochs < 0) throw ConfigError("personalize: epochs must be >= 0");
  if (batch < 1) throw ConfigError("personalize: batch must be >= 1");
  if (rank < 1) throw ConfigError("personalize: rank must be >= 1");
}

namespace {

void merge_adapter_vars(AdapterVarMap& into, const AdapterVarMap& from) {
  for (const auto& [key, paths] : from) {
    auto& dst = into[key];
    dst.insert(dst.end(), paths.begin(), paths.end());
  }
}

// Mean gradient norms over this set's bound B (and C) factors for one step.
void record_trace(GradTrace& trace, const ParamRegistry& reg,
                  const GradMap& grads) {
  double b_sum = 0.0, c_sum = 0.0;
  int b_n = 0, c_n = 0;
  for (const ParamBinding& pb : reg.items()) {
    if (pb.key.ends_with(".b")) {
      b_sum += grads.at(pb.node).norm();
      ++b_n;
    } else if (pb.key.ends_with(".c")) {
      c_sum += grads.at(pb.node).norm();
      ++c_n;
    }
  }
  trace.b_norms.push_back(b_n > 0 ? b_sum / b_n : 0.0);
  if (c_n > 0) trace.c_norms.push_back(c_sum / c_n);
}

}  // namespace

TrainRunInfo train_adapters(const Backbone& model, AdapterSet& set,
                            std::span<const AdapterSet* const> frozen_extra,
                            const Dataset& data, int epochs, int batch,
                            double lr, OptKind opt_kind, Rng order_rng,
                            bool use_dropout) {
  if (data.empty()) throw ConfigError("train_adapters: empty dataset");
  if (batch < 1) throw ConfigError("train_adapters: batch must be >= 1");
  if (epochs < 0) throw ConfigError("train_adapters: epochs must be >= 0");

  TrainRunInfo info;
  Optimizer opt(OptimizerConfig{.kind = opt_kind, .lr = lr});
  const int n = int(data.size());

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng epoch_rng = order_rng.split(uint64_t(epoch));
    epoch_rng.shuffle(order);
    Rng dropout_rng = epoch_rng.split("dropout");

    for (int at = 0; at < n; at += batch) {
      int bsz = std::min(batch, n - at);
      Tape tape;
      ParamRegistry reg;
      BackboneVars bb = bind_backbone(tape, model);
      AdapterVarMap av = bind_adapters(tape, frozen_extra);
      AdapterSet* set_ptr[] = {&set};
      merge_adapter_vars(av, bind_adapters(tape, set_ptr, reg));

      ForwardOptions fwd;
      fwd.train = use_dropout;
      fwd.rng = &dropout_rng;

      // Token-mean across the whole batch: weight each example's mean loss by
      // its completion-token count.
      std::optional<Var> weighted;
      long total_tokens = 0;
      std::vector<std::pair<Var, long>> parts;
      for (int bi = 0; bi < bsz; ++bi) {
        const Example& ex = data[size_t(order[size_t(at + bi)])];
        TokenSeq seq = encode_example(ex.input, ex.output);
        Var logits = forward_tokens(tape, model.cfg, bb, av, seq.ids, fwd);
        Var loss = lm_loss_graph(tape, logits, seq);
        long toks = long(seq.ids.size()) - seq.prompt_len;
        parts.emplace_back(loss, toks);
        total_tokens += toks;
      }
      for (auto& [loss, toks] : parts) {
        Var scaled = scalar_mul(loss, double(toks) / double(total_tokens));
        weighted = weighted ? add(*weighted, scaled) : scaled;
      }

      GradMap grads = tape.backward(*weighted);
      record_trace(info.trace, reg, grads);
      info.step_losses.push_back(tape.value(*weighted)(0, 0));
      opt.step(reg.items(), grads);
    }
  }
  info.steps = opt.step_count();
  return info;
}

AdapterSet refine_anchor(const Backbone& model, const AdapterSet& anchor,
                         const Dataset& task_data,
                         const PersonalizeConfig& cfg) {
  cfg.validate();
  if (task_data.empty()) throw ConfigError("refine_anchor: empty dataset");
  AdapterSet work = bridge_variant(anchor, Variant::kFullLora);
  Rng order = Rng(cfg.shuffle_seed).split("refine").split(anchor.tag);
  train_adapters(model, work, {}, task_data, cfg.epochs, cfg.batch, cfg.lr,
                 cfg.opt, order, cfg.use_dropout);
  AdapterSet refined = std::move(work);
  refined.variant = Variant::kAnchor;
  for (auto& [key, ad] : refined.items) ad.mask = {};
  return refined;
}

PersonalizeResult personalize_user(const Backbone& model,
                                   const AdapterSet& anchor,
                                   const UserHistory& history,
                                   const PersonalizeConfig& cfg) {
  cfg.validate();
  if (history.items.empty()) {
    throw ConfigError("personalize_user: empty history for user '" +
                      history.user_id + "'");
  }
  PersonalizeResult res;
  res.shot_shortfall = int(history.items.size()) < cfg.shots;
  int shots = std::min<int>(cfg.shots, int(history.items.size()));
  Dataset recent(history.items.end() - shots, history.items.end());

  res.set = bridge_variant(anchor, cfg.variant);
  res.set.tag = history.user_id;
  Rng order = Rng(cfg.shuffle_seed).split("stage2").split(history.user_id);
  TrainRunInfo info =
      train_adapters(model, res.set, {}, recent, cfg.epochs, cfg.batch, cfg.lr,
                     cfg.opt, order, cfg.use_dropout);
  res.trace = std::move(info.trace);
  res.steps = info.steps;
  res.step_losses = std::move(info.step_losses);
  return res;
}

PersonalizeResult oppu_baseline(const Backbone& model,
                                const UserHistory& history,
                                const PersonalizeConfig& cfg,
                                const AdapterSet* task_base) {
  cfg.validate();
  if (history.items.empty()) {
    throw ConfigError("oppu_baseline: empty history for user '" +
                      history.user_id + "'");
  }
  PersonalizeResult res;
  res.shot_shortfall = int(history.items.size()) < cfg.shots;
  int shots = std::min<int>(cfg.shots, int(history.items.size()));
  Dataset recent(history.items.end() - shots, history.items.end());

  Rng init = Rng(cfg.shuffle_seed).split("oppu-init").split(history.user_id);
  res.set.variant = Variant::kFresh;
  res.set.tag = history.user_id;
  for (int l = 0; l < model.cfg.n_layers; ++l) {
    for (Site s : {Site::kQ, Site::kV}) {
      LoraAdapter ad = init_lora(model.cfg.d_model, model.cfg.d_model,
                                 cfg.rank, init);
      ad.mask = {.a = true, .b = true, .c = false};
      res.set.put(l, s, ad);
    }
  }

  std::vector<const AdapterSet*> frozen;
  if (task_base != nullptr) frozen.push_back(task_base);
  Rng order = Rng(cfg.shuffle_seed).split("oppu").split(history.user_id);
  TrainRunInfo info =
      train_adapters(model, res.set, frozen, recent, cfg.epochs, cfg.batch,
                     cfg.lr, cfg.opt, order, cfg.use_dropout);
  res.trace = std::move(info.trace);
  res.steps = info.steps;
  res.step_losses = std::move(info.step_losses);
  return res;
}

GradComparison grad_norm_compare(const Backbone& model,
                                 const AdapterSet& anchor,
                                 const UserHistory& history,
                                 PersonalizeConfig cfg) {
  cfg.batch = 1;  // the comparison protocol fixes batch size 1
  GradComparison out;
  cfg.variant = Variant::kBridged;
  out.bridged = personalize_user(model, anchor, history, cfg).trace;
  cfg.variant = Variant::kNoBridge;
  out.nobridge = personalize_user(model, anchor, history, cfg).trace;
  if (out.bridged.b_norms.size() != out.nobridge.b_norms.size()) {
    throw Error("grad_norm_compare: trace length mismatch (" +
                std::to_string(out.bridged.b_norms.size()) + " vs " +
                std::to_string(out.nobridge.b_norms.size()) + ")");
  }
  double ratio_sum = 0.0;
  int n = 0;
  for (size_t i = 0; i < out.bridged.b_norms.size(); ++i) {
    double denom = out.nobridge.b_norms[i];
    if (denom > 0.0) {
      ratio_sum += out.bridged.b_norms[i] / denom;
      ++n;
    }
  }
  out.mean_ratio = n > 0 ? ratio_sum / n : 0.0;
  return out;
}

}  // namespace prisp
