#pragma once

#include "prisp/backbone.hpp"
#include "prisp/data.hpp"

#include <optional>
#include <span>

namespace prisp {

// Per-step gradient-norm instrumentation: mean over attached adapters of the
// L2 norm of d(loss)/dB, and of d(loss)/dC when a bridge factor exists.
struct GradTrace {
  std::vector<double> b_norms;
  std::vector<double> c_norms;  // empty when no adapter carries a bridge
};

struct PersonalizeConfig {
  Variant variant = Variant::kBridged;
  int epochs = 1;
  int batch = 16;
  double lr = 1e-4;
  int shots = 10;
  uint64_t shuffle_seed = 0;
  int rank = 8;             // fresh-adapter rank (baselines without an anchor)
  bool use_dropout = false; // adapter-path dropout during training steps
  OptKind opt = OptKind::kAdamW;

  void validate() const;
};

// Generic masked adapter training: epochs x ceil(|data|/batch) AdamW/SGD steps
// with per-epoch seeded shuffling. `frozen_extra` sets ride along unchanged
// (e.g. a task anchor underneath a fresh user adapter). Batch loss is the
// token-mean over every completion token in the batch.
struct TrainRunInfo {
  long steps = 0;
  std::vector<double> step_losses;
  GradTrace trace;
};

TrainRunInfo train_adapters(const Backbone& model, AdapterSet& set,
                            std::span<const AdapterSet* const> frozen_extra,
                            const Dataset& data, int epochs, int batch,
                            double lr, OptKind opt, Rng order_rng,
                            bool use_dropout);

// Result of one user-level run.
struct PersonalizeResult {
  AdapterSet set;
  GradTrace trace;
  long steps = 0;
  std::vector<double> step_losses;
  bool shot_shortfall = false;  // history was shorter than requested shots
};

// Task-level anchor from the hypernetwork, tagged for provenance. Declared
// here, defined with the hypernet (it is a thin wrapper over generation).
struct Hypernet;
AdapterSet stage1_anchor(const Hypernet& h, const std::string& description,
                         const Backbone& model);

// Full-data refinement: trains the anchor's raw (A, B) on task-level data and
// returns the result re-tagged as an anchor.
AdapterSet refine_anchor(const Backbone& model, const AdapterSet& anchor,
                         const Dataset& task_data, const PersonalizeConfig& cfg);

// Stage 2: re-parameterize the anchor per cfg.variant, train on the user's
// most recent cfg.shots items. A is bitwise frozen for bridged/bridge-only.
PersonalizeResult personalize_user(const Backbone& model,
                                   const AdapterSet& anchor,
                                   const UserHistory& history,
                                   const PersonalizeConfig& cfg);

// Fresh independent per-user LoRA (a Gaussian, b zero, both trainable) on the
// same shots/epochs/lr schedule. `task_base` optionally rides underneath as a
// frozen task adapter.
PersonalizeResult oppu_baseline(const Backbone& model,
                                const UserHistory& history,
                                const PersonalizeConfig& cfg,
                                const AdapterSet* task_base = nullptr);

// Paired bridged-vs-no-bridge runs at batch size 1 with identical seeds;
// reports aligned B-gradient traces and their mean norm ratio.
struct GradComparison {
  GradTrace bridged;
  GradTrace nobridge;
  double mean_ratio = 0.0;  // mean over steps of bridged/nobridge B norms
};

GradComparison grad_norm_compare(const Backbone& model,
                                 const AdapterSet& anchor,
                                 const UserHistory& history,
                                 PersonalizeConfig cfg);

}  // namespace prisp
