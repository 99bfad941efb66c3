#pragma once

#include "prisp/backbone.hpp"
#include "prisp/data.hpp"
#include "prisp/personalize.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace prisp {

// Deterministic task-description embedding: signed hashed bag of character
// 3-grams over '^' + text + '$', L2-normalized (zero stays zero). 1 x d_task.
Mat embed_description(const std::string& text, int d_task = 128);

// Description-conditioned adapter generator. One trunk pass per
// (layer, site, role) emits that factor's flattened values. The B-side output
// head starts at zero, so every delta an untrained hypernet generates is
// exactly zero and attaching its anchors cannot move the model.
struct Hypernet {
  BackboneConfig cfg;  // backbone this net was built against
  int rank = 8;
  int d_task = 128;
  int d_embed = 64;
  int d_hidden = 256;

  Mat desc_proj;  // d_embed x d_task
  Mat e_layer;    // n_layers x d_embed
  Mat e_site;     // 2 x d_embed  (q_proj, v_proj)
  Mat e_role;     // 2 x d_embed  (a, b)
  Mat w1;         // d_hidden x 4*d_embed
  Mat w2;         // d_hidden x d_hidden
  Mat head_a;     // (rank * d_model) x d_hidden
  Mat head_b;     // (d_model * rank) x d_hidden

  long param_count() const;
};

Hypernet build_hypernet(const BackboneConfig& cfg, int rank, Rng rng);

struct HypernetVars {
  Var desc_proj, e_layer, e_site, e_role, w1, w2, head_a, head_b;
};

HypernetVars bind_hypernet(Tape& tape, const Hypernet& h);
HypernetVars bind_hypernet(Tape& tape, Hypernet& h, ParamRegistry& reg);

// Builds the generated factors as graph nodes — the path hypernet pretraining
// differentiates through. Factors appear for every (layer, site in {q, v}).
AdapterVarMap generate_adapter_vars(Tape& tape, const Hypernet& h,
                                    const HypernetVars& hv,
                                    const std::string& description);

// Pure generation: same (weights, description) always yields bitwise-identical
// sets. Throws on blank descriptions or a backbone-config mismatch.
AdapterSet generate_anchor(const Hypernet& h, const std::string& description,
                           const BackboneConfig& cfg);

enum class PretrainMode { kEnd2End, kReconstruction };
PretrainMode pretrain_mode_from_name(const std::string& name);
const char* pretrain_mode_name(PretrainMode m);

struct PretrainTask {
  std::string task_id;
  std::string description;
  Dataset train;
  Dataset val;
};

struct PretrainConfig {
  PretrainMode mode = PretrainMode::kEnd2End;
  int epochs = 30;
  int batch = 16;
  double lr = 1e-3;
  int rank = 8;
  uint64_t seed = 0;
  // Reconstruction mode: budget for the per-task oracle adapters.
  int oracle_epochs = 20;
  double oracle_lr = 1e-3;

  void validate() const;
};

struct PretrainLog {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;  // mean step loss per epoch
};

// Multi-task pretraining of the generator. The backbone stays frozen
// throughout (bitwise). end2end: every step samples one task's batch,
// regenerates the task's adapters on the tape and backpropagates the LM loss
// into the generator. reconstruction: trains per-task oracle adapters first,
// then regresses generated factors onto them under mean-squared error.
Hypernet pretrain_hypernet(const Backbone& model,
                           const std::vector<PretrainTask>& tasks,
                           const PretrainConfig& cfg, PretrainLog* log = nullptr);

// Regression phase of reconstruction pretraining, usable with targets from
// any source: per epoch, visits (description, target) pairs in shuffled order
// and takes one step on the mean-squared error between generated and target
// factors. Target sets must cover every (layer, q/v) key at matching shapes.
void fit_hypernet_to_sets(Hypernet& h,
                          const std::vector<std::string>& descriptions,
                          const std::vector<AdapterSet>& targets, int epochs,
                          double lr, uint64_t seed, PretrainLog* log = nullptr);

void save_hypernet(const std::filesystem::path& path, const Hypernet& h);
Hypernet load_hypernet(const std::filesystem::path& path);

}  // namespace prisp
