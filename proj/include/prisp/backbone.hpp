#pragma once

#include "prisp/adapters.hpp"
#include "prisp/container.hpp"
#include "prisp/matrix.hpp"
#include "prisp/optim.hpp"
#include "prisp/rng.hpp"
#include "prisp/tape.hpp"
#include "prisp/tokenizer.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace prisp {

struct BackboneConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = 64;
  int max_seq = 64;

  void validate() const;
  int d_head() const { return d_model / n_heads; }
};

// Decoder-only transformer, pre-norm RMSNorm with learned gains, sinusoidal
// positions, no biases, untied output head. The four per-layer projections are
// the attachment sites for low-rank adapters.
struct BackboneLayer {
  Mat w_q, w_k, w_v, w_o;  // d_model x d_model, applied as x * W^T
  Mat w_ff1;               // d_ff x d_model
  Mat w_ff2;               // d_model x d_ff
  Mat g_attn, g_ffn;       // 1 x d_model norm gains
};

struct Backbone {
  BackboneConfig cfg;
  Mat embedding;  // vocab x d_model
  std::vector<BackboneLayer> layers;
  Mat g_final;  // 1 x d_model
  Mat head;     // vocab x d_model
  bool frozen = true;

  long param_count() const;
};

// All weights scaled-normal with std 0.02; deterministic in the seed.
Backbone build_backbone(const BackboneConfig& cfg, Rng rng);

// Sinusoidal position table, max_seq x d_model.
Mat positional_encoding(int max_seq, int d_model);

// ---- graph construction ---------------------------------------------------
//
// Forward passes are assembled from pre-bound tape variables so the same core
// serves three callers: evaluation (everything constant), adapter training
// (adapter factors are masked params), and hypernet pretraining (adapter
// factors are interior nodes computed from the hypernet itself).

struct BackboneVars {
  struct LayerVars {
    Var w_q, w_k, w_v, w_o, w_ff1, w_ff2, g_attn, g_ffn;
  };
  Var embedding;
  std::vector<LayerVars> layers;
  Var g_final, head;
};

// One additive low-rank path at a site: contribution = drop(x)A^T (C^T) B^T.
struct AdapterPathVars {
  Var a;
  std::optional<Var> c;
  Var b;
  double scale = 1.0;
  double dropout = 0.0;
};

// (layer, site) -> stacked paths; several sets may attach at one site (e.g. a
// frozen task adapter plus a trainable user adapter).
using AdapterVarMap = std::map<std::pair<int, int>, std::vector<AdapterPathVars>>;

struct ForwardOptions {
  bool train = false;   // enables adapter-path dropout
  Rng* rng = nullptr;   // required when train and any adapter has dropout > 0
};

BackboneVars bind_backbone(Tape& tape, const Backbone& model);
BackboneVars bind_backbone(Tape& tape, Backbone& model, ParamRegistry& reg);

AdapterVarMap bind_adapters(Tape& tape,
                            std::span<const AdapterSet* const> sets);
// Trainable binding: factors inside each set's mask become optimizer-visible
// params (registry keys "s<i>.L<layer>.<site>.<factor>"); the rest constants.
AdapterVarMap bind_adapters(Tape& tape, std::span<AdapterSet* const> sets,
                            ParamRegistry& reg);

Var forward_tokens(Tape& tape, const BackboneConfig& cfg,
                   const BackboneVars& bb, const AdapterVarMap& adapters,
                   const std::vector<int>& ids, const ForwardOptions& opts);

// ---- convenience entry points ----------------------------------------------

// Pure evaluation forward: logits per position, (T x vocab).
Var forward(Tape& tape, const Backbone& model,
            std::span<const AdapterSet* const> sets, const TokenSeq& seq,
            const ForwardOptions& opts = {});
Mat forward_logits(const Backbone& model,
                   std::span<const AdapterSet* const> sets,
                   const TokenSeq& seq);

// Mean cross-entropy over completion positions (ids at index >= prompt_len),
// each predicted from the logits row just before it.
Var lm_loss_graph(Tape& tape, Var logits, const TokenSeq& seq);
double lm_loss(const Backbone& model, std::span<const AdapterSet* const> sets,
               const TokenSeq& seq);

// Greedy decoding; ties take the lowest token id; stops at EOS or max_new.
// Returns prompt + continuation with prompt_len marking the boundary.
TokenSeq generate(const Backbone& model,
                  std::span<const AdapterSet* const> sets,
                  const TokenSeq& prompt, int max_new);

// W + sum of attached deltas at one site (dropout ignored: evaluation view).
Mat effective_weight(const Backbone& model,
                     std::span<const AdapterSet* const> sets, int layer,
                     Site site);

void save_backbone(const std::filesystem::path& path, const Backbone& model);
Backbone load_backbone(const std::filesystem::path& path);

// Span helpers: wrap zero/one/two sets for the common call shapes.
inline std::vector<const AdapterSet*> set_list() { return {}; }
inline std::vector<const AdapterSet*> set_list(const AdapterSet& a) {
  return {&a};
}
inline std::vector<const AdapterSet*> set_list(const AdapterSet& a,
                                               const AdapterSet& b) {
  return {&a, &b};
}

}  // namespace prisp
