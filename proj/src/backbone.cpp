#include "prisp/backbone.hpp"

#include <cmath>

namespace prisp {

void BackboneConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 ||
      vocab_size < 1 || max_seq < 1) {
    throw ConfigError("backbone config: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("backbone config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
}

long Backbone::param_count() const {
  long n = long(embedding.size()) + long(head.size()) + long(g_final.size());
  for (const BackboneLayer& l : layers) {
    n += long(l.w_q.size()) + long(l.w_k.size()) + long(l.w_v.size()) +
         long(l.w_o.size()) + long(l.w_ff1.size()) + long(l.w_ff2.size()) +
         long(l.g_attn.size()) + long(l.g_ffn.size());
  }
  return n;
}

Backbone build_backbone(const BackboneConfig& cfg, Rng rng) {
  cfg.validate();
  constexpr double kStd = 0.02;
  Backbone m;
  m.cfg = cfg;
  m.embedding = rng.normal_mat(cfg.vocab_size, cfg.d_model, kStd);
  m.layers.resize(size_t(cfg.n_layers));
  for (BackboneLayer& l : m.layers) {
    l.w_q = rng.normal_mat(cfg.d_model, cfg.d_model, kStd);
    l.w_k = rng.normal_mat(cfg.d_model, cfg.d_model, kStd);
    l.w_v = rng.normal_mat(cfg.d_model, cfg.d_model, kStd);
    l.w_o = rng.normal_mat(cfg.d_model, cfg.d_model, kStd);
    l.w_ff1 = rng.normal_mat(cfg.d_ff, cfg.d_model, kStd);
    l.w_ff2 = rng.normal_mat(cfg.d_model, cfg.d_ff, kStd);
    l.g_attn = Mat::Ones(1, cfg.d_model);
    l.g_ffn = Mat::Ones(1, cfg.d_model);
  }
  m.g_final = Mat::Ones(1, cfg.d_model);
  m.head = rng.normal_mat(cfg.vocab_size, cfg.d_model, kStd);
  return m;
}

// Sinusoidal position code scaled down to the embedding init std, so token
// content and position enter the residual stream at comparable amplitude
// (unit-amplitude sinusoids would outweigh std-0.02 embeddings ~200:1 and
// bury every content-dependent signal).
Mat positional_encoding(int max_seq, int d_model) {
  constexpr double kPosScale = 0.02;
  Mat pe(max_seq, d_model);
  for (int pos = 0; pos < max_seq; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      double freq = std::pow(10000.0, -double(i) / double(d_model));
      pe(pos, i) = kPosScale * std::sin(pos * freq);
      if (i + 1 < d_model) pe(pos, i + 1) = kPosScale * std::cos(pos * freq);
    }
  }
  return pe;
}

BackboneVars bind_backbone(Tape& tape, const Backbone& model) {
  BackboneVars v;
  v.embedding = tape.constant(model.embedding);
  for (const BackboneLayer& l : model.layers) {
    BackboneVars::LayerVars lv;
    lv.w_q = tape.constant(l.w_q);
    lv.w_k = tape.constant(l.w_k);
    lv.w_v = tape.constant(l.w_v);
    lv.w_o = tape.constant(l.w_o);
    lv.w_ff1 = tape.constant(l.w_ff1);
    lv.w_ff2 = tape.constant(l.w_ff2);
    lv.g_attn = tape.constant(l.g_attn);
    lv.g_ffn = tape.constant(l.g_ffn);
    v.layers.push_back(lv);
  }
  v.g_final = tape.constant(model.g_final);
  v.head = tape.constant(model.head);
  return v;
}

BackboneVars bind_backbone(Tape& tape, Backbone& model, ParamRegistry& reg) {
  bool train = !model.frozen;
  BackboneVars v;
  v.embedding = reg.bind(tape, model.embedding, "bb.embedding", train);
  for (size_t i = 0; i < model.layers.size(); ++i) {
    BackboneLayer& l = model.layers[i];
    std::string p = "bb.L" + std::to_string(i) + ".";
    BackboneVars::LayerVars lv;
    lv.w_q = reg.bind(tape, l.w_q, p + "w_q", train);
    lv.w_k = reg.bind(tape, l.w_k, p + "w_k", train);
    lv.w_v = reg.bind(tape, l.w_v, p + "w_v", train);
    lv.w_o = reg.bind(tape, l.w_o, p + "w_o", train);
    lv.w_ff1 = reg.bind(tape, l.w_ff1, p + "w_ff1", train);
    lv.w_ff2 = reg.bind(tape, l.w_ff2, p + "w_ff2", train);
    lv.g_attn = reg.bind(tape, l.g_attn, p + "g_attn", train);
    lv.g_ffn = reg.bind(tape, l.g_ffn, p + "g_ffn", train);
    v.layers.push_back(lv);
  }
  v.g_final = reg.bind(tape, model.g_final, "bb.g_final", train);
  v.head = reg.bind(tape, model.head, "bb.head", train);
  return v;
}

namespace {

template <class SetPtr, class BindFactor>
AdapterVarMap bind_adapter_impl(std::span<SetPtr const> sets,
                                BindFactor bind_factor) {
  AdapterVarMap out;
  for (size_t si = 0; si < sets.size(); ++si) {
    auto& set = *sets[si];
    for (auto& [key, ad] : set.items) {
      ad.validate();
      std::string prefix = "s" + std::to_string(si) + ".L" +
                           std::to_string(key.first) + "." +
                           site_name(Site(key.second)) + ".";
      AdapterPathVars p;
      p.a = bind_factor(ad.a, prefix + "a", ad.mask.a);
      p.b = bind_factor(ad.b, prefix + "b", ad.mask.b);
      if (ad.c) p.c = bind_factor(*ad.c, prefix + "c", ad.mask.c);
      p.scale = ad.scale;
      p.dropout = ad.dropout;
      out[key].push_back(p);
    }
  }
  return out;
}

}  // namespace

AdapterVarMap bind_adapters(Tape& tape,
                            std::span<const AdapterSet* const> sets) {
  return bind_adapter_impl<const AdapterSet*>(
      sets, [&](const Mat& m, const std::string&, bool) {
        return tape.constant(m);
      });
}

AdapterVarMap bind_adapters(Tape& tape, std::span<AdapterSet* const> sets,
                            ParamRegistry& reg) {
  return bind_adapter_impl<AdapterSet*>(
      sets, [&](Mat& m, const std::string& key, bool trainable) {
        return reg.bind(tape, m, key, trainable);
      });
}

namespace {

// Base projection x W^T plus every attached low-rank path, kept additive so
// zero-delta adapters reproduce the base output bitwise and an identity
// bridge reproduces its anchor bitwise.
Var project(Tape&, Var x, Var w, const AdapterVarMap& adapters, int layer,
            Site site, const ForwardOptions& opts) {
  Var y = matmul(x, transpose(w));
  auto it = adapters.find({layer, int(site)});
  if (it == adapters.end()) return y;
  for (const AdapterPathVars& p : it->second) {
    Var xin = x;
    if (opts.train && p.dropout > 0.0) {
      if (opts.rng == nullptr) {
        throw ConfigError("forward: adapter dropout requires an rng in train mode");
      }
      xin = dropout(x, p.dropout, *opts.rng);
    }
    Var t = matmul(xin, transpose(p.a));
    if (p.c) t = matmul(t, transpose(*p.c));
    t = matmul(t, transpose(p.b));
    if (p.scale != 1.0) t = scalar_mul(t, p.scale);
    y = add(y, t);
  }
  return y;
}

}  // namespace

Var forward_tokens(Tape& tape, const BackboneConfig& cfg,
                   const BackboneVars& bb, const AdapterVarMap& adapters,
                   const std::vector<int>& ids, const ForwardOptions& opts) {
  int T = int(ids.size());
  if (T == 0) throw ConfigError("forward: empty token sequence");
  if (T > cfg.max_seq) {
    throw ConfigError("forward: sequence length " + std::to_string(T) +
                      " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  for (int id : ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw ConfigError("forward: token id " + std::to_string(id) +
                        " out of range for vocab " +
                        std::to_string(cfg.vocab_size));
    }
  }

  Var pos = tape.constant(positional_encoding(cfg.max_seq, cfg.d_model)
                              .topRows(T));
  Var x = add(take_rows(bb.embedding, ids), pos);  // x: T x d_model

  int dh = cfg.d_head();
  double att_scale = 1.0 / std::sqrt(double(dh));
  for (int li = 0; li < cfg.n_layers; ++li) {
    const BackboneVars::LayerVars& l = bb.layers[size_t(li)];
    Var xn = row_scale(rmsnorm(x), l.g_attn);
    Var q = project(tape, xn, l.w_q, adapters, li, Site::kQ, opts);
    Var k = project(tape, xn, l.w_k, adapters, li, Site::kK, opts);
    Var v = project(tape, xn, l.w_v, adapters, li, Site::kV, opts);
    std::vector<Var> heads;
    heads.reserve(size_t(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      Var qh = slice_cols(q, h * dh, dh);
      Var kh = slice_cols(k, h * dh, dh);
      Var vh = slice_cols(v, h * dh, dh);
      Var scores = scalar_mul(matmul(qh, transpose(kh)), att_scale);
      Var probs = causal_softmax(scores);
      heads.push_back(matmul(probs, vh));
    }
    Var ctx = concat_cols(heads);
    Var att = project(tape, ctx, l.w_o, adapters, li, Site::kO, opts);
    x = add(x, att);

    Var xf = row_scale(rmsnorm(x), l.g_ffn);
    Var hidden = gelu(matmul(xf, transpose(l.w_ff1)));
    x = add(x, matmul(hidden, transpose(l.w_ff2)));
  }
  Var xo = row_scale(rmsnorm(x), bb.g_final);
  return matmul(xo, transpose(bb.head));  // T x vocab
}

Var forward(Tape& tape, const Backbone& model,
            std::span<const AdapterSet* const> sets, const TokenSeq& seq,
            const ForwardOptions& opts) {
  BackboneVars bb = bind_backbone(tape, model);
  AdapterVarMap av = bind_adapters(tape, sets);
  return forward_tokens(tape, model.cfg, bb, av, seq.ids, opts);
}

Mat forward_logits(const Backbone& model,
                   std::span<const AdapterSet* const> sets,
                   const TokenSeq& seq) {
  Tape tape;
  Var logits = forward(tape, model, sets, seq);
  return tape.value(logits);
}

Var lm_loss_graph(Tape& tape, Var logits, const TokenSeq& seq) {
  int T = int(seq.ids.size());
  const Mat& lg = tape.value(logits);
  if (lg.rows() != T) {
    throw ShapeError("lm_loss: logits rows " + std::to_string(lg.rows()) +
                     " != sequence length " + std::to_string(T));
  }
  if (seq.prompt_len < 1 || seq.prompt_len > T) {
    throw ConfigError("lm_loss: prompt_len " + std::to_string(seq.prompt_len) +
                      " out of range");
  }
  // Row i predicts token i+1; completion tokens sit at ids[prompt_len..T-1].
  std::vector<int> targets(size_t(T), 0);
  std::vector<uint8_t> active(size_t(T), 0);
  int n_active = 0;
  for (int i = 0; i + 1 < T; ++i) {
    targets[size_t(i)] = seq.ids[size_t(i + 1)];
    if (i + 1 >= seq.prompt_len) {
      active[size_t(i)] = 1;
      ++n_active;
    }
  }
  if (n_active == 0) {
    throw ConfigError("lm_loss: sequence has no completion tokens");
  }
  return softmax_xent_masked(logits, targets, active);
}

double lm_loss(const Backbone& model, std::span<const AdapterSet* const> sets,
               const TokenSeq& seq) {
  Tape tape;
  Var logits = forward(tape, model, sets, seq);
  Var loss = lm_loss_graph(tape, logits, seq);
  return tape.value(loss)(0, 0);
}

TokenSeq generate(const Backbone& model,
                  std::span<const AdapterSet* const> sets,
                  const TokenSeq& prompt, int max_new) {
  if (prompt.ids.empty()) throw ConfigError("generate: empty prompt");
  TokenSeq out;
  out.ids = prompt.ids;
  out.prompt_len = int(prompt.ids.size());
  for (int step = 0; step < max_new; ++step) {
    if (int(out.ids.size()) >= model.cfg.max_seq) break;
    Mat logits = forward_logits(model, sets, out);
    const auto last = logits.row(logits.rows() - 1);
    int best = 0;
    for (int j = 1; j < model.cfg.vocab_size; ++j) {
      if (last(j) > last(best)) best = j;  // strict: ties keep the lowest id
    }
    out.ids.push_back(best);
    if (best == tok::kEos) break;
  }
  return out;
}

Mat effective_weight(const Backbone& model,
                     std::span<const AdapterSet* const> sets, int layer,
                     Site site) {
  if (layer < 0 || layer >= model.cfg.n_layers) {
    throw ConfigError("effective_weight: layer out of range");
  }
  const BackboneLayer& l = model.layers[size_t(layer)];
  Mat w = site == Site::kQ   ? l.w_q
          : site == Site::kK ? l.w_k
          : site == Site::kV ? l.w_v
                             : l.w_o;
  for (const AdapterSet* set : sets) {
    const LoraAdapter* ad = set->find(layer, site);
    if (ad != nullptr) w += ad->scale * lora_delta(*ad);
  }
  return w;
}

void save_backbone(const std::filesystem::path& path, const Backbone& model) {
  container::File f;
  f.kind = container::kKindBackbone;
  f.tag = "backbone";
  auto rec = [&](Mat m) {
    container::Record r;
    r.layer = uint16_t(f.records.size());
    r.role = container::kRoleGeneric;
    r.payload = std::move(m);
    f.records.push_back(std::move(r));
  };
  Mat cfg(1, 6);
  cfg << model.cfg.n_layers, model.cfg.d_model, model.cfg.n_heads,
      model.cfg.d_ff, model.cfg.vocab_size, model.cfg.max_seq;
  rec(std::move(cfg));
  rec(model.embedding);
  for (const BackboneLayer& l : model.layers) {
    rec(l.w_q);
    rec(l.w_k);
    rec(l.w_v);
    rec(l.w_o);
    rec(l.w_ff1);
    rec(l.w_ff2);
    rec(l.g_attn);
    rec(l.g_ffn);
  }
  rec(model.g_final);
  rec(model.head);
  container::write_file(path, f);
}

Backbone load_backbone(const std::filesystem::path& path) {
  container::File f = container::read_file(path);
  if (f.kind != container::kKindBackbone) {
    throw CorruptionError("expected a backbone checkpoint, found kind " +
                          std::to_string(f.kind));
  }
  size_t at = 0;
  auto next = [&]() -> const Mat& {
    if (at >= f.records.size()) {
      throw CorruptionError("backbone checkpoint ends early at record " +
                            std::to_string(at));
    }
    return f.records[at++].payload;
  };
  const Mat& c = next();
  require_shape(c, 1, 6, "backbone config record");
  Backbone m;
  m.cfg = BackboneConfig{int(c(0, 0)), int(c(0, 1)), int(c(0, 2)),
                         int(c(0, 3)), int(c(0, 4)), int(c(0, 5))};
  m.cfg.validate();
  m.embedding = next();
  m.layers.resize(size_t(m.cfg.n_layers));
  for (BackboneLayer& l : m.layers) {
    l.w_q = next();
    l.w_k = next();
    l.w_v = next();
    l.w_o = next();
    l.w_ff1 = next();
    l.w_ff2 = next();
    l.g_attn = next();
    l.g_ffn = next();
  }
  m.g_final = next();
  m.head = next();
  if (at != f.records.size()) {
    throw CorruptionError("backbone checkpoint has extra records");
  }
  return m;
}

}  // namespace prisp
