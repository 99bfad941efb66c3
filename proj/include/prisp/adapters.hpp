#pragma once

#include "prisp/matrix.hpp"
#include "prisp/rng.hpp"

#include <map>
#include <optional>
#include <string>

namespace prisp {

// Projection sites a low-rank update can attach to.
enum class Site : uint8_t { kQ = 0, kK = 1, kV = 2, kO = 3 };

const char* site_name(Site s);
Site site_from_u8(uint8_t v);

// Which factors a training step may touch. Everything else stays frozen.
struct TrainMask {
  bool a = false;
  bool b = false;
  bool c = false;
};

// Low-rank update delta = b * a, or b * c * a when the square bridge factor is
// present. b is d_out x r, a is r x d_in, c is r x r.
struct LoraAdapter {
  Mat a;
  Mat b;
  std::optional<Mat> c;
  TrainMask mask;
  double scale = 1.0;
  double dropout = 0.0;

  int rank() const { return int(a.rows()); }
  long trainable_count() const;
  long total_count() const;
  void validate() const;
};

// Full-rank view of the update, evaluated right to left: b * (c * a).
Mat lora_delta(const LoraAdapter& ad);

// How a set of adapters is parameterized for training.
enum class Variant : uint8_t {
  kAnchor = 0,      // frozen task adapter, nothing trains
  kFullLora = 1,    // a and b train, no bridge
  kNoBridge = 2,    // only b trains
  kBridgeOnly = 3,  // only the bridge c trains
  kBridged = 4,     // b and c train, a frozen
  kFresh = 5,       // freshly initialized a and b train (no anchor warm start)
};

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);
Variant variant_from_u8(uint8_t v);

// Adapters for one model, keyed by (layer, site).
struct AdapterSet {
  Variant variant = Variant::kAnchor;
  std::string tag;  // provenance label (task id, user id, ...)
  std::map<std::pair<int, int>, LoraAdapter> items;

  LoraAdapter* find(int layer, Site site);
  const LoraAdapter* find(int layer, Site site) const;
  void put(int layer, Site site, LoraAdapter ad);
  long trainable_param_count() const;
  long total_param_count() const;
};

// a ~ N(0, 1/r) (stddev 1/sqrt(r)), b = 0, so the initial delta is exactly
// zero and attaching an untrained adapter cannot move the model.
LoraAdapter init_lora(int d_in, int d_out, int rank, Rng& rng);

// Re-parameterizes a frozen anchor for personalization. The bridge starts at
// identity, which leaves the effective update bitwise equal to the anchor's
// until the first optimizer step.
AdapterSet bridge_variant(const AdapterSet& anchor, Variant v);

// Count of entries an optimizer would update for one adapter under a variant,
// given factor shapes; closed forms used by cost reporting.
long variant_trainable_count(Variant v, int d_in, int d_out, int rank);

}  // namespace prisp
