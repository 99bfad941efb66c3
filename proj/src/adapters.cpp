#include "prisp/adapters.hpp"

namespace prisp {

const char* site_name(Site s) {
  switch (s) {
    case Site::kQ: return "q_proj";
    case Site::kK: return "k_proj";
    case Site::kV: return "v_proj";
    case Site::kO: return "o_proj";
  }
  throw ConfigError("site_name: bad site");
}

Site site_from_u8(uint8_t v) {
  if (v > 3) throw ConfigError("site: byte " + std::to_string(v) + " out of range");
  return Site(v);
}

long LoraAdapter::trainable_count() const {
  long n = 0;
  if (mask.a) n += long(a.size());
  if (mask.b) n += long(b.size());
  if (mask.c && c.has_value()) n += long(c->size());
  return n;
}

long LoraAdapter::total_count() const {
  return long(a.size()) + long(b.size()) + (c ? long(c->size()) : 0);
}

void LoraAdapter::validate() const {
  if (a.rows() != b.cols()) {
    throw ShapeError("adapter: a is " + shape_str(a) + " but b is " +
                     shape_str(b) + "; ranks disagree");
  }
  if (c) {
    require_shape(*c, a.rows(), a.rows(), "adapter bridge");
  }
  if (mask.c && !c) {
    throw ConfigError("adapter: bridge marked trainable but absent");
  }
}

Mat lora_delta(const LoraAdapter& ad) {
  ad.validate();
  if (ad.c) return ad.b * (*ad.c * ad.a);
  return ad.b * ad.a;
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kAnchor: return "anchor";
    case Variant::kFullLora: return "full";
    case Variant::kNoBridge: return "nobridge";
    case Variant::kBridgeOnly: return "bridgeonly";
    case Variant::kBridged: return "bridged";
    case Variant::kFresh: return "fresh";
  }
  throw ConfigError("variant_name: bad variant");
}

Variant variant_from_name(const std::string& name) {
  for (uint8_t v = 0; v <= 5; ++v) {
    if (name == variant_name(Variant(v))) return Variant(v);
  }
  throw ConfigError("unknown adapter variant '" + name +
                    "' (expected anchor|full|nobridge|bridgeonly|bridged|fresh)");
}

Variant variant_from_u8(uint8_t v) {
  if (v > 5) throw ConfigError("variant: byte " + std::to_string(v) + " out of range");
  return Variant(v);
}

LoraAdapter* AdapterSet::find(int layer, Site site) {
  auto it = items.find({layer, int(site)});
  return it == items.end() ? nullptr : &it->second;
}

const LoraAdapter* AdapterSet::find(int layer, Site site) const {
  auto it = items.find({layer, int(site)});
  return it == items.end() ? nullptr : &it->second;
}

void AdapterSet::put(int layer, Site site, LoraAdapter ad) {
  ad.validate();
  items[{layer, int(site)}] = std::move(ad);
}

long AdapterSet::trainable_param_count() const {
  long n = 0;
  for (const auto& [key, ad] : items) n += ad.trainable_count();
  return n;
}

long AdapterSet::total_param_count() const {
  long n = 0;
  for (const auto& [key, ad] : items) n += ad.total_count();
  return n;
}

LoraAdapter init_lora(int d_in, int d_out, int rank, Rng& rng) {
  if (rank <= 0 || d_in <= 0 || d_out <= 0) {
    throw ConfigError("init_lora: dimensions must be positive");
  }
  LoraAdapter ad;
  ad.a = rng.normal_mat(rank, d_in, 1.0 / std::sqrt(double(rank)));
  ad.b = Mat::Zero(d_out, rank);
  return ad;
}

AdapterSet bridge_variant(const AdapterSet& anchor, Variant v) {
  AdapterSet out;
  out.variant = v;
  out.tag = anchor.tag;
  for (const auto& [key, src] : anchor.items) {
    LoraAdapter ad = src;
    ad.c.reset();
    switch (v) {
      case Variant::kAnchor:
        ad.mask = {};
        break;
      case Variant::kFullLora:
        ad.mask = {.a = true, .b = true, .c = false};
        break;
      case Variant::kNoBridge:
        ad.mask = {.a = false, .b = true, .c = false};
        break;
      case Variant::kBridgeOnly:
        ad.c = Mat::Identity(ad.rank(), ad.rank());
        ad.mask = {.a = false, .b = false, .c = true};
        break;
      case Variant::kBridged:
        ad.c = Mat::Identity(ad.rank(), ad.rank());
        ad.mask = {.a = false, .b = true, .c = true};
        break;
      case Variant::kFresh:
        throw ConfigError("bridge_variant: fresh sets are built with init_lora, "
                          "not derived from an anchor");
    }
    out.items[key] = std::move(ad);
  }
  return out;
}

long variant_trainable_count(Variant v, int d_in, int d_out, int rank) {
  long a = long(rank) * d_in;
  long b = long(d_out) * rank;
  long c = long(rank) * rank;
  switch (v) {
    case Variant::kAnchor: return 0;
    case Variant::kFullLora: return a + b;
    case Variant::kNoBridge: return b;
    case Variant::kBridgeOnly: return c;
    case Variant::kBridged: return b + c;
    case Variant::kFresh: return a + b;
  }
  throw ConfigError("variant_trainable_count: bad variant");
}

}  // namespace prisp
