#include "prisp/container.hpp"

#include <cstring>
#include <fstream>

namespace prisp {

namespace {

void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(reinterpret_cast<const char*>(p), n);
}

template <class T>
void put_int(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  // Serialize little-endian one byte at a time so the format does not depend
  // on host layout.
  for (size_t i = 0; i < sizeof(T); ++i) {
    char b = char((uint64_t(v) >> (8 * i)) & 0xFF);
    out.push_back(b);
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T read_int(const char* what) {
    need(sizeof(T), what);
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) {
      v |= uint64_t(uint8_t(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return T(v);
  }

  std::string read_str(size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  Mat read_mat(uint32_t rows, uint32_t cols, const char* what) {
    size_t n = size_t(rows) * cols * sizeof(double);
    need(n, what);
    Mat m(rows, cols);
    std::memcpy(m.data(), bytes_.data() + pos_, n);
    pos_ += n;
    return m;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CorruptionError(std::string("checkpoint truncated while reading ") +
                            what);
    }
  }
  const std::string& bytes_;
  size_t pos_ = 0;
};

}  // namespace

namespace container {

std::string encode(const File& f) {
  std::string out;
  out.append("PRSP");
  put_int<uint16_t>(out, kVersion);
  put_int<uint8_t>(out, f.kind);
  put_int<uint8_t>(out, f.variant);
  put_int<uint32_t>(out, uint32_t(f.tag.size()));
  out.append(f.tag);
  put_int<uint32_t>(out, uint32_t(f.records.size()));
  for (const Record& r : f.records) {
    put_int<uint16_t>(out, r.layer);
    put_int<uint8_t>(out, r.site);
    put_int<uint8_t>(out, r.role);
    put_int<uint32_t>(out, uint32_t(r.payload.rows()));
    put_int<uint32_t>(out, uint32_t(r.payload.cols()));
    put_bytes(out, r.payload.data(), size_t(r.payload.size()) * sizeof(double));
  }
  return out;
}

File decode(const std::string& bytes) {
  Reader rd(bytes);
  std::string magic = rd.read_str(4, "magic");
  if (magic != "PRSP") {
    throw MagicError("not a PRSP checkpoint (magic '" + magic + "')");
  }
  uint16_t version = rd.read_int<uint16_t>("version");
  if (version != kVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) +
                       " unsupported; this build reads version " +
                       std::to_string(kVersion));
  }
  File f;
  f.kind = rd.read_int<uint8_t>("kind");
  if (f.kind > kKindBackbone) {
    throw CorruptionError("unknown checkpoint kind " + std::to_string(f.kind));
  }
  f.variant = rd.read_int<uint8_t>("variant");
  uint32_t tag_len = rd.read_int<uint32_t>("tag length");
  f.tag = rd.read_str(tag_len, "tag");
  uint32_t count = rd.read_int<uint32_t>("record count");
  f.records.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Record r;
    r.layer = rd.read_int<uint16_t>("record layer");
    r.site = rd.read_int<uint8_t>("record site");
    r.role = rd.read_int<uint8_t>("record role");
    if (r.role > kRoleGeneric) {
      throw CorruptionError("record " + std::to_string(i) + ": unknown role " +
                            std::to_string(r.role));
    }
    uint32_t rows = rd.read_int<uint32_t>("record rows");
    uint32_t cols = rd.read_int<uint32_t>("record cols");
    if (uint64_t(rows) * cols > (1u << 26)) {
      throw CorruptionError("record " + std::to_string(i) +
                            ": implausible payload " + std::to_string(rows) +
                            "x" + std::to_string(cols));
    }
    r.payload = rd.read_mat(rows, cols, "record payload");
    if (!r.payload.allFinite()) {
      throw CorruptionError("record " + std::to_string(i) +
                            ": non-finite payload entry");
    }
    f.records.push_back(std::move(r));
  }
  if (!rd.at_end()) {
    throw CorruptionError("checkpoint has " + std::to_string(rd.remaining()) +
                          " trailing bytes after the last record");
  }
  return f;
}

void write_file(const std::filesystem::path& path, const File& f) {
  write_bytes_atomic(path, encode(f));
}

File read_file(const std::filesystem::path& path) {
  return decode(read_bytes(path));
}

}  // namespace container

void save_adapter_set(const std::filesystem::path& path, const AdapterSet& set) {
  container::File f;
  f.kind = container::kKindAdapters;
  f.variant = uint8_t(set.variant);
  f.tag = set.tag;
  for (const auto& [key, ad] : set.items) {
    ad.validate();
    auto rec = [&](uint8_t role, Mat payload) {
      container::Record r;
      r.layer = uint16_t(key.first);
      r.site = uint8_t(key.second);
      r.role = role;
      r.payload = std::move(payload);
      f.records.push_back(std::move(r));
    };
    rec(container::kRoleA, ad.a);
    rec(container::kRoleB, ad.b);
    if (ad.c) rec(container::kRoleC, *ad.c);
    double mask_bits = double((ad.mask.a ? 1 : 0) | (ad.mask.b ? 2 : 0) |
                              (ad.mask.c ? 4 : 0));
    Mat meta(1, 3);
    meta << mask_bits, ad.scale, ad.dropout;
    rec(container::kRoleMeta, std::move(meta));
  }
  container::write_file(path, f);
}

AdapterSet load_adapter_set(const std::filesystem::path& path) {
  container::File f = container::read_file(path);
  if (f.kind != container::kKindAdapters) {
    throw CorruptionError("expected an adapter checkpoint, found kind " +
                          std::to_string(f.kind));
  }
  AdapterSet set;
  set.variant = variant_from_u8(f.variant);
  set.tag = f.tag;
  for (const container::Record& r : f.records) {
    auto key = std::make_pair(int(r.layer), int(site_from_u8(r.site)));
    LoraAdapter& ad = set.items[key];
    switch (r.role) {
      case container::kRoleA:
        ad.a = r.payload;
        break;
      case container::kRoleB:
        ad.b = r.payload;
        break;
      case container::kRoleC:
        ad.c = r.payload;
        break;
      case container::kRoleMeta: {
        if (r.payload.rows() != 1 || r.payload.cols() != 3) {
          throw CorruptionError("adapter meta record must be 1x3, got " +
                                shape_str(r.payload));
        }
        int bits = int(r.payload(0, 0));
        ad.mask = {.a = (bits & 1) != 0, .b = (bits & 2) != 0,
                   .c = (bits & 4) != 0};
        ad.scale = r.payload(0, 1);
        ad.dropout = r.payload(0, 2);
        break;
      }
      default:
        throw CorruptionError("adapter checkpoint contains a generic record");
    }
  }
  for (const auto& [key, ad] : set.items) {
    if (ad.a.size() == 0 || ad.b.size() == 0) {
      throw CorruptionError("adapter at layer " + std::to_string(key.first) +
                            " site " + std::to_string(key.second) +
                            " is missing a factor");
    }
    ad.validate();
  }
  return set;
}

void write_bytes_atomic(const std::filesystem::path& path,
                        const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace prisp
