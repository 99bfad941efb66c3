#pragma once

#include "prisp/adapters.hpp"
#include "prisp/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace prisp {

// Binary checkpoint container shared by adapter sets, hypernet weights and
// backbone weights. Little-endian throughout:
//
//   magic   "PRSP"
//   version u16 (currently 1)
//   kind    u8  (0 adapters, 1 hypernet, 2 backbone)
//   variant u8  (adapter sets; 0 otherwise)
//   tag_len u32, tag bytes
//   count   u32
//   count * record:
//     layer u16, site u8, role u8, rows u32, cols u32, rows*cols f64
//
// Adapter records use roles A/B/C plus one META record per adapter carrying
// [train-mask bits, scale, dropout]. Hypernet/backbone checkpoints store a
// flat sequence of GENERIC records whose order is fixed by the writer.

struct FormatError : Error {
  using Error::Error;
};
struct MagicError : FormatError {
  using FormatError::FormatError;
};
struct VersionError : FormatError {
  using FormatError::FormatError;
};
struct CorruptionError : FormatError {
  using FormatError::FormatError;
};

namespace container {

constexpr uint16_t kVersion = 1;
constexpr uint8_t kKindAdapters = 0;
constexpr uint8_t kKindHypernet = 1;
constexpr uint8_t kKindBackbone = 2;

constexpr uint8_t kRoleA = 0;
constexpr uint8_t kRoleB = 1;
constexpr uint8_t kRoleC = 2;
constexpr uint8_t kRoleMeta = 3;
constexpr uint8_t kRoleGeneric = 4;

struct Record {
  uint16_t layer = 0;
  uint8_t site = 0;
  uint8_t role = kRoleGeneric;
  Mat payload;
};

struct File {
  uint8_t kind = kKindAdapters;
  uint8_t variant = 0;
  std::string tag;
  std::vector<Record> records;
};

std::string encode(const File& f);
// Parses completely before returning; a malformed file throws and leaves no
// partial result behind.
File decode(const std::string& bytes);

void write_file(const std::filesystem::path& path, const File& f);
File read_file(const std::filesystem::path& path);

}  // namespace container

void save_adapter_set(const std::filesystem::path& path, const AdapterSet& set);
AdapterSet load_adapter_set(const std::filesystem::path& path);

// Atomic byte-level file IO (temp file + rename).
void write_bytes_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_bytes(const std::filesystem::path& path);

}  // namespace prisp
