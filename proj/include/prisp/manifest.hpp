#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace prisp {

inline constexpr std::string_view kToolVersion = "prisp 0.1.0";

// 16-hex-digit FNV-1a digest: the currency every determinism check trades in.
std::string content_hash(std::string_view bytes);
std::string hash_file(const std::filesystem::path& path);

// Record of one command execution. The serialized body is byte-deterministic
// — equal config and equal inputs must reproduce it exactly — so anything
// volatile (wall-clock, dates) lives in the timings sidecar instead.
struct RunManifest {
  std::string command;
  std::string tool_version{kToolVersion};
  std::string config_json;  // config document; normalized before hashing
  std::map<std::string, std::string> input_hashes;   // label -> content hash
  std::map<std::string, std::string> output_hashes;  // label -> content hash
  std::string extra_json;  // command payload (seeds, step counts, traces)
};

// Canonical bytes: sorted keys, fixed indentation, config hash included.
std::string manifest_body(const RunManifest& m);

// Writes dir/run_manifest.json (the dataset generator owns plain
// manifest.json, so run records use a distinct name).
void write_run_manifest(const std::filesystem::path& dir, const RunManifest& m);
RunManifest load_run_manifest(const std::filesystem::path& file);

// Wall-clock sidecar rows, deliberately excluded from every hash.
struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

void write_timings(const std::filesystem::path& dir,
                   const std::vector<StageTiming>& rows);
std::vector<StageTiming> load_timings(const std::filesystem::path& file);

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }
  void restart() { start_ = std::chrono::steady_clock::now(); }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace prisp
