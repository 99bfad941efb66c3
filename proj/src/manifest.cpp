#include "prisp/manifest.hpp"

#include "prisp/container.hpp"
#include "prisp/matrix.hpp"
#include "prisp/rng.hpp"

#include <json.hpp>

namespace prisp {

namespace {

using nlohmann::json;

// Parses a config/payload string, treating "" as an empty object so commands
// without a payload still emit a well-formed document.
json parse_or_empty(const std::string& text, const char* what) {
  if (text.empty()) return json::object();
  json parsed = json::parse(text, nullptr, false);
  if (parsed.is_discarded()) {
    throw ConfigError(std::string(what) + ": payload is not valid JSON");
  }
  return parsed;
}

}  // namespace

std::string content_hash(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(Rng::fnv1a64(bytes)));
  return std::string(buf);
}

std::string hash_file(const std::filesystem::path& path) {
  return content_hash(read_bytes(path));
}

std::string manifest_body(const RunManifest& m) {
  json config = parse_or_empty(m.config_json, "manifest config");
  json body;
  body["command"] = m.command;
  body["config"] = config;
  body["config_hash"] = content_hash(config.dump());
  body["inputs"] = json(m.input_hashes);
  body["outputs"] = json(m.output_hashes);
  body["extra"] = parse_or_empty(m.extra_json, "manifest extra");
  body["tool_version"] = m.tool_version;
  return body.dump(2) + "\n";
}

void write_run_manifest(const std::filesystem::path& dir,
                        const RunManifest& m) {
  std::filesystem::create_directories(dir);
  write_bytes_atomic(dir / "run_manifest.json", manifest_body(m));
}

RunManifest load_run_manifest(const std::filesystem::path& file) {
  json body = json::parse(read_bytes(file), nullptr, false);
  if (body.is_discarded()) {
    throw CorruptionError("run manifest " + file.string() +
                          ": not valid JSON");
  }
  RunManifest m;
  try {
    m.command = body.at("command").get<std::string>();
    m.tool_version = body.at("tool_version").get<std::string>();
    m.config_json = body.at("config").dump();
    m.input_hashes =
        body.at("inputs").get<std::map<std::string, std::string>>();
    m.output_hashes =
        body.at("outputs").get<std::map<std::string, std::string>>();
    m.extra_json = body.at("extra").dump();
  } catch (const json::exception& e) {
    throw CorruptionError("run manifest " + file.string() + ": " + e.what());
  }
  return m;
}

void write_timings(const std::filesystem::path& dir,
                   const std::vector<StageTiming>& rows) {
  std::filesystem::create_directories(dir);
  json stages = json::array();
  for (const StageTiming& r : rows) {
    stages.push_back({{"stage", r.stage}, {"seconds", r.seconds}});
  }
  json body;
  body["stages"] = stages;
  write_bytes_atomic(dir / "timings.json", body.dump(2) + "\n");
}

std::vector<StageTiming> load_timings(const std::filesystem::path& file) {
  json body = json::parse(read_bytes(file), nullptr, false);
  if (body.is_discarded()) {
    throw CorruptionError("timings " + file.string() + ": not valid JSON");
  }
  std::vector<StageTiming> rows;
  try {
    for (const json& row : body.at("stages")) {
      rows.push_back({row.at("stage").get<std::string>(),
                      row.at("seconds").get<double>()});
    }
  } catch (const json::exception& e) {
    throw CorruptionError("timings " + file.string() + ": " + e.what());
  }
  return rows;
}

}  // namespace prisp
