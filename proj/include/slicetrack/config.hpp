#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicetrack/common.hpp"
#include "slicetrack/network.hpp"
#include "slicetrack/synthdata.hpp"
#include "slicetrack/tracker.hpp"
#include "slicetrack/training.hpp"

namespace slicetrack::config {

namespace fs = std::filesystem;
using nlohmann::json;

struct DataConfig {
  synth::VolumeSpec spec;
  int n_volumes = 20;
  std::map<std::string, double> split{{"train", 0.7}, {"val", 0.1}, {"test", 0.2}};
};

struct BaselineConfig {
  double iou_gate = 0.5;
  int max_gap = 0;
};

struct EvalConfig {
  double iou_thresh = 0.1;
  std::vector<double> fp_points{1, 2, 4, 8};
};

// One config drives every subcommand; sections mirror the pipeline stages.
struct RunConfig {
  DataConfig data;
  net::ModelConfig model;
  train::TrainConfig train;
  track::TrackerConfig tracker;
  BaselineConfig baseline;
  EvalConfig eval;
};

inline void to_json(json& j, const DataConfig& c) {
  j = json{{"spec", c.spec}, {"n_volumes", c.n_volumes}, {"split", c.split}};
}
inline void from_json(const json& j, DataConfig& c) {
  j.at("spec").get_to(c.spec);
  j.at("n_volumes").get_to(c.n_volumes);
  c.split = j.at("split").get<std::map<std::string, double>>();
}

inline void to_json(json& j, const BaselineConfig& c) {
  j = json{{"iou_gate", c.iou_gate}, {"max_gap", c.max_gap}};
}
inline void from_json(const json& j, BaselineConfig& c) {
  j.at("iou_gate").get_to(c.iou_gate);
  j.at("max_gap").get_to(c.max_gap);
}

inline void to_json(json& j, const EvalConfig& c) {
  j = json{{"iou_thresh", c.iou_thresh}, {"fp_points", c.fp_points}};
}
inline void from_json(const json& j, EvalConfig& c) {
  j.at("iou_thresh").get_to(c.iou_thresh);
  j.at("fp_points").get_to(c.fp_points);
}

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"data", c.data},       {"model", c.model},       {"train", c.train},
           {"tracker", c.tracker}, {"baseline", c.baseline}, {"eval", c.eval}};
}
inline void from_json(const json& j, RunConfig& c) {
  j.at("data").get_to(c.data);
  j.at("model").get_to(c.model);
  j.at("train").get_to(c.train);
  j.at("tracker").get_to(c.tracker);
  j.at("baseline").get_to(c.baseline);
  j.at("eval").get_to(c.eval);
}

// FNV-1a over the canonical dump; embedded into every output artifact.
inline std::string hash_json(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Applies one "section.key=value" override onto a config json. Values parse
// as JSON when possible (numbers, bools, arrays), else as strings.
inline void apply_override(json& cfg, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like section.key=value: " + spec);
  std::string path = "/" + spec.substr(0, eq);
  for (auto& ch : path)
    if (ch == '.') ch = '/';
  const std::string raw = spec.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  try {
    cfg[json::json_pointer(path)] = value;
  } catch (const json::exception& e) {
    throw ConfigError("bad override path '" + spec + "': " + e.what());
  }
}

struct LoadedConfig {
  RunConfig run;
  json canonical;    // defaults + file + overrides
  std::string hash;
};

inline LoadedConfig load_config(const std::string& path,
                                const std::vector<std::string>& overrides = {}) {
  json merged = json(RunConfig{});
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    json user;
    try {
      in >> user;
    } catch (const json::exception& e) {
      throw ConfigError("malformed config (" + std::string(e.what()) + "): " + path);
    }
    merged.merge_patch(user);
  }
  for (const auto& o : overrides) apply_override(merged, o);
  LoadedConfig out;
  try {
    out.run = merged.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("config does not match the expected schema: " + std::string(e.what()));
  }
  out.canonical = merged;
  out.hash = hash_json(merged);
  return out;
}

}  // namespace slicetrack::config
