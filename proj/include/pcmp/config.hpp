#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcmp/data.hpp"
#include "pcmp/encoder.hpp"
#include "pcmp/pretrain.hpp"
#include "pcmp/tuners.hpp"
#include "pcmp/upgrade.hpp"

namespace pcmp {

/// Sizes of the evaluation suite used by the reproduce pipeline.
struct SuiteConfig {
  std::size_t tasks = 5;
  std::uint64_t task_seed = 500;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> methods{"zs", "lp", "clip_adapter", "tip_adapter", "coop", "cocoop", "kgcoop", "contcoop"};
  std::vector<std::size_t> depths{0, 1, 2, 3, 4, 5};
  std::vector<std::uint64_t> sweep_seeds{1, 2, 3, 4, 5};
  std::vector<std::uint64_t> ood_seeds{1, 2, 3, 4, 5};
  std::vector<ShiftSpec> shifts = default_shifts();

  bool operator==(const SuiteConfig&) const = default;
};

inline void to_json(json& j, const SuiteConfig& s) {
  j = json{{"tasks", s.tasks},   {"task_seed", s.task_seed},     {"seeds", s.seeds},         {"methods", s.methods},
           {"depths", s.depths}, {"sweep_seeds", s.sweep_seeds}, {"ood_seeds", s.ood_seeds}, {"shifts", s.shifts}};
}

inline void from_json(const json& j, SuiteConfig& s) {
  SuiteConfig d;
  s.tasks = j.value("tasks", d.tasks);
  s.task_seed = j.value("task_seed", d.task_seed);
  s.seeds = j.value("seeds", d.seeds);
  s.methods = j.value("methods", d.methods);
  s.depths = j.value("depths", d.depths);
  s.sweep_seeds = j.value("sweep_seeds", d.sweep_seeds);
  s.ood_seeds = j.value("ood_seeds", d.ood_seeds);
  s.shifts = j.value("shifts", d.shifts);
}

struct RunConfig {
  WorldConfig world;
  EncoderConfig encoder;
  PretrainConfig pretrain;
  UpgradeRecipe upgrade;
  TaskConfig task;
  TunerHyper hyper;
  SuiteConfig suite;

  bool operator==(const RunConfig&) const = default;
};

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"world", c.world},     {"encoder", c.encoder}, {"pretrain", c.pretrain}, {"upgrade", c.upgrade},
           {"task", c.task},       {"hyper", c.hyper},     {"suite", c.suite}};
}

inline void from_json(const json& j, RunConfig& c) {
  static const char* known[] = {"world", "encoder", "pretrain", "upgrade", "task", "hyper", "suite"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(std::begin(known), std::end(known), k) == std::end(known)) throw ConfigError("unknown config section '" + k + "'");
  }
  RunConfig d;
  c.world = j.value("world", d.world);
  c.encoder = j.value("encoder", d.encoder);
  c.pretrain = j.value("pretrain", d.pretrain);
  c.upgrade = j.value("upgrade", d.upgrade);
  c.task = j.value("task", d.task);
  c.hyper = j.value("hyper", d.hyper);
  c.suite = j.value("suite", d.suite);
}

/// Checks cross-section consistency; throws ConfigError.
inline void validate(const RunConfig& c) {
  validate(c.encoder);
  if (c.encoder.vocab != c.world.vocab) throw ConfigError("encoder.vocab must equal world.vocab");
  if (c.encoder.img_dim != c.world.img_dim) throw ConfigError("encoder.img_dim must equal world.img_dim");
  if (c.suite.seeds.empty()) throw ConfigError("suite.seeds must not be empty");
  for (const auto& m : c.suite.methods) method_from_string(m);
  for (std::size_t d : c.suite.depths)
    if (d >= c.encoder.layers) throw ConfigError("suite depth outside [0, L-1]");
}

/// Stable 16-hex-digit hash of the canonical JSON form.
inline std::string fingerprint(const RunConfig& c) { return hex64(fnv1a(json(c).dump())); }

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  validate(c);
  return c;
}

}  // namespace pcmp
