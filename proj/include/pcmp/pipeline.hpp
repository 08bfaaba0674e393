#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcmp/config.hpp"
#include "pcmp/evalkit.hpp"
#include "pcmp/upgrade.hpp"

namespace pcmp {

// ---- artifacts on disk ---------------------------------------------------------------------

/// "dir/name" and "dir/name.pcmp" both name the pair dir/name.pcmp + dir/name.json.
inline std::string artifact_stem(std::string path) {
  if (path.size() > 5 && path.ends_with(".pcmp")) path.resize(path.size() - 5);
  return path;
}

inline void write_text(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Artifact {
  TensorMap tensors;
  json manifest;
};

inline void save_artifact(const std::string& path, const TensorMap& tensors, const json& manifest) {
  const std::string stem = artifact_stem(path);
  const auto parent = std::filesystem::path(stem).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
  }
  save_container(stem + ".pcmp", tensors);
  write_text(stem + ".json", manifest.dump(2) + "\n");
}

inline Artifact load_artifact(const std::string& path) {
  const std::string stem = artifact_stem(path);
  Artifact a;
  a.tensors = load_container(stem + ".pcmp");
  try {
    a.manifest = json::parse(read_text(stem + ".json"));
  } catch (const json::exception& e) {
    throw IoError("manifest '" + stem + ".json' is not valid JSON: " + e.what());
  }
  return a;
}

inline json provenance(const std::string& fingerprint, std::uint64_t seed) {
  return json{{"fingerprint", fingerprint}, {"seed", seed}};
}

inline void save_pair(const std::string& path, const ModelPair& pair, const json& extra) {
  json m = pair_manifest(pair);
  m.update(extra);
  save_artifact(path, pair_tensors(pair), m);
}

inline ModelPair load_pair(const std::string& path) {
  const Artifact a = load_artifact(path);
  return pair_from_tensors(a.tensors, a.manifest);
}

inline void save_task(const std::string& path, const SyntheticTask& task, const json& extra) {
  json m = task_manifest(task);
  m.update(extra);
  save_artifact(path, task_tensors(task), m);
}

inline SyntheticTask load_task(const std::string& path) {
  const Artifact a = load_artifact(path);
  return task_from_tensors(a.tensors, a.manifest);
}

inline void save_module(const std::string& path, const TunerModule& m, const json& extra) {
  json j = module_manifest(m);
  j.update(extra);
  save_artifact(path, m.payload.values(), j);
}

inline TunerModule load_module(const std::string& path) {
  const Artifact a = load_artifact(path);
  return module_from(a.tensors, a.manifest);
}

// ---- suite ------------------------------------------------------------------------------------

inline std::vector<SyntheticTask> suite_tasks(const World& world, const RunConfig& cfg) {
  std::vector<SyntheticTask> out;
  for (std::size_t i = 0; i < cfg.suite.tasks; ++i) {
    SyntheticTask t = generate_task(world, cfg.suite.task_seed + i, cfg.task);
    add_shifted_tests(t, cfg.suite.shifts);
    out.push_back(std::move(t));
  }
  return out;
}

inline std::string task_name(const SyntheticTask& t) { return "task" + std::to_string(t.seed); }

inline std::vector<Method> suite_methods(const RunConfig& cfg) {
  std::vector<Method> out;
  for (const auto& m : cfg.suite.methods) out.push_back(method_from_string(m));
  return out;
}

inline std::vector<CompatTask> compat_tasks(const std::vector<SyntheticTask>& tasks) {
  std::vector<CompatTask> out;
  for (const auto& t : tasks) out.push_back({task_name(t), &t});
  return out;
}

/// Methods compared on the shifted splits.
inline std::vector<Method> ood_methods() { return {Method::zs, Method::coop, Method::kgcoop, Method::contcoop}; }

/// Seed-averaged shifted-split table on the base pair for one task.
inline OodTable ood_suite(const ModelPair& base, const SyntheticTask& task, const TokenSeq& template_tokens,
                          const TunerHyper& hyper, const std::vector<std::uint64_t>& seeds, std::size_t threads = 1) {
  const auto methods = ood_methods();
  std::vector<OodRow> cells(methods.size() * seeds.size());
  run_cells(cells.size(), threads, [&](std::size_t i) {
    const TunerModule m = train_tuner(methods[i / seeds.size()], base, task, template_tokens, hyper, seeds[i % seeds.size()]);
    cells[i] = ood_eval(base, m, task, template_tokens);
  });
  OodTable t;
  for (const auto& [shift, split] : task.shifted_tests) t.shifts.push_back(shift.name());
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    OodRow row{to_string(methods[mi]), 0.0, std::vector<double>(t.shifts.size(), 0.0)};
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& c = cells[mi * seeds.size() + s];
      row.source += c.source / static_cast<double>(seeds.size());
      for (std::size_t k = 0; k < t.shifts.size(); ++k) row.shifted[k] += c.shifted[k] / static_cast<double>(seeds.size());
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---- reproduce --------------------------------------------------------------------------------

struct ReproduceResult {
  std::string fingerprint;
  PretrainResult pretrain;
  UpgradeResult upgrade;
  CompatReport compat;
  DriftProfile drift;
  DepthSweep sweep;
  OodTable ood;
  std::vector<std::string> files;  // written, relative to the output directory
};

using Logger = std::function<void(const std::string&)>;

/// pretrain -> upgrade -> tune every method -> eval -> drift -> depth sweep -> shifted splits,
/// writing every artifact and report under `out_dir`.
inline ReproduceResult reproduce(const RunConfig& cfg, std::uint64_t seed, const std::string& out_dir, std::size_t threads,
                                 const Logger& log) {
  validate(cfg);
  ReproduceResult r;
  r.fingerprint = fingerprint(cfg);
  const json prov = provenance(r.fingerprint, seed);
  const std::string head = "# fingerprint=" + r.fingerprint + " seed=" + std::to_string(seed) + "\n";
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(out_dir + "/" + name, text);
    r.files.push_back(name);
  };
  auto emit_json = [&](const std::string& name, json body) {
    body["provenance"] = prov;
    emit(name, body.dump(2) + "\n");
  };

  const World world(cfg.world);
  log("pretraining base pair");
  r.pretrain = contrastive_pretrain(cfg.encoder, world, cfg.pretrain, seed);
  save_pair(out_dir + "/base", r.pretrain.pair, {{"provenance", prov}, {"retrieval", r.pretrain.retrieval}});
  r.files.push_back("base.pcmp");

  log("upgrading");
  r.upgrade = simulate_upgrade(r.pretrain.pair, world, cfg.upgrade, seed + 1);
  save_pair(out_dir + "/upgraded", r.upgrade.pair, {{"provenance", prov}, {"upgrade", upgrade_manifest(r.upgrade, cfg.upgrade)}});
  r.files.push_back("upgraded.pcmp");

  const auto tasks = suite_tasks(world, cfg);
  log("compatibility suite");
  r.compat = compat_experiment(r.pretrain.pair, r.upgrade.pair, compat_tasks(tasks), suite_methods(cfg), cfg.suite.seeds,
                               world.template_tokens(), cfg.hyper, threads);
  r.compat.fingerprint = r.fingerprint;
  emit("compat.csv", head + compat_csv(r.compat));
  emit("compat_cells.csv", head + compat_cells_csv(r.compat));
  emit_json("compat.json", to_json_value(r.compat));

  log("drift profile");
  r.drift = drift_profile(r.pretrain.pair.text, r.upgrade.pair.text, default_probes(world));
  emit("drift.tsv", head + drift_tsv(r.drift));
  emit_json("drift.json", to_json_value(r.drift));

  log("depth sweep");
  r.sweep = depth_sweep(r.pretrain.pair, r.upgrade.pair, tasks.front(), world.template_tokens(), cfg.suite.depths,
                        cfg.suite.sweep_seeds, cfg.hyper, threads);
  emit("sweep.tsv", head + sweep_tsv(r.sweep));
  emit_json("sweep.json", to_json_value(r.sweep));

  log("shifted splits");
  r.ood = ood_suite(r.pretrain.pair, tasks.front(), world.template_tokens(), cfg.hyper, cfg.suite.ood_seeds, threads);
  emit("ood.tsv", head + ood_tsv(r.ood));
  emit_json("ood.json", to_json_value(r.ood));

  emit_json("run.json", json{{"config", cfg},
                             {"retrieval", r.pretrain.retrieval},
                             {"upgrade", upgrade_manifest(r.upgrade, cfg.upgrade)},
                             {"base_checksum", hex64(pair_checksum(r.pretrain.pair))},
                             {"upgraded_checksum", hex64(pair_checksum(r.upgrade.pair))}});
  return r;
}

}  // namespace pcmp
