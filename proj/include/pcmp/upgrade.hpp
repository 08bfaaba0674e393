#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcmp/data.hpp"
#include "pcmp/encoder.hpp"
#include "pcmp/pretrain.hpp"
#include "pcmp/tuners.hpp"

namespace pcmp {

struct UpgradeRecipe {
  std::string kind = "continued_training";  // | "synthetic_drift"
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 32;
  std::size_t batch = 32;
  double lr = 2e-3;
  double stream_rotation = 0.3;
  std::vector<std::size_t> img_hidden{96};
  /// Redraw the text projection so the shared space has to re-form.
  bool reinit_text_proj = true;
  /// Text block l steps with lr * layer_decay^(L-1-l); embeddings one level lower.
  double layer_decay = 0.7;
  double sigma0 = 0.02;
  std::size_t realign_epochs = 10;
  std::size_t gate_tasks = 3;
  std::uint64_t gate_seed = 90000;
  std::size_t retries = 5;
  TaskConfig gate_task;

  bool operator==(const UpgradeRecipe&) const = default;
};

inline void to_json(json& j, const UpgradeRecipe& r) {
  j = json{{"kind", r.kind},
           {"epochs", r.epochs},
           {"steps_per_epoch", r.steps_per_epoch},
           {"batch", r.batch},
           {"lr", r.lr},
           {"stream_rotation", r.stream_rotation},
           {"img_hidden", r.img_hidden},
           {"reinit_text_proj", r.reinit_text_proj},
           {"layer_decay", r.layer_decay},
           {"sigma0", r.sigma0},
           {"realign_epochs", r.realign_epochs},
           {"gate_tasks", r.gate_tasks},
           {"gate_seed", r.gate_seed},
           {"retries", r.retries},
           {"gate_task", r.gate_task}};
}

inline void from_json(const json& j, UpgradeRecipe& r) {
  UpgradeRecipe d;
  r.kind = j.value("kind", d.kind);
  r.epochs = j.value("epochs", d.epochs);
  r.steps_per_epoch = j.value("steps_per_epoch", d.steps_per_epoch);
  r.batch = j.value("batch", d.batch);
  r.lr = j.value("lr", d.lr);
  r.stream_rotation = j.value("stream_rotation", d.stream_rotation);
  r.img_hidden = j.value("img_hidden", d.img_hidden);
  r.reinit_text_proj = j.value("reinit_text_proj", d.reinit_text_proj);
  r.layer_decay = j.value("layer_decay", d.layer_decay);
  r.sigma0 = j.value("sigma0", d.sigma0);
  r.realign_epochs = j.value("realign_epochs", d.realign_epochs);
  r.gate_tasks = j.value("gate_tasks", d.gate_tasks);
  r.gate_seed = j.value("gate_seed", d.gate_seed);
  r.retries = j.value("retries", d.retries);
  r.gate_task = j.value("gate_task", d.gate_task);
}

struct GateReport {
  std::vector<std::uint64_t> task_seeds;
  std::vector<double> base_acc;
  std::vector<double> upgraded_acc;
  std::size_t strictly_higher = 0;
  bool passed = false;
};

inline void to_json(json& j, const GateReport& g) {
  j = json{{"task_seeds", g.task_seeds},
           {"base_acc", g.base_acc},
           {"upgraded_acc", g.upgraded_acc},
           {"strictly_higher", g.strictly_higher},
           {"passed", g.passed}};
}

inline double zero_shot_accuracy(const ModelPair& pair, const SyntheticTask& task, const TokenSeq& template_tokens,
                                  const Split& split) {
  TunerModule zs;
  zs.method = Method::zs;
  return evaluate_accuracy(zs, pair, class_spec(task, template_tokens), split);
}

/// Zero-shot accuracy of both pairs on held-out tasks; the gate passes when
/// the upgraded mean is at least the base mean.
inline GateReport upgrade_gate_report(const ModelPair& base, const ModelPair& upgraded, const World& world,
                                      const std::vector<SyntheticTask>& heldout) {
  if (base.config != upgraded.config) throw ConfigError("gate needs layer-aligned pairs");
  GateReport r;
  double sb = 0.0, su = 0.0;
  for (const auto& t : heldout) {
    r.task_seeds.push_back(t.seed);
    r.base_acc.push_back(zero_shot_accuracy(base, t, world.template_tokens(), t.test));
    r.upgraded_acc.push_back(zero_shot_accuracy(upgraded, t, world.template_tokens(), t.test));
    sb += r.base_acc.back();
    su += r.upgraded_acc.back();
    if (r.upgraded_acc.back() > r.base_acc.back()) ++r.strictly_higher;
  }
  r.passed = su >= sb;
  return r;
}

inline std::vector<SyntheticTask> gate_tasks(const World& world, const UpgradeRecipe& recipe) {
  std::vector<SyntheticTask> out;
  for (std::size_t i = 0; i < recipe.gate_tasks; ++i) out.push_back(generate_task(world, recipe.gate_seed + i, recipe.gate_task));
  return out;
}

/// Step multiplier implementing layer-wise decay for the text tower.
inline std::function<double(const std::string&)> layer_decay_scale(const TextEncoder& text, double decay) {
  const int layers = static_cast<int>(text.config().layers);
  return [&text, decay, layers](const std::string& name) {
    if (name.rfind("text.", 0) != 0) return 1.0;
    const int l = text.layer_of(name.substr(5));
    return std::pow(decay, static_cast<double>(std::max(0, layers - 1 - l)));
  };
}

/// One upgrade attempt without the gate.
inline ModelPair upgrade_once(const ModelPair& base, const World& world, const UpgradeRecipe& recipe, std::uint64_t seed) {
  ModelPair up = base;
  up.tag = "upgraded";
  Rng rng(seed);
  if (recipe.kind == "continued_training") {
    if (recipe.epochs == 0) return up;
    Rng init_rng = rng.fork(31);
    std::vector<std::size_t> widths{base.config.img_dim};
    widths.insert(widths.end(), recipe.img_hidden.begin(), recipe.img_hidden.end());
    widths.push_back(base.config.feat);
    up.image = ImageEncoder::initialize(widths, init_rng);
    if (recipe.reinit_text_proj) {
      const double d = static_cast<double>(base.config.width);
      up.text.params().at("proj") = init_rng.normal_tensor({base.config.width, base.config.feat}, 1.0 / std::sqrt(d));
    }
    Rng stream_rng = rng.fork(32);
    const Tensor rot = random_rotation(base.config.img_dim, recipe.stream_rotation, stream_rng);
    ContrastiveSchedule sched;
    sched.epochs = recipe.epochs;
    sched.steps_per_epoch = recipe.steps_per_epoch;
    sched.batch = recipe.batch;
    sched.lr = recipe.lr;
    sched.rotation = recipe.stream_rotation > 0.0 ? &rot : nullptr;
    sched.lr_scale = layer_decay_scale(up.text, recipe.layer_decay);
    contrastive_train(up, world, sched, stream_rng);
    return up;
  }
  if (recipe.kind == "synthetic_drift") {
    if (recipe.sigma0 < 0.0) throw ConfigError("sigma0 must be >= 0");
    Rng noise_rng = rng.fork(33);
    const double layers = static_cast<double>(base.config.layers);
    for (auto& [name, t] : up.text.params().values()) {
      const int l = up.text.layer_of(name);
      if (l < 0 || l >= static_cast<int>(base.config.layers)) continue;
      const double sigma = recipe.sigma0 * (1.0 + static_cast<double>(l)) / layers;
      if (sigma == 0.0) continue;
      for (double& v : t.values()) v += sigma * noise_rng.normal();
    }
    if (recipe.realign_epochs > 0) {
      up.text.params().freeze_all();
      ContrastiveSchedule sched;
      sched.epochs = recipe.realign_epochs;
      sched.steps_per_epoch = recipe.steps_per_epoch;
      sched.batch = recipe.batch;
      sched.lr = recipe.lr;
      Rng stream_rng = rng.fork(34);
      contrastive_train(up, world, sched, stream_rng);
      for (const auto& [name, t] : base.text.params().values()) up.text.params().unfreeze(name);
    }
    return up;
  }
  throw ConfigError("unknown upgrade recipe '" + recipe.kind + "'");
}

struct UpgradeResult {
  ModelPair pair;
  GateReport gate;
  std::uint64_t seed_used = 0;
  std::size_t attempts = 0;
};

/// Upgrades `base`, retrying with derived seeds until the zero-shot gate passes.
inline UpgradeResult simulate_upgrade(const ModelPair& base, const World& world, const UpgradeRecipe& recipe,
                                      std::uint64_t seed) {
  const auto heldout = gate_tasks(world, recipe);
  UpgradeResult out;
  std::string tried;
  for (std::size_t attempt = 0; attempt <= recipe.retries; ++attempt) {
    const std::uint64_t s = seed + attempt * 1000003ULL;
    ModelPair up = upgrade_once(base, world, recipe, s);
    GateReport gate = upgrade_gate_report(base, up, world, heldout);
    out.attempts = attempt + 1;
    if (gate.passed) {
      out.pair = std::move(up);
      out.gate = std::move(gate);
      out.seed_used = s;
      return out;
    }
    double mb = 0, mu = 0;
    for (std::size_t i = 0; i < gate.base_acc.size(); ++i) {
      mb += gate.base_acc[i];
      mu += gate.upgraded_acc[i];
    }
    tried += " [seed " + std::to_string(s) + ": base " + std::to_string(mb / gate.base_acc.size()) + " vs upgraded " +
             std::to_string(mu / gate.base_acc.size()) + "]";
  }
  throw UpgradeError("zero-shot improvement gate failed after " + std::to_string(recipe.retries + 1) + " attempts:" + tried);
}

inline json upgrade_manifest(const UpgradeResult& r, const UpgradeRecipe& recipe) {
  return json{{"recipe", recipe}, {"seed", r.seed_used}, {"attempts", r.attempts}, {"gate", r.gate}};
}

}  // namespace pcmp
