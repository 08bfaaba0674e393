#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcmp/pipeline.hpp"

namespace {

using namespace pcmp;

enum ExitCode { kOk = 0, kUsage = 2, kFailure = 3, kIo = 4 };

struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::string config;
  std::uint64_t seed = 1;
  bool quiet = false;
  std::size_t threads = 1;
  std::string workdir;
};

struct Context {
  RunConfig cfg;
  std::string fingerprint;
  Common common;

  void log(const std::string& msg) const {
    if (!common.quiet) std::cerr << "[pcmp] " << msg << "\n";
  }
  json prov() const { return provenance(fingerprint, common.seed); }
  std::string head() const { return "# fingerprint=" + fingerprint + " seed=" + std::to_string(common.seed) + "\n"; }
};

Context make_context(const Common& c) {
  Context ctx;
  ctx.common = c;
  if (!c.workdir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(c.workdir, ec);
    std::filesystem::current_path(c.workdir, ec);
    if (ec) throw IoError("cannot enter workdir '" + c.workdir + "'");
  }
  if (!c.config.empty()) {
    if (!std::filesystem::exists(c.config)) throw UsageError("config file '" + c.config + "' does not exist");
    ctx.cfg = load_run_config(c.config);
  }
  ctx.fingerprint = fingerprint(ctx.cfg);
  return ctx;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

/// "4,8,16" or "0..5".
std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  try {
    for (const auto& part : split_list(s)) {
      const auto dots = part.find("..");
      if (dots == std::string::npos) {
        out.push_back(std::stoul(part));
      } else {
        const std::size_t a = std::stoul(part.substr(0, dots)), b = std::stoul(part.substr(dots + 2));
        if (b < a) throw UsageError("empty range '" + part + "'");
        for (std::size_t v = a; v <= b; ++v) out.push_back(v);
      }
    }
  } catch (const std::logic_error&) {
    throw UsageError("cannot parse integer list '" + s + "'");
  }
  if (out.empty()) throw UsageError("empty integer list");
  return out;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  try {
    for (const auto& part : split_list(s)) out.push_back(std::stod(part));
  } catch (const std::logic_error&) {
    throw UsageError("cannot parse number list '" + s + "'");
  }
  if (out.empty()) throw UsageError("empty number list");
  return out;
}

std::pair<std::string, std::string> parse_pairs(const std::string& s) {
  const auto parts = split_list(s);
  if (parts.size() != 2) throw UsageError("--pairs expects 'base,upgraded'");
  return {parts[0], parts[1]};
}

SyntheticTask resolve_task(const Context& ctx, const std::string& path, std::int64_t task_seed) {
  if (!path.empty()) return load_task(path);
  const World world(ctx.cfg.world);
  SyntheticTask t = generate_task(world, task_seed >= 0 ? static_cast<std::uint64_t>(task_seed) : ctx.cfg.suite.task_seed,
                                  ctx.cfg.task);
  add_shifted_tests(t, ctx.cfg.suite.shifts);
  return t;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- subcommands -----------------------------------------------------------------------------

int cmd_pretrain(const Common& c, const std::string& out) {
  const Context ctx = make_context(c);
  const World world(ctx.cfg.world);
  ctx.log("pretraining (" + std::to_string(ctx.cfg.pretrain.epochs) + " epochs)");
  const PretrainResult r = contrastive_pretrain(ctx.cfg.encoder, world, ctx.cfg.pretrain, c.seed);
  save_pair(out, r.pair,
            {{"provenance", ctx.prov()}, {"retrieval", r.retrieval}, {"loss_history", r.loss_history}, {"config", ctx.cfg.encoder},
             {"run_config", ctx.cfg}});
  std::cout << "retrieval " << fmt("%.4f", r.retrieval) << "\n";
  std::cout << "wrote " << artifact_stem(out) << ".pcmp\n";
  return kOk;
}

int cmd_upgrade(const Common& c, const std::string& base_path, const std::string& recipe_path, const std::string& out) {
  Context ctx = make_context(c);
  if (!recipe_path.empty()) {
    if (!std::filesystem::exists(recipe_path)) throw UsageError("recipe file '" + recipe_path + "' does not exist");
    try {
      ctx.cfg.upgrade = json::parse(read_text(recipe_path)).get<UpgradeRecipe>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad recipe: ") + e.what());
    }
    ctx.fingerprint = hex64(fnv1a(json(ctx.cfg).dump()));
  }
  const ModelPair base = load_pair(base_path);
  const World world(ctx.cfg.world);
  ctx.log("upgrading with recipe '" + ctx.cfg.upgrade.kind + "'");
  const UpgradeResult r = simulate_upgrade(base, world, ctx.cfg.upgrade, c.seed);
  save_pair(out, r.pair, {{"provenance", ctx.prov()}, {"upgrade", upgrade_manifest(r, ctx.cfg.upgrade)}});
  for (std::size_t i = 0; i < r.gate.base_acc.size(); ++i)
    std::cout << "gate task " << r.gate.task_seeds[i] << ": base " << fmt("%.2f", r.gate.base_acc[i]) << " upgraded "
              << fmt("%.2f", r.gate.upgraded_acc[i]) << "\n";
  std::cout << "attempts " << r.attempts << ", wrote " << artifact_stem(out) << ".pcmp\n";
  return kOk;
}

int cmd_make_task(const Common& c, std::int64_t task_seed, const std::string& out) {
  const Context ctx = make_context(c);
  const SyntheticTask t = resolve_task(ctx, "", task_seed);
  save_task(out, t, {{"provenance", ctx.prov()}});
  std::cout << "wrote " << artifact_stem(out) << ".pcmp (" << t.classes() << " classes)\n";
  return kOk;
}

struct TuneAxes {
  std::string ctx_len, lambda, heads, depth, condition;
  std::size_t epochs = 0;
  double lr = 0.0;
};

int cmd_tune(const Common& c, const std::string& base_path, const std::string& task_path, std::int64_t task_seed,
             const std::string& method_name, const TuneAxes& axes, const std::string& out_dir) {
  const Context ctx = make_context(c);
  const Method method = method_from_string(method_name);
  const ModelPair base = load_pair(base_path);
  const SyntheticTask task = resolve_task(ctx, task_path, task_seed);
  const World world(ctx.cfg.world);
  const TunerHyper h0 = ctx.cfg.hyper;
  const auto ctx_lens = axes.ctx_len.empty() ? std::vector<std::size_t>{h0.ctx_len} : parse_sizes(axes.ctx_len);
  const auto lambdas = axes.lambda.empty() ? std::vector<double>{h0.lambda} : parse_doubles(axes.lambda);
  const auto heads = axes.heads.empty() ? std::vector<std::size_t>{h0.heads} : parse_sizes(axes.heads);
  const auto depths = axes.depth.empty() ? std::vector<std::size_t>{h0.depth} : parse_sizes(axes.depth);
  const auto conds = axes.condition.empty() ? std::vector<std::string>{h0.condition} : split_list(axes.condition);
  for (const auto& cd : conds)
    if (cd != "class" && cd != "template") throw UsageError("--condition must be 'class' or 'template'");
  const ClassSpec spec = class_spec(task, world.template_tokens());
  for (std::size_t n : ctx_lens)
    for (double lam : lambdas)
      for (std::size_t hd : heads)
        for (std::size_t d : depths)
          for (const auto& cd : conds) {
            TunerHyper h = h0;
            h.ctx_len = n;
            h.lambda = lam;
            h.heads = hd;
            h.depth = d;
            h.condition = cd;
            if (axes.epochs > 0) h.epochs = axes.epochs;
            if (axes.lr > 0.0) h.lr = axes.lr;
            std::string stem = method_name;
            if (ctx_lens.size() > 1) stem += "_ctx" + std::to_string(n);
            if (lambdas.size() > 1) stem += "_lambda" + fmt("%g", lam);
            if (heads.size() > 1) stem += "_heads" + std::to_string(hd);
            if (depths.size() > 1) stem += "_depth" + std::to_string(d);
            if (conds.size() > 1) stem += "_" + cd;
            ctx.log("training " + stem);
            const TunerModule m = train_tuner(method, base, task, world.template_tokens(), h, c.seed);
            const double acc = evaluate_accuracy(m, base, spec, task.test);
            save_module(out_dir + "/" + stem, m, {{"provenance", ctx.prov()}, {"task_seed", task.seed}, {"base_test_accuracy", acc}});
            std::cout << stem << ": train " << fmt("%.2f", m.train_accuracy) << " test " << fmt("%.2f", acc) << "\n";
          }
  return kOk;
}

int cmd_eval(const Common& c, const std::string& pairs, const std::string& modules, const std::string& task_path,
             std::int64_t task_seed, const std::string& report_dir) {
  const Context ctx = make_context(c);
  const auto [bp, up] = parse_pairs(pairs);
  const ModelPair base = load_pair(bp), upgraded = load_pair(up);
  if (base.config != upgraded.config) throw ConfigError("pairs are not layer-aligned");
  const SyntheticTask task = resolve_task(ctx, task_path, task_seed);
  const World world(ctx.cfg.world);
  const ClassSpec spec = class_spec(task, world.template_tokens());
  CompatReport r;
  r.fingerprint = ctx.fingerprint;
  std::vector<Method> methods;
  for (const auto& path : split_list(modules)) {
    const TunerModule m = load_module(path);
    CompatCell cell{task_name(task), to_string(m.method), m.seed, 0, 0, 0, {}};
    try {
      cell.base = evaluate_accuracy(m, base, spec, task.test);
      cell.fresh = evaluate_accuracy(m, upgraded, spec, task.test);
      cell.h = harmonic_mean(cell.base, cell.fresh);
    } catch (const Error& e) {
      cell.error = e.what();
    }
    r.cells.push_back(cell);
    if (std::find(r.seeds.begin(), r.seeds.end(), m.seed) == r.seeds.end()) r.seeds.push_back(m.seed);
    if (std::find(methods.begin(), methods.end(), m.method) == methods.end()) methods.push_back(m.method);
  }
  if (r.cells.empty()) throw UsageError("--modules lists no module files");
  aggregate_rows(r, {{task_name(task), &task}}, methods);
  write_text(report_dir + "/compat.csv", ctx.head() + compat_csv(r));
  write_text(report_dir + "/compat_cells.csv", ctx.head() + compat_cells_csv(r));
  json j = to_json_value(r);
  j["provenance"] = ctx.prov();
  write_text(report_dir + "/compat.json", j.dump(2) + "\n");
  std::cout << compat_csv(r);
  return kOk;
}

int cmd_analyze(const Common& c, const std::string& pairs, const std::string& probes, const std::string& report_dir) {
  const Context ctx = make_context(c);
  const auto [bp, up] = parse_pairs(pairs);
  const ModelPair base = load_pair(bp), upgraded = load_pair(up);
  std::vector<TokenSeq> probe_set;
  if (probes == "auto") {
    probe_set = default_probes(World(ctx.cfg.world));
  } else {
    try {
      probe_set = json::parse(read_text(probes)).get<std::vector<TokenSeq>>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("probe file must be a JSON list of token lists: ") + e.what());
    }
  }
  const DriftProfile p = drift_profile(base.text, upgraded.text, probe_set);
  write_text(report_dir + "/drift.tsv", ctx.head() + drift_tsv(p));
  json j = to_json_value(p);
  j["provenance"] = ctx.prov();
  write_text(report_dir + "/drift.json", j.dump(2) + "\n");
  std::cout << drift_tsv(p);
  return kOk;
}

int cmd_sweep_depth(const Common& c, const std::string& pairs, const std::string& task_path, std::int64_t task_seed,
                    const std::string& depths, std::size_t seeds, const std::string& report_dir) {
  const Context ctx = make_context(c);
  const auto [bp, up] = parse_pairs(pairs);
  const ModelPair base = load_pair(bp), upgraded = load_pair(up);
  const SyntheticTask task = resolve_task(ctx, task_path, task_seed);
  const World world(ctx.cfg.world);
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(c.seed + i);
  const auto d = depths.empty() ? ctx.cfg.suite.depths : parse_sizes(depths);
  const DepthSweep s = depth_sweep(base, upgraded, task, world.template_tokens(), d, seed_list, ctx.cfg.hyper, c.threads);
  write_text(report_dir + "/sweep.tsv", ctx.head() + sweep_tsv(s));
  json j = to_json_value(s);
  j["provenance"] = ctx.prov();
  write_text(report_dir + "/sweep.json", j.dump(2) + "\n");
  std::cout << sweep_tsv(s);
  return kOk;
}

int cmd_reproduce(const Common& c, const std::string& out) {
  const Context ctx = make_context(c);
  const ReproduceResult r = reproduce(ctx.cfg, c.seed, out, c.threads, [&](const std::string& m) { ctx.log(m); });
  std::cout << "method,base,new,h\n";
  for (const auto& s : summarize_methods(r.compat))
    std::cout << s.method << ',' << fixed2(s.base) << ',' << fixed2(s.fresh) << ',' << fixed2(s.h) << "\n";
  std::cout << "wrote " << r.files.size() << " files to " << out << "\n";
  return kOk;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON run configuration");
  sub->add_option("--seed", c.seed, "seed");
  sub->add_flag("--quiet", c.quiet, "suppress progress messages");
  sub->add_option("--threads", c.threads, "evaluation worker threads")->check(CLI::PositiveNumber);
  sub->add_option("--workdir", c.workdir, "directory that relative paths resolve against");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pcmp: prompt tuning compatibility experiments on a toy dual encoder"};
  app.require_subcommand(1);
  Common common;

  std::string out, base, recipe, task_path, method = "contcoop", pairs, modules, report_dir = "reports", probes = "auto",
                                      depths;
  std::int64_t task_seed = -1;
  std::size_t sweep_seeds = 5;
  TuneAxes axes;

  auto* pretrain = app.add_subcommand("pretrain", "train a base pair");
  add_common(pretrain, common);
  pretrain->add_option("--out", out, "checkpoint path")->default_val("base");

  auto* upgrade = app.add_subcommand("upgrade", "upgrade a base pair behind the zero-shot gate");
  add_common(upgrade, common);
  upgrade->add_option("--base", base, "base checkpoint")->required();
  upgrade->add_option("--recipe", recipe, "JSON upgrade recipe");
  upgrade->add_option("--out", out, "checkpoint path")->default_val("upgraded");

  auto* make_task = app.add_subcommand("make-task", "write a synthetic task");
  add_common(make_task, common);
  make_task->add_option("--task-seed", task_seed, "task seed");
  make_task->add_option("--out", out, "task path")->default_val("task");

  auto* tune = app.add_subcommand("tune", "train tuning modules on a base pair");
  add_common(tune, common);
  tune->add_option("--base", base, "base checkpoint")->required();
  tune->add_option("--task", task_path, "task file (otherwise generated)");
  tune->add_option("--task-seed", task_seed, "seed of the generated task");
  tune->add_option("--method", method, "zs|lp|clip_adapter|tip_adapter|coop|cocoop|kgcoop|contcoop");
  tune->add_option("--ctx-len", axes.ctx_len, "context length(s), e.g. 4,8,16");
  tune->add_option("--lambda", axes.lambda, "distillation weight(s)");
  tune->add_option("--heads", axes.heads, "fuser head count(s)");
  tune->add_option("--depth", axes.depth, "prompt injection depth(s)");
  tune->add_option("--condition", axes.condition, "class|template");
  tune->add_option("--epochs", axes.epochs, "training epochs");
  tune->add_option("--lr", axes.lr, "learning rate");
  tune->add_option("--out", out, "output directory")->default_val("modules");

  auto* eval = app.add_subcommand("eval", "score modules on both pairs");
  add_common(eval, common);
  eval->add_option("--pairs", pairs, "base,upgraded checkpoints")->required();
  eval->add_option("--modules", modules, "comma-separated module files")->required();
  eval->add_option("--task", task_path, "task file");
  eval->add_option("--task-seed", task_seed, "seed of the generated task");
  eval->add_option("--report-dir", report_dir, "report directory");

  auto* analyze = app.add_subcommand("analyze", "per-layer drift between two pairs");
  add_common(analyze, common);
  analyze->add_option("--pairs", pairs, "base,upgraded checkpoints")->required();
  analyze->add_option("--probes", probes, "'auto' or a JSON file of token lists");
  analyze->add_option("--report-dir", report_dir, "report directory");

  auto* sweep = app.add_subcommand("sweep-depth", "CoOp trained at each depth, reused on the upgrade");
  add_common(sweep, common);
  sweep->add_option("--pairs", pairs, "base,upgraded checkpoints")->required();
  sweep->add_option("--task", task_path, "task file");
  sweep->add_option("--task-seed", task_seed, "seed of the generated task");
  sweep->add_option("--depths", depths, "e.g. 0..5");
  sweep->add_option("--seeds", sweep_seeds, "number of seeds")->check(CLI::PositiveNumber);
  sweep->add_option("--report-dir", report_dir, "report directory");

  auto* repro = app.add_subcommand("reproduce", "full pipeline with the default desk-scale configuration");
  add_common(repro, common);
  repro->add_option("--out", out, "output directory")->default_val("results");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*pretrain) return cmd_pretrain(common, out);
    if (*upgrade) return cmd_upgrade(common, base, recipe, out);
    if (*make_task) return cmd_make_task(common, task_seed, out);
    if (*tune) return cmd_tune(common, base, task_path, task_seed, method, axes, out);
    if (*eval) return cmd_eval(common, pairs, modules, task_path, task_seed, report_dir);
    if (*analyze) return cmd_analyze(common, pairs, probes, report_dir);
    if (*sweep) return cmd_sweep_depth(common, pairs, task_path, task_seed, depths, sweep_seeds, report_dir);
    if (*repro) return cmd_reproduce(common, out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return kUsage;
  } catch (const UpgradeError& e) {
    std::cerr << "gate failure: " << e.what() << "\n";
    return kFailure;
  } catch (const TrainingError& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return kFailure;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
