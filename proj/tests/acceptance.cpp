#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "grad_suite.hpp"
#include "pcmp/pipeline.hpp"

using namespace pcmp;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

/// Runs the full pipeline and records the wall time of every stage it logs.
struct TimedRun {
  ReproduceResult result;
  std::map<std::string, double> stage_seconds;
};

TimedRun timed_reproduce(const RunConfig& cfg, const std::string& dir) {
  TimedRun run;
  std::string stage;
  Clock::time_point start = Clock::now();
  auto log = [&](const std::string& next) {
    if (!stage.empty()) run.stage_seconds[stage] = seconds_since(start);
    std::fprintf(stderr, "[acceptance] %s\n", next.c_str());
    stage = next;
    start = Clock::now();
  };
  run.result = reproduce(cfg, 1, dir, 1, log);
  run.stage_seconds[stage] = seconds_since(start);
  return run;
}

std::string slurp(const fs::path& p) { return read_text(p.string()); }

void criterion_1() {
  const double a = harmonic_mean(81.27, 79.32), b = harmonic_mean(79.94, 75.40), c = harmonic_mean(65.51, 70.79);
  const bool ok = std::abs(a - 80.28) <= 0.01 && std::abs(b - 77.60) <= 0.01 && std::abs(c - 68.04) <= 0.01;
  verdict(1, ok, "H=" + fmt("%.4f", a) + "," + fmt("%.4f", b) + "," + fmt("%.4f", c));
}

void criterion_2() {
  const auto t0 = Clock::now();
  std::size_t checks = 0, failed = 0;
  double worst = 0.0;
  std::string worst_at;
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    for (const auto& r : testing::run_grad_suite(seed)) {
      ++checks;
      if (!r.passed) ++failed;
      if (r.rel_error > worst) {
        worst = r.rel_error;
        worst_at = r.label + ":" + r.param + "@" + std::to_string(seed);
      }
    }
  const double secs = seconds_since(t0);
  verdict(2, failed == 0 && secs < 60.0,
          std::to_string(checks) + " checks over 20 seeds, " + std::to_string(failed) + " failed, worst rel " + fmt("%.3g", worst) +
              " (" + worst_at + "), " + fmt("%.1f", secs) + " s");
}

void criterion_3(const ModelPair& base, const SyntheticTask& task, const TokenSeq& tmpl) {
  const auto t0 = Clock::now();
  TunerHyper h;
  h.zero_init_output = true;
  const ClassSpec spec = class_spec(task, tmpl);
  bool bitwise = true;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const TunerModule cont = init_module(Method::contcoop, h, base, task, seed);
    const TunerModule coop = init_module(Method::coop, h, base, task, seed);
    bitwise = bitwise && build_contcoop_classifier(cont, base, spec) == build_classifier(coop, base, spec);
  }
  h.freeze_fuser = true;
  h.lambda = 0.0;
  const TunerModule cont = train_tuner(Method::contcoop, base, task, tmpl, h, 1);
  const TunerModule coop = train_tuner(Method::coop, base, task, tmpl, h, 1);
  double worst = cont.loss_history.size() == coop.loss_history.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(cont.loss_history.size(), coop.loss_history.size()); ++i)
    worst = std::max(worst, std::abs(cont.loss_history[i] - coop.loss_history[i]));
  verdict(3, bitwise && worst <= 1e-12,
          std::string("classifier at init ") + (bitwise ? "bitwise equal" : "DIFFERS") + ", max loss gap over " +
              std::to_string(coop.loss_history.size()) + " full-batch steps " + fmt("%.3g", worst) + ", " + fmt("%.1f", seconds_since(t0)) +
              " s");
}

void criterion_4(const ReproduceResult& r, const fs::path& dir) {
  const auto base_now = encode_container(pair_tensors(r.pretrain.pair));
  const auto up_now = encode_container(pair_tensors(r.upgrade.pair));
  const std::string base_file = slurp(dir / "base.pcmp"), up_file = slurp(dir / "upgraded.pcmp");
  const bool ok = base_file == std::string(base_now.begin(), base_now.end()) && up_file == std::string(up_now.begin(), up_now.end());
  verdict(4, ok,
          "checkpoints written before training vs encoders after " + std::to_string(r.compat.cells.size()) +
              " trainings of every method: " + (ok ? "identical" : "DIFFER"));
}

void criterion_5(const RunConfig& cfg, const ReproduceResult& r) {
  const auto t0 = Clock::now();
  const World world(cfg.world);
  const auto probes = default_probes(world);
  std::size_t param_pos = 0, feat_pos = 0;
  std::string detail;
  for (std::uint64_t s = 2; s <= 6; ++s) {
    const ModelPair up = s == 2 ? r.upgrade.pair : simulate_upgrade(r.pretrain.pair, world, cfg.upgrade, s).pair;
    const DriftProfile p = drift_profile(r.pretrain.pair.text, up.text, probes);
    const double rp = depth_trend(p, &LayerDrift::param_rel), rf = depth_trend(p, &LayerDrift::feat_rel);
    param_pos += rp > 0.0;
    feat_pos += rf > 0.0;
    detail += " (" + fmt("%.2f", rp) + "," + fmt("%.2f", rf) + ")";
  }
  const double secs = seconds_since(t0);
  verdict(5, param_pos >= 4 && feat_pos >= 4 && secs < 300.0,
          "rho>0 param " + std::to_string(param_pos) + "/5, feature " + std::to_string(feat_pos) + "/5; (param,feat):" + detail +
              ", " + fmt("%.1f", secs) + " s");
}

void criterion_6(const DepthSweep& s, double secs) {
  const auto trends = s.new_trend_per_seed();
  std::size_t neg = 0;
  std::string rhos;
  for (double t : trends) {
    neg += t < 0.0;
    rhos += " " + fmt("%.2f", t);
  }
  const double first = s.points.front().fresh, last = s.points.back().fresh;
  const bool full_range = s.points.size() == 6 && s.points.front().depth == 0 && s.points.back().depth == 5;
  verdict(6, full_range && neg >= 4 && last < first && secs < 600.0,
          "rho<0 in " + std::to_string(neg) + "/" + std::to_string(trends.size()) + " seeds (" + rhos.substr(1) + "), New(0)=" +
              fmt("%.2f", first) + " New(5)=" + fmt("%.2f", last) + ", " + fmt("%.1f", secs) + " s");
}

void criterion_7(const CompatReport& r, double secs) {
  const auto summary = summarize_methods(r);
  std::map<std::string, MethodSummary> by;
  for (const auto& s : summary) by[s.method] = s;
  bool complete = r.rows.size() == 5 * summary.size() && r.seeds.size() == 3;
  for (const auto& row : r.rows) complete = complete && row.seeds.size() == 3;
  const bool a = by.at("lp").fresh < by.at("zs").fresh;
  const bool b = by.at("contcoop").fresh > by.at("coop").fresh;
  std::string best;
  double best_h = -1.0;
  for (const auto& s : summary)
    if (s.h > best_h) {
      best_h = s.h;
      best = s.method;
    }
  const bool c = best == "contcoop";
  std::string table;
  for (const auto& s : summary) table += " " + s.method + "=" + fixed2(s.fresh) + "/" + fixed2(s.h);
  verdict(7, complete && a && b && c && secs < 900.0,
          std::string("(a) ") + (a ? "ok" : "no") + " LP New " + fixed2(by.at("lp").fresh) + " vs ZS " + fixed2(by.at("zs").fresh) +
              "; (b) " + (b ? "ok" : "no") + " ContCoOp New " + fixed2(by.at("contcoop").fresh) + " vs CoOp " +
              fixed2(by.at("coop").fresh) + "; (c) " + (c ? "ok" : "no") + " max H " + best + "; New/H:" + table + ", " +
              fmt("%.1f", secs) + " s");
}

void criterion_8() {
  const Tensor one = Tensor::matrix(1, 1, {1.0});
  const AttnFuser f{one, one, one, one, 1};
  const double fused = attn_fuse(one, Tensor::matrix(1, 1, {3.0}), f)[0];
  const double prompt = class_conditioned_prompts(one, Tensor::matrix(1, 1, {3.0}), f)[0];
  bool ok = std::abs(fused - 2.76160) <= 1e-4 && std::abs(prompt - 3.76160) <= 1e-4;
  Rng rng(8);
  const Tensor p = rng.normal_tensor({16, 32}, 0.1), c = rng.normal_tensor({1, 32}, 0.1);
  for (std::size_t heads : {1u, 2u, 4u}) {
    const AttnFuser g{rng.normal_tensor({32, 32}, 0.2), rng.normal_tensor({32, 32}, 0.2), rng.normal_tensor({32, 32}, 0.2),
                      rng.normal_tensor({32, 32}, 0.2), heads};
    const Tensor out = attn_fuse(p, c, g);
    ok = ok && out.shape() == p.shape() && out.all_finite();
  }
  verdict(8, ok, "fused " + fmt("%.5f", fused) + ", prompt " + fmt("%.5f", prompt) + ", heads 1/2/4 shape [16x32]");
}

void criterion_9(const OodTable& t, std::size_t seeds, double secs) {
  double cont = NAN, coop = NAN;
  std::string table;
  for (const auto& r : t.rows) {
    if (r.method == "contcoop") cont = r.shifted_mean();
    if (r.method == "coop") coop = r.shifted_mean();
    table += " " + r.method + "=" + fixed2(r.shifted_mean());
  }
  verdict(9, seeds == 5 && cont >= coop,
          "mean shifted accuracy over " + std::to_string(seeds) + " seeds:" + table + ", " + fmt("%.1f", secs) + " s");
}

void criterion_10(const fs::path& a, const fs::path& b) {
  std::size_t total = 0, same = 0;
  std::string differing;
  for (const auto& e : fs::directory_iterator(a)) {
    const fs::path other = b / e.path().filename();
    ++total;
    if (fs::exists(other) && slurp(e.path()) == slurp(other))
      ++same;
    else
      differing += " " + e.path().filename().string();
  }
  verdict(10, total > 0 && same == total,
          std::to_string(same) + "/" + std::to_string(total) + " output files byte-identical across two full runs" +
              (differing.empty() ? "" : "; differing:" + differing));
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / ("pcmp_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const RunConfig cfg;
  const World world(cfg.world);

  criterion_1();
  criterion_2();
  criterion_8();

  const TimedRun first = timed_reproduce(cfg, (root / "run1").string());
  const ReproduceResult& r = first.result;
  const SyntheticTask task = suite_tasks(world, cfg).front();

  criterion_3(r.pretrain.pair, task, world.template_tokens());
  criterion_4(r, root / "run1");
  criterion_5(cfg, r);
  criterion_6(r.sweep, first.stage_seconds.at("depth sweep"));
  criterion_7(r.compat, first.stage_seconds.at("compatibility suite"));
  criterion_9(r.ood, cfg.suite.ood_seeds.size(), first.stage_seconds.at("shifted splits"));

  timed_reproduce(cfg, (root / "run2").string());
  criterion_10(root / "run1", root / "run2");

  std::printf("stage seconds (first run):");
  for (const auto& [stage, s] : first.stage_seconds) std::printf(" %s=%.1f", stage.c_str(), s);
  std::printf("\n%d of 10 criteria failed\n", failures);
  fs::remove_all(root);
  return failures == 0 ? 0 : 1;
}
