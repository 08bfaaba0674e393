#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcmp/data.hpp"
#include "pcmp/encoder.hpp"
#include "pcmp/tuners.hpp"

namespace pcmp {

/// Percent of argmax-correct predictions of `module` on `split`.
inline double accuracy(const ModelPair& pair, const TunerModule& module, const ClassSpec& spec, const Split& split) {
  return evaluate_accuracy(module, pair, spec, split);
}

inline double harmonic_mean(double base, double fresh) {
  if (base < 0.0 || fresh < 0.0) throw ConfigError("harmonic mean needs non-negative accuracies");
  if (base == 0.0 && fresh == 0.0) return 0.0;
  return 2.0 * base * fresh / (base + fresh);
}

/// Fixed-point rendering used by every emitted table.
inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// ---- compatibility --------------------------------------------------------------------

struct CompatCell {
  std::string task;
  std::string method;
  std::uint64_t seed = 0;
  double base = 0.0;
  double fresh = 0.0;  // accuracy on the upgraded pair
  double h = 0.0;
  std::string error;  // non-empty when training or scoring failed

  bool ok() const { return error.empty(); }
};

struct CompatRow {
  std::string task;
  std::string method;
  std::vector<std::uint64_t> seeds;  // seeds that completed
  double base = 0.0;
  double fresh = 0.0;
  double h = 0.0;
  std::string error;
};

struct CompatReport {
  std::string fingerprint;
  std::vector<std::uint64_t> seeds;
  std::vector<CompatRow> rows;    // one per (task, method), in request order
  std::vector<CompatCell> cells;  // one per (task, method, seed)

  const CompatRow& row(const std::string& task, const std::string& method) const {
    for (const auto& r : rows)
      if (r.task == task && r.method == method) return r;
    throw IndexError("no report row for " + task + "/" + method);
  }
};

struct CompatTask {
  std::string name;
  const SyntheticTask* task = nullptr;
};

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
template <class Fn>
void run_cells(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& th : pool) th.join();
}

inline CompatCell compat_cell(const ModelPair& base, const ModelPair& upgraded, const CompatTask& t, Method method,
                              const TokenSeq& template_tokens, const TunerHyper& hyper, std::uint64_t seed) {
  CompatCell c{t.name, to_string(method), seed, 0, 0, 0, {}};
  try {
    const ClassSpec spec = class_spec(*t.task, template_tokens);
    const TunerModule m = train_tuner(method, base, *t.task, template_tokens, hyper, seed);
    c.base = evaluate_accuracy(m, base, spec, t.task->test);
    c.fresh = evaluate_accuracy(m, upgraded, spec, t.task->test);
    c.h = harmonic_mean(c.base, c.fresh);
  } catch (const std::exception& e) {
    c.error = e.what();
  }
  return c;
}

/// Seed-averaged Base/New per row; H is taken of the averaged pair.
inline void aggregate_rows(CompatReport& r, const std::vector<CompatTask>& tasks, const std::vector<Method>& methods) {
  r.rows.clear();
  for (const auto& t : tasks)
    for (Method m : methods) {
      CompatRow row{t.name, to_string(m), {}, 0, 0, 0, {}};
      for (const auto& c : r.cells) {
        if (c.task != t.name || c.method != row.method) continue;
        if (!c.ok()) {
          if (row.error.empty()) row.error = c.error;
          continue;
        }
        row.seeds.push_back(c.seed);
        row.base += c.base;
        row.fresh += c.fresh;
      }
      if (!row.seeds.empty()) {
        row.base /= static_cast<double>(row.seeds.size());
        row.fresh /= static_cast<double>(row.seeds.size());
        row.h = harmonic_mean(row.base, row.fresh);
        row.error.clear();
      }
      r.rows.push_back(std::move(row));
    }
}

/// Trains every (task, method, seed) module on `base`, scores it on both pairs.
inline CompatReport compat_experiment(const ModelPair& base, const ModelPair& upgraded, const std::vector<CompatTask>& tasks,
                                      const std::vector<Method>& methods, const std::vector<std::uint64_t>& seeds,
                                      const TokenSeq& template_tokens, const TunerHyper& hyper = {},
                                      std::size_t threads = 1) {
  if (base.config != upgraded.config) throw ConfigError("compat_experiment needs layer-aligned pairs");
  if (seeds.empty()) throw ConfigError("compat_experiment needs at least one seed");
  CompatReport r;
  r.seeds = seeds;
  const std::size_t per_task = methods.size() * seeds.size();
  r.cells.resize(tasks.size() * per_task);
  run_cells(r.cells.size(), threads, [&](std::size_t i) {
    const auto& t = tasks[i / per_task];
    const std::size_t k = i % per_task;
    r.cells[i] = compat_cell(base, upgraded, t, methods[k / seeds.size()], template_tokens, hyper, seeds[k % seeds.size()]);
  });
  aggregate_rows(r, tasks, methods);
  return r;
}

/// Per-method means over the rows of all tasks.
struct MethodSummary {
  std::string method;
  double base = 0.0;
  double fresh = 0.0;
  double h = 0.0;
};

inline std::vector<MethodSummary> summarize_methods(const CompatReport& r) {
  std::vector<MethodSummary> out;
  for (const auto& row : r.rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const MethodSummary& s) { return s.method == row.method; });
    if (it == out.end()) {
      out.push_back({row.method, 0, 0, 0});
      it = out.end() - 1;
    }
  }
  for (auto& s : out) {
    std::size_t n = 0;
    for (const auto& row : r.rows)
      if (row.method == s.method && !row.seeds.empty()) {
        s.base += row.base;
        s.fresh += row.fresh;
        s.h += row.h;
        ++n;
      }
    if (n > 0) {
      s.base /= static_cast<double>(n);
      s.fresh /= static_cast<double>(n);
      s.h /= static_cast<double>(n);
    }
  }
  return out;
}

// ---- drift ------------------------------------------------------------------------------

struct LayerDrift {
  int layer = 0;  // -1 embeddings, 0..L-1 blocks, L output
  double param_abs = 0.0;
  double param_rel = 0.0;
  double feat_abs = 0.0;
  double feat_rel = 0.0;
};

struct DriftProfile {
  std::vector<LayerDrift> layers;  // ordered by layer

  LayerDrift& at(int layer) {
    for (auto& l : layers)
      if (l.layer == layer) return l;
    throw IndexError("no drift entry for layer " + std::to_string(layer));
  }
  const LayerDrift& at(int layer) const { return const_cast<DriftProfile*>(this)->at(layer); }
};

inline constexpr double kRelEps = 1e-8;

inline DriftProfile empty_profile(std::size_t layers) {
  DriftProfile p;
  for (int l = -1; l <= static_cast<int>(layers); ++l) p.layers.push_back({l, 0, 0, 0, 0});
  return p;
}

inline void require_aligned(const TextEncoder& a, const TextEncoder& b) {
  if (a.config() != b.config()) throw ConfigError("drift analysis needs layer-aligned encoders");
}

/// Mean |Δθ| and mean |Δθ|/(|θ|+eps) over every scalar of each layer.
inline DriftProfile layer_param_change(const TextEncoder& base, const TextEncoder& upgraded) {
  require_aligned(base, upgraded);
  DriftProfile p = empty_profile(base.config().layers);
  std::vector<std::size_t> counts(p.layers.size(), 0);
  for (const auto& [name, t] : base.params().values()) {
    const Tensor& u = upgraded.params().at(name);
    if (u.shape() != t.shape()) throw DimensionError("parameter " + name + " changed shape");
    const int l = base.layer_of(name);
    auto& entry = p.at(l);
    auto& n = counts[static_cast<std::size_t>(l + 1)];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double d = std::abs(u.values()[i] - t.values()[i]);
      entry.param_abs += d;
      entry.param_rel += d / (std::abs(t.values()[i]) + kRelEps);
    }
    n += t.size();
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i)
    if (counts[i] > 0) {
      p.layers[i].param_abs /= static_cast<double>(counts[i]);
      p.layers[i].param_rel /= static_cast<double>(counts[i]);
    }
  return p;
}

/// The zero-shot template followed by each class token.
inline std::vector<TokenSeq> default_probes(const World& world) {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < world.class_token_count(); ++i)
    out.push_back(concat_tokens(world.template_tokens(), {world.first_class_token() + i}));
  return out;
}

/// Per-layer mean |Δh| and |Δh|/(|h|+eps) over probes, positions and dimensions.
/// Layer -1 is the embedding output, L the final projected feature.
inline DriftProfile layer_feature_change(const TextEncoder& base, const TextEncoder& upgraded,
                                         const std::vector<TokenSeq>& probes) {
  require_aligned(base, upgraded);
  if (probes.empty()) throw ConfigError("feature drift needs at least one probe");
  const std::size_t layers = base.config().layers;
  DriftProfile p = empty_profile(layers);
  std::vector<std::size_t> counts(p.layers.size(), 0);
  auto accumulate = [&](std::size_t slot, const Tensor& a, const Tensor& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = std::abs(b.values()[i] - a.values()[i]);
      p.layers[slot].feat_abs += d;
      p.layers[slot].feat_rel += d / (std::abs(a.values()[i]) + kRelEps);
    }
    counts[slot] += a.size();
  };
  for (const auto& probe : probes) {
    const auto ha = text_hidden_states(base, probe);
    const auto hb = text_hidden_states(upgraded, probe);
    for (std::size_t s = 0; s < ha.size(); ++s) accumulate(s, ha[s], hb[s]);
    accumulate(layers + 1, encode_text(base, probe), encode_text(upgraded, probe));
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i)
    if (counts[i] > 0) {
      p.layers[i].feat_abs /= static_cast<double>(counts[i]);
      p.layers[i].feat_rel /= static_cast<double>(counts[i]);
    }
  return p;
}

inline DriftProfile drift_profile(const TextEncoder& base, const TextEncoder& upgraded, const std::vector<TokenSeq>& probes) {
  DriftProfile p = layer_param_change(base, upgraded);
  const DriftProfile f = layer_feature_change(base, upgraded, probes);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    p.layers[i].feat_abs = f.layers[i].feat_abs;
    p.layers[i].feat_rel = f.layers[i].feat_rel;
  }
  return p;
}

/// Ranks starting at 1, ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Spearman rank correlation; 0 when either side is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("spearman needs equal-length inputs");
  if (x.size() < 2) throw ConfigError("spearman needs at least two points");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

/// Spearman of block depth against the chosen drift field, over blocks 0..L-1.
inline double depth_trend(const DriftProfile& p, double LayerDrift::*field) {
  std::vector<double> depth, value;
  for (const auto& l : p.layers)
    if (l.layer >= 0 && l.layer < static_cast<int>(p.layers.size()) - 2) {
      depth.push_back(l.layer);
      value.push_back(l.*field);
    }
  return spearman(depth, value);
}

// ---- depth sweep --------------------------------------------------------------------------

struct SweepPoint {
  std::size_t depth = 0;
  double base = 0.0;  // means over seeds
  double fresh = 0.0;
  std::vector<double> base_per_seed;
  std::vector<double> fresh_per_seed;
};

struct DepthSweep {
  std::vector<std::uint64_t> seeds;
  std::vector<SweepPoint> points;

  /// Spearman(depth, New) computed separately for each seed.
  std::vector<double> new_trend_per_seed() const {
    std::vector<double> out;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      std::vector<double> d, v;
      for (const auto& p : points) {
        d.push_back(static_cast<double>(p.depth));
        v.push_back(p.fresh_per_seed[s]);
      }
      out.push_back(spearman(d, v));
    }
    return out;
  }
};

/// CoOp trained with prompts injected at each depth, reused on the upgraded pair.
inline DepthSweep depth_sweep(const ModelPair& base, const ModelPair& upgraded, const SyntheticTask& task,
                              const TokenSeq& template_tokens, const std::vector<std::size_t>& depths,
                              const std::vector<std::uint64_t>& seeds, TunerHyper hyper = {}, std::size_t threads = 1) {
  for (std::size_t d : depths)
    if (d >= base.config.layers) throw ConfigError("sweep depth " + std::to_string(d) + " outside [0, L-1]");
  DepthSweep out;
  out.seeds = seeds;
  const ClassSpec spec = class_spec(task, template_tokens);
  std::vector<std::pair<double, double>> cells(depths.size() * seeds.size());
  run_cells(cells.size(), threads, [&](std::size_t i) {
    TunerHyper h = hyper;
    h.depth = depths[i / seeds.size()];
    const TunerModule m = train_tuner(Method::coop, base, task, template_tokens, h, seeds[i % seeds.size()]);
    cells[i] = {evaluate_accuracy(m, base, spec, task.test), evaluate_accuracy(m, upgraded, spec, task.test)};
  });
  for (std::size_t di = 0; di < depths.size(); ++di) {
    SweepPoint p;
    p.depth = depths[di];
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& [b, n] = cells[di * seeds.size() + s];
      p.base_per_seed.push_back(b);
      p.fresh_per_seed.push_back(n);
      p.base += b;
      p.fresh += n;
    }
    p.base /= static_cast<double>(seeds.size());
    p.fresh /= static_cast<double>(seeds.size());
    out.points.push_back(std::move(p));
  }
  return out;
}

// ---- out-of-distribution ------------------------------------------------------------------

struct OodRow {
  std::string method;
  double source = 0.0;
  std::vector<double> shifted;  // aligned with OodTable::shifts

  double shifted_mean() const {
    if (shifted.empty()) return 0.0;
    double s = 0.0;
    for (double v : shifted) s += v;
    return s / static_cast<double>(shifted.size());
  }
};

struct OodTable {
  std::vector<std::string> shifts;
  std::vector<OodRow> rows;
};

/// Accuracy on the source test split and on every shifted split, no retraining.
inline OodRow ood_eval(const ModelPair& pair, const TunerModule& module, const SyntheticTask& task,
                       const TokenSeq& template_tokens) {
  if (task.shifted_tests.empty()) throw ConfigError("ood_eval needs shifted test splits");
  const ClassSpec spec = class_spec(task, template_tokens);
  OodRow row{to_string(module.method), evaluate_accuracy(module, pair, spec, task.test), {}};
  for (const auto& [shift, split] : task.shifted_tests) row.shifted.push_back(evaluate_accuracy(module, pair, spec, split));
  return row;
}

inline OodTable ood_table(const ModelPair& pair, const std::vector<TunerModule>& modules, const SyntheticTask& task,
                          const TokenSeq& template_tokens) {
  OodTable t;
  for (const auto& [shift, split] : task.shifted_tests) t.shifts.push_back(shift.name());
  for (const auto& m : modules) t.rows.push_back(ood_eval(pair, m, task, template_tokens));
  return t;
}

// ---- emitters ---------------------------------------------------------------------------------

inline std::string provenance_comment(const std::string& fingerprint, std::uint64_t seed) {
  return "# fingerprint=" + fingerprint + " seed=" + std::to_string(seed) + "\n";
}

/// One line per (task, method); the seed column lists the seeds averaged.
inline std::string compat_csv(const CompatReport& r) {
  std::ostringstream o;
  o << "task,method,seed,base,new,h\n";
  for (const auto& row : r.rows) {
    std::string seeds;
    for (std::size_t i = 0; i < row.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(row.seeds[i]);
    o << row.task << ',' << row.method << ',' << seeds << ',' << fixed2(row.base) << ',' << fixed2(row.fresh) << ','
      << fixed2(row.h) << '\n';
  }
  return o.str();
}

inline std::string compat_cells_csv(const CompatReport& r) {
  std::ostringstream o;
  o << "task,method,seed,base,new,h\n";
  for (const auto& c : r.cells) {
    if (!c.ok()) continue;
    o << c.task << ',' << c.method << ',' << c.seed << ',' << fixed2(c.base) << ',' << fixed2(c.fresh) << ',' << fixed2(c.h)
      << '\n';
  }
  return o.str();
}

inline json to_json_value(const CompatReport& r) {
  json rows = json::array(), cells = json::array();
  for (const auto& row : r.rows) {
    json j{{"task", row.task}, {"method", row.method}, {"seeds", row.seeds},
           {"base", row.base}, {"new", row.fresh},      {"h", row.h}};
    if (!row.error.empty()) j["error"] = row.error;
    rows.push_back(std::move(j));
  }
  for (const auto& c : r.cells) {
    json j{{"task", c.task}, {"method", c.method}, {"seed", c.seed}, {"base", c.base}, {"new", c.fresh}, {"h", c.h}};
    if (!c.ok()) j["error"] = c.error;
    cells.push_back(std::move(j));
  }
  json summary = json::array();
  for (const auto& s : summarize_methods(r))
    summary.push_back({{"method", s.method}, {"base", s.base}, {"new", s.fresh}, {"h", s.h}});
  return json{{"fingerprint", r.fingerprint}, {"seeds", r.seeds}, {"rows", rows}, {"cells", cells}, {"summary", summary}};
}

inline json to_json_value(const DriftProfile& p) {
  json a = json::array();
  for (const auto& l : p.layers)
    a.push_back({{"layer", l.layer},
                 {"param_abs", l.param_abs},
                 {"param_rel", l.param_rel},
                 {"feat_abs", l.feat_abs},
                 {"feat_rel", l.feat_rel}});
  return json{{"layers", a},
              {"spearman_param_rel", depth_trend(p, &LayerDrift::param_rel)},
              {"spearman_feat_rel", depth_trend(p, &LayerDrift::feat_rel)}};
}

inline json to_json_value(const DepthSweep& s) {
  json pts = json::array();
  for (const auto& p : s.points)
    pts.push_back({{"depth", p.depth},
                   {"base", p.base},
                   {"new", p.fresh},
                   {"base_per_seed", p.base_per_seed},
                   {"new_per_seed", p.fresh_per_seed}});
  return json{{"seeds", s.seeds}, {"points", pts}, {"spearman_new_per_seed", s.new_trend_per_seed()}};
}

inline json to_json_value(const OodTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"method", r.method}, {"source", r.source}, {"shifted", r.shifted}, {"shifted_mean", r.shifted_mean()}});
  return json{{"shifts", t.shifts}, {"rows", rows}};
}

inline std::string number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string drift_tsv(const DriftProfile& p) {
  std::ostringstream o;
  o << "layer\tparam_abs\tparam_rel\tfeat_abs\tfeat_rel\n";
  for (const auto& l : p.layers)
    o << l.layer << '\t' << number(l.param_abs) << '\t' << number(l.param_rel) << '\t' << number(l.feat_abs) << '\t'
      << number(l.feat_rel) << '\n';
  return o.str();
}

inline std::string sweep_tsv(const DepthSweep& s) {
  std::ostringstream o;
  o << "depth\tbase\tnew\n";
  for (const auto& p : s.points) o << p.depth << '\t' << fixed2(p.base) << '\t' << fixed2(p.fresh) << '\n';
  return o.str();
}

inline std::string ood_tsv(const OodTable& t) {
  std::ostringstream o;
  o << "method\tsource";
  for (const auto& s : t.shifts) o << '\t' << s;
  o << "\tshifted_mean\n";
  for (const auto& r : t.rows) {
    o << r.method << '\t' << fixed2(r.source);
    for (double v : r.shifted) o << '\t' << fixed2(v);
    o << '\t' << fixed2(r.shifted_mean()) << '\n';
  }
  return o.str();
}

}  // namespace pcmp
