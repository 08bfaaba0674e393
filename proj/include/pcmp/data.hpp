#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pcmp/container.hpp"
#include "pcmp/encoder.hpp"
#include "pcmp/rng.hpp"
#include "pcmp/tensor.hpp"

namespace pcmp {

/// The shared "world" behind pretraining and every downstream task: each
/// class token owns a prototype direction in image space; tokens below
/// `filler_tokens` are function words used in captions and the template.
struct WorldConfig {
  std::uint64_t seed = 7;
  std::size_t vocab = 64;
  std::size_t img_dim = 16;
  std::size_t filler_tokens = 8;
  TokenSeq template_tokens{1, 2, 3, 4};
  double pair_noise = 0.15;       // per-dimension sigma of pretraining images
  double template_caption_p = 0.5;  // share of captions using the exact template

  bool operator==(const WorldConfig&) const = default;
};

inline void to_json(json& j, const WorldConfig& w) {
  j = json{{"seed", w.seed},
           {"vocab", w.vocab},
           {"img_dim", w.img_dim},
           {"filler_tokens", w.filler_tokens},
           {"template_tokens", w.template_tokens},
           {"pair_noise", w.pair_noise},
           {"template_caption_p", w.template_caption_p}};
}

inline void from_json(const json& j, WorldConfig& w) {
  WorldConfig d;
  w.seed = j.value("seed", d.seed);
  w.vocab = j.value("vocab", d.vocab);
  w.img_dim = j.value("img_dim", d.img_dim);
  w.filler_tokens = j.value("filler_tokens", d.filler_tokens);
  w.template_tokens = j.value("template_tokens", d.template_tokens);
  w.pair_noise = j.value("pair_noise", d.pair_noise);
  w.template_caption_p = j.value("template_caption_p", d.template_caption_p);
}

class World {
 public:
  explicit World(WorldConfig cfg = {}) : cfg_(std::move(cfg)), prototypes_({cfg_.vocab, cfg_.img_dim}) {
    if (cfg_.filler_tokens >= cfg_.vocab) throw ConfigError("no class tokens left in the vocabulary");
    for (std::size_t t : cfg_.template_tokens)
      if (t >= cfg_.filler_tokens) throw ConfigError("template tokens must be filler tokens");
    Rng rng(cfg_.seed);
    for (std::size_t t = cfg_.filler_tokens; t < cfg_.vocab; ++t) {
      auto row = prototypes_.row(t);
      for (double& v : row) v = rng.normal();
      const double n = l2_norm(row);
      for (double& v : row) v /= n;
    }
  }

  const WorldConfig& config() const { return cfg_; }
  std::size_t first_class_token() const { return cfg_.filler_tokens; }
  std::size_t class_token_count() const { return cfg_.vocab - cfg_.filler_tokens; }
  const TokenSeq& template_tokens() const { return cfg_.template_tokens; }
  std::span<const double> prototype(std::size_t token) const { return prototypes_.row(token); }

  std::vector<TokenSeq> all_class_tokens() const {
    std::vector<TokenSeq> out;
    for (std::size_t t = cfg_.filler_tokens; t < cfg_.vocab; ++t) out.push_back({t});
    return out;
  }

 private:
  WorldConfig cfg_;
  Tensor prototypes_;
};

/// Image/caption pairs. Every caption is four filler tokens then the class token.
struct PairBatch {
  Tensor images;  // [n x d_img]
  std::vector<TokenSeq> captions;
  std::vector<std::size_t> class_token;
};

/// Random orthogonal map with determinant +1 via the Cayley transform of a
/// random skew matrix; `magnitude` scales the skew part (0 gives identity).
inline Tensor random_rotation(std::size_t dim, double magnitude, Rng& rng) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = i + 1; j < dim; ++j) {
      const double v = rng.normal();
      a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = -v;
    }
  const double fro = a.norm();
  if (fro > 0.0) a *= magnitude / fro;
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  const Eigen::MatrixXd r = (id - a).partialPivLu().solve(id + a);
  const double det = r.determinant();
  if (std::abs(det - 1.0) > 1e-9 || !((r.transpose() * r - id).norm() < 1e-9)) {
    throw GenerationError("rotation construction lost orthogonality (det " + std::to_string(det) + ")");
  }
  Tensor out({dim, dim});
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) out.at(i, j) = r(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

/// x <- x R^T for every row.
inline Tensor rotate_rows(const Tensor& x, const Tensor& rot) {
  Tensor out(x.shape());
  kernels::matmul_nt(x.data(), rot.data(), out.data(), x.rows(), x.cols(), rot.rows());
  return out;
}

inline PairBatch sample_pairs(const World& world, Rng& rng, std::size_t n, const Tensor* rotation = nullptr) {
  const auto& cfg = world.config();
  PairBatch out{Tensor({n, cfg.img_dim}), {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t tok = world.first_class_token() + rng.below(world.class_token_count());
    auto row = out.images.row(i);
    const auto proto = world.prototype(tok);
    for (std::size_t d = 0; d < cfg.img_dim; ++d) row[d] = proto[d] + cfg.pair_noise * rng.normal();
    TokenSeq cap;
    if (rng.uniform() < cfg.template_caption_p) {
      cap = cfg.template_tokens;
    } else {
      for (std::size_t k = 0; k < cfg.template_tokens.size(); ++k) cap.push_back(rng.below(cfg.filler_tokens));
    }
    cap.push_back(tok);
    out.captions.push_back(std::move(cap));
    out.class_token.push_back(tok);
  }
  if (rotation) out.images = rotate_rows(out.images, *rotation);
  return out;
}

// ---- downstream tasks ---------------------------------------------------------

struct TaskConfig {
  std::size_t classes = 8;
  std::size_t shots = 16;
  std::size_t test_per_class = 64;
  /// Accepted prototypes satisfy max pairwise |cos| <= 1 - class_separation.
  double class_separation = 0.7;
  double noise = 0.25;          // per-dimension sample sigma
  double domain_rotation = 0.3;  // task-level rotation of all prototypes
  double class_jitter = 0.3;    // per-class prototype offset before rotation
  /// Weight of a second, randomly drawn concept mixed into each class prototype.
  double concept_mix = 1.0;

  bool operator==(const TaskConfig&) const = default;
};

inline void to_json(json& j, const TaskConfig& t) {
  j = json{{"classes", t.classes},
           {"shots", t.shots},
           {"test_per_class", t.test_per_class},
           {"class_separation", t.class_separation},
           {"noise", t.noise},
           {"domain_rotation", t.domain_rotation},
           {"class_jitter", t.class_jitter},
           {"concept_mix", t.concept_mix}};
}

inline void from_json(const json& j, TaskConfig& t) {
  TaskConfig d;
  t.classes = j.value("classes", d.classes);
  t.shots = j.value("shots", d.shots);
  t.test_per_class = j.value("test_per_class", d.test_per_class);
  t.class_separation = j.value("class_separation", d.class_separation);
  t.noise = j.value("noise", d.noise);
  t.domain_rotation = j.value("domain_rotation", d.domain_rotation);
  t.class_jitter = j.value("class_jitter", d.class_jitter);
  t.concept_mix = j.value("concept_mix", d.concept_mix);
}

struct Split {
  Tensor x;  // [n x d_img]
  std::vector<std::size_t> y;

  std::size_t size() const { return y.size(); }
  bool operator==(const Split&) const = default;
};

struct ShiftSpec {
  std::string kind;  // "noise" | "rotation" | "scale"
  double magnitude = 0.0;
  std::uint64_t seed = 0;

  std::string name() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s@%g", kind.c_str(), magnitude);
    return buf;
  }
  bool operator==(const ShiftSpec&) const = default;
};

inline void to_json(json& j, const ShiftSpec& s) { j = json{{"kind", s.kind}, {"magnitude", s.magnitude}, {"seed", s.seed}}; }
inline void from_json(const json& j, ShiftSpec& s) {
  s.kind = j.at("kind").get<std::string>();
  s.magnitude = j.at("magnitude").get<double>();
  s.seed = j.value("seed", std::uint64_t{0});
}

/// Shifts used for the out-of-distribution tables.
inline std::vector<ShiftSpec> default_shifts() {
  return {{"noise", 0.3, 101}, {"rotation", 0.5, 102}, {"scale", 0.5, 103}};
}

struct SyntheticTask {
  std::uint64_t seed = 0;
  TaskConfig config;
  std::vector<TokenSeq> class_tokens;
  Tensor prototypes;  // [C x d_img]
  Split train;
  Split test;
  std::vector<std::pair<ShiftSpec, Split>> shifted_tests;

  std::size_t classes() const { return class_tokens.size(); }
};

/// Largest |cos| over distinct prototype pairs.
inline double max_pairwise_abs_cos(const Tensor& protos) {
  double m = 0.0;
  for (std::size_t i = 0; i < protos.rows(); ++i)
    for (std::size_t j = i + 1; j < protos.rows(); ++j) m = std::max(m, std::abs(cosine(protos.row(i), protos.row(j))));
  return m;
}

inline SyntheticTask generate_task(const World& world, std::uint64_t seed, const TaskConfig& cfg) {
  const std::size_t c = cfg.classes, d = world.config().img_dim;
  if (c < 2 || cfg.shots < 1 || cfg.test_per_class < 1) throw ConfigError("task needs C >= 2, K >= 1, M >= 1");
  if (c > world.class_token_count()) {
    throw ConfigError("task asks for " + std::to_string(c) + " classes but the vocabulary reserves " +
                      std::to_string(world.class_token_count()));
  }
  const double bound = 1.0 - cfg.class_separation;
  Rng rng(seed);
  Rng proto_rng = rng.fork(1);
  const Tensor rot = random_rotation(d, cfg.domain_rotation, proto_rng);

  // Greedy rejection: walk a random token order, keep a token when its
  // task prototype is within the cosine bound of every kept one; restart on failure.
  SyntheticTask task;
  task.seed = seed;
  task.config = cfg;
  constexpr int kAttempts = 200;
  bool ok = false;
  for (int attempt = 0; attempt < kAttempts && !ok; ++attempt) {
    std::vector<std::size_t> order = proto_rng.permutation(world.class_token_count());
    std::vector<std::size_t> chosen;
    std::vector<std::vector<double>> kept;
    for (std::size_t idx : order) {
      const std::size_t tok = world.first_class_token() + idx;
      std::vector<double> v(world.prototype(tok).begin(), world.prototype(tok).end());
      if (cfg.concept_mix != 0.0) {
        const std::size_t other = world.first_class_token() +
                                  (idx + 1 + proto_rng.below(world.class_token_count() - 1)) % world.class_token_count();
        const auto u = world.prototype(other);
        for (std::size_t i = 0; i < d; ++i) v[i] += cfg.concept_mix * u[i];
      }
      for (double& x : v) x += cfg.class_jitter / std::sqrt(static_cast<double>(d)) * proto_rng.normal();
      std::vector<double> r(d, 0.0);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) r[i] += rot.at(i, k) * v[k];
      const double n = l2_norm(r);
      for (double& x : r) x /= n;
      bool fits = true;
      for (const auto& o : kept)
        if (std::abs(dot(o, r)) > bound) {
          fits = false;
          break;
        }
      if (!fits) continue;
      chosen.push_back(tok);
      kept.push_back(std::move(r));
      if (chosen.size() == c) break;
    }
    if (chosen.size() == c) {
      ok = true;
      task.prototypes = Tensor({c, d});
      for (std::size_t i = 0; i < c; ++i) {
        task.class_tokens.push_back({chosen[i]});
        std::copy(kept[i].begin(), kept[i].end(), task.prototypes.row(i).begin());
      }
    }
  }
  if (!ok) {
    throw GenerationError("could not place " + std::to_string(c) + " prototypes with |cos| <= " + std::to_string(bound) +
                          " in " + std::to_string(d) + " dimensions");
  }

  Rng sample_rng = rng.fork(2);
  auto make_split = [&](std::size_t per_class) {
    Split s{Tensor({c * per_class, d}), {}};
    for (std::size_t k = 0; k < per_class; ++k)
      for (std::size_t i = 0; i < c; ++i) {
        auto row = s.x.row(s.y.size());
        for (std::size_t j = 0; j < d; ++j) row[j] = task.prototypes.at(i, j) + cfg.noise * sample_rng.normal();
        s.y.push_back(i);
      }
    return s;
  };
  task.train = make_split(cfg.shots);
  task.test = make_split(cfg.test_per_class);
  return task;
}

/// Applies `spec` to every test input; labels and the source split are untouched.
inline Split make_shifted_testset(const SyntheticTask& task, const ShiftSpec& spec) {
  if (!(spec.magnitude >= 0.0)) throw ConfigError("shift magnitude must be >= 0");
  Split out = task.test;
  Rng rng(spec.seed ^ (task.seed * 0x9E3779B97F4A7C15ULL));
  if (spec.kind == "noise") {
    if (spec.magnitude == 0.0) return out;
    for (double& v : out.x.values()) v += spec.magnitude * rng.normal();
  } else if (spec.kind == "rotation") {
    if (spec.magnitude == 0.0) return out;
    out.x = rotate_rows(out.x, random_rotation(out.x.cols(), spec.magnitude, rng));
  } else if (spec.kind == "scale") {
    for (double& v : out.x.values()) v *= 1.0 + spec.magnitude;
  } else {
    throw ConfigError("unknown shift kind '" + spec.kind + "'");
  }
  return out;
}

inline void add_shifted_tests(SyntheticTask& task, const std::vector<ShiftSpec>& shifts) {
  for (const auto& s : shifts) task.shifted_tests.emplace_back(s, make_shifted_testset(task, s));
}

// ---- serialization ------------------------------------------------------------

inline Tensor labels_tensor(const std::vector<std::size_t>& y) {
  Tensor t({y.size()});
  for (std::size_t i = 0; i < y.size(); ++i) t[i] = static_cast<double>(y[i]);
  return t;
}

inline std::vector<std::size_t> tensor_labels(const Tensor& t) {
  std::vector<std::size_t> y(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) y[i] = static_cast<std::size_t>(t[i]);
  return y;
}

inline TensorMap task_tensors(const SyntheticTask& task) {
  TensorMap m;
  m.emplace("prototypes", task.prototypes);
  m.emplace("train.x", task.train.x);
  m.emplace("train.y", labels_tensor(task.train.y));
  m.emplace("test.x", task.test.x);
  m.emplace("test.y", labels_tensor(task.test.y));
  for (std::size_t i = 0; i < task.shifted_tests.size(); ++i) {
    m.emplace("shift" + std::to_string(i) + ".x", task.shifted_tests[i].second.x);
    m.emplace("shift" + std::to_string(i) + ".y", labels_tensor(task.shifted_tests[i].second.y));
  }
  return m;
}

inline json task_manifest(const SyntheticTask& task) {
  json shifts = json::array();
  for (const auto& [s, split] : task.shifted_tests) shifts.push_back(s);
  return json{{"seed", task.seed}, {"config", task.config}, {"class_tokens", task.class_tokens}, {"shifts", shifts}};
}

inline SyntheticTask task_from_tensors(const TensorMap& m, const json& manifest) {
  SyntheticTask task;
  task.seed = manifest.at("seed").get<std::uint64_t>();
  task.config = manifest.at("config").get<TaskConfig>();
  task.class_tokens = manifest.at("class_tokens").get<std::vector<TokenSeq>>();
  task.prototypes = m.at("prototypes");
  task.train = {m.at("train.x"), tensor_labels(m.at("train.y"))};
  task.test = {m.at("test.x"), tensor_labels(m.at("test.y"))};
  const auto shifts = manifest.value("shifts", json::array());
  for (std::size_t i = 0; i < shifts.size(); ++i) {
    task.shifted_tests.emplace_back(shifts[i].get<ShiftSpec>(),
                                    Split{m.at("shift" + std::to_string(i) + ".x"),
                                          tensor_labels(m.at("shift" + std::to_string(i) + ".y"))});
  }
  return task;
}

}  // namespace pcmp
