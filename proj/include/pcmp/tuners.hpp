#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcmp/data.hpp"
#include "pcmp/encoder.hpp"
#include "pcmp/optim.hpp"

namespace pcmp {

enum class Method { zs, lp, clip_adapter, tip_adapter, coop, cocoop, kgcoop, contcoop };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::zs,   Method::lp,     Method::clip_adapter, Method::tip_adapter,
                                     Method::coop, Method::cocoop, Method::kgcoop,       Method::contcoop};
  return m;
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::zs: return "zs";
    case Method::lp: return "lp";
    case Method::clip_adapter: return "clip_adapter";
    case Method::tip_adapter: return "tip_adapter";
    case Method::coop: return "coop";
    case Method::cocoop: return "cocoop";
    case Method::kgcoop: return "kgcoop";
    case Method::contcoop: return "contcoop";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : all_methods())
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "'");
}

/// Prompt methods act at the text encoder input; the rest act on output features.
inline bool is_prompt_method(Method m) {
  return m == Method::coop || m == Method::cocoop || m == Method::kgcoop || m == Method::contcoop;
}

struct TunerHyper {
  double lambda = 1.0;
  std::size_t depth = 0;
  std::size_t ctx_len = 16;
  std::size_t heads = 1;
  std::string condition = "class";  // "class" | "template"
  bool zero_init_output = false;
  bool freeze_fuser = false;
  bool kd_on_raw = false;
  double lr = 2e-3;
  std::size_t epochs = 200;
  double prompt_init_std = 0.02;
  double residual_ratio = 0.2;
  std::size_t bottleneck = 0;  // 0 -> D_feat / 4
  bool visual_adapter = false;
  double alpha = 1.0;
  double beta = 5.5;
  bool tip_finetune = true;
  std::size_t cocoop_batch = 4;

  bool operator==(const TunerHyper&) const = default;
};

inline void to_json(json& j, const TunerHyper& h) {
  j = json{{"lambda", h.lambda},
           {"depth", h.depth},
           {"ctx_len", h.ctx_len},
           {"heads", h.heads},
           {"condition", h.condition},
           {"zero_init_output", h.zero_init_output},
           {"freeze_fuser", h.freeze_fuser},
           {"kd_on_raw", h.kd_on_raw},
           {"lr", h.lr},
           {"epochs", h.epochs},
           {"prompt_init_std", h.prompt_init_std},
           {"residual_ratio", h.residual_ratio},
           {"bottleneck", h.bottleneck},
           {"visual_adapter", h.visual_adapter},
           {"alpha", h.alpha},
           {"beta", h.beta},
           {"tip_finetune", h.tip_finetune},
           {"cocoop_batch", h.cocoop_batch}};
}

inline void from_json(const json& j, TunerHyper& h) {
  TunerHyper d;
  h.lambda = j.value("lambda", d.lambda);
  h.depth = j.value("depth", d.depth);
  h.ctx_len = j.value("ctx_len", d.ctx_len);
  h.heads = j.value("heads", d.heads);
  h.condition = j.value("condition", d.condition);
  h.zero_init_output = j.value("zero_init_output", d.zero_init_output);
  h.freeze_fuser = j.value("freeze_fuser", d.freeze_fuser);
  h.kd_on_raw = j.value("kd_on_raw", d.kd_on_raw);
  h.lr = j.value("lr", d.lr);
  h.epochs = j.value("epochs", d.epochs);
  h.prompt_init_std = j.value("prompt_init_std", d.prompt_init_std);
  h.residual_ratio = j.value("residual_ratio", d.residual_ratio);
  h.bottleneck = j.value("bottleneck", d.bottleneck);
  h.visual_adapter = j.value("visual_adapter", d.visual_adapter);
  h.alpha = j.value("alpha", d.alpha);
  h.beta = j.value("beta", d.beta);
  h.tip_finetune = j.value("tip_finetune", d.tip_finetune);
  h.cocoop_batch = j.value("cocoop_batch", d.cocoop_batch);
}

/// A trained plug-in. The payload never holds encoder parameters.
struct TunerModule {
  Method method = Method::zs;
  TunerHyper hyper;
  ad::ParamSet payload;
  std::string base_checksum;
  std::uint64_t seed = 0;
  std::size_t vocab = 0;
  std::vector<double> loss_history;
  double train_accuracy = 0.0;
};

/// What a module needs to know about the task at classifier-build time.
struct ClassSpec {
  std::vector<TokenSeq> class_tokens;
  TokenSeq template_tokens;
};

// ---- ContCoOp building blocks ---------------------------------------------------

/// Self-attention over X = [p; cond] with output projection; returns the
/// first N rows (one per prompt). Heads split the width evenly and each head
/// scales scores by 1/sqrt(width / heads).
inline ad::Var attn_fuse(ad::Var p, ad::Var cond, ad::Var wq, ad::Var wk, ad::Var wv, ad::Var wo, std::size_t heads) {
  const std::size_t d = p.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("fuser heads (" + std::to_string(heads) + ") must divide width " + std::to_string(d));
  }
  if (cond.cols() != d || wq.rows() != d || wq.cols() != d) throw DimensionError("attn_fuse: width mismatch");
  const std::size_t n = p.rows();
  ad::Var x = ad::concat_rows({p, cond});
  ad::Var q = ad::matmul(x, wq);
  ad::Var k = ad::matmul(x, wk);
  ad::Var v = ad::matmul(x, wv);
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    ad::Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, (h + 1) * dh);
    ad::Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, (h + 1) * dh);
    ad::Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, (h + 1) * dh);
    ad::Var a = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), sc));
    outs.push_back(ad::matmul(a, vh));
  }
  ad::Var o = ad::matmul(heads == 1 ? outs.front() : ad::concat_cols(outs), wo);
  return ad::slice_rows(o, 0, n);
}

struct AttnFuser {
  Tensor wq, wk, wv, wo;
  std::size_t heads = 1;
};

inline Tensor attn_fuse(const Tensor& p, const Tensor& cond, const AttnFuser& f) {
  ad::Graph g;
  return attn_fuse(g.constant_ref(p), g.constant_ref(cond), g.constant_ref(f.wq), g.constant_ref(f.wk),
                   g.constant_ref(f.wv), g.constant_ref(f.wo), f.heads)
      .value();
}

/// p + attn_fuse(p, cond): class-conditioned prompts in residual form.
inline Tensor class_conditioned_prompts(const Tensor& p, const Tensor& cond, const AttnFuser& f) {
  ad::Graph g;
  ad::Var pv = g.constant_ref(p);
  return ad::add(pv, attn_fuse(pv, g.constant_ref(cond), g.constant_ref(f.wq), g.constant_ref(f.wk),
                                g.constant_ref(f.wv), g.constant_ref(f.wo), f.heads))
      .value();
}

/// Mean over classes of ||w_i - w_zs,i||_2 (norm, not squared).
inline ad::Var kd_loss(ad::Var w, ad::Var w_zs) { return ad::mean(ad::row_norms(ad::sub(w, w_zs))); }

inline double kd_loss(const Tensor& w, const Tensor& w_zs) {
  ad::Graph g;
  return kd_loss(g.constant_ref(w), g.constant_ref(w_zs)).value()[0];
}

inline double total_loss(double ce, double kd, double lambda) {
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  return ce + lambda * kd;
}

// ---- method forward passes ----------------------------------------------------------

namespace detail {

inline std::string fuser_param(const char* w) { return std::string("fuser.") + w; }

/// Unnormalized template prompt features [C x D_feat] for `pair`.
inline Tensor raw_zero_shot_features(const ModelPair& pair, const ClassSpec& spec) {
  std::vector<TokenSeq> batch;
  for (const auto& t : spec.class_tokens) batch.push_back(concat_tokens(spec.template_tokens, t));
  ad::Graph g;
  return pair.text.forward(g, frozen_params(g, pair.text.params()), batch).value();
}

inline void require_single_token_classes(const ClassSpec& spec) {
  for (const auto& t : spec.class_tokens)
    if (t.size() != 1) throw ConfigError("prompt methods expect single-token class names");
}

/// Conditioning rows for one class: its embedding, or template ++ class embeddings.
inline ad::Var condition_rows(ad::Var table, const TokenSeq& cls, const ClassSpec& spec, const std::string& mode) {
  if (mode == "class") return ad::gather_rows(table, cls);
  if (mode == "template") return ad::gather_rows(table, concat_tokens(spec.template_tokens, cls));
  throw ConfigError("unknown condition '" + mode + "'");
}

/// Raw prompt-method text features [C x D_feat] (not normalized).
inline ad::Var prompt_text_features(const TunerModule& m, const ParamFn& payload, ad::Graph& g, const ModelPair& pair,
                                    const ClassSpec& spec) {
  require_single_token_classes(spec);
  const std::size_t c = spec.class_tokens.size();
  const std::size_t n = m.hyper.ctx_len;
  ad::Var ctx = payload("ctx");
  const ParamFn enc = frozen_params(g, pair.text.params());
  if (m.method == Method::contcoop) {
    ad::Var table = g.constant_ref(pair.text.params().at("tok_emb"));
    ad::Var wq = payload(fuser_param("wq")), wk = payload(fuser_param("wk"));
    ad::Var wv = payload(fuser_param("wv")), wo = payload(fuser_param("wo"));
    std::vector<ad::Var> prompts;
    for (std::size_t i = 0; i < c; ++i) {
      ad::Var cond = condition_rows(table, spec.class_tokens[i], spec, m.hyper.condition);
      prompts.push_back(ad::add(ctx, attn_fuse(ctx, cond, wq, wk, wv, wo, m.hyper.heads)));
    }
    return pair.text.forward(g, enc, spec.class_tokens, Injection{0, ad::concat_rows(prompts), n});
  }
  return pair.text.forward(g, enc, spec.class_tokens, Injection{m.hyper.depth, ctx, n});
}

inline ad::Var clip_adapter_apply(const TunerModule& m, const ParamFn& payload, ad::Var x) {
  const double rho = m.hyper.residual_ratio;
  ad::Var a = ad::matmul(ad::relu(ad::matmul(x, payload("adapter.w1"))), payload("adapter.w2"));
  return ad::add(ad::scale(a, rho), ad::scale(x, 1.0 - rho));
}

}  // namespace detail

/// Classifier rows [C x D_feat] before normalization, for every method whose
/// classifier does not depend on the image. Throws for cocoop.
inline ad::Var classifier_raw(const TunerModule& m, const ParamFn& payload, ad::Graph& g, const ModelPair& pair,
                              const ClassSpec& spec, const Tensor& zs_raw) {
  switch (m.method) {
    case Method::zs:
    case Method::tip_adapter: return g.constant_ref(zs_raw);
    case Method::lp: return payload("head");
    case Method::clip_adapter: {
      ad::Var w = ad::l2_normalize_rows(g.constant_ref(zs_raw));
      return m.hyper.visual_adapter ? w : detail::clip_adapter_apply(m, payload, w);
    }
    case Method::coop:
    case Method::kgcoop:
    case Method::contcoop: return detail::prompt_text_features(m, payload, g, pair, spec);
    case Method::cocoop: throw ContractError("cocoop classifiers are image-conditioned");
  }
  throw ConfigError("unknown method");
}

/// Logits [B x C] for image features `feats` [B x D_feat] (raw encoder outputs).
/// `zs_raw` is the unnormalized zero-shot text feature matrix of `pair`.
inline ad::Var method_logits(const TunerModule& m, const ParamFn& payload, ad::Graph& g, const ModelPair& pair,
                             const ClassSpec& spec, ad::Var feats, const Tensor& zs_raw) {
  const double tau = pair.tau;
  if (m.method == Method::cocoop) {
    detail::require_single_token_classes(spec);
    const std::size_t b = feats.rows(), c = spec.class_tokens.size(), n = m.hyper.ctx_len;
    ad::Var fn = ad::l2_normalize_rows(feats);
    ad::Var pi = ad::add_row(ad::matmul(ad::relu(ad::add_row(ad::matmul(fn, payload("meta.w1")), payload("meta.b1"))),
                                        payload("meta.w2")),
                             payload("meta.b2"));  // [B x D]
    ad::Var ctx = payload("ctx");
    std::vector<ad::Var> prefixes;
    std::vector<TokenSeq> seqs;
    for (std::size_t i = 0; i < b; ++i) {
      ad::Var shift = ad::repeat_rows(ad::slice_rows(pi, i, i + 1), n);
      ad::Var prompts = ad::add(ctx, shift);
      for (std::size_t k = 0; k < c; ++k) {
        prefixes.push_back(prompts);
        seqs.push_back(spec.class_tokens[k]);
      }
    }
    ad::Var w = pair.text.forward(g, frozen_params(g, pair.text.params()), seqs,
                                  Injection{m.hyper.depth, ad::concat_rows(prefixes), n});
    ad::Var wn = ad::l2_normalize_rows(w);  // [B*C x D_feat]
    std::vector<ad::Var> rows;
    for (std::size_t i = 0; i < b; ++i)
      rows.push_back(ad::matmul_nt(ad::slice_rows(fn, i, i + 1), ad::slice_rows(wn, i * c, (i + 1) * c)));
    return ad::scale(ad::concat_rows(rows), 1.0 / tau);
  }
  ad::Var img = feats;
  if (m.method == Method::clip_adapter && m.hyper.visual_adapter) img = detail::clip_adapter_apply(m, payload, feats);
  ad::Var logits = cosine_logits(img, classifier_raw(m, payload, g, pair, spec, zs_raw), tau);
  if (m.method == Method::tip_adapter) {
    ad::Var aff = ad::matmul_nt(ad::l2_normalize_rows(feats), ad::l2_normalize_rows(payload("cache.keys")));
    ad::Var cache = ad::matmul(ad::exp(ad::scale(ad::add_scalar(aff, -1.0), m.hyper.beta)), payload("cache.values"));
    logits = ad::add(logits, ad::scale(cache, m.hyper.alpha));
  }
  return logits;
}

/// Full training objective for a batch: CE, plus lambda * KD for kgcoop/contcoop.
inline ad::Var training_loss(const TunerModule& m, const ParamFn& payload, ad::Graph& g, const ModelPair& pair,
                             const ClassSpec& spec, ad::Var feats, const std::vector<std::size_t>& labels,
                             const Tensor& zs_raw, const Tensor& zs_norm) {
  ad::Var ce;
  const bool uses_kd = (m.method == Method::kgcoop || m.method == Method::contcoop) && m.hyper.lambda != 0.0;
  if (uses_kd) {
    ad::Var w = classifier_raw(m, payload, g, pair, spec, zs_raw);
    ad::Var logits = cosine_logits(feats, w, pair.tau);
    ce = ad::cross_entropy(logits, labels);
    ad::Var kd = m.hyper.kd_on_raw ? kd_loss(w, g.constant_ref(zs_raw)) : kd_loss(ad::l2_normalize_rows(w), g.constant_ref(zs_norm));
    return ad::add(ce, ad::scale(kd, m.hyper.lambda));
  }
  return ad::cross_entropy(method_logits(m, payload, g, pair, spec, feats, zs_raw), labels);
}

// ---- initialization and training ----------------------------------------------------

inline std::size_t adapter_width(const TunerModule& m, const ModelPair& pair) {
  return m.hyper.bottleneck ? m.hyper.bottleneck : std::max<std::size_t>(1, pair.config.feat / 4);
}

/// Fresh payload for `method`. For a given seed, coop, kgcoop and contcoop start from identical prompts.
inline TunerModule init_module(Method method, const TunerHyper& hyper, const ModelPair& pair, const SyntheticTask& task,
                               std::uint64_t seed) {
  const auto& cfg = pair.config;
  if (hyper.ctx_len == 0) throw ConfigError("context length must be >= 1");
  TunerModule m;
  m.method = method;
  m.hyper = hyper;
  m.seed = seed;
  m.vocab = cfg.vocab;
  m.base_checksum = hex64(pair_checksum(pair));
  Rng root(seed);
  Rng ctx_rng = root.fork(21);
  Rng aux_rng = root.fork(22);
  const std::size_t d = cfg.width, f = cfg.feat, c = task.classes();
  auto kaiming = [&](std::size_t in, std::size_t out) {
    return aux_rng.normal_tensor({in, out}, std::sqrt(2.0 / static_cast<double>(in)));
  };
  switch (method) {
    case Method::zs: break;
    case Method::lp: m.payload.add("head", aux_rng.normal_tensor({c, f}, 1.0 / std::sqrt(static_cast<double>(f)))); break;
    case Method::clip_adapter: {
      const std::size_t bn = adapter_width(m, pair);
      m.payload.add("adapter.w1", kaiming(f, bn));
      m.payload.add("adapter.w2", kaiming(bn, f));
      break;
    }
    case Method::tip_adapter: {
      const Tensor feats = l2_normalize_rows(encode_images(pair.image, task.train.x));
      Tensor values({task.train.size(), c});
      for (std::size_t i = 0; i < task.train.size(); ++i) values.at(i, task.train.y[i]) = 1.0;
      m.payload.add("cache.keys", feats, hyper.tip_finetune);
      m.payload.add("cache.values", values, false);
      break;
    }
    case Method::coop:
    case Method::kgcoop:
    case Method::cocoop:
    case Method::contcoop: {
      if (method != Method::contcoop && hyper.depth >= cfg.layers) {
        throw ConfigError("prompt depth " + std::to_string(hyper.depth) + " outside [0, " + std::to_string(cfg.layers - 1) + "]");
      }
      m.payload.add("ctx", ctx_rng.normal_tensor({hyper.ctx_len, d}, hyper.prompt_init_std));
      if (method == Method::cocoop) {
        const std::size_t mid = std::max<std::size_t>(1, f / 16);
        m.payload.add("meta.w1", kaiming(f, mid));
        m.payload.add("meta.b1", Tensor({mid}));
        m.payload.add("meta.w2", aux_rng.normal_tensor({mid, d}, 0.02));
        m.payload.add("meta.b2", Tensor({d}));
      }
      if (method == Method::contcoop) {
        if (hyper.heads == 0 || d % hyper.heads != 0) {
          throw ConfigError("fuser heads (" + std::to_string(hyper.heads) + ") must divide width " + std::to_string(d));
        }
        const bool trainable = !hyper.freeze_fuser;
        for (const char* w : {"wq", "wk", "wv"}) m.payload.add(detail::fuser_param(w), kaiming(d, d), trainable);
        m.payload.add(detail::fuser_param("wo"), hyper.zero_init_output ? Tensor({d, d}) : kaiming(d, d), trainable);
      }
      break;
    }
  }
  return m;
}

inline ClassSpec class_spec(const SyntheticTask& task, const TokenSeq& template_tokens) {
  return ClassSpec{task.class_tokens, template_tokens};
}

inline double accuracy_from_logits(const Tensor& logits, const std::vector<std::size_t>& labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax(logits.row(i)) == labels[i]) ++hits;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Logits of a (trained) module against any pair for raw images x [n x d_img].
inline Tensor module_logits(const TunerModule& m, const ModelPair& pair, const ClassSpec& spec, const Tensor& x) {
  if (m.vocab != 0 && m.vocab != pair.config.vocab) {
    std::cerr << "warning: module trained on vocab " << m.vocab << " reused on vocab " << pair.config.vocab << "\n";
  }
  const Tensor feats = encode_images(pair.image, x);
  const Tensor zs_raw = detail::raw_zero_shot_features(pair, spec);
  if (m.method != Method::cocoop) {
    ad::Graph g;
    return method_logits(m, frozen_params(g, m.payload), g, pair, spec, g.constant_ref(feats), zs_raw).value();
  }
  const std::size_t n = feats.rows(), c = spec.class_tokens.size();
  const std::size_t chunk = std::max<std::size_t>(1, 64 / c);
  Tensor out({n, c});
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t e = std::min(n, s + chunk);
    Tensor part({e - s, feats.cols()});
    std::copy(feats.data() + s * feats.cols(), feats.data() + e * feats.cols(), part.data());
    ad::Graph g;
    Tensor l = method_logits(m, frozen_params(g, m.payload), g, pair, spec, g.constant_ref(part), zs_raw).value();
    std::copy(l.data(), l.data() + l.size(), out.data() + s * c);
  }
  return out;
}

/// Normalized classifier [C x D_feat] of a module against `pair`.
inline Tensor build_classifier(const TunerModule& m, const ModelPair& pair, const ClassSpec& spec) {
  const Tensor zs_raw = detail::raw_zero_shot_features(pair, spec);
  ad::Graph g;
  return l2_normalize_rows(classifier_raw(m, frozen_params(g, m.payload), g, pair, spec, zs_raw).value());
}

/// ContCoOp classifier: class embeddings are read from whichever pair is given.
inline Tensor build_contcoop_classifier(const TunerModule& m, const ModelPair& pair, const ClassSpec& spec) {
  if (m.method != Method::contcoop) throw ConfigError("build_contcoop_classifier needs a contcoop module");
  return build_classifier(m, pair, spec);
}

/// Trains only the module payload on the task's few-shot split with SGD and
/// a cosine-decayed step. The pair is read-only throughout.
inline TunerModule train_tuner(Method method, const ModelPair& pair, const SyntheticTask& task,
                               const TokenSeq& template_tokens, const TunerHyper& hyper, std::uint64_t seed) {
  if (pair.tag != "base") throw ConfigError("tuners are trained on the base pair, got '" + pair.tag + "'");
  TunerModule m = init_module(method, hyper, pair, task, seed);
  if (method == Method::zs) {
    m.train_accuracy = accuracy_from_logits(module_logits(m, pair, class_spec(task, template_tokens), task.train.x), task.train.y);
    return m;
  }
  const ClassSpec spec = class_spec(task, template_tokens);
  const Tensor feats = encode_images(pair.image, task.train.x);
  const Tensor zs_raw = detail::raw_zero_shot_features(pair, spec);
  const Tensor zs_norm = l2_normalize_rows(zs_raw);
  Rng batch_rng = Rng(seed).fork(23);
  const std::size_t epochs = hyper.epochs;
  for (std::size_t e = 0; e < epochs; ++e) {
    ad::Graph g;
    ad::Binder bind(g, m.payload);
    ad::Var loss;
    if (method == Method::cocoop) {
      const std::size_t b = std::min(hyper.cocoop_batch, task.train.size());
      const auto perm = batch_rng.permutation(task.train.size());
      Tensor fb({b, feats.cols()});
      std::vector<std::size_t> yb(b);
      for (std::size_t i = 0; i < b; ++i) {
        std::copy(feats.row(perm[i]).begin(), feats.row(perm[i]).end(), fb.row(i).begin());
        yb[i] = task.train.y[perm[i]];
      }
      loss = training_loss(m, binder_params(bind), g, pair, spec, g.constant(std::move(fb)), yb, zs_raw, zs_norm);
    } else {
      loss = training_loss(m, binder_params(bind), g, pair, spec, g.constant_ref(feats), task.train.y, zs_raw, zs_norm);
    }
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) {
      throw TrainingError(to_string(method) + " loss became non-finite at epoch " + std::to_string(e));
    }
    m.loss_history.push_back(lv);
    g.backward(loss);
    sgd_step(m.payload, bind.gradients(), cosine_lr(hyper.lr, e, epochs));
  }
  if (method == Method::tip_adapter) {
    m.payload.at("cache.keys") = l2_normalize_rows(m.payload.at("cache.keys"));
  }
  m.train_accuracy = accuracy_from_logits(module_logits(m, pair, spec, task.train.x), task.train.y);
  return m;
}

inline double evaluate_accuracy(const TunerModule& m, const ModelPair& pair, const ClassSpec& spec, const Split& split) {
  if (split.size() == 0) throw ConfigError("cannot score an empty split");
  return accuracy_from_logits(module_logits(m, pair, spec, split.x), split.y);
}

// ---- persistence ---------------------------------------------------------------------

inline json module_manifest(const TunerModule& m) {
  json trainable = json::array();
  for (const auto& n : m.payload.trainable_names()) trainable.push_back(n);
  return json{{"method", to_string(m.method)},
              {"hyper", m.hyper},
              {"base_checksum", m.base_checksum},
              {"seed", m.seed},
              {"vocab", m.vocab},
              {"trainable", trainable},
              {"metrics", {{"train_accuracy", m.train_accuracy},
                           {"final_loss", m.loss_history.empty() ? 0.0 : m.loss_history.back()},
                           {"epochs_run", m.loss_history.size()}}}};
}

inline TunerModule module_from(const TensorMap& tensors, const json& manifest) {
  TunerModule m;
  m.method = method_from_string(manifest.at("method").get<std::string>());
  m.hyper = manifest.at("hyper").get<TunerHyper>();
  m.base_checksum = manifest.value("base_checksum", std::string());
  m.seed = manifest.value("seed", std::uint64_t{0});
  m.vocab = manifest.value("vocab", std::size_t{0});
  const auto trainable = manifest.value("trainable", std::vector<std::string>{});
  for (const auto& [k, v] : tensors)
    m.payload.add(k, v, std::find(trainable.begin(), trainable.end(), k) != trainable.end());
  m.train_accuracy = manifest.value("metrics", json::object()).value("train_accuracy", 0.0);
  return m;
}

}  // namespace pcmp
