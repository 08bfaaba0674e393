#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcmp/data.hpp"
#include "pcmp/encoder.hpp"
#include "pcmp/optim.hpp"

namespace pcmp {

struct PretrainConfig {
  std::size_t epochs = 12;
  std::size_t steps_per_epoch = 32;
  std::size_t batch = 32;  // captions per step, all with distinct class tokens
  double lr = 3e-3;
  std::size_t heldout_batches = 16;

  bool operator==(const PretrainConfig&) const = default;
};

inline void to_json(json& j, const PretrainConfig& c) {
  j = json{{"epochs", c.epochs}, {"steps_per_epoch", c.steps_per_epoch}, {"batch", c.batch},
           {"lr", c.lr},         {"heldout_batches", c.heldout_batches}};
}

inline void from_json(const json& j, PretrainConfig& c) {
  PretrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", d.steps_per_epoch);
  c.batch = j.value("batch", d.batch);
  c.lr = j.value("lr", d.lr);
  c.heldout_batches = j.value("heldout_batches", d.heldout_batches);
}

/// `n` pairs whose class tokens are pairwise distinct, so each image has
/// exactly one matching caption in the batch.
inline PairBatch sample_distinct_pairs(const World& world, Rng& rng, std::size_t n, const Tensor* rotation = nullptr) {
  const std::size_t classes = world.class_token_count();
  if (n > classes) throw ConfigError("contrastive batch larger than the class vocabulary");
  const auto& cfg = world.config();
  const std::vector<std::size_t> order = rng.permutation(classes);
  PairBatch out{Tensor({n, cfg.img_dim}), {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t tok = world.first_class_token() + order[i];
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

/// Symmetric InfoNCE over a batch of matched pairs.
inline ad::Var infonce_loss(ad::Var image_feats, ad::Var text_feats, double tau) {
  const std::size_t n = image_feats.rows();
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  ad::Var logits = cosine_logits(image_feats, text_feats, tau);
  ad::Var l_img = ad::cross_entropy(logits, diag);
  ad::Var l_txt = ad::cross_entropy(ad::transpose(logits), diag);
  return ad::scale(ad::add(l_img, l_txt), 0.5);
}

/// Share of images whose best-scoring caption in the batch names the same class.
inline double retrieval_accuracy(const ModelPair& pair, const PairBatch& batch) {
  ad::Graph g;
  Tensor t = pair.text.forward(g, frozen_params(g, pair.text.params()), batch.captions).value();
  Tensor f = encode_images(pair.image, batch.images);
  t = l2_normalize_rows(t);
  f = l2_normalize_rows(f);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < f.rows(); ++i) {
    std::vector<double> s(t.rows());
    for (std::size_t j = 0; j < t.rows(); ++j) s[j] = dot(f.row(i), t.row(j));
    if (batch.class_token[argmax(s)] == batch.class_token[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(f.rows());
}

inline double heldout_retrieval(const ModelPair& pair, const World& world, std::uint64_t seed, const PretrainConfig& cfg,
                                const Tensor* rotation = nullptr) {
  Rng rng(seed ^ 0x5EEDF00DULL);
  double acc = 0.0;
  for (std::size_t b = 0; b < cfg.heldout_batches; ++b)
    acc += retrieval_accuracy(pair, sample_distinct_pairs(world, rng, cfg.batch, rotation));
  return acc / static_cast<double>(cfg.heldout_batches);
}

struct ContrastiveSchedule {
  std::size_t epochs = 0;
  std::size_t steps_per_epoch = 0;
  std::size_t batch = 32;
  double lr = 3e-3;
  /// Fraction of each batch drawn from the rotated stream (0 disables it).
  const Tensor* rotation = nullptr;
  /// Per-parameter step multiplier, keyed "text.<name>" / "image.<name>".
  std::function<double(const std::string&)> lr_scale;
};

/// Joint contrastive training of both encoders in place. Returns per-epoch mean loss.
inline std::vector<double> contrastive_train(ModelPair& pair, const World& world, const ContrastiveSchedule& sched,
                                             Rng& rng) {
  Adam text_opt, image_opt;
  std::vector<double> history;
  const std::size_t total = sched.epochs * sched.steps_per_epoch;
  std::size_t step = 0;
  auto scale_for = [&](const std::string& prefix) -> std::function<double(const std::string&)> {
    if (!sched.lr_scale) return {};
    return [&, prefix](const std::string& n) { return sched.lr_scale(prefix + n); };
  };
  const auto text_scale = scale_for("text.");
  const auto image_scale = scale_for("image.");
  for (std::size_t e = 0; e < sched.epochs; ++e) {
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < sched.steps_per_epoch; ++s, ++step) {
      // With a rotated stream, alternate plain and rotated batches (2x samples per epoch).
      const std::size_t sub = sched.rotation ? 2 : 1;
      for (std::size_t part = 0; part < sub; ++part) {
        const PairBatch batch = sample_distinct_pairs(world, rng, sched.batch, part == 1 ? sched.rotation : nullptr);
        ad::Graph g;
        ad::Binder bt(g, pair.text.params());
        ad::Binder bi(g, pair.image.params());
        ad::Var tf = pair.text.forward(g, binder_params(bt), batch.captions);
        ad::Var imf = pair.image.forward(g, binder_params(bi), g.constant_ref(batch.images));
        ad::Var loss = infonce_loss(imf, tf, pair.config.tau_train);
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) {
          throw TrainingError("contrastive loss became non-finite at epoch " + std::to_string(e) + ", step " +
                              std::to_string(s));
        }
        epoch_loss += lv;
        g.backward(loss);
        const double lr = cosine_lr(sched.lr, step, total);
        text_opt.step(pair.text.params(), bt.gradients(), lr, text_scale);
        image_opt.step(pair.image.params(), bi.gradients(), lr, image_scale);
      }
    }
    history.push_back(epoch_loss / static_cast<double>(sched.steps_per_epoch * (sched.rotation ? 2 : 1)));
  }
  return history;
}

struct PretrainResult {
  ModelPair pair;
  double retrieval = 0.0;
  std::vector<double> loss_history;
};

/// Trains a base pair from scratch on the world's caption stream.
inline PretrainResult contrastive_pretrain(const EncoderConfig& enc, const World& world, const PretrainConfig& cfg,
                                           std::uint64_t seed) {
  validate(enc);
  if (enc.vocab != world.config().vocab || enc.img_dim != world.config().img_dim) {
    throw ConfigError("encoder vocab/img_dim must match the world");
  }
  Rng rng(seed);
  Rng init_rng = rng.fork(11);
  PretrainResult out;
  out.pair.config = enc;
  out.pair.tau = enc.tau;
  out.pair.tag = "base";
  out.pair.text = TextEncoder::initialize(enc, init_rng);
  std::vector<std::size_t> widths{enc.img_dim};
  widths.insert(widths.end(), enc.img_hidden.begin(), enc.img_hidden.end());
  widths.push_back(enc.feat);
  out.pair.image = ImageEncoder::initialize(widths, init_rng);
  Rng data_rng = rng.fork(12);
  ContrastiveSchedule sched;
  sched.epochs = cfg.epochs;
  sched.steps_per_epoch = cfg.steps_per_epoch;
  sched.batch = cfg.batch;
  sched.lr = cfg.lr;
  out.loss_history = contrastive_train(out.pair, world, sched, data_rng);
  out.retrieval = heldout_retrieval(out.pair, world, seed, cfg);
  return out;
}

}  // namespace pcmp
