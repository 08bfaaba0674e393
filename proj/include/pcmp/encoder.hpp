#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcmp/autograd.hpp"
#include "pcmp/container.hpp"
#include "pcmp/rng.hpp"
#include "pcmp/tensor.hpp"

namespace pcmp {

using TokenSeq = std::vector<std::size_t>;
using json = nlohmann::json;

/// Sizes of the toy dual encoder.
struct EncoderConfig {
  std::size_t vocab = 64;
  std::size_t width = 32;  // D
  std::size_t layers = 6;  // L
  std::size_t heads = 2;
  std::size_t max_seq = 24;
  std::size_t feat = 32;  // D_feat
  std::size_t img_dim = 16;
  std::size_t mlp_ratio = 2;
  std::vector<std::size_t> img_hidden{64};
  double tau = 0.01;
  double tau_train = 0.07;

  bool operator==(const EncoderConfig&) const = default;
};

inline void to_json(json& j, const EncoderConfig& c) {
  j = json{{"vocab", c.vocab},         {"width", c.width},         {"layers", c.layers},
           {"heads", c.heads},         {"max_seq", c.max_seq},     {"feat", c.feat},
           {"img_dim", c.img_dim},     {"mlp_ratio", c.mlp_ratio}, {"img_hidden", c.img_hidden},
           {"tau", c.tau},             {"tau_train", c.tau_train}};
}

inline void from_json(const json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.vocab = j.value("vocab", d.vocab);
  c.width = j.value("width", d.width);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.max_seq = j.value("max_seq", d.max_seq);
  c.feat = j.value("feat", d.feat);
  c.img_dim = j.value("img_dim", d.img_dim);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.img_hidden = j.value("img_hidden", d.img_hidden);
  c.tau = j.value("tau", d.tau);
  c.tau_train = j.value("tau_train", d.tau_train);
}

inline void validate(const EncoderConfig& c) {
  if (c.vocab == 0 || c.width < 2 || c.layers == 0 || c.feat == 0 || c.img_dim == 0 || c.max_seq == 0) {
    throw ConfigError("encoder sizes must be positive (width >= 2)");
  }
  if (c.heads == 0 || c.width % c.heads != 0) throw ConfigError("heads must divide width");
  if (!(c.tau > 0.0) || !(c.tau_train > 0.0)) throw ConfigError("temperatures must be positive");
}

/// Supplies a graph node for a named parameter.
using ParamFn = std::function<ad::Var(const std::string&)>;

/// Binds every parameter as a graph constant.
inline ParamFn frozen_params(ad::Graph& g, const ad::ParamSet& ps) {
  return [&g, &ps](const std::string& name) { return g.constant_ref(ps.at(name)); };
}

inline ParamFn binder_params(ad::Binder& b) {
  return [&b](const std::string& name) { return b(name); };
}

inline std::string block_param(std::size_t layer, const char* leaf) {
  return "block" + std::to_string(layer) + "." + leaf;
}

/// Learned vectors prepended to the hidden sequence at the input of block `depth`.
/// `vectors` holds either `count` rows shared by every sequence or
/// batch*count rows, one block per sequence.
struct Injection {
  std::size_t depth = 0;
  ad::Var vectors;
  std::size_t count = 0;
};

/// Pre-LN transformer over token embeddings. The feature is the final
/// position's hidden state after the last layer norm, projected to D_feat.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(EncoderConfig cfg, ad::ParamSet params) : cfg_(std::move(cfg)), params_(std::move(params)) {}

  static TextEncoder initialize(const EncoderConfig& cfg, Rng& rng) {
    validate(cfg);
    const std::size_t d = cfg.width, hid = cfg.width * cfg.mlp_ratio;
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    ad::ParamSet ps;
    ps.add("tok_emb", rng.normal_tensor({cfg.vocab, d}, 0.02));
    ps.add("pos_emb", rng.normal_tensor({cfg.max_seq, d}, 0.01));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const double s = 1.0 / std::sqrt(static_cast<double>(d));
      ps.add(block_param(l, "ln1.g"), Tensor({d}, 1.0));
      ps.add(block_param(l, "ln1.b"), Tensor({d}));
      for (const char* w : {"wq", "wk", "wv"}) ps.add(block_param(l, w), rng.normal_tensor({d, d}, s));
      for (const char* b : {"bq", "bk", "bv", "bo"}) ps.add(block_param(l, b), Tensor({d}));
      ps.add(block_param(l, "wo"), rng.normal_tensor({d, d}, s * resid));
      ps.add(block_param(l, "ln2.g"), Tensor({d}, 1.0));
      ps.add(block_param(l, "ln2.b"), Tensor({d}));
      ps.add(block_param(l, "w1"), rng.normal_tensor({d, hid}, s));
      ps.add(block_param(l, "b1"), Tensor({hid}));
      ps.add(block_param(l, "w2"), rng.normal_tensor({hid, d}, resid / std::sqrt(static_cast<double>(hid))));
      ps.add(block_param(l, "b2"), Tensor({d}));
    }
    ps.add("lnf.g", Tensor({d}, 1.0));
    ps.add("lnf.b", Tensor({d}));
    ps.add("proj", rng.normal_tensor({d, cfg.feat}, 1.0 / std::sqrt(static_cast<double>(d))));
    return TextEncoder(cfg, std::move(ps));
  }

  const EncoderConfig& config() const { return cfg_; }
  const ad::ParamSet& params() const { return params_; }
  ad::ParamSet& params() { return params_; }

  /// Layer a parameter belongs to: -1 for embeddings, L for the output head.
  int layer_of(const std::string& name) const {
    if (name.rfind("block", 0) == 0) return std::stoi(name.substr(5, name.find('.') - 5));
    if (name == "tok_emb" || name == "pos_emb") return -1;
    return static_cast<int>(cfg_.layers);
  }

  /// Batched forward over equal-length token sequences -> [batch x D_feat].
  /// `hidden`, when given, receives the embedding output followed by every
  /// block's output hidden states.
  ad::Var forward(ad::Graph& g, const ParamFn& param, const std::vector<TokenSeq>& batch,
                  const std::optional<Injection>& inj = std::nullopt,
                  std::vector<Tensor>* hidden = nullptr) const {
    if (batch.empty()) throw ConfigError("encode_text: empty batch");
    const std::size_t seq = batch.front().size();
    if (seq == 0) throw ConfigError("encode_text: empty token sequence");
    const std::size_t bsz = batch.size();
    const std::size_t n_inj = inj ? inj->count : 0;
    if (inj) {
      if (inj->depth >= cfg_.layers) {
        throw ConfigError("injection depth " + std::to_string(inj->depth) + " outside [0, " +
                          std::to_string(cfg_.layers - 1) + "]");
      }
      const std::size_t r = inj->vectors.rows();
      if (inj->count == 0 || inj->vectors.cols() != cfg_.width || (r != inj->count && r != inj->count * bsz)) {
        throw DimensionError("injection vectors " + shape_str(inj->vectors.shape()) + " do not fit count " +
                             std::to_string(inj->count) + " x width " + std::to_string(cfg_.width));
      }
    }
    if (seq + n_inj > cfg_.max_seq) {
      throw CapacityError("sequence of " + std::to_string(seq + n_inj) + " exceeds capacity " +
                          std::to_string(cfg_.max_seq));
    }
    std::vector<std::size_t> ids, pos;
    ids.reserve(bsz * seq);
    for (const auto& t : batch) {
      if (t.size() != seq) throw DimensionError("encode_text batch sequences must share a length");
      for (std::size_t i = 0; i < seq; ++i) {
        if (t[i] >= cfg_.vocab) throw IndexError("token id " + std::to_string(t[i]) + " >= vocab " + std::to_string(cfg_.vocab));
        ids.push_back(t[i]);
        pos.push_back(n_inj + i);
      }
    }
    ad::Var h = ad::add(ad::gather_rows(param("tok_emb"), ids), ad::gather_rows(param("pos_emb"), pos));
    if (hidden) hidden->push_back(h.value());
    std::size_t cur = seq;
    auto prefix_block = [&](ad::Var v) {
      return v.rows() == n_inj * bsz ? v : (bsz == 1 ? v : ad::repeat_rows(v, bsz));
    };
    if (inj && inj->depth == 0) {
      std::vector<std::size_t> ppos(n_inj);
      for (std::size_t i = 0; i < n_inj; ++i) ppos[i] = i;
      ad::Var pe = ad::gather_rows(param("pos_emb"), ppos);
      ad::Var prefix = prefix_block(inj->vectors);
      prefix = ad::add(prefix, bsz == 1 ? pe : ad::repeat_rows(pe, bsz));
      h = ad::prepend_per_sequence(h, bsz, cur, prefix, n_inj);
      cur += n_inj;
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      if (inj && inj->depth == l && l > 0) {
        h = ad::prepend_per_sequence(h, bsz, cur, prefix_block(inj->vectors), n_inj);
        cur += n_inj;
      }
      h = block(g, param, l, h, bsz, cur);
      if (hidden) hidden->push_back(h.value());
    }
    std::vector<std::size_t> last(bsz);
    for (std::size_t b = 0; b < bsz; ++b) last[b] = b * cur + cur - 1;
    ad::Var z = ad::layer_norm(ad::gather_rows(h, last), param("lnf.g"), param("lnf.b"));
    return ad::matmul(z, param("proj"));
  }

 private:
  ad::Var block(ad::Graph&, const ParamFn& param, std::size_t l, ad::Var h, std::size_t bsz, std::size_t seq) const {
    auto p = [&](const char* leaf) { return param(block_param(l, leaf)); };
    ad::Var a = ad::layer_norm(h, p("ln1.g"), p("ln1.b"));
    ad::Var q = ad::add_row(ad::matmul(a, p("wq")), p("bq"));
    ad::Var k = ad::add_row(ad::matmul(a, p("wk")), p("bk"));
    ad::Var v = ad::add_row(ad::matmul(a, p("wv")), p("bv"));
    ad::Var att = ad::multihead_attention(q, k, v, bsz, seq, cfg_.heads);
    h = ad::add(h, ad::add_row(ad::matmul(att, p("wo")), p("bo")));
    ad::Var m = ad::layer_norm(h, p("ln2.g"), p("ln2.b"));
    ad::Var u = ad::gelu(ad::add_row(ad::matmul(m, p("w1")), p("b1")));
    return ad::add(h, ad::add_row(ad::matmul(u, p("w2")), p("b2")));
  }

  EncoderConfig cfg_;
  ad::ParamSet params_;
};

/// MLP image encoder: tanh after every layer except the last unless
/// `activate_last` is set.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(std::vector<std::size_t> widths, ad::ParamSet params, bool activate_last = false)
      : widths_(std::move(widths)), params_(std::move(params)), activate_last_(activate_last) {
    if (widths_.size() < 2) throw ConfigError("image encoder needs at least input and output widths");
  }

  static ImageEncoder initialize(std::vector<std::size_t> widths, Rng& rng) {
    ad::ParamSet ps;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const double s = 1.0 / std::sqrt(static_cast<double>(widths[i]));
      ps.add(weight_name(i), rng.normal_tensor({widths[i], widths[i + 1]}, s));
      ps.add(bias_name(i), Tensor({widths[i + 1]}));
    }
    return ImageEncoder(std::move(widths), std::move(ps));
  }

  static std::string weight_name(std::size_t i) { return "l" + std::to_string(i) + ".w"; }
  static std::string bias_name(std::size_t i) { return "l" + std::to_string(i) + ".b"; }

  const std::vector<std::size_t>& widths() const { return widths_; }
  std::size_t input_dim() const { return widths_.front(); }
  std::size_t output_dim() const { return widths_.back(); }
  bool activate_last() const { return activate_last_; }
  const ad::ParamSet& params() const { return params_; }
  ad::ParamSet& params() { return params_; }

  /// x: [batch x d_img] -> [batch x D_feat]
  ad::Var forward(ad::Graph&, const ParamFn& param, ad::Var x) const {
    if (x.value().rank() != 2 || x.cols() != input_dim()) {
      throw DimensionError("image input " + shape_str(x.shape()) + " does not match input dim " +
                           std::to_string(input_dim()));
    }
    const std::size_t n = widths_.size() - 1;
    for (std::size_t i = 0; i < n; ++i) {
      x = ad::add_row(ad::matmul(x, param(weight_name(i))), param(bias_name(i)));
      if (i + 1 < n || activate_last_) x = ad::tanh(x);
    }
    return x;
  }

 private:
  std::vector<std::size_t> widths_;
  ad::ParamSet params_;
  bool activate_last_ = false;
};

/// A text/image encoder pair with its scoring temperature.
struct ModelPair {
  EncoderConfig config;
  TextEncoder text;
  ImageEncoder image;
  std::string tag = "base";
  double tau = 0.01;
};

/// Single-sequence text feature, optionally with `vectors` injected at `depth`.
inline Tensor encode_text(const TextEncoder& enc, const TokenSeq& tokens,
                          const std::optional<std::pair<std::size_t, Tensor>>& injection = std::nullopt) {
  ad::Graph g;
  std::optional<Injection> inj;
  if (injection) inj = Injection{injection->first, g.constant_ref(injection->second), injection->second.rows()};
  ad::Var f = enc.forward(g, frozen_params(g, enc.params()), {tokens}, inj);
  return f.value().reshaped({enc.config().feat});
}

/// Embedding output then the hidden states after each block, for one sequence.
inline std::vector<Tensor> text_hidden_states(const TextEncoder& enc, const TokenSeq& tokens) {
  ad::Graph g;
  std::vector<Tensor> outs;
  enc.forward(g, frozen_params(g, enc.params()), {tokens}, std::nullopt, &outs);
  return outs;
}

inline Tensor encode_images(const ImageEncoder& enc, const Tensor& x) {
  ad::Graph g;
  return enc.forward(g, frozen_params(g, enc.params()), g.constant_ref(x)).value();
}

inline Tensor encode_image(const ImageEncoder& enc, const Tensor& x) {
  if (x.size() != enc.input_dim()) {
    throw DimensionError("image of shape " + shape_str(x.shape()) + " does not match input dim " +
                         std::to_string(enc.input_dim()));
  }
  return encode_images(enc, x.reshaped({1, x.size()})).reshaped({enc.output_dim()});
}

inline TokenSeq concat_tokens(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

/// Rows encode template ++ class tokens, L2-normalized.
inline Tensor zero_shot_classifier(const ModelPair& pair, const std::vector<TokenSeq>& class_tokens,
                                   const TokenSeq& template_tokens) {
  if (class_tokens.size() < 2) throw ConfigError("zero-shot classifier needs at least 2 classes");
  // Group equal-length prompts so each group is one batched forward.
  const std::size_t c = class_tokens.size();
  Tensor out({c, pair.config.feat});
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < c; ++i) by_len[class_tokens[i].size()].push_back(i);
  for (const auto& [len, idx] : by_len) {
    std::vector<TokenSeq> batch;
    for (std::size_t i : idx) batch.push_back(concat_tokens(template_tokens, class_tokens[i]));
    ad::Graph g;
    Tensor f = pair.text.forward(g, frozen_params(g, pair.text.params()), batch).value();
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy(f.row(r).begin(), f.row(r).end(), out.row(idx[r]).begin());
  }
  return l2_normalize_rows(out);
}

/// Softmax over cos(w_i, f) / tau.
inline Tensor predict(const ModelPair& pair, const Tensor& classifier, const Tensor& feature) {
  if (classifier.rank() != 2 || classifier.cols() != feature.size()) {
    throw DimensionError("classifier " + shape_str(classifier.shape()) + " vs feature " + shape_str(feature.shape()));
  }
  Tensor logits({1, classifier.rows()});
  for (std::size_t i = 0; i < classifier.rows(); ++i)
    logits[i] = cosine(classifier.row(i), feature.values()) / pair.tau;
  return softmax_rows(logits).reshaped({classifier.rows()});
}

/// [B x C] cosine logits cos(f_b, w_c)/tau as a graph node.
inline ad::Var cosine_logits(ad::Var features, ad::Var classifier, double tau) {
  return ad::scale(ad::matmul_nt(ad::l2_normalize_rows(features), ad::l2_normalize_rows(classifier)), 1.0 / tau);
}

// ---- checkpoints --------------------------------------------------------------

inline TensorMap pair_tensors(const ModelPair& pair) {
  TensorMap out;
  for (const auto& [k, v] : pair.text.params().values()) out.emplace("text." + k, v);
  for (const auto& [k, v] : pair.image.params().values()) out.emplace("image." + k, v);
  return out;
}

inline std::vector<std::uint8_t> text_encoder_bytes(const TextEncoder& t) { return encode_container(t.params().values()); }

inline std::vector<std::uint8_t> pair_bytes(const ModelPair& pair) { return encode_container(pair_tensors(pair)); }

inline std::uint64_t pair_checksum(const ModelPair& pair) { return fnv1a(pair_bytes(pair)); }

inline json pair_manifest(const ModelPair& pair) {
  return json{{"tag", pair.tag},
              {"tau", pair.tau},
              {"config", pair.config},
              {"image_widths", pair.image.widths()},
              {"checksum", hex64(pair_checksum(pair))}};
}

inline ModelPair pair_from_tensors(const TensorMap& tensors, const json& manifest) {
  ModelPair pair;
  pair.config = manifest.at("config").get<EncoderConfig>();
  pair.tag = manifest.value("tag", std::string("base"));
  pair.tau = manifest.value("tau", 0.01);
  ad::ParamSet text, image;
  for (const auto& [k, v] : tensors) {
    if (k.rfind("text.", 0) == 0)
      text.add(k.substr(5), v);
    else if (k.rfind("image.", 0) == 0)
      image.add(k.substr(6), v);
    else
      throw IoError("unexpected tensor '" + k + "' in model checkpoint");
  }
  pair.text = TextEncoder(pair.config, std::move(text));
  pair.image = ImageEncoder(manifest.at("image_widths").get<std::vector<std::size_t>>(), std::move(image));
  return pair;
}

}  // namespace pcmp
