#pragma once

// Forward graphs for the hypothesis-only, caption (TE), relational network,
// attention top-down/bottom-up and EVE classifiers. Every model maps one
// instance to 1 x 3 logits in class order (C, N, E).

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vekit/attention.hpp"
#include "vekit/dataset.hpp"
#include "vekit/image_features.hpp"
#include "vekit/numcore.hpp"
#include "vekit/random.hpp"
#include "vekit/text_encoder.hpp"

namespace vekit {

enum class Architecture { hypothesis_only, te, rn, top_down, bottom_up, eve_image, eve_roi };

inline constexpr std::array<Architecture, 7> all_architectures{
    Architecture::hypothesis_only, Architecture::te,       Architecture::rn,     Architecture::top_down,
    Architecture::bottom_up,       Architecture::eve_image, Architecture::eve_roi};

inline std::string_view to_string(Architecture a) {
  switch (a) {
    case Architecture::hypothesis_only: return "hypothesis-only";
    case Architecture::te: return "te";
    case Architecture::rn: return "rn";
    case Architecture::top_down: return "top-down";
    case Architecture::bottom_up: return "bottom-up";
    case Architecture::eve_image: return "eve-image";
    case Architecture::eve_roi: return "eve-roi";
  }
  return "?";
}

inline std::optional<Architecture> parse_architecture(std::string_view s) {
  for (auto a : all_architectures) {
    if (s == to_string(a)) return a;
  }
  return std::nullopt;
}

/// Feature kind an architecture consumes; nullopt for text-only models.
/// The relational network accepts either kind.
inline std::optional<FeatureKind> required_features(Architecture a) {
  switch (a) {
    case Architecture::top_down:
    case Architecture::eve_image: return FeatureKind::grid;
    case Architecture::bottom_up:
    case Architecture::eve_roi: return FeatureKind::roi;
    default: return std::nullopt;
  }
}

inline bool uses_images(Architecture a) {
  return a != Architecture::hypothesis_only && a != Architecture::te;
}

inline bool is_eve(Architecture a) { return a == Architecture::eve_image || a == Architecture::eve_roi; }

struct ModelDims {
  std::size_t vocab = 2;
  std::size_t embed = 300;       // word embedding width
  std::size_t hidden = 300;      // text feature width, also d_k of every attention
  std::size_t classifier = 300;  // hidden width of the two-layer FC head
  std::size_t feature = 2048;    // image object width k
  std::size_t rn_hidden = 256;   // relational network pair MLP width
  std::size_t fusion = 300;      // top-down projection width before the product fusion

  bool operator==(const ModelDims&) const = default;
};

using ParamSchema = std::vector<std::pair<std::string, Shape>>;

namespace detail {

inline void append_prefixed(ParamSchema& out, const std::string& prefix, const ParamSchema& part) {
  for (const auto& [name, shape] : part) out.emplace_back(prefix + name, shape);
}

inline ParamSchema head_schema(std::size_t in, std::size_t hidden, std::size_t classes) {
  return {{"fc1_w", {in, hidden}}, {"fc1_b", {1, hidden}}, {"fc2_w", {hidden, classes}}, {"fc2_b", {1, classes}}};
}

}  // namespace detail

/// Every named tensor of an architecture with its shape, in a fixed order.
inline ParamSchema model_schema(Architecture arch, const ModelDims& d) {
  ParamSchema s{{"embedding", {d.vocab, d.embed}}};
  const auto text = TextEncoderParams::schema(d.embed, d.hidden);
  switch (arch) {
    case Architecture::hypothesis_only:
      detail::append_prefixed(s, "text.", text);
      detail::append_prefixed(s, "head.", detail::head_schema(d.hidden, d.classifier, num_classes));
      break;
    case Architecture::te:
      detail::append_prefixed(s, "premise.", text);
      detail::append_prefixed(s, "hypothesis.", text);
      detail::append_prefixed(s, "head.", detail::head_schema(2 * d.hidden, d.classifier, num_classes));
      break;
    case Architecture::rn:
      detail::append_prefixed(s, "text.", text);
      detail::append_prefixed(s, "rn.",
                              {{"g1_w", {d.feature + d.hidden, d.rn_hidden}},
                               {"g1_b", {1, d.rn_hidden}},
                               {"g2_w", {d.rn_hidden, d.rn_hidden}},
                               {"g2_b", {1, d.rn_hidden}},
                               {"out_w", {d.rn_hidden, num_classes}},
                               {"out_b", {1, num_classes}}});
      break;
    case Architecture::top_down:
    case Architecture::bottom_up:
      detail::append_prefixed(s, "text.", text);
      detail::append_prefixed(s, "td.",
                              {{"att_w", {d.feature + d.hidden, 1}},
                               {"att_b", {1, 1}},
                               {"img_w", {d.feature, d.fusion}},
                               {"img_b", {1, d.fusion}},
                               {"txt_w", {d.hidden, d.fusion}},
                               {"txt_b", {1, d.fusion}}});
      detail::append_prefixed(s, "td.head1.", detail::head_schema(d.fusion, d.classifier, num_classes));
      detail::append_prefixed(s, "td.head2.", detail::head_schema(d.fusion, d.classifier, num_classes));
      break;
    case Architecture::eve_image:
    case Architecture::eve_roi:
      detail::append_prefixed(s, "text.", text);
      detail::append_prefixed(s, "image.", {{"proj_w", {d.feature, d.hidden}}, {"proj_b", {1, d.hidden}}});
      detail::append_prefixed(s, "head.", detail::head_schema(2 * d.hidden, d.classifier, num_classes));
      break;
  }
  return s;
}

/// Dimensions recovered from tensor shapes (the inverse of model_schema).
inline ModelDims infer_dims(Architecture arch, const std::map<std::string, Tensor>& tensors) {
  auto shape = [&](const std::string& name) -> const Shape& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("missing tensor '" + name + "' for " + std::string(to_string(arch)));
    if (it->second.rank() != 2) throw ConfigError("tensor '" + name + "' is not a matrix");
    return it->second.shape;
  };
  ModelDims d;
  d.vocab = shape("embedding")[0];
  d.embed = shape("embedding")[1];
  const std::string text = arch == Architecture::te ? "hypothesis." : "text.";
  d.hidden = shape(text + "mlp_w")[1];
  switch (arch) {
    case Architecture::hypothesis_only:
    case Architecture::te:
      d.classifier = shape("head.fc1_w")[1];
      break;
    case Architecture::rn:
      d.rn_hidden = shape("rn.g1_w")[1];
      if (shape("rn.g1_w")[0] <= d.hidden) throw ConfigError("rn.g1_w is narrower than the text feature");
      d.feature = shape("rn.g1_w")[0] - d.hidden;
      break;
    case Architecture::top_down:
    case Architecture::bottom_up:
      d.feature = shape("td.img_w")[0];
      d.fusion = shape("td.img_w")[1];
      d.classifier = shape("td.head1.fc1_w")[1];
      break;
    case Architecture::eve_image:
    case Architecture::eve_roi:
      d.feature = shape("image.proj_w")[0];
      d.classifier = shape("head.fc1_w")[1];
      break;
  }
  return d;
}

/// Named learnable tensors of one architecture. std::map keeps element
/// addresses stable, which graph bindings rely on.
class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(Architecture arch, ModelDims dims, std::map<std::string, Tensor> tensors)
      : arch_(arch), dims_(dims), tensors_(std::move(tensors)) {
    validate();
  }

  Architecture arch() const { return arch_; }
  const ModelDims& dims() const { return dims_; }

  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
  }

  std::map<std::string, Tensor>& tensors() { return tensors_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  /// Trainable tensors in name order.
  std::vector<Tensor*> trainable() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : tensors_) {
      if (t.requires_grad) out.push_back(&t);
    }
    return out;
  }

  void zero_grad() {
    for (auto& [name, t] : tensors_) t.grad.reset();
  }

  void set_embedding_trainable(bool trainable) { at("embedding").requires_grad = trainable; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) {
      if (t.requires_grad) n += t.numel();
    }
    return n;
  }

  /// Names and shapes must match the architecture schema exactly.
  void validate() const {
    const auto schema = model_schema(arch_, dims_);
    if (schema.size() != tensors_.size()) {
      throw ConfigError(std::string(to_string(arch_)) + " expects " + std::to_string(schema.size()) +
                        " tensors, found " + std::to_string(tensors_.size()));
    }
    for (const auto& [name, shape] : schema) {
      auto it = tensors_.find(name);
      if (it == tensors_.end()) throw ConfigError("missing tensor '" + name + "'");
      if (it->second.shape != shape) {
        throw ConfigError("tensor '" + name + "' has shape " + shape_str(it->second.shape) + ", expected " +
                          shape_str(shape));
      }
    }
  }

 private:
  Architecture arch_ = Architecture::hypothesis_only;
  ModelDims dims_;
  std::map<std::string, Tensor> tensors_;
};

/// Glorot-uniform weight matrices, zero biases, seeded. The embedding is
/// copied from `embedding` when given (frozen), otherwise drawn from
/// U(-0.05, 0.05) with a zero PAD row.
inline ModelParams init_params(Architecture arch, const ModelDims& dims, std::uint64_t seed,
                               const Tensor* embedding = nullptr) {
  Rng rng(seed);
  std::map<std::string, Tensor> tensors;
  for (const auto& [name, shape] : model_schema(arch, dims)) {
    Tensor t = Tensor::zeros(shape, true);
    if (name == "embedding") {
      t.requires_grad = false;
      if (embedding) {
        if (embedding->shape != shape) {
          throw ConfigError("embedding table " + shape_str(embedding->shape) + " does not match " + shape_str(shape));
        }
        t.data = embedding->data;
      } else {
        for (std::size_t i = 1; i < shape[0]; ++i)
          for (std::size_t j = 0; j < shape[1]; ++j) t(i, j) = static_cast<real>(rng.uniform(-0.05, 0.05));
      }
      for (std::size_t j = 0; j < shape[1]; ++j) t(static_cast<std::size_t>(Vocabulary::pad), j) = 0;
    } else if (shape[0] > 1) {
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& v : t.data) v = static_cast<real>(rng.uniform(-limit, limit));
    }
    tensors.emplace(name, std::move(t));
  }
  return ModelParams(arch, dims, std::move(tensors));
}

// ---- binding and shared layers ------------------------------------------------

/// Binds named parameters into a graph read-only; gradients are read back
/// with Graph::grad_of.
class ParamBinder {
 public:
  ParamBinder(Graph& g, const ModelParams& p) : g_(g), p_(p) {}

  Var operator()(const std::string& name) const { return g_.param(p_.at(name)); }
  Graph& graph() const { return g_; }
  const ModelParams& params() const { return p_; }

  TextEncoderParams text(const std::string& prefix) const {
    const auto& b = *this;
    auto gru = [&](const char* n) { return b(prefix + "gru." + n); };
    return {b("embedding"),
            b(prefix + "mlp_w"),
            b(prefix + "mlp_b"),
            {gru("w_z"), gru("u_z"), gru("b_z"), gru("w_r"), gru("u_r"), gru("b_r"), gru("w_h"), gru("u_h"),
             gru("b_h")}};
  }

 private:
  Graph& g_;
  const ModelParams& p_;
};

inline Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

/// fc2(relu(fc1(x))) with tensors "<prefix>fc1_w" etc.
inline Var mlp_head(const ParamBinder& b, const std::string& prefix, Var x) {
  Var h = relu(linear(x, b(prefix + "fc1_w"), b(prefix + "fc1_b")));
  return linear(h, b(prefix + "fc2_w"), b(prefix + "fc2_b"));
}

namespace detail {

inline void require_arch(const ModelParams& p, std::initializer_list<Architecture> allowed, const char* fn) {
  for (auto a : allowed) {
    if (p.arch() == a) return;
  }
  throw ConfigError(std::string(fn) + ": parameters are tagged " + std::string(to_string(p.arch())));
}

inline void require_objects(const Tensor& objects, const ModelParams& p, const char* fn) {
  if (objects.rank() != 2 || objects.rows() == 0) {
    throw ContractError(std::string(fn) + ": at least one image object is required");
  }
  if (objects.cols() != p.dims().feature) {
    throw DimensionError(std::string(fn) + ": objects " + shape_str(objects.shape) + " but the model expects width " +
                         std::to_string(p.dims().feature));
  }
}

}  // namespace detail

// ---- architectures ----------------------------------------------------------

/// Text feature -> FC(H, C) ReLU -> FC(C, 3).
inline Var forward_hypothesis_only(Graph& g, std::span<const std::int32_t> tokens, const ModelParams& p) {
  detail::require_arch(p, {Architecture::hypothesis_only}, "forward_hypothesis_only");
  ParamBinder b(g, p);
  Var t = encode_hypothesis(tokens, b.text("text."));
  return mlp_head(b, "head.", t);
}

/// Independent premise and hypothesis encoders, concatenated (2H) -> FC head.
inline Var forward_te(Graph& g, std::span<const std::int32_t> premise, std::span<const std::int32_t> hypothesis,
                      const ModelParams& p) {
  detail::require_arch(p, {Architecture::te}, "forward_te");
  ParamBinder b(g, p);
  Var pf = encode_hypothesis(premise, b.text("premise."));
  Var hf = encode_hypothesis(hypothesis, b.text("hypothesis."));
  return mlp_head(b, "head.", concat_cols({pf, hf}));
}

/// Every (object, text) pair goes through a shared two-layer MLP; the pair
/// outputs are summed and mapped to logits.
inline Var forward_rn(Graph& g, const Tensor& objects, std::span<const std::int32_t> tokens, const ModelParams& p) {
  detail::require_arch(p, {Architecture::rn}, "forward_rn");
  detail::require_objects(objects, p, "forward_rn");
  ParamBinder b(g, p);
  Var t = encode_hypothesis(tokens, b.text("text."));
  Var obj = g.param(objects);
  Var pairs = concat_cols({obj, repeat_rows(t, objects.rows())});
  Var h = relu(linear(pairs, b("rn.g1_w"), b("rn.g1_b")));
  h = relu(linear(h, b("rn.g2_w"), b("rn.g2_b")));
  return linear(sum_rows(h), b("rn.out_w"), b("rn.out_b"));
}

struct AttentionLogits {
  Var logits;     // 1 x 3
  Var attention;  // 1 x M weights over image objects
};

/// Attention from FC(concat(object, text)) scores softmaxed over objects;
/// the attended image vector and the text feature are projected, fused by
/// elementwise product and fed to two MLP heads whose outputs are summed.
/// roi_mode selects the bottom-up (ROI) variant instead of top-down (grid).
inline AttentionLogits forward_topdown(Graph& g, const Tensor& objects, std::span<const std::int32_t> tokens,
                                       const ModelParams& p, bool roi_mode) {
  detail::require_arch(p, {roi_mode ? Architecture::bottom_up : Architecture::top_down}, "forward_topdown");
  detail::require_objects(objects, p, "forward_topdown");
  ParamBinder b(g, p);
  Var t = encode_hypothesis(tokens, b.text("text."));
  Var obj = g.param(objects);
  Var pairs = concat_cols({obj, repeat_rows(t, objects.rows())});
  Var scores = linear(pairs, b("td.att_w"), b("td.att_b"));
  Var weights = softmax_rows(transpose(scores));
  Var attended = matmul(weights, obj);
  Var img = relu(linear(attended, b("td.img_w"), b("td.img_b")));
  Var txt = relu(linear(t, b("td.txt_w"), b("td.txt_b")));
  Var fused = mul(img, txt);
  return {add(mlp_head(b, "td.head1.", fused), mlp_head(b, "td.head2.", fused)), weights};
}

/// Text branch: MLP -> self-attention -> GRU. Image branch: region
/// projection -> self-attention -> text-image attention with the text
/// feature as reference. Both 1 x H vectors are concatenated and classified
/// by FC(2H, C) ReLU -> FC(C, 3). The attention field is the 1 x M mask.
inline AttentionLogits forward_eve(Graph& g, const FeatureSet& features, std::span<const std::int32_t> tokens,
                                   const ModelParams& p) {
  detail::require_arch(p, {Architecture::eve_image, Architecture::eve_roi}, "forward_eve");
  if (features.kind != *required_features(p.arch())) {
    throw ConfigError(std::string(to_string(p.arch())) + " cannot consume " + to_string(features.kind) +
                      " features of image " + features.image_id);
  }
  detail::require_objects(features.objects, p, "forward_eve");
  ParamBinder b(g, p);
  Var t = encode_hypothesis(tokens, b.text("text."));
  Var regions = project_regions(g.param(features.objects), {b("image.proj_w"), b("image.proj_b")});
  Var image = self_attend(regions);
  AttentionResult cross = text_image_attend(image, t);
  return {mlp_head(b, "head.", concat_cols({t, cross.attended})), cross.mask};
}

/// Everything one forward pass may need; unused fields are ignored.
struct ModelInput {
  std::span<const std::int32_t> hypothesis;
  std::span<const std::int32_t> premise;
  const FeatureSet* features = nullptr;
};

struct ForwardResult {
  Var logits;
  std::optional<Var> attention;
};

inline ForwardResult forward(Graph& g, const ModelParams& p, const ModelInput& in) {
  auto need_features = [&]() -> const FeatureSet& {
    if (!in.features) throw ContractError(std::string(to_string(p.arch())) + " requires image features");
    const auto kind = required_features(p.arch());
    if (kind && in.features->kind != *kind) {
      throw ConfigError(std::string(to_string(p.arch())) + " cannot consume " + to_string(in.features->kind) +
                        " features of image " + in.features->image_id);
    }
    return *in.features;
  };
  switch (p.arch()) {
    case Architecture::hypothesis_only:
      return {forward_hypothesis_only(g, in.hypothesis, p), std::nullopt};
    case Architecture::te:
      return {forward_te(g, in.premise, in.hypothesis, p), std::nullopt};
    case Architecture::rn:
      return {forward_rn(g, need_features().objects, in.hypothesis, p), std::nullopt};
    case Architecture::top_down:
    case Architecture::bottom_up: {
      auto r = forward_topdown(g, need_features().objects, in.hypothesis, p, p.arch() == Architecture::bottom_up);
      return {r.logits, r.attention};
    }
    case Architecture::eve_image:
    case Architecture::eve_roi: {
      auto r = forward_eve(g, need_features(), in.hypothesis, p);
      return {r.logits, r.attention};
    }
  }
  throw ContractError("unknown architecture");
}

}  // namespace vekit
