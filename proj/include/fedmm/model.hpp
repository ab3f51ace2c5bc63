#pragma once

#include <string>
#include <vector>

#include "fedmm/errors.hpp"
#include "fedmm/layers.hpp"
#include "fedmm/params.hpp"
#include "fedmm/tensor.hpp"

namespace fedmm {

struct ModalityId {
  int index = 0;  // dense, unique, fixes the fusion slot order
  std::string name;
  int64_t in_channels = 1;
};

struct FusionLayout {
  int64_t P = 0;  // modality count
  int64_t f = 0;  // per-modality feature dim
  std::vector<ModalityId> order;

  int64_t fused_dim() const { return P * f; }
};

// Desk-scale architecture: stem = 3x3 conv (in_channels -> stem_channels) +
// relu + 2x2 average pool, flattened; trunk = norm -> dense -> norm -> relu ->
// dense(feature_dim). All modality backbones share trunk shapes; only the stem
// sees the modality's channel count.
struct ArchConfig {
  int64_t image_size = 4;
  int64_t stem_channels = 8;
  int64_t trunk_hidden = 32;
  int64_t feature_dim = 16;
  int64_t labels = 5;
  bool whitening = true;  // false -> plain batch norm trunks (FW module off)
  double norm_eps = 1e-5;
  double norm_momentum = 0.1;
  WhitenKind whiten_kind = WhitenKind::Zca;
  bool grad_through_whitening = true;

  int64_t stem_flat_dim() const {
    return stem_channels * (image_size / 2) * (image_size / 2);
  }
};

inline std::vector<LayerSpec> backbone_layer_specs(const ArchConfig& arch, int64_t in_channels) {
  return {
      ConvSpec{"stem.conv", in_channels, arch.stem_channels, 3, 3, Activation::Relu},
      NormSpec{"trunk.norm0", arch.stem_flat_dim(), arch.whitening},
      DenseSpec{"trunk.fc1", arch.stem_flat_dim(), arch.trunk_hidden, Activation::Relu},
      NormSpec{"trunk.norm1", arch.trunk_hidden, arch.whitening},
      DenseSpec{"trunk.fc2", arch.trunk_hidden, arch.feature_dim, Activation::None},
  };
}

inline std::vector<LayerSpec> classifier_layer_specs(const ArchConfig& arch, int64_t input_dim) {
  return {DenseSpec{"clf", input_dim, arch.labels, Activation::None}};
}

template <typename T>
ParameterSet<T> init_backbone_params(const ArchConfig& arch, int64_t in_channels, uint64_t seed) {
  return init_params<T>(backbone_layer_specs(arch, in_channels), seed);
}

template <typename T>
ParameterSet<T> init_classifier_params(const ArchConfig& arch, int64_t input_dim, uint64_t seed) {
  return init_params<T>(classifier_layer_specs(arch, input_dim), seed);
}

// ---------------------------------------------------------------------------
// backbone = modality stem + common-shape trunk

template <typename T>
struct Backbone {
  ArchConfig arch;
  Conv2dLayer<T> stem;
  BatchWhiteningLayer<T> bw0, bw1;
  BatchNormLayer<T> bn0, bn1;
  DenseLayer<T> fc1, fc2;

  // Binds layer views onto the set's tensors: trainables become graph leaves,
  // buffers stay shared so forward-side updates land back in the set.
  static Backbone bind(const ParameterSet<T>& p, const ArchConfig& arch) {
    Backbone b;
    b.arch = arch;
    b.stem = Conv2dLayer<T>{p.at("stem.conv.kernels"), p.at("stem.conv.bias"), 1};
    b.fc1 = DenseLayer<T>{p.at("trunk.fc1.weight"), p.at("trunk.fc1.bias")};
    b.fc2 = DenseLayer<T>{p.at("trunk.fc2.weight"), p.at("trunk.fc2.bias")};
    T eps = static_cast<T>(arch.norm_eps);
    T mom = static_cast<T>(arch.norm_momentum);
    if (arch.whitening) {
      b.bw0 = BatchWhiteningLayer<T>{arch.stem_flat_dim(),
                                     p.at("trunk.norm0.gamma"),
                                     p.at("trunk.norm0.beta"),
                                     p.at("trunk.norm0.running_mean"),
                                     p.at("trunk.norm0.running_cov"),
                                     eps,
                                     mom,
                                     arch.whiten_kind,
                                     arch.grad_through_whitening};
      b.bw1 = BatchWhiteningLayer<T>{arch.trunk_hidden,
                                     p.at("trunk.norm1.gamma"),
                                     p.at("trunk.norm1.beta"),
                                     p.at("trunk.norm1.running_mean"),
                                     p.at("trunk.norm1.running_cov"),
                                     eps,
                                     mom,
                                     arch.whiten_kind,
                                     arch.grad_through_whitening};
    } else {
      b.bn0 = BatchNormLayer<T>{arch.stem_flat_dim(), p.at("trunk.norm0.gamma"),
                                p.at("trunk.norm0.beta"), p.at("trunk.norm0.running_mean"),
                                p.at("trunk.norm0.running_var"), eps, mom};
      b.bn1 = BatchNormLayer<T>{arch.trunk_hidden, p.at("trunk.norm1.gamma"),
                                p.at("trunk.norm1.beta"), p.at("trunk.norm1.running_mean"),
                                p.at("trunk.norm1.running_var"), eps, mom};
    }
    return b;
  }

  // modality-specific part: conv stem + relu + pool + flatten
  Tensor<T> stem_forward(const Tensor<T>& images) const {
    Tensor<T> y = avgpool2x2(relu(stem.forward(images)));
    return reshape(y, Shape{images.dim(0), arch.stem_flat_dim()});
  }

  // common-shape part
  Tensor<T> trunk_forward(const Tensor<T>& stem_out, NormMode mode) {
    Tensor<T> y = arch.whitening ? bw0.forward(stem_out, mode) : bn0.forward(stem_out, mode);
    y = fc1.forward(y);
    y = arch.whitening ? bw1.forward(y, mode) : bn1.forward(y, mode);
    return fc2.forward(relu(y));
  }

  Tensor<T> forward(const Tensor<T>& images, NormMode mode) {
    return trunk_forward(stem_forward(images), mode);
  }
};

// phi^i(stem) into a frozen other-modality trunk: the images pass through the
// LOCAL stem, its output through the GLOBAL trunk. Batch statistics are used
// in the frozen trunk's norm layers, but its buffers and parameters are never
// written (bind it from a frozen_copy()).
template <typename T>
Tensor<T> cross_model_forward(const Backbone<T>& local, Backbone<T>& global_model,
                              const Tensor<T>& images, NormMode mode = NormMode::Frozen) {
  return global_model.trunk_forward(local.stem_forward(images), mode);
}

// ---------------------------------------------------------------------------
// fusion + classification

// Places `features` in modality m's slot and the zero vector in every other
// slot, per layout order.
template <typename T>
Tensor<T> pseudo_fuse(const Tensor<T>& features, const ModalityId& m, const FusionLayout& layout) {
  if (features.rank() != 2 || features.dim(1) != layout.f)
    throw ShapeMismatch("pseudo_fuse: features must be (n," + std::to_string(layout.f) + ")");
  bool known = false;
  for (const auto& mm : layout.order) known = known || mm.index == m.index;
  if (!known) throw UnknownModality("modality index " + std::to_string(m.index));
  int64_t n = features.dim(0);
  std::vector<Tensor<T>> parts;
  parts.reserve(layout.order.size());
  for (const auto& mm : layout.order)
    parts.push_back(mm.index == m.index ? features : Tensor<T>::zeros(Shape{n, layout.f}));
  return concat(parts);
}

template <typename T>
struct Classifier {
  DenseLayer<T> fc;

  static Classifier bind(const ParameterSet<T>& p) {
    return Classifier{DenseLayer<T>{p.at("clf.weight"), p.at("clf.bias")}};
  }

  Tensor<T> forward(const Tensor<T>& fused) const { return fc.forward(fused); }
};

template <typename T>
Tensor<T> classify(const Classifier<T>& c, const Tensor<T>& fused) {
  return c.forward(fused);
}

// Inference-time full fusion: every modality's backbone runs in eval mode,
// features are concatenated in layout order and classified; sigmoid per label.
template <typename T>
Tensor<T> full_fusion_inference(std::vector<Backbone<T>>& backbones, const Classifier<T>& clf,
                                const std::vector<Tensor<T>>& images_per_modality,
                                const FusionLayout& layout) {
  if (static_cast<int64_t>(images_per_modality.size()) != layout.P ||
      static_cast<int64_t>(backbones.size()) != layout.P)
    throw MissingModality("full fusion needs an image and a backbone per modality (P=" +
                          std::to_string(layout.P) + ")");
  std::vector<Tensor<T>> feats;
  feats.reserve(backbones.size());
  for (size_t m = 0; m < backbones.size(); ++m)
    feats.push_back(backbones[m].forward(images_per_modality[m], NormMode::Eval));
  return sigmoid(classify(clf, concat(feats)));
}

}  // namespace fedmm
