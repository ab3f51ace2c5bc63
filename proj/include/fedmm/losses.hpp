#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fedmm/errors.hpp"
#include "fedmm/model.hpp"
#include "fedmm/tensor.hpp"

namespace fedmm {

struct LossConfig {
  double tau = 0.5;              // NT-Xent temperature
  double ntx_weight = 1.0;       // 0 turns the similarity term off
  double label_threshold = 0.5;  // F1 binarization
  bool ntxent_standard = false;  // true adds the positive pair to the denominator
};

struct MetricsReport {
  double micro_f1 = 0;
  double macro_f1 = 0;
  std::vector<double> precision;  // per label
  std::vector<double> recall;     // per label
  int64_t samples = 0;
  double loss_ntx = 0;
  double loss_bce = 0;
};

// NT-Xent over a mini-batch, exactly as the similarity loss is written: for
// each row z the numerator pairs local row z with global row z, the
// denominator sums exp(S(local_z, global_t)/tau) over t != z only, S = cosine
// similarity. Sum of -log ratios over the batch (no batch-size division
// here). With `standard` the t = z term joins the denominator.
template <typename T>
Tensor<T> ntxent_loss(const Tensor<T>& local_feats, const Tensor<T>& global_feats, T tau,
                      bool standard = false) {
  if (local_feats.rank() != 2 || global_feats.rank() != 2 ||
      local_feats.shape() != global_feats.shape())
    throw ShapeMismatch("ntxent_loss: matching (B,f) tensors required");
  int64_t b = local_feats.dim(0);
  if (b < 2) throw BatchTooSmall("ntxent_loss needs B >= 2, got B=" + std::to_string(b));
  if (!(tau > T(0))) throw DomainError("ntxent_loss: tau must be positive");

  Tensor<T> ln = l2_normalize(local_feats);
  Tensor<T> gn = l2_normalize(global_feats);
  Tensor<T> sims = scale(matmul(ln, transpose(gn)), T(1) / tau);  // (B,B), entry (z,t)

  // row-wise max over the denominator's support, as a constant shift for a
  // stable log-sum-exp
  std::vector<T> shift(static_cast<size_t>(b));
  for (int64_t z = 0; z < b; ++z) {
    T m = -std::numeric_limits<T>::infinity();
    for (int64_t t = 0; t < b; ++t)
      if (standard || t != z) m = std::max(m, sims(z, t));
    shift[static_cast<size_t>(z)] = m;
  }
  Tensor<T> shift_t(Shape{b}, shift);

  // subtract shift[z] from row z: transpose, row-bias subtract, transpose back
  Tensor<T> shifted = transpose(subtract(transpose(sims), shift_t));

  std::vector<T> mask(static_cast<size_t>(b * b), T(1));
  if (!standard)
    for (int64_t z = 0; z < b; ++z) mask[static_cast<size_t>(z * b + z)] = T(0);
  Tensor<T> denom = sum(multiply(exp(shifted), Tensor<T>(Shape{b, b}, mask)), 1);  // (B,)
  Tensor<T> log_denom = add(log(denom), shift_t);

  std::vector<T> eye(static_cast<size_t>(b * b), T(0));
  for (int64_t z = 0; z < b; ++z) eye[static_cast<size_t>(z * b + z)] = T(1);
  Tensor<T> positives = sum(multiply(sims, Tensor<T>(Shape{b, b}, eye)), 1);  // (B,)

  return sum(subtract(log_denom, positives));
}

// Multi-label binary cross entropy on logits, mean over the batch of the sum
// over labels, computed in the overflow-safe logits form
//   max(l,0) - l*y + log(1+exp(-|l|)).
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& labels) {
  if (logits.rank() != 2 || logits.shape() != labels.shape())
    throw ShapeMismatch("bce_loss: logits and labels must both be (B,L)");
  for (T y : labels.data())
    if (y != T(0) && y != T(1))
      throw NonBinaryLabel("label value " + std::to_string(static_cast<double>(y)));
  int64_t b = logits.dim(0);
  const auto& lv = logits.data();
  const auto& yv = labels.data();
  T acc = 0;
  for (size_t i = 0; i < lv.size(); ++i) {
    T l = lv[i];
    acc += std::max(l, T(0)) - l * yv[i] +
           static_cast<T>(std::log1p(std::exp(-std::fabs(static_cast<double>(l)))));
  }
  T inv_b = T(1) / static_cast<T>(b);
  std::vector<T> ycopy = yv;
  return make_op<T>("bce_with_logits", Shape{}, {acc * inv_b}, {logits},
                    [logits, y = std::move(ycopy), inv_b](TensorNode<T>& n) {
                      const auto& lv = logits.data();
                      std::vector<T> g(lv.size());
                      for (size_t i = 0; i < lv.size(); ++i)
                        g[i] = n.grad[0] * (detail::stable_sigmoid(lv[i]) - y[i]) * inv_b;
                      logits.node()->accum_grad(g);
                    });
}

struct LossBreakdown {
  double total = 0;
  double ntx = 0;  // already averaged over other modalities and batch size
  double bce = 0;
};

// stacks scalar tensors into a rank-1 tensor (helper for averaging loss terms)
template <typename T>
Tensor<T> concat_scalars(const std::vector<Tensor<T>>& scalars) {
  std::vector<Tensor<T>> rows;
  rows.reserve(scalars.size());
  for (const auto& s : scalars) rows.push_back(reshape(s, Shape{1}));
  return concat(rows);
}

// The local objective: similarity term against every other-modality frozen
// trunk (averaged) plus classification loss on the pseudo-fused features.
// Both terms are divided by the batch size so their balance does not depend
// on B. With ntx_weight = 0 (MIM off) the similarity term is dropped exactly.
template <typename T>
Tensor<T> local_objective(Backbone<T>& local, const Classifier<T>& clf,
                          std::vector<Backbone<T>>& frozen_trunks, const Tensor<T>& images,
                          const Tensor<T>& labels, const ModalityId& modality,
                          const FusionLayout& layout, const LossConfig& cfg,
                          LossBreakdown* breakdown = nullptr) {
  Tensor<T> stem_out = local.stem_forward(images);
  Tensor<T> feats = local.trunk_forward(stem_out, NormMode::Train);

  Tensor<T> logits = classify(clf, pseudo_fuse(feats, modality, layout));
  Tensor<T> bce = bce_loss(logits, labels);

  Tensor<T> loss = bce;
  double ntx_value = 0;
  if (cfg.ntx_weight > 0 && !frozen_trunks.empty()) {
    int64_t b = images.dim(0);
    std::vector<Tensor<T>> terms;
    terms.reserve(frozen_trunks.size());
    for (auto& trunk : frozen_trunks) {
      Tensor<T> global_feats = trunk.trunk_forward(stem_out, NormMode::Frozen);
      terms.push_back(ntxent_loss(feats, global_feats, static_cast<T>(cfg.tau),
                                  cfg.ntxent_standard));
    }
    // mean over the other modalities, then per-sample
    Tensor<T> ntx = terms.size() == 1
                        ? terms[0]
                        : scale(sum(concat_scalars(terms)), T(1) / static_cast<T>(terms.size()));
    ntx = scale(ntx, T(1) / static_cast<T>(b));
    ntx_value = static_cast<double>(ntx.item());
    loss = add(bce, scale(ntx, static_cast<T>(cfg.ntx_weight)));
  }
  if (breakdown) {
    breakdown->bce = static_cast<double>(bce.item());
    breakdown->ntx = ntx_value;
    breakdown->total = static_cast<double>(loss.item());
  }
  return loss;
}

// ---------------------------------------------------------------------------
// F1 evaluation

// Binarize at threshold; micro-F1 from pooled counts, macro-F1 as the
// unweighted per-label mean. A label with zero support and zero predictions
// scores F1 = 1 so empty labels on small synthetic sets do not zero the mean.
inline MetricsReport f1_scores(const std::vector<std::vector<double>>& probs,
                               const std::vector<std::vector<uint8_t>>& labels,
                               double threshold) {
  if (probs.size() != labels.size()) throw ShapeMismatch("f1_scores: row count mismatch");
  MetricsReport rep;
  rep.samples = static_cast<int64_t>(probs.size());
  if (probs.empty()) return rep;
  size_t L = probs[0].size();
  std::vector<int64_t> tp(L, 0), fp(L, 0), fn(L, 0);
  for (size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != L || labels[i].size() != L)
      throw ShapeMismatch("f1_scores: ragged rows");
    for (size_t k = 0; k < L; ++k) {
      bool pred = probs[i][k] >= threshold;
      bool truth = labels[i][k] != 0;
      if (pred && truth)
        ++tp[k];
      else if (pred && !truth)
        ++fp[k];
      else if (!pred && truth)
        ++fn[k];
    }
  }
  int64_t TP = 0, FP = 0, FN = 0;
  double macro = 0;
  rep.precision.resize(L);
  rep.recall.resize(L);
  for (size_t k = 0; k < L; ++k) {
    TP += tp[k];
    FP += fp[k];
    FN += fn[k];
    int64_t denom = 2 * tp[k] + fp[k] + fn[k];
    macro += denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp[k]) / static_cast<double>(denom);
    rep.precision[k] = tp[k] + fp[k] > 0
                           ? static_cast<double>(tp[k]) / static_cast<double>(tp[k] + fp[k])
                           : (fn[k] == 0 ? 1.0 : 0.0);
    rep.recall[k] = tp[k] + fn[k] > 0
                        ? static_cast<double>(tp[k]) / static_cast<double>(tp[k] + fn[k])
                        : 1.0;
  }
  rep.macro_f1 = macro / static_cast<double>(L);
  int64_t micro_denom = 2 * TP + FP + FN;
  rep.micro_f1 =
      micro_denom == 0 ? 1.0 : 2.0 * static_cast<double>(TP) / static_cast<double>(micro_denom);
  return rep;
}

}  // namespace fedmm
