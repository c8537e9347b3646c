#pragma once

#include <vector>

#include "filigrain/error.hpp"
#include "filigrain/late_interaction.hpp"
#include "filigrain/tensor.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Bidirectional in-batch contrastive loss with a learnable temperature.
// Logits are s / tau; each per-sample term carries the 1/b factor, so the
// summed loss is the batch mean per direction, halved and added.
// ---------------------------------------------------------------------------

struct Temperature {
  Tensor value;          // shape {1}, learnable
  double floor = 0.01;   // clamped after every optimizer step

  static Temperature init(double tau0 = 0.07, double floor = 0.01) {
    Temperature t;
    t.value = Tensor::scalar(tau0, /*requires_grad=*/true);
    t.floor = floor;
    return t;
  }
};

// Per-row probability vector over batch columns; rows sum to 1.
struct TargetDistribution {
  Tensor probs;  // b x b, constant (no gradient)
};

inline TargetDistribution one_hot_targets(int b) {
  check(b > 0, Error::Kind::dimension, "one_hot_targets: empty batch");
  Tensor t({b, b});
  auto tv = t.mutable_values();
  for (int i = 0; i < b; ++i) tv[i * b + i] = 1.0;
  return TargetDistribution{t};
}

// Appendix-style multi-positive targets: probability 1/|set| on each listed
// positive. Reduces to one-hot when every set is the singleton diagonal.
inline TargetDistribution multi_positive_targets(
    const std::vector<std::vector<int>>& positive_sets, int b) {
  check(static_cast<int>(positive_sets.size()) == b, Error::Kind::dimension,
        "multi_positive_targets: need one set per row");
  Tensor t({b, b});
  auto tv = t.mutable_values();
  for (int k = 0; k < b; ++k) {
    const auto& set = positive_sets[static_cast<std::size_t>(k)];
    check(!set.empty(), Error::Kind::empty_candidates,
          "multi_positive_targets: empty positive set");
    const double p = 1.0 / static_cast<double>(set.size());
    for (int j : set) {
      check(j >= 0 && j < b, Error::Kind::dimension,
            "multi_positive_targets: index outside batch");
      tv[k * b + j] = p;
    }
  }
  return TargetDistribution{t};
}

// sum_k -(1/b) sum_j targets[k][j] * log softmax_row_k(s_I / tau)[j].
// With one-hot diagonal targets this is exactly the summed image-to-text
// per-sample loss.
inline Tensor image_to_text_loss(Tape& tape, const Tensor& s_img2txt,
                                 const Temperature& tau,
                                 const TargetDistribution& targets) {
  check(s_img2txt.rank() == 2 && s_img2txt.rows() == s_img2txt.cols(),
        Error::Kind::dimension, "image_to_text_loss: square matrix required");
  const int b = s_img2txt.rows();
  check(b > 0, Error::Kind::dimension, "image_to_text_loss: empty batch");
  check(targets.probs.shape() == s_img2txt.shape(), Error::Kind::dimension,
        "image_to_text_loss: target shape mismatch");
  Tensor logits = tape.div_scalar(s_img2txt, tau.value);
  Tensor log_probs = tape.log_softmax_rows(logits);
  Tensor weighted = tape.mul(log_probs, targets.probs);
  return tape.scale(tape.sum(weighted), -1.0 / static_cast<double>(b));
}

// Mirror direction: for text k the softmax runs over images, i.e. down
// column k of s_T. Targets are rows over image indices.
inline Tensor text_to_image_loss(Tape& tape, const Tensor& s_txt2img,
                                 const Temperature& tau,
                                 const TargetDistribution& targets) {
  check(s_txt2img.rank() == 2 && s_txt2img.rows() == s_txt2img.cols(),
        Error::Kind::dimension, "text_to_image_loss: square matrix required");
  const int b = s_txt2img.rows();
  check(b > 0, Error::Kind::dimension, "text_to_image_loss: empty batch");
  Tensor by_text = tape.transpose(s_txt2img);  // row k = text k across images
  check(targets.probs.shape() == by_text.shape(), Error::Kind::dimension,
        "text_to_image_loss: target shape mismatch");
  Tensor logits = tape.div_scalar(by_text, tau.value);
  Tensor log_probs = tape.log_softmax_rows(logits);
  Tensor weighted = tape.mul(log_probs, targets.probs);
  return tape.scale(tape.sum(weighted), -1.0 / static_cast<double>(b));
}

// L = 1/2 (image-to-text + text-to-image), differentiable w.r.t. the
// similarity entries and tau.
inline Tensor total_loss(Tape& tape, const SimilarityPair& pair,
                         const Temperature& tau,
                         const TargetDistribution& targets_img,
                         const TargetDistribution& targets_txt) {
  Tensor li = image_to_text_loss(tape, pair.image_to_text, tau, targets_img);
  Tensor lt = text_to_image_loss(tape, pair.text_to_image, tau, targets_txt);
  return tape.scale(tape.add(li, lt), 0.5);
}

}  // namespace filigrain
