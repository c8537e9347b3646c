#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "filigrain/encoder.hpp"
#include "filigrain/error.hpp"
#include "filigrain/tensor.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Cross-modal late interaction: token-wise maximum similarities, their
// per-sample means in both directions, and the training-efficiency pipeline
// (salient-token selection, reduced communication precision).
// ---------------------------------------------------------------------------

struct InteractionConfig {
  double selection_ratio = 1.0;  // fraction of candidate tokens kept per sample
  bool half_precision = false;   // round features to binary16 before scoring
  int shard_size = 1;            // samples per simulated local worker
  bool include_special = false;  // let [CLS]/[BOS]/[EOS] join the candidates
};

struct SimilarityPair {
  Tensor image_to_text;  // b x b, entry (i, j) = s^I of image i vs text j
  Tensor text_to_image;  // b x b, entry (i, j) = s^T of text j vs image i
};

struct TokenSelection {
  std::vector<int> kept;  // original row indices, sorted ascending
  double ratio = 1.0;
};

struct PairScore {
  double score = 0.0;
  // Per query token (in candidate order) the original index of its best
  // counterpart token.
  std::vector<int> alignment;
};

// Instrumented count of token-pair dot products evaluated by this module.
inline std::atomic<std::uint64_t>& sim_dot_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}
inline void reset_sim_dot_counter() { sim_dot_counter().store(0); }

namespace detail {

inline double dot_rows(std::span<const double> a, int row_a,
                       std::span<const double> b, int row_b, int d) {
  const double* x = a.data() + static_cast<std::size_t>(row_a) * d;
  const double* y = b.data() + static_cast<std::size_t>(row_b) * d;
  double acc = 0.0;
  for (int i = 0; i < d; ++i) acc += x[i] * y[i];
  return acc;
}

}  // namespace detail

// Full token-pair similarity matrix between one image and one text. Rows and
// columns cover every stored token; invalid positions are present but meant
// to be masked by the caller.
inline Tensor pairwise_token_sim(Tape& tape, const EncodedFeatures& img,
                                 const EncodedFeatures& txt) {
  check(img.tokens.cols() == txt.tokens.cols(), Error::Kind::dimension,
        "pairwise_token_sim: embedding dims differ");
  sim_dot_counter() += static_cast<std::uint64_t>(img.rows()) *
                       static_cast<std::uint64_t>(txt.rows());
  return tape.matmul(img.tokens, tape.transpose(txt.tokens));
}

// Eq-style directional score: for every candidate image token take its best
// text token, then average. Value-level (no gradients); training goes
// through batch_similarity.
inline PairScore image_to_text_sim(const EncodedFeatures& img,
                                   const EncodedFeatures& txt,
                                   bool include_special = false) {
  const std::vector<int> qi = img.candidate_rows(include_special);
  const std::vector<int> tj = txt.candidate_rows(include_special);
  check(!qi.empty() && !tj.empty(), Error::Kind::empty_candidates,
        "image_to_text_sim: no valid tokens on one side");
  const int d = img.tokens.cols();
  check(d == txt.tokens.cols(), Error::Kind::dimension,
        "image_to_text_sim: embedding dims differ");
  sim_dot_counter() += static_cast<std::uint64_t>(qi.size()) * tj.size();
  auto iv = img.tokens.values();
  auto tv = txt.tokens.values();
  PairScore out;
  double acc = 0.0;
  for (int q : qi) {
    double best = 0.0;
    int best_r = -1;
    for (int r : tj) {
      const double s = detail::dot_rows(iv, q, tv, r, d);
      if (best_r < 0 || s > best) {
        best = s;
        best_r = r;
      }
    }
    acc += best;
    out.alignment.push_back(best_r);
  }
  out.score = acc / static_cast<double>(qi.size());
  return out;
}

inline PairScore text_to_image_sim(const EncodedFeatures& img,
                                   const EncodedFeatures& txt,
                                   bool include_special = false) {
  const std::vector<int> qi = txt.candidate_rows(include_special);
  const std::vector<int> tj = img.candidate_rows(include_special);
  check(!qi.empty() && !tj.empty(), Error::Kind::empty_candidates,
        "text_to_image_sim: no valid tokens on one side");
  const int d = img.tokens.cols();
  check(d == txt.tokens.cols(), Error::Kind::dimension,
        "text_to_image_sim: embedding dims differ");
  sim_dot_counter() += static_cast<std::uint64_t>(qi.size()) * tj.size();
  auto iv = img.tokens.values();
  auto tv = txt.tokens.values();
  PairScore out;
  double acc = 0.0;
  for (int q : qi) {
    double best = 0.0;
    int best_r = -1;
    for (int r : tj) {
      const double s = detail::dot_rows(tv, q, iv, r, d);
      if (best_r < 0 || s > best) {
        best = s;
        best_r = r;
      }
    }
    acc += best;
    out.alignment.push_back(best_r);
  }
  out.score = acc / static_cast<double>(qi.size());
  return out;
}

// CLIP-style global similarity: one dot product between the sample-global
// features (image [CLS] row, text [EOS] row).
inline double global_sim(std::span<const double> img_global,
                         std::span<const double> txt_global) {
  check(img_global.size() == txt_global.size(), Error::Kind::dimension,
        "global_sim: dims differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < img_global.size(); ++i)
    acc += img_global[i] * txt_global[i];
  return acc;
}

// Keep the tokens with the highest token-wise maximum similarity against all
// counterpart candidates in the pool (the batch shard standing in for the
// local worker). Ties break to the lower index; kept indices stay ascending.
inline TokenSelection select_salient_tokens(
    const EncodedFeatures& features,
    const std::vector<const EncodedFeatures*>& counterpart_pool, double ratio,
    bool include_special = false) {
  check(ratio > 0.0 && ratio <= 1.0, Error::Kind::config,
        "select_salient_tokens: ratio must be in (0, 1]");
  check(!counterpart_pool.empty(), Error::Kind::empty_candidates,
        "select_salient_tokens: empty pool");
  const std::vector<int> cand = features.candidate_rows(include_special);
  check(!cand.empty(), Error::Kind::empty_candidates,
        "select_salient_tokens: no candidate tokens");
  TokenSelection sel;
  sel.ratio = ratio;
  if (ratio >= 1.0) {
    sel.kept = cand;
    return sel;
  }
  const int d = features.tokens.cols();
  auto fv = features.tokens.values();
  std::vector<double> scores(cand.size(), -std::numeric_limits<double>::infinity());
  for (const EncodedFeatures* other : counterpart_pool) {
    const std::vector<int> oc = other->candidate_rows(include_special);
    check(d == other->tokens.cols(), Error::Kind::dimension,
          "select_salient_tokens: embedding dims differ");
    sim_dot_counter() += static_cast<std::uint64_t>(cand.size()) * oc.size();
    auto ov = other->tokens.values();
    for (std::size_t q = 0; q < cand.size(); ++q)
      for (int r : oc)
        scores[q] = std::max(scores[q], detail::dot_rows(fv, cand[q], ov, r, d));
  }
  const int keep = std::max(
      1, static_cast<int>(std::ceil(ratio * static_cast<double>(cand.size()))));
  std::vector<int> order(cand.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  order.resize(static_cast<std::size_t>(std::min<int>(keep, static_cast<int>(cand.size()))));
  for (int o : order) sel.kept.push_back(cand[static_cast<std::size_t>(o)]);
  std::sort(sel.kept.begin(), sel.kept.end());
  return sel;
}

// Rounds every feature value to binary16, simulating the reduced-precision
// all-gather. Downstream similarity consumes the rounded values.
inline EncodedFeatures comm_reduce(Tape& tape, const EncodedFeatures& features) {
  EncodedFeatures out = features;
  out.tokens = tape.half_round(features.tokens);
  return out;
}

// Batch late-interaction scores for all pairs, honoring the efficiency
// pipeline in the order select -> reduce -> score. Differentiable through
// the kept tokens.
inline SimilarityPair batch_similarity(Tape& tape,
                                       const std::vector<EncodedFeatures>& imgs,
                                       const std::vector<EncodedFeatures>& txts,
                                       const InteractionConfig& cfg = {}) {
  check(imgs.size() == txts.size(), Error::Kind::dimension,
        "batch_similarity: batch lengths differ");
  check(!imgs.empty(), Error::Kind::empty_candidates, "batch_similarity: empty batch");
  const int b = static_cast<int>(imgs.size());
  const int shard = cfg.shard_size > 0 ? cfg.shard_size : b;

  // Phase 1: per-sample token selection against the shard-local pool.
  std::vector<std::vector<int>> kept_img(static_cast<std::size_t>(b));
  std::vector<std::vector<int>> kept_txt(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    const int lo = (i / shard) * shard;
    const int hi = std::min(b, lo + shard);
    if (cfg.selection_ratio >= 1.0) {
      kept_img[static_cast<std::size_t>(i)] =
          imgs[static_cast<std::size_t>(i)].candidate_rows(cfg.include_special);
      kept_txt[static_cast<std::size_t>(i)] =
          txts[static_cast<std::size_t>(i)].candidate_rows(cfg.include_special);
    } else {
      std::vector<const EncodedFeatures*> txt_pool, img_pool;
      for (int j = lo; j < hi; ++j) {
        txt_pool.push_back(&txts[static_cast<std::size_t>(j)]);
        img_pool.push_back(&imgs[static_cast<std::size_t>(j)]);
      }
      kept_img[static_cast<std::size_t>(i)] =
          select_salient_tokens(imgs[static_cast<std::size_t>(i)], txt_pool,
                                cfg.selection_ratio, cfg.include_special)
              .kept;
      kept_txt[static_cast<std::size_t>(i)] =
          select_salient_tokens(txts[static_cast<std::size_t>(i)], img_pool,
                                cfg.selection_ratio, cfg.include_special)
              .kept;
    }
    check(!kept_img[static_cast<std::size_t>(i)].empty() &&
              !kept_txt[static_cast<std::size_t>(i)].empty(),
          Error::Kind::empty_candidates,
          "batch_similarity: sample with no candidate tokens");
  }

  // Phase 2: gather the communicated tokens, optionally at reduced precision.
  std::vector<Tensor> img_tok(static_cast<std::size_t>(b));
  std::vector<Tensor> txt_tok(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    Tensor ti = tape.take_rows(imgs[static_cast<std::size_t>(i)].tokens,
                               kept_img[static_cast<std::size_t>(i)]);
    Tensor tt = tape.take_rows(txts[static_cast<std::size_t>(i)].tokens,
                               kept_txt[static_cast<std::size_t>(i)]);
    if (cfg.half_precision) {
      ti = tape.half_round(ti);
      tt = tape.half_round(tt);
    }
    img_tok[static_cast<std::size_t>(i)] = ti;
    txt_tok[static_cast<std::size_t>(i)] = tt;
  }

  // Phase 3: pairwise scores. One token-pair matrix per (i, j), reused for
  // both directions; summation runs in ascending token order.
  std::vector<Tensor> cells_i2t, cells_t2i;
  cells_i2t.reserve(static_cast<std::size_t>(b) * b);
  cells_t2i.reserve(static_cast<std::size_t>(b) * b);
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < b; ++j) {
      const Tensor& ti = img_tok[static_cast<std::size_t>(i)];
      const Tensor& tj = txt_tok[static_cast<std::size_t>(j)];
      sim_dot_counter() += static_cast<std::uint64_t>(ti.rows()) *
                           static_cast<std::uint64_t>(tj.rows());
      Tensor pair = tape.matmul(ti, tape.transpose(tj));
      const std::vector<std::uint8_t> all_txt(static_cast<std::size_t>(tj.rows()), 1);
      const std::vector<std::uint8_t> all_img(static_cast<std::size_t>(ti.rows()), 1);
      auto row_max = tape.masked_max_rows(pair, all_txt);
      cells_i2t.push_back(tape.masked_mean(row_max.values, all_img));
      auto col_max = tape.masked_max_rows(tape.transpose(pair), all_img);
      cells_t2i.push_back(tape.masked_mean(col_max.values, all_txt));
    }
  }
  SimilarityPair out;
  out.image_to_text = tape.stack_scalars(cells_i2t, b, b);
  out.text_to_image = tape.stack_scalars(cells_t2i, b, b);
  return out;
}

// Eq-2 style global similarity matrix for the CLIP-like baseline arm:
// G[i][j] = dot(image i's [CLS] feature, text j's [EOS] feature).
inline Tensor batch_global_similarity(Tape& tape,
                                      const std::vector<EncodedFeatures>& imgs,
                                      const std::vector<EncodedFeatures>& txts) {
  check(imgs.size() == txts.size() && !imgs.empty(), Error::Kind::dimension,
        "batch_global_similarity: bad batch");
  std::vector<Tensor> img_rows, txt_rows;
  for (const EncodedFeatures& f : imgs)
    img_rows.push_back(tape.take_rows(f.tokens, {f.global_row()}));
  for (const EncodedFeatures& f : txts)
    txt_rows.push_back(tape.take_rows(f.tokens, {f.global_row()}));
  Tensor gi = tape.concat_rows(img_rows);
  Tensor gt = tape.concat_rows(txt_rows);
  return tape.matmul(gi, tape.transpose(gt));
}

}  // namespace filigrain
