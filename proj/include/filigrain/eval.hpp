#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "filigrain/error.hpp"
#include "filigrain/late_interaction.hpp"
#include "filigrain/prompt.hpp"
#include "filigrain/tensor.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Zero-shot classification, image-text retrieval with R@K, and word-patch
// alignment export.
// ---------------------------------------------------------------------------

struct ZeroShotClass {
  std::string label;
  std::vector<EncodedFeatures> templates;  // one per rendered prompt
};

struct ZeroShotResult {
  int predicted = -1;
  std::string label;
  std::vector<double> scores;  // per class, ensemble similarity
};

// Argmax over classes of the prompt-ensembled similarity; ties keep the
// first class in input order.
inline ZeroShotResult zero_shot_classify(const EncodedFeatures& img,
                                         const std::vector<ZeroShotClass>& classes,
                                         bool include_special = false) {
  check(!classes.empty(), Error::Kind::empty_candidates,
        "zero_shot_classify: no classes");
  ZeroShotResult res;
  for (const ZeroShotClass& cls : classes) {
    check(!cls.templates.empty(), Error::Kind::empty_candidates,
          "zero_shot_classify: class without templates");
    res.scores.push_back(ensemble_similarity(img, cls.templates, include_special));
  }
  res.predicted = 0;
  for (int i = 1; i < static_cast<int>(res.scores.size()); ++i)
    if (res.scores[static_cast<std::size_t>(i)] >
        res.scores[static_cast<std::size_t>(res.predicted)])
      res.predicted = i;
  res.label = classes[static_cast<std::size_t>(res.predicted)].label;
  return res;
}

enum class RetrievalDirection { image_to_text, text_to_image };

// Which score ranks the gallery. The directional choice uses the
// query-side mean (s^I for image queries, s^T for text queries); "mean"
// averages the two directions.
enum class RankScore { directional, mean };

struct RetrievalReport {
  double r_at_1 = 0.0, r_at_5 = 0.0, r_at_10 = 0.0;
  std::vector<int> ranks;  // per query, best 1-based rank of any ground truth

  std::string to_text(const std::string& direction) const {
    std::ostringstream out;
    out << direction << "_r@1\t" << r_at_1 << '\n'
        << direction << "_r@5\t" << r_at_5 << '\n'
        << direction << "_r@10\t" << r_at_10 << '\n';
    return out.str();
  }
};

// ground_truth[q] lists the gallery indices that count as correct for query
// q (many-to-one mappings supported). Ranking ties break to the lower
// gallery index.
inline RetrievalReport retrieval_eval(const std::vector<EncodedFeatures>& imgs,
                                      const std::vector<EncodedFeatures>& txts,
                                      const std::vector<std::vector<int>>& ground_truth,
                                      RetrievalDirection direction,
                                      bool include_special = false,
                                      RankScore rank_score = RankScore::directional) {
  const bool i2t = direction == RetrievalDirection::image_to_text;
  const std::size_t n_query = i2t ? imgs.size() : txts.size();
  const std::size_t n_gallery = i2t ? txts.size() : imgs.size();
  check(n_query > 0 && n_gallery > 0, Error::Kind::empty_candidates,
        "retrieval_eval: empty gallery or query set");
  check(ground_truth.size() == n_query, Error::Kind::dimension,
        "retrieval_eval: need ground truth per query");

  RetrievalReport report;
  int hit1 = 0, hit5 = 0, hit10 = 0;
  for (std::size_t q = 0; q < n_query; ++q) {
    check(!ground_truth[q].empty(), Error::Kind::empty_candidates,
          "retrieval_eval: query without ground truth");
    std::vector<double> scores(n_gallery);
    for (std::size_t g = 0; g < n_gallery; ++g) {
      const EncodedFeatures& img = i2t ? imgs[q] : imgs[g];
      const EncodedFeatures& txt = i2t ? txts[g] : txts[q];
      double s = 0.0;
      switch (rank_score) {
        case RankScore::directional:
          s = i2t ? image_to_text_sim(img, txt, include_special).score
                  : text_to_image_sim(img, txt, include_special).score;
          break;
        case RankScore::mean:
          s = 0.5 * (image_to_text_sim(img, txt, include_special).score +
                     text_to_image_sim(img, txt, include_special).score);
          break;
      }
      scores[g] = s;
    }
    std::vector<int> order(n_gallery);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
      return a < b;
    });
    int best_rank = static_cast<int>(n_gallery);
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      if (std::find(ground_truth[q].begin(), ground_truth[q].end(), order[pos]) !=
          ground_truth[q].end()) {
        best_rank = static_cast<int>(pos) + 1;
        break;
      }
    }
    report.ranks.push_back(best_rank);
    hit1 += best_rank <= 1;
    hit5 += best_rank <= 5;
    hit10 += best_rank <= 10;
  }
  report.r_at_1 = static_cast<double>(hit1) / static_cast<double>(n_query);
  report.r_at_5 = static_cast<double>(hit5) / static_cast<double>(n_query);
  report.r_at_10 = static_cast<double>(hit10) / static_cast<double>(n_query);
  return report;
}

// ---------------------------------------------------------------------------
// Word-patch alignment: for each image patch the argmax text token, marked
// correct when it falls inside the label span.
// ---------------------------------------------------------------------------

struct AlignmentMap {
  std::vector<int> predicted;  // per patch, original text-token index
  std::vector<int> label_span;
  std::vector<std::uint8_t> correct;  // per patch
  int grid = 0;
  int text_valid_len = 0;
};

inline AlignmentMap alignment_export(const EncodedFeatures& img,
                                     const EncodedFeatures& txt,
                                     const std::vector<int>& label_span,
                                     bool include_special = false) {
  PairScore score = image_to_text_sim(img, txt, include_special);
  AlignmentMap map;
  // Keep only patch entries (drop leading specials when they participate).
  const std::vector<int> rows = img.candidate_rows(include_special);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < img.lead_special) continue;  // [CLS] row, not a patch
    map.predicted.push_back(score.alignment[k]);
  }
  map.label_span = label_span;
  map.text_valid_len = txt.valid_count();
  map.grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(map.predicted.size()))));
  for (int p : map.predicted) {
    const bool ok = std::find(label_span.begin(), label_span.end(), p) !=
                    label_span.end();
    map.correct.push_back(ok ? 1 : 0);
  }
  return map;
}

// Text rendering of the alignment grid. Correct predictions are wrapped in
// brackets (plain mode) or colored red (ansi mode), mirroring the
// "label indices in red" display convention.
inline std::string render_alignment_grid(const AlignmentMap& map,
                                         bool ansi = false) {
  std::ostringstream out;
  const int g = map.grid;
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      const std::size_t k = static_cast<std::size_t>(r * g + c);
      if (c > 0) out << ' ';
      const int idx = map.predicted[k];
      if (map.correct[k]) {
        if (ansi)
          out << "\x1b[31m" << idx << "\x1b[0m";
        else
          out << '[' << idx << ']';
      } else {
        out << ' ' << idx << ' ';
      }
    }
    out << '\n';
  }
  out << "label span:";
  for (int s : map.label_span) out << ' ' << s;
  out << '\n';
  return out.str();
}

// Overlay image: correctly aligned patches keep their pixels opaque, the
// rest are dimmed.
inline Tensor alignment_overlay(const Tensor& image, const AlignmentMap& map,
                                double dim_factor = 0.25) {
  check(image.rank() == 3, Error::Kind::dimension, "alignment_overlay: bad image");
  const int size = image.dim(0);
  const int g = map.grid;
  check(g > 0 && size % g == 0, Error::Kind::dimension,
        "alignment_overlay: patch grid does not divide the image");
  const int cell = size / g;
  Tensor out(image.shape());
  auto ov = out.mutable_values();
  auto iv = image.values();
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const std::size_t patch = static_cast<std::size_t>((y / cell) * g + x / cell);
      const double f = map.correct[patch] ? 1.0 : dim_factor;
      for (int ch = 0; ch < 3; ++ch)
        ov[(y * size + x) * 3 + ch] = iv[(y * size + x) * 3 + ch] * f;
    }
  return out;
}

// Fraction of object patches whose predicted token lies in the label span.
inline double alignment_hit_rate(
    const std::vector<AlignmentMap>& maps,
    const std::vector<std::vector<std::uint8_t>>& object_masks) {
  check(maps.size() == object_masks.size(), Error::Kind::dimension,
        "alignment_hit_rate: map/mask count mismatch");
  std::int64_t hits = 0, total = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    check(object_masks[i].size() == maps[i].predicted.size(),
          Error::Kind::dimension, "alignment_hit_rate: mask shape mismatch");
    for (std::size_t k = 0; k < object_masks[i].size(); ++k) {
      if (!object_masks[i][k]) continue;
      ++total;
      hits += maps[i].correct[k];
    }
  }
  check(total > 0, Error::Kind::empty_candidates,
        "alignment_hit_rate: no object patches");
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace filigrain
