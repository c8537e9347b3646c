#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "filigrain/error.hpp"
#include "filigrain/rng.hpp"
#include "filigrain/tensor.hpp"
#include "filigrain/tokenizer.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Dual-stream encoders: a ViT-style image tower and a causal text tower,
// both projecting token states into a shared d-dimensional space with
// L2-normalized rows.
// ---------------------------------------------------------------------------

struct ImageEncoderConfig {
  int image_size = 32;  // square, pixels
  int patch_size = 8;
  int layers = 2;
  int width = 64;
  int heads = 4;
  int embed_dim = 32;
  double dropout_rate = 0.0;

  int grid() const { return image_size / patch_size; }
  int patches() const { return grid() * grid(); }
  int tokens() const { return patches() + 1; }  // + [CLS]

  void validate() const {
    check(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
          Error::Kind::dimension,
          "image config: image_size must be divisible by patch_size");
    check(width % heads == 0, Error::Kind::dimension,
          "image config: width must be divisible by heads");
  }
};

struct TextEncoderConfig {
  int max_len = 16;
  int vocab_size = 0;
  int layers = 2;
  int width = 64;
  int heads = 4;
  int embed_dim = 32;
  double dropout_rate = 0.0;

  void validate() const {
    check(width % heads == 0, Error::Kind::dimension,
          "text config: width must be divisible by heads");
    check(max_len >= 3, Error::Kind::dimension, "text config: max_len >= 3");
    check(vocab_size > kNumReservedTokens, Error::Kind::dimension,
          "text config: vocabulary too small");
  }
};

enum class Modality { image, text };

// Per-sample token features in the shared space. `valid` marks non-padded
// rows (always a prefix). lead/trail count the special rows ([CLS] for
// images, [BOS]/[EOS] for text) inside the valid range; late interaction
// consults them when special tokens are excluded from candidacy.
struct EncodedFeatures {
  Tensor tokens;  // n x d, valid rows unit-norm
  std::vector<std::uint8_t> valid;
  Modality modality = Modality::image;
  int lead_special = 0;
  int trail_special = 0;

  int rows() const { return tokens.rows(); }

  int valid_count() const {
    int c = 0;
    for (std::uint8_t b : valid) c += (b != 0);
    return c;
  }

  // Rows eligible for token-wise similarity.
  std::vector<int> candidate_rows(bool include_special) const {
    const int v = valid_count();
    const int lo = include_special ? 0 : lead_special;
    const int hi = include_special ? v : v - trail_special;
    std::vector<int> rows;
    for (int i = lo; i < hi; ++i) rows.push_back(i);
    return rows;
  }

  // Row carrying the sample-global feature: [CLS] for images, [EOS] for text.
  int global_row() const {
    return modality == Modality::image ? 0 : valid_count() - 1;
  }
};

// ---------------------------------------------------------------------------
// Parameter store: named tensors in a fixed creation order, so that
// initialization, checkpointing and optimizer traversal are all deterministic.
// ---------------------------------------------------------------------------
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    check(!index_.count(name), Error::Kind::config,
          "param store: duplicate name " + name);
    t.set_requires_grad(true);
    index_[name] = static_cast<int>(items_.size());
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    check(it != index_.end(), Error::Kind::not_found,
          "param store: unknown name " + name);
    return items_[static_cast<std::size_t>(it->second)].second;
  }

  const Tensor& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  std::size_t size() const { return items_.size(); }
  const std::pair<std::string, Tensor>& item(std::size_t i) const {
    return items_[i];
  }
  std::pair<std::string, Tensor>& item(std::size_t i) { return items_[i]; }

  void zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

  std::int64_t value_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, int> index_;
};

namespace detail {

inline Tensor trunc_normal(std::vector<int> shape, Rng& rng, double std_dev) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_values()) v = rng.truncated_normal(std_dev);
  return t;
}

inline void add_block_params(ParamStore& params, const std::string& prefix,
                             int width, Rng& rng) {
  const double std_dev = 0.02;
  params.add(prefix + ".ln1.g", Tensor({width}, 1.0));
  params.add(prefix + ".ln1.b", Tensor({width}, 0.0));
  params.add(prefix + ".attn.qkv.w", trunc_normal({width, 3 * width}, rng, std_dev));
  params.add(prefix + ".attn.qkv.b", Tensor({3 * width}, 0.0));
  params.add(prefix + ".attn.out.w", trunc_normal({width, width}, rng, std_dev));
  params.add(prefix + ".attn.out.b", Tensor({width}, 0.0));
  params.add(prefix + ".ln2.g", Tensor({width}, 1.0));
  params.add(prefix + ".ln2.b", Tensor({width}, 0.0));
  params.add(prefix + ".mlp.fc1.w", trunc_normal({width, 4 * width}, rng, std_dev));
  params.add(prefix + ".mlp.fc1.b", Tensor({4 * width}, 0.0));
  params.add(prefix + ".mlp.fc2.w", trunc_normal({4 * width, width}, rng, std_dev));
  params.add(prefix + ".mlp.fc2.b", Tensor({width}, 0.0));
}

// Shared transformer stack. `mask` is an additive attention bias (0 allowed,
// -1e9 blocked) or an undefined tensor for full bidirectional attention.
inline Tensor transformer_stack(Tape& tape, Tensor x, const ParamStore& params,
                                const std::string& prefix, int layers, int width,
                                int heads, const Tensor& mask, double dropout_rate,
                                std::uint64_t dropout_seed) {
  const int head_dim = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Rng drop_rng(dropout_seed);
  auto maybe_dropout = [&](Tensor t) {
    if (dropout_rate <= 0.0) return t;
    Tensor keep(t.shape());
    auto kv = keep.mutable_values();
    const double inv_keep = 1.0 / (1.0 - dropout_rate);
    for (int i = 0; i < t.size(); ++i)
      kv[i] = drop_rng.uniform() < dropout_rate ? 0.0 : inv_keep;
    return tape.mul(t, keep);
  };

  for (int layer = 0; layer < layers; ++layer) {
    const std::string p = prefix + ".block" + std::to_string(layer);
    Tensor y = tape.layer_norm_rows(x, params.at(p + ".ln1.g"), params.at(p + ".ln1.b"));
    Tensor qkv = tape.add_row(tape.matmul(y, params.at(p + ".attn.qkv.w")),
                              params.at(p + ".attn.qkv.b"));
    std::vector<Tensor> heads_out;
    heads_out.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Tensor q = tape.slice_cols(qkv, h * head_dim, head_dim);
      Tensor k = tape.slice_cols(qkv, width + h * head_dim, head_dim);
      Tensor v = tape.slice_cols(qkv, 2 * width + h * head_dim, head_dim);
      Tensor scores = tape.scale(tape.matmul(q, tape.transpose(k)), scale);
      if (mask.defined()) scores = tape.add(scores, mask);
      heads_out.push_back(tape.matmul(tape.softmax_rows(scores), v));
    }
    Tensor attn = tape.add_row(
        tape.matmul(tape.concat_cols(heads_out), params.at(p + ".attn.out.w")),
        params.at(p + ".attn.out.b"));
    x = tape.add(x, maybe_dropout(attn));
    Tensor z = tape.layer_norm_rows(x, params.at(p + ".ln2.g"), params.at(p + ".ln2.b"));
    Tensor hmid = tape.gelu(tape.add_row(tape.matmul(z, params.at(p + ".mlp.fc1.w")),
                                         params.at(p + ".mlp.fc1.b")));
    Tensor mlp = tape.add_row(tape.matmul(hmid, params.at(p + ".mlp.fc2.w")),
                              params.at(p + ".mlp.fc2.b"));
    x = tape.add(x, maybe_dropout(mlp));
  }
  return x;
}

}  // namespace detail

// Non-overlapping patches in row-major order, each flattened (py, px, c).
// Value-level: images are inputs and carry no gradient.
inline Tensor patchify(const Tensor& image, int patch_size) {
  check(image.rank() == 3, Error::Kind::rank, "patchify: H x W x C image required");
  const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
  check(patch_size > 0 && h % patch_size == 0 && w % patch_size == 0,
        Error::Kind::dimension,
        "patchify: image dimensions must be divisible by patch_size");
  const int gh = h / patch_size, gw = w / patch_size;
  const int flat = patch_size * patch_size * c;
  Tensor out({gh * gw, flat});
  auto ov = out.mutable_values();
  auto iv = image.values();
  int row = 0;
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px, ++row) {
      double* dst = ov.data() + static_cast<std::size_t>(row) * flat;
      for (int dy = 0; dy < patch_size; ++dy)
        for (int dx = 0; dx < patch_size; ++dx)
          for (int ch = 0; ch < c; ++ch)
            *dst++ = iv[((py * patch_size + dy) * w + (px * patch_size + dx)) * c + ch];
    }
  }
  return out;
}

inline void init_image_params(ParamStore& params, const ImageEncoderConfig& cfg,
                              Rng& rng) {
  cfg.validate();
  const double std_dev = 0.02;
  const int flat = cfg.patch_size * cfg.patch_size * 3;
  params.add("image.patch_proj.w", detail::trunc_normal({flat, cfg.width}, rng, std_dev));
  params.add("image.patch_proj.b", Tensor({cfg.width}, 0.0));
  params.add("image.cls_embed", detail::trunc_normal({1, cfg.width}, rng, std_dev));
  params.add("image.pos_embed",
             detail::trunc_normal({cfg.tokens(), cfg.width}, rng, std_dev));
  for (int l = 0; l < cfg.layers; ++l)
    detail::add_block_params(params, "image.block" + std::to_string(l), cfg.width, rng);
  params.add("image.ln_final.g", Tensor({cfg.width}, 1.0));
  params.add("image.ln_final.b", Tensor({cfg.width}, 0.0));
  params.add("image.proj.w",
             detail::trunc_normal({cfg.width, cfg.embed_dim}, rng, std_dev));
}

inline void init_text_params(ParamStore& params, const TextEncoderConfig& cfg,
                             Rng& rng) {
  cfg.validate();
  const double std_dev = 0.02;
  params.add("text.token_embed",
             detail::trunc_normal({cfg.vocab_size, cfg.width}, rng, std_dev));
  params.add("text.pos_embed",
             detail::trunc_normal({cfg.max_len, cfg.width}, rng, std_dev));
  for (int l = 0; l < cfg.layers; ++l)
    detail::add_block_params(params, "text.block" + std::to_string(l), cfg.width, rng);
  params.add("text.ln_final.g", Tensor({cfg.width}, 1.0));
  params.add("text.ln_final.b", Tensor({cfg.width}, 0.0));
  params.add("text.proj.w",
             detail::trunc_normal({cfg.width, cfg.embed_dim}, rng, std_dev));
}

inline EncodedFeatures encode_image(Tape& tape, const Tensor& image,
                                    const ImageEncoderConfig& cfg,
                                    const ParamStore& params,
                                    std::uint64_t dropout_seed = 0) {
  cfg.validate();
  check(image.rank() == 3 && image.dim(0) == cfg.image_size &&
            image.dim(1) == cfg.image_size && image.dim(2) == 3,
        Error::Kind::dimension, "encode_image: image shape mismatch");
  Tensor patches = patchify(image, cfg.patch_size);
  Tensor x = tape.add_row(tape.matmul(patches, params.at("image.patch_proj.w")),
                          params.at("image.patch_proj.b"));
  x = tape.concat_rows({params.at("image.cls_embed"), x});
  x = tape.add(x, params.at("image.pos_embed"));
  Tensor no_mask;  // fully bidirectional
  x = detail::transformer_stack(tape, x, params, "image", cfg.layers, cfg.width,
                                cfg.heads, no_mask, cfg.dropout_rate, dropout_seed);
  x = tape.layer_norm_rows(x, params.at("image.ln_final.g"),
                           params.at("image.ln_final.b"));
  Tensor feats = tape.l2_normalize_rows(tape.matmul(x, params.at("image.proj.w")));

  EncodedFeatures out;
  out.tokens = feats;
  out.valid.assign(static_cast<std::size_t>(cfg.tokens()), 1);
  out.modality = Modality::image;
  out.lead_special = 1;  // [CLS]
  out.trail_special = 0;
  return out;
}

// Accepts sequences up to cfg.max_len ids long (shorter buffers behave as if
// the pad tail were trimmed, which keeps padding a pure no-op downstream).
inline EncodedFeatures encode_text(Tape& tape, const TokenSequence& seq,
                                   const TextEncoderConfig& cfg,
                                   const ParamStore& params,
                                   std::uint64_t dropout_seed = 0) {
  cfg.validate();
  const int n = static_cast<int>(seq.ids.size());
  check(n >= 2 && n <= cfg.max_len, Error::Kind::dimension,
        "encode_text: sequence length must be in [2, max_len]");
  check(seq.valid_len >= 2 && seq.valid_len <= n, Error::Kind::dimension,
        "encode_text: invalid valid_len");
  for (int id : seq.ids)
    check(id >= 0 && id < cfg.vocab_size, Error::Kind::vocabulary,
          "encode_text: token id outside vocabulary");

  Tensor x = tape.embedding_lookup(params.at("text.token_embed"), seq.ids);
  std::vector<int> pos_rows(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pos_rows[static_cast<std::size_t>(i)] = i;
  x = tape.add(x, tape.take_rows(params.at("text.pos_embed"), pos_rows));

  // Causal mask that also blocks padded keys. Valid queries only ever see
  // earlier valid positions; pad queries fall back to the valid prefix.
  Tensor mask({n, n});
  auto mv = mask.mutable_values();
  for (int q = 0; q < n; ++q)
    for (int k = 0; k < n; ++k)
      mv[q * n + k] = (k <= q && k < seq.valid_len) ? 0.0 : -1e9;

  x = detail::transformer_stack(tape, x, params, "text", cfg.layers, cfg.width,
                                cfg.heads, mask, cfg.dropout_rate, dropout_seed);
  x = tape.layer_norm_rows(x, params.at("text.ln_final.g"),
                           params.at("text.ln_final.b"));
  Tensor feats = tape.l2_normalize_rows(tape.matmul(x, params.at("text.proj.w")));

  EncodedFeatures out;
  out.tokens = feats;
  out.valid.assign(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < seq.valid_len; ++i) out.valid[static_cast<std::size_t>(i)] = 1;
  out.modality = Modality::text;
  out.lead_special = 1;   // [BOS]
  out.trail_special = 1;  // [EOS]
  return out;
}

}  // namespace filigrain
