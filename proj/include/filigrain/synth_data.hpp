#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "filigrain/checkpoint.hpp"
#include "filigrain/error.hpp"
#include "filigrain/rng.hpp"
#include "filigrain/tensor.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Deterministic synthetic scenes: colored shapes on a cell grid aligned with
// the encoder's patch grid, captions that name every object, and ground-truth
// per-patch object masks for alignment evaluation.
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& scene_colors() {
  static const std::vector<std::string> c = {"red", "green", "blue", "yellow"};
  return c;
}
inline const std::vector<std::string>& scene_shapes() {
  static const std::vector<std::string> s = {"square", "circle", "triangle",
                                             "cross"};
  return s;
}

struct SceneObject {
  std::string color;
  std::string shape;
  int cell_row = 0;
  int cell_col = 0;
};

struct SyntheticScene {
  std::vector<SceneObject> objects;
  Tensor image;  // H x W x 3 in [0, 1]
  // Per object: boolean mask over the cell grid (row-major), marking exactly
  // the patches the object overlaps.
  std::vector<std::vector<std::uint8_t>> object_masks;
  int grid = 4;
};

struct CaptionSet {
  std::array<std::string, 3> captions;  // canonical + two paraphrases
};

struct SynthConfig {
  int image_size = 32;
  int cell_size = 8;
  int objects_min = 1;
  int objects_max = 3;
  double background = 0.1;
  // (color, shape) combinations withheld from the train split.
  std::vector<std::pair<std::string, std::string>> holdout;
  // Train scenes avoid held-out combos entirely; test scenes contain at
  // least one object with a held-out combo.
  bool test_split = false;

  int grid() const { return image_size / cell_size; }

  void validate() const {
    check(image_size > 0 && cell_size > 0 && image_size % cell_size == 0,
          Error::Kind::config, "synth config: grid must divide the image");
    check(objects_min >= 1 && objects_max >= objects_min &&
              objects_max <= grid() * grid(),
          Error::Kind::config, "synth config: bad object count range");
    const std::size_t combos = scene_colors().size() * scene_shapes().size();
    check(holdout.size() < combos, Error::Kind::config,
          "synth config: holdout covers every combination");
    if (test_split)
      check(!holdout.empty(), Error::Kind::config,
            "synth config: test split needs a non-empty holdout");
  }
};

namespace detail {

inline bool in_holdout(const SynthConfig& cfg, const std::string& color,
                       const std::string& shape) {
  for (const auto& [c, s] : cfg.holdout)
    if (c == color && s == shape) return true;
  return false;
}

inline std::array<double, 3> color_rgb(const std::string& color) {
  if (color == "red") return {1.0, 0.0, 0.0};
  if (color == "green") return {0.0, 1.0, 0.0};
  if (color == "blue") return {0.0, 0.0, 1.0};
  if (color == "yellow") return {1.0, 1.0, 0.0};
  throw Error(Error::Kind::config, "unknown color " + color);
}

inline bool shape_covers(const std::string& shape, int y, int x, int c) {
  const double mid = (c - 1) / 2.0;
  if (shape == "square") return y >= 1 && y <= c - 2 && x >= 1 && x <= c - 2;
  if (shape == "circle") {
    const double r = c / 2.0 - 1.0;
    const double dy = y - mid, dx = x - mid;
    return dy * dy + dx * dx <= r * r;
  }
  if (shape == "triangle") {
    if (y < 1 || y > c - 2) return false;
    const double t = static_cast<double>(y - 1) / (c - 3);
    const double halfw = t * (c / 2.0 - 1.5);
    return std::abs(x - mid) <= halfw + 0.5;
  }
  if (shape == "cross") {
    const bool horiz = (y == c / 2 - 1 || y == c / 2) && x >= 1 && x <= c - 2;
    const bool vert = (x == c / 2 - 1 || x == c / 2) && y >= 1 && y <= c - 2;
    return horiz || vert;
  }
  throw Error(Error::Kind::config, "unknown shape " + shape);
}

inline void render_scene(SyntheticScene& scene, const SynthConfig& cfg) {
  const int size = cfg.image_size, cell = cfg.cell_size, grid = cfg.grid();
  scene.grid = grid;
  scene.image = Tensor({size, size, 3}, cfg.background);
  auto iv = scene.image.mutable_values();
  scene.object_masks.clear();
  for (const SceneObject& obj : scene.objects) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(grid * grid), 0);
    mask[static_cast<std::size_t>(obj.cell_row * grid + obj.cell_col)] = 1;
    scene.object_masks.push_back(std::move(mask));
    const auto rgb = color_rgb(obj.color);
    for (int y = 0; y < cell; ++y)
      for (int x = 0; x < cell; ++x) {
        if (!shape_covers(obj.shape, y, x, cell)) continue;
        const int py = obj.cell_row * cell + y;
        const int px = obj.cell_col * cell + x;
        for (int ch = 0; ch < 3; ++ch)
          iv[(py * size + px) * 3 + ch] = rgb[static_cast<std::size_t>(ch)];
      }
  }
}

}  // namespace detail

// Canonical caption plus two rule-based paraphrases. Every caption names
// each object's color and shape; paraphrases only move function words.
// The canonical form is deliberately terse (content words only), the
// paraphrases are wordier; crowded scenes drop trailing framing so
// three-object captions still fit a 16-token context.
inline CaptionSet make_captions(const SyntheticScene& scene) {
  std::string list_a, list_bare;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& o = scene.objects[i];
    if (i > 0) {
      list_a += " and ";
      list_bare += " and ";
    }
    list_a += "a " + o.color + " " + o.shape;
    list_bare += o.color + " " + o.shape;
  }
  const bool roomy = scene.objects.size() <= 2;
  CaptionSet set;
  set.captions[0] = list_bare;
  set.captions[1] = roomy ? "there is " + list_a + " in the picture."
                          : "there is " + list_a + ".";
  set.captions[2] = roomy ? "a photo of " + list_a + "." : list_a + ".";
  return set;
}

inline SyntheticScene generate_scene(Rng& rng, const SynthConfig& cfg) {
  cfg.validate();
  const int grid = cfg.grid();
  SyntheticScene scene;
  const int count = rng.uniform_int(cfg.objects_min, cfg.objects_max);

  // Distinct cells via a partial Fisher-Yates pass.
  std::vector<int> cells(static_cast<std::size_t>(grid * grid));
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
  for (int i = 0; i < count; ++i) {
    const std::size_t j =
        static_cast<std::size_t>(i) + rng.uniform_index(cells.size() - static_cast<std::size_t>(i));
    std::swap(cells[static_cast<std::size_t>(i)], cells[j]);
  }

  const int forced = cfg.test_split
                         ? static_cast<int>(rng.uniform_index(
                               static_cast<std::uint64_t>(count)))
                         : -1;
  for (int i = 0; i < count; ++i) {
    SceneObject obj;
    obj.cell_row = cells[static_cast<std::size_t>(i)] / grid;
    obj.cell_col = cells[static_cast<std::size_t>(i)] % grid;
    if (i == forced) {
      const auto& pick = cfg.holdout[rng.uniform_index(cfg.holdout.size())];
      obj.color = pick.first;
      obj.shape = pick.second;
    } else {
      // Color first (keeps color marginals uniform), then a shape allowed
      // for that color on this split.
      obj.color = scene_colors()[rng.uniform_index(scene_colors().size())];
      std::vector<std::string> allowed;
      for (const std::string& s : scene_shapes())
        if (cfg.test_split || !detail::in_holdout(cfg, obj.color, s))
          allowed.push_back(s);
      check(!allowed.empty(), Error::Kind::config,
            "generate_scene: holdout leaves no shape for color " + obj.color);
      obj.shape = allowed[rng.uniform_index(allowed.size())];
    }
    scene.objects.push_back(std::move(obj));
  }
  detail::render_scene(scene, cfg);
  return scene;
}

inline std::vector<std::pair<SyntheticScene, CaptionSet>> generate_dataset(
    std::uint64_t seed, int size, const SynthConfig& cfg) {
  check(size > 0, Error::Kind::config, "generate_dataset: size must be positive");
  cfg.validate();
  std::vector<std::pair<SyntheticScene, CaptionSet>> out;
  out.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    SyntheticScene scene = generate_scene(rng, cfg);
    CaptionSet captions = make_captions(scene);
    out.emplace_back(std::move(scene), std::move(captions));
  }
  return out;
}

// Label-preserving augmentation: one op drawn from {identity, horizontal
// flip, 90-degree rotation, brightness jitter, whole-cell translation}.
// Object masks and cell positions transform with the image.
inline SyntheticScene augment_image(const SyntheticScene& scene,
                                    std::uint64_t seed) {
  Rng rng(seed);
  const int op = static_cast<int>(rng.uniform_index(5));
  const int size = scene.image.dim(0);
  const int grid = scene.grid;
  const int cell = size / grid;
  SyntheticScene out = scene;
  auto remap_masks = [&](auto cell_map) {
    for (std::size_t o = 0; o < out.objects.size(); ++o) {
      auto [nr, nc] = cell_map(out.objects[o].cell_row, out.objects[o].cell_col);
      out.objects[o].cell_row = nr;
      out.objects[o].cell_col = nc;
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(grid * grid), 0);
      mask[static_cast<std::size_t>(nr * grid + nc)] = 1;
      out.object_masks[o] = std::move(mask);
    }
  };

  switch (op) {
    case 0:  // identity
      break;
    case 1: {  // horizontal flip
      Tensor img({size, size, 3});
      auto ov = img.mutable_values();
      auto iv = scene.image.values();
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          for (int ch = 0; ch < 3; ++ch)
            ov[(y * size + x) * 3 + ch] = iv[(y * size + (size - 1 - x)) * 3 + ch];
      out.image = img;
      remap_masks([&](int r, int c) { return std::pair<int, int>{r, grid - 1 - c}; });
      break;
    }
    case 2: {  // 90-degree counterclockwise rotation
      Tensor img({size, size, 3});
      auto ov = img.mutable_values();
      auto iv = scene.image.values();
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          for (int ch = 0; ch < 3; ++ch)
            ov[(y * size + x) * 3 + ch] = iv[(x * size + (size - 1 - y)) * 3 + ch];
      out.image = img;
      remap_masks([&](int r, int c) { return std::pair<int, int>{grid - 1 - c, r}; });
      break;
    }
    case 3: {  // brightness jitter, clamped to [0, 1]
      const double delta = rng.uniform(-0.2, 0.2);
      Tensor img(scene.image.shape());
      auto ov = img.mutable_values();
      auto iv = scene.image.values();
      for (int i = 0; i < scene.image.size(); ++i)
        ov[i] = std::min(1.0, std::max(0.0, iv[i] + delta));
      out.image = img;
      break;
    }
    case 4: {  // translation by up to one cell, objects stay inside
      int rmin = grid, rmax = -1, cmin = grid, cmax = -1;
      for (const SceneObject& o : scene.objects) {
        rmin = std::min(rmin, o.cell_row);
        rmax = std::max(rmax, o.cell_row);
        cmin = std::min(cmin, o.cell_col);
        cmax = std::max(cmax, o.cell_col);
      }
      std::vector<std::pair<int, int>> offsets;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (rmin + dy >= 0 && rmax + dy < grid && cmin + dx >= 0 &&
              cmax + dx < grid)
            offsets.emplace_back(dy, dx);
      const auto [dy, dx] = offsets[rng.uniform_index(offsets.size())];
      Tensor img({size, size, 3});
      auto ov = img.mutable_values();
      auto iv = scene.image.values();
      const int py = dy * cell, px = dx * cell;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const int sy = y - py, sx = x - px;
          for (int ch = 0; ch < 3; ++ch)
            ov[(y * size + x) * 3 + ch] =
                (sy >= 0 && sy < size && sx >= 0 && sx < size)
                    ? iv[(sy * size + sx) * 3 + ch]
                    : 0.1;
          }
      out.image = img;
      remap_masks([&, dy = dy, dx = dx](int r, int c) {
        return std::pair<int, int>{r + dy, c + dx};
      });
      break;
    }
    default:
      break;
  }
  return out;
}

// Uniform draw among the three candidate captions, deterministic under seed.
inline const std::string& sample_caption(const CaptionSet& set,
                                         std::uint64_t seed) {
  Rng rng(seed);
  return set.captions[rng.uniform_index(3)];
}

// ---------------------------------------------------------------------------
// On-disk dataset: manifest text file (one record per line: image record
// name, three captions, object annotations, all tab-separated) plus the raw
// image tensors in the binary tensor-file format.
// ---------------------------------------------------------------------------

struct DatasetRecord {
  std::string image_name;
  CaptionSet captions;
  std::vector<SceneObject> objects;
  std::vector<std::vector<std::uint8_t>> object_masks;
  int grid = 4;
  Tensor image;
};

inline std::string format_annotations(const SyntheticScene& scene) {
  std::string out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (i > 0) out += ";";
    const SceneObject& o = scene.objects[i];
    out += o.color + "," + o.shape + "," + std::to_string(o.cell_row) + "," +
           std::to_string(o.cell_col);
  }
  return out;
}

inline void write_dataset(const std::string& manifest_path,
                          const std::string& images_path,
                          const std::vector<std::pair<SyntheticScene, CaptionSet>>& data) {
  std::ofstream manifest(manifest_path, std::ios::binary);
  check(manifest.good(), Error::Kind::io,
        "write_dataset: cannot open " + manifest_path);
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%06zu", i);
    const auto& [scene, captions] = data[i];
    manifest << name << '\t' << captions.captions[0] << '\t'
             << captions.captions[1] << '\t' << captions.captions[2] << '\t'
             << format_annotations(scene) << '\n';
    tensors.emplace_back(name, scene.image);
  }
  check(manifest.good(), Error::Kind::io, "write_dataset: manifest write failed");
  manifest.close();
  write_tensor_file(images_path, "grid=" + std::to_string(data.empty() ? 4 : data[0].first.grid),
                    tensors);
}

inline std::vector<DatasetRecord> load_dataset(const std::string& manifest_path,
                                               const std::string& images_path) {
  std::ifstream manifest(manifest_path, std::ios::binary);
  check(manifest.good(), Error::Kind::io,
        "load_dataset: cannot open " + manifest_path);
  TensorFile images = read_tensor_file(images_path);
  int grid = 4;
  if (images.config.rfind("grid=", 0) == 0)
    grid = std::stoi(images.config.substr(5));

  std::vector<DatasetRecord> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    check(cols.size() == 5, Error::Kind::io, "load_dataset: malformed manifest line");
    DatasetRecord rec;
    rec.image_name = cols[0];
    rec.captions.captions = {cols[1], cols[2], cols[3]};
    rec.grid = grid;
    if (!cols[4].empty()) {
      std::stringstream objs(cols[4]);
      std::string obj;
      while (std::getline(objs, obj, ';')) {
        std::stringstream fields(obj);
        std::string color, shape, row, col;
        std::getline(fields, color, ',');
        std::getline(fields, shape, ',');
        std::getline(fields, row, ',');
        std::getline(fields, col, ',');
        SceneObject o{color, shape, std::stoi(row), std::stoi(col)};
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(grid * grid), 0);
        mask[static_cast<std::size_t>(o.cell_row * grid + o.cell_col)] = 1;
        rec.objects.push_back(std::move(o));
        rec.object_masks.push_back(std::move(mask));
      }
    }
    rec.image = images.at(rec.image_name);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace filigrain
