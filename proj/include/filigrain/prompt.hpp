#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "filigrain/error.hpp"
#include "filigrain/late_interaction.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Rule-based prompt templates "[prefix] {label}, [category description].
// [suffix]." and prompt ensembling by mean token-wise similarity.
// ---------------------------------------------------------------------------

struct PromptTemplate {
  std::string prefix;
  std::string category_description;  // empty = absent
  std::string suffix;                // empty = absent
};

struct PromptGrid {
  std::vector<std::string> prefixes;
  std::vector<std::string> descriptions;
  std::vector<std::string> suffixes;
};

namespace detail {

inline std::string trim_component(std::string s) {
  const auto wsfront = s.find_first_not_of(" \t\r\n");
  if (wsfront == std::string::npos) return "";
  const auto wsback = s.find_last_not_of(" \t\r\n");
  s = s.substr(wsfront, wsback - wsfront + 1);
  while (!s.empty() && s.back() == '.') s.pop_back();  // period is re-added
  return s;
}

}  // namespace detail

// Deterministic rendering; empty components collapse their separators, so
// the output never carries dangling ", ." artifacts.
inline std::string render(const PromptTemplate& t, const std::string& label) {
  const std::string lab = detail::trim_component(label);
  check(!lab.empty(), Error::Kind::config, "render: empty label");
  const std::string prefix = detail::trim_component(t.prefix);
  const std::string desc = detail::trim_component(t.category_description);
  const std::string suffix = detail::trim_component(t.suffix);
  std::string out = prefix.empty() ? lab : prefix + " " + lab;
  if (!desc.empty()) out += ", " + desc;
  out += ".";
  if (!suffix.empty()) out += " " + suffix + ".";
  return out;
}

// Cartesian product in prefix-major order. Duplicates are kept unless
// dedup is set (first occurrence wins).
inline std::vector<std::string> expand_grid(const PromptGrid& g,
                                            const std::string& label,
                                            bool dedup = false) {
  check(!g.prefixes.empty() && !g.descriptions.empty() && !g.suffixes.empty(),
        Error::Kind::config, "expand_grid: every component list must be non-empty");
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const std::string& p : g.prefixes)
    for (const std::string& d : g.descriptions)
      for (const std::string& s : g.suffixes) {
        std::string text = render(PromptTemplate{p, d, s}, label);
        if (dedup) {
          if (seen.count(text)) continue;
          seen.insert(text);
        }
        out.push_back(std::move(text));
      }
  return out;
}

// Grid file: sections [prefix] / [description] / [suffix], one entry per
// line, a blank line inside a section is the empty component.
inline PromptGrid parse_prompt_grid(std::istream& in) {
  PromptGrid grid;
  std::vector<std::string>* section = nullptr;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "[prefix]") {
      section = &grid.prefixes;
    } else if (line == "[description]") {
      section = &grid.descriptions;
    } else if (line == "[suffix]") {
      section = &grid.suffixes;
    } else {
      check(section != nullptr, Error::Kind::config,
            "prompt grid: entry before any section header");
      section->push_back(line);
    }
  }
  check(!grid.prefixes.empty() && !grid.descriptions.empty() &&
            !grid.suffixes.empty(),
        Error::Kind::config, "prompt grid: every section needs at least one entry");
  return grid;
}

inline PromptGrid load_prompt_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), Error::Kind::io, "prompt grid: cannot open " + path);
  return parse_prompt_grid(in);
}

// Mean of the image-to-text scores over the class's rendered templates.
// Scores are summed in ascending value order, which makes the result exactly
// invariant to template permutation.
inline double ensemble_similarity(const EncodedFeatures& img,
                                  const std::vector<EncodedFeatures>& class_texts,
                                  bool include_special = false) {
  check(!class_texts.empty(), Error::Kind::empty_candidates,
        "ensemble_similarity: no templates");
  std::vector<double> scores;
  scores.reserve(class_texts.size());
  for (const EncodedFeatures& t : class_texts)
    scores.push_back(image_to_text_sim(img, t, include_special).score);
  std::sort(scores.begin(), scores.end());
  double acc = 0.0;
  for (double s : scores) acc += s;
  return acc / static_cast<double>(scores.size());
}

}  // namespace filigrain
