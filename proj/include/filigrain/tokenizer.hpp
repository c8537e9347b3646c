#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "filigrain/error.hpp"

namespace filigrain {

// Word-level tokenizer with [BOS]/[EOS]/[PAD]/[UNK] specials. Text is
// lowercased and punctuation is split into standalone tokens, so
// "a photo of a balloon." becomes 8 tokens once [BOS]/[EOS] are added.

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;
constexpr int kNumReservedTokens = 4;

inline std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
      if (!std::isspace(c)) out.push_back(std::string(1, ch));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (const char* t : {"[PAD]", "[BOS]", "[EOS]", "[UNK]"}) add(t);
  }

  // Tokens with count < min_count are dropped (they encode as [UNK]).
  // Ids are assigned by (count desc, token asc) after the reserved block,
  // which makes the vocabulary a pure function of the corpus.
  static Vocabulary build(const std::vector<std::string>& corpus, int min_count) {
    check(!corpus.empty(), Error::Kind::config, "build_vocab: empty corpus");
    std::map<std::string, std::int64_t> counts;
    for (const std::string& text : corpus)
      for (const std::string& tok : tokenize_words(text)) ++counts[tok];
    std::vector<std::pair<std::string, std::int64_t>> kept;
    for (const auto& [tok, cnt] : counts)
      if (cnt >= min_count) kept.emplace_back(tok, cnt);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, cnt] : kept) v.add(tok);
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  int id_of(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }

  const std::string& token_of(int id) const {
    check(id >= 0 && id < size(), Error::Kind::vocabulary,
          "token_of: id outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  // Line-oriented "token<TAB>id" serialization.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), Error::Kind::io, "vocab save: cannot open " + path);
    for (int i = 0; i < size(); ++i)
      out << tokens_[static_cast<std::size_t>(i)] << '\t' << i << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), Error::Kind::io, "vocab load: cannot open " + path);
    Vocabulary v;
    v.tokens_.clear();
    v.ids_.clear();
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::size_t tab = line.find('\t');
      check(tab != std::string::npos, Error::Kind::io,
            "vocab load: malformed line");
      const std::string tok = line.substr(0, tab);
      const int id = std::stoi(line.substr(tab + 1));
      check(id == static_cast<int>(v.tokens_.size()), Error::Kind::io,
            "vocab load: ids must be dense and ascending");
      v.tokens_.push_back(tok);
      v.ids_[tok] = id;
    }
    check(v.size() >= kNumReservedTokens, Error::Kind::io,
          "vocab load: missing reserved tokens");
    return v;
  }

 private:
  void add(const std::string& token) {
    ids_[token] = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct TokenSequence {
  std::vector<int> ids;  // length max_len; [BOS] ... [EOS] [PAD]*
  int valid_len = 0;     // count of non-[PAD] positions

  std::vector<std::uint8_t> valid_mask() const {
    std::vector<std::uint8_t> m(ids.size(), 0);
    for (int i = 0; i < valid_len; ++i) m[static_cast<std::size_t>(i)] = 1;
    return m;
  }
};

struct EncodeStats {
  std::int64_t truncated = 0;
};

inline TokenSequence encode(const std::string& text, const Vocabulary& vocab,
                            int max_len, EncodeStats* stats = nullptr) {
  check(max_len >= 3, Error::Kind::config, "encode: max_len must be >= 3");
  std::vector<std::string> words = tokenize_words(text);
  const int budget = max_len - 2;  // room for [BOS]/[EOS]
  if (static_cast<int>(words.size()) > budget) {
    words.resize(static_cast<std::size_t>(budget));
    if (stats) ++stats->truncated;
  }
  TokenSequence seq;
  seq.ids.assign(static_cast<std::size_t>(max_len), kPadId);
  seq.ids[0] = kBosId;
  int pos = 1;
  for (const std::string& w : words) seq.ids[static_cast<std::size_t>(pos++)] = vocab.id_of(w);
  seq.ids[static_cast<std::size_t>(pos++)] = kEosId;
  seq.valid_len = pos;
  return seq;
}

// Content tokens (specials stripped); inverse of encode on in-vocab text.
inline std::vector<std::string> decode(const TokenSequence& seq,
                                       const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (int i = 1; i + 1 < seq.valid_len; ++i)
    out.push_back(vocab.token_of(seq.ids[static_cast<std::size_t>(i)]));
  return out;
}

// Indices of the label's tokens inside the tokenized text, counting [BOS]
// as position 0 (so the first content word sits at index 1). Multi-token
// labels map to the full span of their first occurrence.
inline std::vector<int> token_spans(const std::string& text,
                                    const std::string& label) {
  const std::vector<std::string> words = tokenize_words(text);
  const std::vector<std::string> span = tokenize_words(label);
  check(!span.empty(), Error::Kind::not_found, "token_spans: empty label");
  if (span.size() <= words.size()) {
    for (std::size_t start = 0; start + span.size() <= words.size(); ++start) {
      bool match = true;
      for (std::size_t k = 0; k < span.size(); ++k)
        if (words[start + k] != span[k]) {
          match = false;
          break;
        }
      if (match) {
        std::vector<int> idx;
        for (std::size_t k = 0; k < span.size(); ++k)
          idx.push_back(static_cast<int>(start + k) + 1);  // +1 for [BOS]
        return idx;
      }
    }
  }
  throw Error(Error::Kind::not_found, "token_spans: label not found in text");
}

}  // namespace filigrain
