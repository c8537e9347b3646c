#pragma once

#include <stdexcept>
#include <string>

namespace filigrain {

// Error taxonomy shared by every module. The kind survives the throw so
// callers (and tests) can dispatch without string matching.
class Error : public std::runtime_error {
 public:
  enum class Kind {
    dimension,        // shape / size mismatch
    rank,             // wrong tensor rank (e.g. non-scalar loss)
    empty_candidates, // reduction over an empty candidate set
    overflow,         // value outside the representable range
    vocabulary,       // token id outside the vocabulary
    not_found,        // lookup failed (label span, file record, ...)
    config,           // bad configuration or config file
    io,               // file read/write failure
    numeric,          // NaN/Inf where finite values are required
  };

  Error(Kind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline void check(bool ok, Error::Kind kind, const std::string& message) {
  if (!ok) throw Error(kind, message);
}

}  // namespace filigrain
