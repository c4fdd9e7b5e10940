#pragma once

#include <stdexcept>
#include <string>

namespace csavae {

// Input outside an operation's mathematical domain (non-positive temperature,
// negative adjacency, non-binary mask, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed or unusable input data: unreadable files, too many malformed
// lines, empty corpora after filtering, missing manifests.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A user or item id that the loaded vocabulary does not contain.
class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint bytes that cannot be decoded by this build.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace csavae
