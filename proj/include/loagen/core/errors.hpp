#pragma once

#include <stdexcept>
#include <string>

namespace loagen {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IngestionError : Error { using Error::Error; };      // unreadable input file
struct EmptyInputError : Error { using Error::Error; };     // zero-length audio
struct InputError : Error { using Error::Error; };          // bad caller-supplied value
struct ShapeError : Error { using Error::Error; };          // dimension mismatch
struct LengthError : Error { using Error::Error; };         // duration precondition
struct ConfigError : Error { using Error::Error; };         // invalid configuration
struct IndexError : Error { using Error::Error; };          // step/index out of range
struct StateError : Error { using Error::Error; };          // called before training/setup
struct DependencyError : Error { using Error::Error; };     // missing upstream checkpoint
struct VocabularyError : Error { using Error::Error; };     // unknown symbol
struct PairingError : Error { using Error::Error; };        // unpaired evaluation ids
struct DegenerateCorpusError : Error { using Error::Error; };

}  // namespace loagen
