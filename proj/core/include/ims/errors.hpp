#pragma once

#include <stdexcept>
#include <string>

namespace ims {

/// Shape rule violated by an operation's inputs.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument value (out-of-range scalar, bad bounds, empty input).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Gradient tape misuse: detached root, consumed tape, non-recorded tensor.
class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged or produced non-finite state.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite gradient reached the optimizer; message names the parameter.
class GradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure loading a serialized artifact (checkpoint, dataset cache, IDX file).
/// The kind distinguishes the failure classes callers may branch on.
class LoadError : public std::runtime_error {
 public:
  enum class Kind {
    io,              // file missing / unreadable
    bad_magic,       // IDX magic number mismatch
    version,         // unsupported format version or endianness tag
    manifest,        // malformed manifest document
    truncated,       // payload shorter than the manifest promises
    shape_mismatch,  // manifest/payload or manifest/spec shape disagreement
    count_mismatch,  // image/label record counts disagree
  };

  LoadError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Config file problem; message carries file, line, and field diagnostics.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ims
