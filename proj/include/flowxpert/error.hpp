#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace flowxpert {

// Base for every data-level failure. name() is the stable identifier printed
// by the CLI on standard error (exit code 2).
class Error : public std::runtime_error {
 public:
  Error(std::string name, const std::string& what)
      : std::runtime_error(what), name_(std::move(name)) {}

  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

// Bad invocation or configuration (CLI exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FLOWXPERT_DEFINE_ERROR(Type)                                  \
  class Type : public Error {                                         \
   public:                                                            \
    explicit Type(const std::string& what) : Error(#Type, what) {}    \
  }

// pcap_ingest
FLOWXPERT_DEFINE_ERROR(UnknownMagic);
FLOWXPERT_DEFINE_ERROR(UnsupportedLinkType);
FLOWXPERT_DEFINE_ERROR(TruncatedHeader);
FLOWXPERT_DEFINE_ERROR(IoError);

// preprocess
FLOWXPERT_DEFINE_ERROR(EmptyTrainingSet);
FLOWXPERT_DEFINE_ERROR(MalformedRule);
FLOWXPERT_DEFINE_ERROR(TooFewRecords);
FLOWXPERT_DEFINE_ERROR(MalformedFlowCsv);

// cluster
FLOWXPERT_DEFINE_ERROR(NoisePairRejected);

// neural
FLOWXPERT_DEFINE_ERROR(BatchTooSmallForTrainMode);
FLOWXPERT_DEFINE_ERROR(ShapeMismatch);

// trainer
FLOWXPERT_DEFINE_ERROR(InsufficientClusters);
FLOWXPERT_DEFINE_ERROR(SingleClassDataset);
FLOWXPERT_DEFINE_ERROR(CorruptModelFile);

// evaluate
FLOWXPERT_DEFINE_ERROR(LengthMismatch);

#undef FLOWXPERT_DEFINE_ERROR

// A record header claimed more bytes than the file holds. The stream is
// aborted; packets_read counts records decoded before the failure.
class TruncatedRecord : public Error {
 public:
  TruncatedRecord(const std::string& what, std::size_t packets_read)
      : Error("TruncatedRecord", what), packets_read_(packets_read) {}

  std::size_t packets_read() const noexcept { return packets_read_; }

 private:
  std::size_t packets_read_;
};

}  // namespace flowxpert
