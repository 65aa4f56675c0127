#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedenergy {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(std::size_t epoch, std::size_t batch);

  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class ContiguityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Wire format errors. FormatError covers bad magic/version/field values.
class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class AggregationError : public Error {
 public:
  using Error::Error;
};

class ConnectionError : public Error {
 public:
  ConnectionError(const std::string& what, int retries);
  int retries() const { return retries_; }

 private:
  int retries_;
};

class TimeoutError : public Error {
 public:
  using Error::Error;
};

class StaleModelError : public Error {
 public:
  using Error::Error;
};

class RoundAbortedError : public Error {
 public:
  RoundAbortedError(unsigned round, std::vector<std::string> absentees);

  unsigned round() const { return round_; }
  const std::vector<std::string>& absentees() const { return absentees_; }

 private:
  unsigned round_;
  std::vector<std::string> absentees_;
};

}  // namespace fedenergy
