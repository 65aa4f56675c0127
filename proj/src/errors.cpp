#include "fedenergy/errors.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace fedenergy {

TrainingDivergedError::TrainingDivergedError(std::size_t epoch, std::size_t batch)
    : Error(fmt::format("training diverged: non-finite loss at epoch {} batch {}", epoch, batch)),
      epoch_(epoch),
      batch_(batch) {}

ConnectionError::ConnectionError(const std::string& what, int retries)
    : Error(fmt::format("{} (after {} retries)", what, retries)), retries_(retries) {}

RoundAbortedError::RoundAbortedError(unsigned round, std::vector<std::string> absentees)
    : Error(fmt::format("round {} aborted: no update from {}", round,
                        fmt::join(absentees, ", "))),
      round_(round),
      absentees_(std::move(absentees)) {}

}  // namespace fedenergy
