#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lffs/pipeline.hpp"

namespace lffs {

// Property checks behind the acceptance run. Each builds its own inputs from
// `seed`, compares against an oracle computed independently of the code path
// under test, and reports the worst error it saw.

CriterionResult check_spectral(std::uint64_t seed);
CriterionResult check_gradients(std::uint64_t seed);
CriterionResult check_schedule(std::uint64_t seed);
CriterionResult check_ensemble(std::uint64_t seed);

/// Criteria 1–4, then the desk experiment (twice when the config asks for the
/// determinism check). Each result is passed to `emit` as soon as it is known.
/// Artifacts of the first run go under <output>/claim.
std::vector<CriterionResult> run_acceptance(const ExperimentConfig& config, std::size_t workers,
                                            const std::function<void(const CriterionResult&)>& emit,
                                            const Logger& log = {});

}  // namespace lffs
