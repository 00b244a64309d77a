#pragma once

// Self-checks run by `oseg verify`: the subset-sampling uniformity test and
// oracle comparisons for the solver and the evaluator.

#include <string>
#include <vector>

namespace oseg {

struct VerifyCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct VerifyOptions {
  std::size_t trials = 150000;
  std::size_t oracle_points = 200;
  std::size_t evaluator_instances = 500;
  std::uint64_t seed = 1;
};

/// Chained subsampling 6 -> 4 -> 3 -> 2 must be uniform, the keep-first
/// control must not be.
VerifyCheck verify_sampling(const VerifyOptions& opt = {});
/// Nystrom with M = n against a dense kernel ridge solve (rel. error < 1e-6).
VerifyCheck verify_solver(const VerifyOptions& opt = {});
/// Greedy AP against exhaustive search over match assignments (|diff| < 1e-9).
VerifyCheck verify_evaluator(const VerifyOptions& opt = {});

std::vector<VerifyCheck> verify_all(const VerifyOptions& opt = {});

}  // namespace oseg
