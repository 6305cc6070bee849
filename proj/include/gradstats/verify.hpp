#ifndef GRADSTATS_VERIFY_HPP
#define GRADSTATS_VERIFY_HPP

#include "gradstats/harness.hpp"
#include "gradstats/surgery.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace gradstats {

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  bool pass = true;
  std::uint64_t failing_seed = 0;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool pass() const;
  /// Folds a measurement into the named check, creating it on first use.
  void record(const std::string& name, double error, double threshold, std::uint64_t seed);
  void merge(const VerifyReport& other);
};

/// Random small models for the randomized suites.
ModelSpec random_mlp_spec(std::uint64_t seed, std::size_t max_layers = 3, std::size_t max_width = 16);
ModelSpec random_seq_spec(std::uint64_t seed, std::size_t max_length = 6, std::size_t max_width = 4);
std::size_t random_batch(std::uint64_t seed, std::size_t max_batch = 8);

/// Every input of the graph filled with standard normals.
Bindings random_bindings(const Graph& g, std::uint64_t seed);

/// The statistics exercised by the oracle suite.
std::vector<GradStatistic> suite_statistics();

/// Small single-primitive losses, keyed by the primitive they exercise.
struct PrimitiveCase {
  std::string name;
  Graph loss;
  Bindings bindings;
};
std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed);

VerifyReport verify_surgery(std::uint64_t seed, std::size_t trials);
VerifyReport verify_autodiff(std::uint64_t seed, std::size_t trials);
VerifyReport verify_estimators(std::uint64_t seed, std::size_t trials);

/// scope: "surgery", "autodiff", "estimators" or "all".
VerifyReport run_verify(const std::string& scope, std::uint64_t seed, std::size_t trials);

}  // namespace gradstats

#endif  // GRADSTATS_VERIFY_HPP
