#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fincflow/flow.hpp"

namespace fincflow {

struct CheckOptions {
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 4;
  std::size_t k = 3;
  std::size_t batch = 2;
  int workers = 1;
  std::uint64_t seed = 0;
  bool inject_fault = false;  // anchor weight 1.0 -> 1.1 in the checked blocks
  bool model_checks = true;   // gradient and Jacobian checks on a toy model
};

enum class Verdict { Pass, Fail, Skipped };
const char* to_string(Verdict v);

struct CheckResult {
  std::string name;
  Verdict verdict = Verdict::Pass;
  double error = 0.0;
  double tolerance = 0.0;
  std::string note;
};

std::vector<CheckResult> run_checks(const CheckOptions& opt);
bool all_passed(const std::vector<CheckResult>& results);  // skipped counts as passed
void print_check_table(std::ostream& out, const std::vector<CheckResult>& results);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  double min_preactivation = 0.0;
};

// Central differences of the mean continuous NLL against FlowModel::backward
// for every element of every parameter. Relative error is
// |a - n| / max(|a|, |n|, floor).
GradCheckResult gradient_check(FlowModel<double>& model, const Tensor<double>& x, double eps = 1e-4,
                               double floor = 1e-6);

struct JacobianCheckResult {
  double analytic = 0.0;  // logdet_total of one sample
  double numeric = 0.0;   // log|det J| of the finite-difference Jacobian
  double error = 0.0;
};

// x must hold one sample. The map x -> concatenated latents is differentiated
// column by column with central differences.
JacobianCheckResult jacobian_check(FlowModel<double>& model, const Tensor<double>& x, double eps = 1e-5);

// Small seeded model for the two checks above: actnorm initialized from x,
// then every parameter perturbed so no layer acts as the identity. Seeds are
// advanced until every ReLU input sits at least 1e-3 from zero on x.
FlowModel<double> make_toy_model(const ModelConfig& config, const Tensor<double>& x, std::uint64_t seed);

}  // namespace fincflow
