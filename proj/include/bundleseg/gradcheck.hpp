#pragma once

// Finite-difference verification of the analytic backward passes. Problems
// run in double precision; each layer output is reduced to a scalar by a
// fixed random projection sum_i r_i * y_i so that every output element
// contributes a distinct weight (a plain sum would hide errors in ops whose
// outputs sum to a constant, like softmax).

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bundleseg::gradcheck {

class Problem {
 public:
  virtual ~Problem() = default;
  /// Every differentiable quantity (inputs and parameters), mutable in place.
  virtual std::vector<std::span<double>> variables() = 0;
  virtual double objective() = 0;
  /// Analytic gradient, one vector per entry of variables().
  virtual std::vector<std::vector<double>> gradient() = 0;
};

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

/// Central differences (f(t+eps) - f(t-eps)) / 2eps against the analytic
/// gradient; the maximum relative error over all variables.
double grad_check(Problem& problem, double eps);

struct Shape4 {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;
};

/// Ops: conv2d, conv1x1, relu, maxpool2, upconv2, concat_channels, dropout,
/// softmax2, softmax2_cross_entropy, unet. The channel count of softmax
/// problems is forced to 2; unet builds a depth-1, 2-filter network.
std::unique_ptr<Problem> make_problem(std::string_view op, const Shape4& input, std::uint64_t seed);

using ProblemFactory = std::function<std::unique_ptr<Problem>(const Shape4&, std::uint64_t)>;

struct Case {
  std::string op;
  double threshold = 1e-3;
  double eps = 1e-3;
  std::vector<Shape4> shapes;
  std::uint64_t seed = 7;
  ProblemFactory factory;
};

struct CaseResult {
  std::string op;
  double max_error = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

/// One case per op, each on at least three shapes.
std::vector<Case> default_suite();

/// Runs every case, printing one line per op to `log` when non-null.
std::vector<CaseResult> run_suite(const std::vector<Case>& cases, std::ostream* log);

}  // namespace bundleseg::gradcheck
