#include "bundleseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "bundleseg/loss.hpp"
#include "bundleseg/ops.hpp"
#include "bundleseg/rng.hpp"
#include "bundleseg/unet.hpp"

namespace bundleseg::gradcheck {

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

double grad_check(Problem& problem, double eps) {
  const auto analytic = problem.gradient();
  auto vars = problem.variables();
  if (analytic.size() != vars.size()) throw ShapeError("gradient count does not match variable count");
  double worst = 0.0;
  for (std::size_t v = 0; v < vars.size(); ++v) {
    if (analytic[v].size() != vars[v].size()) throw ShapeError("gradient shape does not match variable");
    for (std::size_t i = 0; i < vars[v].size(); ++i) {
      const double saved = vars[v][i];
      vars[v][i] = saved + eps;
      const double up = problem.objective();
      vars[v][i] = saved - eps;
      const double down = problem.objective();
      vars[v][i] = saved;
      worst = std::max(worst, relative_error(analytic[v][i], (up - down) / (2.0 * eps)));
    }
  }
  return worst;
}

namespace {

using T4 = Tensor4<double>;
using P = ParamTensor<double>;

std::vector<double> normal_values(SplitMix64& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

T4 random_tensor(SplitMix64& rng, int n, int c, int h, int w) {
  T4 t(n, c, h, w);
  t.data = normal_values(rng, t.size());
  return t;
}

P random_param(SplitMix64& rng, std::vector<int> shape, double scale = 0.5) {
  P p(std::move(shape));
  p.values = normal_values(rng, p.size(), scale);
  return p;
}

// Objective = sum_i r_i * y_i for a layer output y and fixed coefficients r.
class ProjectedProblem : public Problem {
 public:
  explicit ProjectedProblem(std::uint64_t seed) : rng_(seed), projection_seed_(derive_seed(seed, 99)) {}

  double objective() override {
    const T4 y = run();
    const auto& r = projection(y.size());
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y.data[i];
    return s;
  }

  std::vector<std::vector<double>> gradient() override {
    T4 upstream = run();
    upstream.data = projection(upstream.size());
    return back(upstream);
  }

 protected:
  virtual T4 run() = 0;
  virtual std::vector<std::vector<double>> back(const T4& upstream) = 0;

  const std::vector<double>& projection(std::size_t n) {
    if (projection_.size() != n) {
      SplitMix64 r(projection_seed_);
      projection_ = normal_values(r, n);
    }
    return projection_;
  }

  SplitMix64 rng_;

 private:
  std::uint64_t projection_seed_;
  std::vector<double> projection_;
};

class ConvProblem final : public ProjectedProblem {
 public:
  ConvProblem(const Shape4& s, std::uint64_t seed, int k) : ProjectedProblem(seed) {
    x_ = random_tensor(rng_, s.n, s.c, s.h, s.w);
    w_ = random_param(rng_, {3, s.c, k, k});
    b_ = random_param(rng_, {3});
  }
  std::vector<std::span<double>> variables() override { return {x_.data, w_.values, b_.values}; }

 protected:
  T4 run() override { return ops::conv2d(x_, w_, b_); }
  std::vector<std::vector<double>> back(const T4& up) override {
    P dw(w_.shape), db(b_.shape);
    T4 dx = ops::conv2d_backward(x_, w_, up, dw, db);
    return {dx.data, dw.values, db.values};
  }

 private:
  T4 x_;
  P w_, b_;
};

class ReluProblem final : public ProjectedProblem {
 public:
  ReluProblem(const Shape4& s, std::uint64_t seed) : ProjectedProblem(seed) {
    x_ = T4(s.n, s.c, s.h, s.w);
    // Keep |x| >= 0.1 so the step never crosses the kink.
    for (auto& v : x_.data) v = (rng_.uniform() < 0.5 ? -1.0 : 1.0) * rng_.uniform(0.1, 1.0);
  }
  std::vector<std::span<double>> variables() override { return {x_.data}; }

 protected:
  T4 run() override { return ops::relu(x_); }
  std::vector<std::vector<double>> back(const T4& up) override { return {ops::relu_backward(ops::relu(x_), up).data}; }

 private:
  T4 x_;
};

class MaxPoolProblem final : public ProjectedProblem {
 public:
  MaxPoolProblem(const Shape4& s, std::uint64_t seed) : ProjectedProblem(seed) {
    x_ = T4(s.n, s.c, s.h, s.w);
    // Distinct values 0.01 apart: no perturbation can reorder a window.
    for (std::size_t i = 0; i < x_.size(); ++i) x_.data[i] = 0.01 * static_cast<double>(i);
    for (std::size_t i = x_.size(); i > 1; --i) std::swap(x_.data[i - 1], x_.data[rng_.below(i)]);
  }
  std::vector<std::span<double>> variables() override { return {x_.data}; }

 protected:
  T4 run() override { return ops::maxpool2(x_).out; }
  std::vector<std::vector<double>> back(const T4& up) override {
    return {ops::maxpool2_backward(ops::maxpool2(x_), x_, up).data};
  }

 private:
  T4 x_;
};

class UpconvProblem final : public ProjectedProblem {
 public:
  UpconvProblem(const Shape4& s, std::uint64_t seed) : ProjectedProblem(seed) {
    x_ = random_tensor(rng_, s.n, s.c, s.h, s.w);
    w_ = random_param(rng_, {s.c, 3, 2, 2});
  }
  std::vector<std::span<double>> variables() override { return {x_.data, w_.values}; }

 protected:
  T4 run() override { return ops::upconv2(x_, w_); }
  std::vector<std::vector<double>> back(const T4& up) override {
    P dw(w_.shape);
    T4 dx = ops::upconv2_backward(x_, w_, up, dw);
    return {dx.data, dw.values};
  }

 private:
  T4 x_;
  P w_;
};

class ConcatProblem final : public ProjectedProblem {
 public:
  ConcatProblem(const Shape4& s, std::uint64_t seed) : ProjectedProblem(seed) {
    a_ = random_tensor(rng_, s.n, s.c, s.h, s.w);
    b_ = random_tensor(rng_, s.n, s.c + 1, s.h, s.w);
  }
  std::vector<std::span<double>> variables() override { return {a_.data, b_.data}; }

 protected:
  T4 run() override { return ops::concat_channels(a_, b_); }
  std::vector<std::vector<double>> back(const T4& up) override {
    auto [da, db] = ops::concat_channels_backward(up, a_.c);
    return {da.data, db.data};
  }

 private:
  T4 a_, b_;
};

class DropoutProblem final : public ProjectedProblem {
 public:
  DropoutProblem(const Shape4& s, std::uint64_t seed) : ProjectedProblem(seed), mask_seed_(derive_seed(seed, 5)) {
    x_ = random_tensor(rng_, s.n, s.c, s.h, s.w);
  }
  std::vector<std::span<double>> variables() override { return {x_.data}; }

 protected:
  T4 run() override { return ops::dropout<double>(x_, 0.4, mask_seed_, ops::Mode::Train, nullptr); }
  std::vector<std::vector<double>> back(const T4& up) override {
    ops::DropoutMask<double> mask;
    ops::dropout(x_, 0.4, mask_seed_, ops::Mode::Train, &mask);
    return {ops::dropout_backward(mask, up).data};
  }

 private:
  std::uint64_t mask_seed_;
  T4 x_;
};

class SoftmaxProblem final : public ProjectedProblem {
 public:
  SoftmaxProblem(const Shape4& s, std::uint64_t seed) : ProjectedProblem(seed) {
    x_ = random_tensor(rng_, s.n, 2, s.h, s.w);
  }
  std::vector<std::span<double>> variables() override { return {x_.data}; }

 protected:
  T4 run() override { return ops::softmax2(x_); }
  std::vector<std::vector<double>> back(const T4& up) override {
    return {ops::softmax2_backward(ops::softmax2(x_), up).data};
  }

 private:
  T4 x_;
};

// Objective is the loss itself; the analytic gradient is the fused
// softmax + cross-entropy derivative.
class SoftmaxCrossEntropyProblem final : public Problem {
 public:
  SoftmaxCrossEntropyProblem(const Shape4& s, std::uint64_t seed) {
    SplitMix64 rng(seed);
    logits_ = random_tensor(rng, s.n, 2, s.h, s.w);
    target_ = T4(s.n, 1, s.h, s.w);
    for (auto& v : target_.data) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  }
  std::vector<std::span<double>> variables() override { return {logits_.data}; }
  double objective() override {
    return train::weighted_cross_entropy(ops::softmax2(logits_), target_, kFgWeight);
  }
  std::vector<std::vector<double>> gradient() override {
    T4 d;
    train::weighted_cross_entropy(ops::softmax2(logits_), target_, kFgWeight, nullptr, &d);
    return {d.data};
  }

 private:
  static constexpr double kFgWeight = 10.0;
  T4 logits_, target_;
};

class UNetProblem final : public ProjectedProblem {
 public:
  UNetProblem(const Shape4& s, std::uint64_t seed) : ProjectedProblem(seed) {
    unet::UNetConfig cfg{s.c, 1, 2, 0.4};
    params_ = unet::build(cfg, derive_seed(seed, 1)).cast<double>();
    // Nonzero biases so no unit starts exactly at the ReLU kink.
    for (std::size_t t = 1; t < params_.tensors.size(); t += 1) {
      if (params_.tensors[t].shape.size() == 1) {
        for (auto& v : params_.tensors[t].values) v = 0.1 * rng_.normal();
      }
    }
    x_ = random_tensor(rng_, s.n, s.c, s.h, s.w);
  }
  std::vector<std::span<double>> variables() override {
    std::vector<std::span<double>> v{x_.data};
    for (auto& t : params_.tensors) v.emplace_back(t.values);
    return v;
  }

 protected:
  T4 run() override { return unet::forward(params_, x_, ops::Mode::Eval); }
  std::vector<std::vector<double>> back(const T4& up) override {
    unet::ForwardCache<double> cache;
    const T4 probs = unet::forward(params_, x_, ops::Mode::Eval, 0, &cache);
    auto grads = unet::zero_like(params_);
    T4 dx;
    unet::backward(params_, cache, ops::softmax2_backward(probs, up), grads, &dx);
    std::vector<std::vector<double>> out{dx.data};
    for (auto& g : grads) out.push_back(std::move(g.values));
    return out;
  }

 private:
  unet::BasicParams<double> params_;
  T4 x_;
};

}  // namespace

std::unique_ptr<Problem> make_problem(std::string_view op, const Shape4& s, std::uint64_t seed) {
  if (op == "conv2d") return std::make_unique<ConvProblem>(s, seed, 3);
  if (op == "conv1x1") return std::make_unique<ConvProblem>(s, seed, 1);
  if (op == "relu") return std::make_unique<ReluProblem>(s, seed);
  if (op == "maxpool2") return std::make_unique<MaxPoolProblem>(s, seed);
  if (op == "upconv2") return std::make_unique<UpconvProblem>(s, seed);
  if (op == "concat_channels") return std::make_unique<ConcatProblem>(s, seed);
  if (op == "dropout") return std::make_unique<DropoutProblem>(s, seed);
  if (op == "softmax2") return std::make_unique<SoftmaxProblem>(s, seed);
  if (op == "softmax2_cross_entropy") return std::make_unique<SoftmaxCrossEntropyProblem>(s, seed);
  if (op == "unet") return std::make_unique<UNetProblem>(s, seed);
  throw ConfigError("unknown gradient-check op '" + std::string(op) + "'");
}

std::vector<Case> default_suite() {
  const std::vector<Shape4> generic{{2, 3, 5, 5}, {1, 2, 4, 6}, {3, 1, 3, 7}};
  const std::vector<Shape4> even{{1, 1, 4, 4}, {2, 3, 6, 4}, {1, 2, 2, 8}};
  const std::vector<Shape4> nets{{1, 2, 4, 4}, {2, 3, 4, 6}, {1, 1, 6, 2}};
  auto make = [](std::string op, double threshold, double eps, std::vector<Shape4> shapes) {
    Case c{op, threshold, eps, std::move(shapes), 7, {}};
    c.factory = [op](const Shape4& s, std::uint64_t seed) { return make_problem(op, s, seed); };
    return c;
  };
  return {
      make("conv2d", 1e-3, 1e-3, generic),
      make("conv1x1", 1e-4, 1e-3, generic),
      make("relu", 1e-3, 1e-3, generic),
      make("maxpool2", 1e-3, 1e-3, even),
      make("upconv2", 1e-3, 1e-3, {{1, 2, 3, 3}, {2, 1, 2, 4}, {1, 3, 1, 5}}),
      make("concat_channels", 1e-3, 1e-3, generic),
      make("dropout", 1e-3, 1e-3, generic),
      make("softmax2", 1e-3, 1e-3, generic),
      make("softmax2_cross_entropy", 1e-3, 1e-3, {{2, 2, 4, 4}, {1, 2, 3, 5}, {3, 2, 2, 2}}),
      make("unet", 5e-3, 1e-5, nets),
  };
}

std::vector<CaseResult> run_suite(const std::vector<Case>& cases, std::ostream* log) {
  std::vector<CaseResult> results;
  for (const auto& c : cases) {
    CaseResult r{c.op, 0.0, c.threshold, true};
    for (std::size_t i = 0; i < c.shapes.size(); ++i) {
      auto problem = c.factory(c.shapes[i], c.seed + i);
      r.max_error = std::max(r.max_error, grad_check(*problem, c.eps));
    }
    r.passed = r.max_error < c.threshold;
    if (log != nullptr) {
      *log << std::left << std::setw(24) << c.op << " max_rel_err " << std::scientific << std::setprecision(3)
           << r.max_error << "  threshold " << c.threshold << "  " << (r.passed ? "PASS" : "FAIL") << '\n'
           << std::defaultfloat;
    }
    results.push_back(r);
  }
  return results;
}

}  // namespace bundleseg::gradcheck
