#include "bundleseg/loss.hpp"

#include <algorithm>
#include <cmath>

namespace bundleseg::train {

template <typename S>
double weighted_cross_entropy(const Tensor4<S>& probs, const Tensor4<S>& target, double fg_weight,
                              const std::vector<std::uint8_t>* valid, Tensor4<S>* dlogits) {
  if (probs.c != 2 || target.c != 1 || probs.n != target.n || probs.h != target.h || probs.w != target.w) {
    throw ShapeError("cross-entropy expects probs (B,2,H,W) and target (B,1,H,W), got " + probs.shape() + " and " +
                     target.shape());
  }
  const std::size_t plane = probs.plane();
  if (valid != nullptr && valid->size() != static_cast<std::size_t>(probs.n) * plane) {
    throw ShapeError("cross-entropy validity mask size");
  }
  std::size_t count = 0;
  if (valid == nullptr) {
    count = static_cast<std::size_t>(probs.n) * plane;
  } else {
    for (auto v : *valid) count += v != 0;
  }
  if (dlogits != nullptr) *dlogits = Tensor4<S>(probs.n, 2, probs.h, probs.w);
  if (count == 0) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(count);

  double total = 0.0;
  for (int b = 0; b < probs.n; ++b) {
    const S* p = probs.item(b);
    const S* t = target.item(b);
    S* g = dlogits != nullptr ? dlogits->item(b) : nullptr;
    for (std::size_t i = 0; i < plane; ++i) {
      if (valid != nullptr && (*valid)[static_cast<std::size_t>(b) * plane + i] == 0) continue;
      const int cls = t[i] > S{0.5} ? 1 : 0;
      const double w = cls == 1 ? fg_weight : 1.0;
      const double pc = static_cast<double>(p[cls * plane + i]);
      total -= w * std::log(std::max(pc, kProbabilityFloor));
      if (g != nullptr && pc > kProbabilityFloor) {
        const S scale = static_cast<S>(w * inv_n);
        g[i] = scale * (p[i] - (cls == 0 ? S{1} : S{0}));
        g[plane + i] = scale * (p[plane + i] - (cls == 1 ? S{1} : S{0}));
      }
    }
  }
  return total * inv_n;
}

template double weighted_cross_entropy(const Tensor4<float>&, const Tensor4<float>&, double,
                                       const std::vector<std::uint8_t>*, Tensor4<float>*);
template double weighted_cross_entropy(const Tensor4<double>&, const Tensor4<double>&, double,
                                       const std::vector<std::uint8_t>*, Tensor4<double>*);

}  // namespace bundleseg::train
