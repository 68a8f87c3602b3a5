#include "bundleseg/unet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "bundleseg/rng.hpp"

namespace bundleseg::unet {

void UNetConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (depth < 1 || depth > 8) throw ConfigError("depth must lie in [1, 8]");
  if (base_filters < 1) throw ConfigError("base_filters must be >= 1");
  ops::check_dropout_probability(dropout_p);
}

UNetConfig preset_config(std::string_view name, int in_channels, double dropout_p) {
  UNetConfig c;
  c.in_channels = in_channels;
  c.dropout_p = dropout_p;
  if (name == "paper") {
    c.depth = 4;
    c.base_filters = 64;
  } else if (name == "phantom") {
    c.depth = 3;
    c.base_filters = 16;
  } else if (name == "tiny") {
    c.depth = 1;
    c.base_filters = 4;
  } else {
    throw ConfigError("unknown architecture preset '" + std::string(name) + "'");
  }
  c.validate();
  return c;
}

namespace {

// Indices into the declared tensor order.
struct Layout {
  int depth;
  int encoder(int level) const { return 4 * level; }
  int bottleneck() const { return 4 * depth; }
  int upconv(int step) const { return 4 * depth + 4 + step; }
  int decoder(int step) const { return 5 * depth + 4 + 4 * step; }
  int head() const { return 9 * depth + 4; }
  int total() const { return 9 * depth + 6; }
};

void append_conv(std::vector<std::vector<int>>& shapes, int cout, int cin, int k) {
  shapes.push_back({cout, cin, k, k});
  shapes.push_back({cout});
}

}  // namespace

std::vector<std::vector<int>> expected_shapes(const UNetConfig& config) {
  config.validate();
  const int d = config.depth;
  std::vector<std::vector<int>> s;
  for (int k = 0; k < d; ++k) {
    const int cin = k == 0 ? config.in_channels : config.filters(k - 1);
    append_conv(s, config.filters(k), cin, 3);
    append_conv(s, config.filters(k), config.filters(k), 3);
  }
  append_conv(s, config.filters(d), config.filters(d - 1), 3);
  append_conv(s, config.filters(d), config.filters(d), 3);
  for (int step = 0; step < d; ++step) {
    const int level = d - 1 - step;
    s.push_back({config.filters(level + 1), config.filters(level), 2, 2});
  }
  for (int step = 0; step < d; ++step) {
    const int level = d - 1 - step;
    append_conv(s, config.filters(level), 2 * config.filters(level), 3);
    append_conv(s, config.filters(level), config.filters(level), 3);
  }
  append_conv(s, 2, config.filters(0), 1);
  return s;
}

template <typename S>
void audit_shapes(const BasicParams<S>& params) {
  const auto shapes = expected_shapes(params.config);
  if (params.tensors.size() != shapes.size()) {
    throw ShapeError("expected " + std::to_string(shapes.size()) + " parameter tensors, found " +
                     std::to_string(params.tensors.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& t = params.tensors[i];
    std::size_t count = 1;
    for (int v : t.shape) count *= static_cast<std::size_t>(v);
    if (t.shape != shapes[i] || count != t.values.size()) {
      throw ShapeError("parameter tensor " + std::to_string(i) + " has the wrong shape");
    }
  }
}

NetworkParams build(const UNetConfig& config, std::uint64_t seed) {
  NetworkParams p{config, {}};
  SplitMix64 rng(seed);
  for (const auto& shape : expected_shapes(config)) {
    ParamTensor<float> t(shape);
    if (shape.size() == 4) {
      // conv (Cout, Cin, k, k): fan-in Cin*k*k; upconv (Cin, Cout, 2, 2): each
      // output pixel sees one tap per input channel, fan-in Cin.
      const bool is_upconv = shape[2] == 2;
      const double fan_in = is_upconv ? shape[0] : static_cast<double>(shape[1]) * shape[2] * shape[3];
      const double stddev = std::sqrt(2.0 / fan_in);
      for (auto& v : t.values) v = static_cast<float>(stddev * rng.normal());
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

namespace {

template <typename S>
Tensor4<S> block_forward(const Tensor4<S>& x, const BasicParams<S>& p, int first, double dropout_p,
                         std::uint64_t seed, ops::Mode mode, BlockCache<S>* cache) {
  Tensor4<S> a = ops::relu(ops::conv2d(x, p.tensors[first], p.tensors[first + 1]));
  Tensor4<S> b = ops::relu(ops::conv2d(a, p.tensors[first + 2], p.tensors[first + 3]));
  ops::DropoutMask<S> mask;
  Tensor4<S> out = ops::dropout(b, dropout_p, seed, mode, cache ? &mask : nullptr);
  if (cache != nullptr) {
    cache->input = x;
    cache->a = std::move(a);
    cache->b = std::move(b);
    cache->mask = std::move(mask);
  }
  return out;
}

template <typename S>
Tensor4<S> block_backward(const BlockCache<S>& c, const BasicParams<S>& p, int first, const Tensor4<S>& dy,
                          std::vector<ParamTensor<S>>& g, bool want_input_grad) {
  Tensor4<S> d = ops::relu_backward(c.b, ops::dropout_backward(c.mask, dy));
  d = ops::conv2d_backward(c.a, p.tensors[first + 2], d, g[first + 2], g[first + 3]);
  d = ops::relu_backward(c.a, d);
  return ops::conv2d_backward(c.input, p.tensors[first], d, g[first], g[first + 1], want_input_grad);
}

}  // namespace

template <typename S>
Tensor4<S> forward(const BasicParams<S>& params, const Tensor4<S>& x, ops::Mode mode, std::uint64_t dropout_seed,
                   ForwardCache<S>* cache) {
  const UNetConfig& cfg = params.config;
  const int d = cfg.depth;
  if (x.c != cfg.in_channels) {
    throw ShapeError("network expects " + std::to_string(cfg.in_channels) + " input channels, got " +
                     std::to_string(x.c));
  }
  if (x.h % cfg.grid() != 0 || x.w % cfg.grid() != 0) {
    throw ShapeError("input " + x.shape() + " is not divisible by 2^depth = " + std::to_string(cfg.grid()));
  }
  const Layout layout{d};
  if (static_cast<int>(params.tensors.size()) != layout.total()) throw ShapeError("parameter set does not match depth");
  if (cache != nullptr) {
    cache->encoder.assign(d, {});
    cache->decoder.assign(d, {});
    cache->pools.clear();
    cache->upconv_inputs.clear();
  }
  int block = 0;
  auto seed_of = [&](int b) { return derive_seed(dropout_seed, static_cast<std::uint64_t>(b)); };

  std::vector<Tensor4<S>> skips;
  skips.reserve(d);
  Tensor4<S> h = x;
  for (int k = 0; k < d; ++k, ++block) {
    skips.push_back(block_forward(h, params, layout.encoder(k), cfg.dropout_p, seed_of(block), mode,
                                  cache ? &cache->encoder[k] : nullptr));
    ops::Pooled<S> pooled = ops::maxpool2(skips.back());
    h = std::move(pooled.out);
    if (cache != nullptr) {
      pooled.out = Tensor4<S>();
      cache->pools.push_back(std::move(pooled));
    }
  }
  h = block_forward(h, params, layout.bottleneck(), cfg.dropout_p, seed_of(block++), mode,
                    cache ? &cache->bottleneck : nullptr);
  for (int step = 0; step < d; ++step, ++block) {
    const int level = d - 1 - step;
    Tensor4<S> up = ops::upconv2(h, params.tensors[layout.upconv(step)]);
    if (cache != nullptr) cache->upconv_inputs.push_back(std::move(h));
    Tensor4<S> merged = ops::concat_channels(skips[level], up);
    h = block_forward(merged, params, layout.decoder(step), cfg.dropout_p, seed_of(block), mode,
                      cache ? &cache->decoder[step] : nullptr);
  }
  Tensor4<S> probs = ops::softmax2(ops::conv2d(h, params.tensors[layout.head()], params.tensors[layout.head() + 1]));
  if (cache != nullptr) {
    cache->head_input = std::move(h);
    cache->probs = probs;
  }
  return probs;
}

template <typename S>
void backward(const BasicParams<S>& params, const ForwardCache<S>& cache, const Tensor4<S>& dlogits,
              std::vector<ParamTensor<S>>& grads, Tensor4<S>* dx) {
  const int d = params.config.depth;
  const Layout layout{d};
  if (static_cast<int>(grads.size()) != layout.total()) throw ShapeError("gradient set does not match parameters");

  Tensor4<S> dh = ops::conv2d_backward(cache.head_input, params.tensors[layout.head()], dlogits,
                                       grads[layout.head()], grads[layout.head() + 1]);
  std::vector<Tensor4<S>> dskips(d);
  for (int step = d - 1; step >= 0; --step) {
    const int level = d - 1 - step;
    Tensor4<S> dmerged = block_backward(cache.decoder[step], params, layout.decoder(step), dh, grads, true);
    auto [dskip, dup] = ops::concat_channels_backward(dmerged, params.config.filters(level));
    dskips[level] = std::move(dskip);
    dh = ops::upconv2_backward(cache.upconv_inputs[step], params.tensors[layout.upconv(step)], dup,
                               grads[layout.upconv(step)]);
  }
  dh = block_backward(cache.bottleneck, params, layout.bottleneck(), dh, grads, true);
  for (int k = d - 1; k >= 0; --k) {
    const BlockCache<S>& enc = cache.encoder[k];
    Tensor4<S> dskip = ops::maxpool2_backward(cache.pools[k], enc.b, dh);
    for (std::size_t i = 0; i < dskip.size(); ++i) dskip.data[i] += dskips[k].data[i];
    const bool want = k > 0 || dx != nullptr;
    dh = block_backward(enc, params, layout.encoder(k), dskip, grads, want);
  }
  if (dx != nullptr) *dx = std::move(dh);
}

std::pair<int, int> grid_padding(int extent, int depth) {
  const int grid = 1 << depth;
  const int total = (grid - extent % grid) % grid;
  return {total / 2, total - total / 2};
}

template <typename S>
std::pair<Tensor4<S>, PadRecord> pad_to_grid(const Tensor4<S>& x, int depth) {
  const auto [top, bottom] = grid_padding(x.h, depth);
  const auto [left, right] = grid_padding(x.w, depth);
  PadRecord rec{top, bottom, left, right};
  if (rec.empty()) return {x, rec};
  Tensor4<S> y(x.n, x.c, x.h + top + bottom, x.w + left + right);
  for (int b = 0; b < x.n; ++b) {
    for (int c = 0; c < x.c; ++c) {
      for (int i = 0; i < x.h; ++i) {
        const S* src = &x(b, c, i, 0);
        std::copy(src, src + x.w, &y(b, c, i + top, left));
      }
    }
  }
  return {std::move(y), rec};
}

template <typename S>
Tensor4<S> crop(const Tensor4<S>& x, const PadRecord& pad) {
  if (pad.empty()) return x;
  Tensor4<S> y(x.n, x.c, x.h - pad.top - pad.bottom, x.w - pad.left - pad.right);
  for (int b = 0; b < y.n; ++b) {
    for (int c = 0; c < y.c; ++c) {
      for (int i = 0; i < y.h; ++i) {
        const S* src = &x(b, c, i + pad.top, pad.left);
        std::copy(src, src + y.w, &y(b, c, i, 0));
      }
    }
  }
  return y;
}

namespace {

constexpr char kMagic[8] = {'B', 'S', 'G', 'U', 'N', 'E', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string name) : bytes_(std::move(bytes)), name_(std::move(name)) {}

  template <typename T>
  T get() {
    T v;
    take(&v, sizeof(T));
    return v;
  }

  void take(void* dst, std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CorruptCheckpoint(name_ + ": truncated checkpoint");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
  std::string name_;
};

}  // namespace

void save_params(const NetworkParams& params, const std::filesystem::path& path) {
  audit_shapes(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.config.in_channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.config.depth));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.config.base_filters));
  put<double>(out, params.config.dropout_p);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& t : params.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

NetworkParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(name + ": not a bundleseg checkpoint");
  }
  Reader r(std::move(bytes), name);
  char magic[8];
  r.take(magic, sizeof(magic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(name + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  NetworkParams p;
  p.config.in_channels = static_cast<int>(r.get<std::uint32_t>());
  p.config.depth = static_cast<int>(r.get<std::uint32_t>());
  p.config.base_filters = static_cast<int>(r.get<std::uint32_t>());
  p.config.dropout_p = r.get<double>();
  try {
    p.config.validate();
  } catch (const ConfigError& e) {
    throw CorruptCheckpoint(name + ": " + e.what());
  }
  const auto expected = expected_shapes(p.config);
  const auto count = r.get<std::uint32_t>();
  if (count != expected.size()) {
    throw CorruptCheckpoint(name + ": " + std::to_string(count) + " tensors stored, config implies " +
                            std::to_string(expected.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rank = r.get<std::uint32_t>();
    if (rank != expected[i].size()) throw CorruptCheckpoint(name + ": tensor " + std::to_string(i) + " has wrong rank");
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
    if (shape != expected[i]) throw CorruptCheckpoint(name + ": tensor " + std::to_string(i) + " has wrong shape");
    ParamTensor<float> t(shape);
    r.take(t.values.data(), t.size() * sizeof(float));
    p.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw CorruptCheckpoint(name + ": trailing bytes after last tensor");
  return p;
}

#define BUNDLESEG_INSTANTIATE_UNET(S)                                                                        \
  template void audit_shapes(const BasicParams<S>&);                                                      \
  template Tensor4<S> forward(const BasicParams<S>&, const Tensor4<S>&, ops::Mode, std::uint64_t,         \
                              ForwardCache<S>*);                                                          \
  template void backward(const BasicParams<S>&, const ForwardCache<S>&, const Tensor4<S>&,                \
                         std::vector<ParamTensor<S>>&, Tensor4<S>*);                                      \
  template std::pair<Tensor4<S>, PadRecord> pad_to_grid(const Tensor4<S>&, int);                          \
  template Tensor4<S> crop(const Tensor4<S>&, const PadRecord&);

BUNDLESEG_INSTANTIATE_UNET(float)
BUNDLESEG_INSTANTIATE_UNET(double)

}  // namespace bundleseg::unet
