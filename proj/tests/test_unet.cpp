#include <cmath>
#include <cstring>
#include <fstream>

#include "bundleseg/rng.hpp"
#include "bundleseg/unet.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bundleseg;
using testing::TempDir;

namespace {

std::size_t conv_params(std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k + out; }

// Parameter count derived from the architecture description alone.
std::size_t closed_form_count(int in, int depth, int base) {
  auto f = [&](int k) { return static_cast<std::size_t>(base) << k; };
  std::size_t n = 0;
  for (int k = 0; k < depth; ++k) {
    n += conv_params(k == 0 ? in : f(k - 1), f(k), 3) + conv_params(f(k), f(k), 3);
  }
  n += conv_params(f(depth - 1), f(depth), 3) + conv_params(f(depth), f(depth), 3);
  for (int k = 0; k < depth; ++k) {
    n += f(k + 1) * f(k) * 4;
    n += conv_params(2 * f(k), f(k), 3) + conv_params(f(k), f(k), 3);
  }
  return n + conv_params(f(0), 2, 1);
}

Tensor4<float> random_input(int n, int c, int h, int w, std::uint64_t seed) {
  Tensor4<float> x(n, c, h, w);
  SplitMix64 rng(seed);
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  return x;
}

void randomise_biases(unet::NetworkParams& p, std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (auto& t : p.tensors) {
    if (t.shape.size() == 1) {
      for (auto& v : t.values) v = static_cast<float>(0.1 * rng.normal());
    }
  }
}

}  // namespace

TEST_CASE("parameter count matches the closed form") {
  const unet::UNetConfig tiny{9, 1, 4, 0.4};
  CHECK(unet::build(tiny, 1).count() == 1934);
  CHECK(closed_form_count(9, 1, 4) == 1934);
  for (auto [in, depth, base] : {std::tuple{9, 1, 4}, {9, 3, 16}, {3, 3, 16}, {9, 2, 5}, {1, 4, 2}}) {
    const unet::UNetConfig cfg{in, depth, base, 0.0};
    const auto p = unet::build(cfg, 3);
    CHECK(p.count() == closed_form_count(in, depth, base));
    CHECK(p.tensors.size() == static_cast<std::size_t>(9 * depth + 6));
    CHECK_NOTHROW(unet::audit_shapes(p));
  }
}

TEST_CASE("presets") {
  const auto paper = unet::preset_config("paper", 9, 0.4);
  CHECK(paper.depth == 4);
  CHECK(paper.base_filters == 64);
  const auto phantom = unet::preset_config("phantom", 3, 0.4);
  CHECK(phantom.depth == 3);
  CHECK(phantom.base_filters == 16);
  CHECK(phantom.in_channels == 3);
  CHECK_THROWS_AS(unet::preset_config("huge", 9, 0.4), ConfigError);
}

TEST_CASE("invalid configs are rejected") {
  CHECK_THROWS_AS(unet::build({9, 0, 4, 0.4}, 1), ConfigError);
  CHECK_THROWS_AS(unet::build({0, 1, 4, 0.4}, 1), ConfigError);
  CHECK_THROWS_AS(unet::build({9, 1, 0, 0.4}, 1), ConfigError);
  CHECK_THROWS_AS(unet::build({9, 1, 4, 1.0}, 1), ConfigError);
}

TEST_CASE("shape audit catches a wrong tensor") {
  auto p = unet::build({9, 2, 4, 0.4}, 1);
  p.tensors[5] = ParamTensor<float>({4, 4, 3, 2});
  CHECK_THROWS_AS(unet::audit_shapes(p), ShapeError);
}

TEST_CASE("build is deterministic and He-scaled") {
  const unet::UNetConfig cfg{9, 2, 8, 0.4};
  CHECK(unet::build(cfg, 42) == unet::build(cfg, 42));
  CHECK_FALSE(unet::build(cfg, 42) == unet::build(cfg, 43));

  const auto p = unet::build({9, 1, 64, 0.4}, 7);
  const auto& w = p.tensors[0];
  REQUIRE(w.shape == std::vector<int>{64, 9, 3, 3});
  double sum = 0, sq = 0;
  for (float v : w.values) sum += v;
  const double mean = sum / w.size();
  for (float v : w.values) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / w.size());
  CHECK(std::abs(sd / std::sqrt(2.0 / 81.0) - 1.0) < 0.1);
  CHECK(std::abs(mean) < 0.02);
  for (float v : p.tensors[1].values) CHECK(v == 0.0f);
}

TEST_CASE("forward shape and softmax contract") {
  const auto p = unet::build(unet::preset_config("phantom", 9, 0.4), 1);
  const auto x = random_input(8, 9, 64, 64, 2);
  const auto y = unet::forward(p, x, ops::Mode::Eval);
  CHECK(y.n == 8);
  CHECK(y.c == 2);
  CHECK(y.h == 64);
  CHECK(y.w == 64);
  float worst = 0;
  for (int b = 0; b < 8; ++b)
    for (int i = 0; i < 64; ++i)
      for (int j = 0; j < 64; ++j) worst = std::max(worst, std::abs(y(b, 0, i, j) + y(b, 1, i, j) - 1.0f));
  CHECK(worst <= 1e-6f);

  CHECK_THROWS_AS(unet::forward(p, random_input(1, 9, 60, 64, 3), ops::Mode::Eval), ShapeError);
  CHECK_THROWS_AS(unet::forward(p, random_input(1, 3, 64, 64, 3), ops::Mode::Eval), ShapeError);
}

TEST_CASE("eval forward is deterministic; train dropout follows its seed") {
  auto p = unet::build({9, 2, 4, 0.4}, 5);
  randomise_biases(p, 6);
  const auto x = random_input(2, 9, 16, 16, 7);
  CHECK(unet::forward(p, x, ops::Mode::Eval, 1).data == unet::forward(p, x, ops::Mode::Eval, 2).data);
  const auto a = unet::forward(p, x, ops::Mode::Train, 11);
  CHECK(a.data == unet::forward(p, x, ops::Mode::Train, 11).data);
  CHECK(a.data != unet::forward(p, x, ops::Mode::Train, 12).data);
}

TEST_CASE("translation by the grid step shifts the output") {
  auto p = unet::build({3, 1, 4, 0.0}, 9);
  randomise_biases(p, 10);
  const int size = 64, shift = 2;
  Tensor4<float> x(1, 3, size, size), xs(1, 3, size, size);
  SplitMix64 rng(12);
  for (int c = 0; c < 3; ++c)
    for (int i = 16; i < 40; ++i)
      for (int j = 16; j < 40; ++j) {
        const float v = static_cast<float>(rng.normal());
        x(0, c, i, j) = v;
        xs(0, c, i + shift, j + shift) = v;
      }
  const auto y = unet::forward(p, x, ops::Mode::Eval);
  const auto ys = unet::forward(p, xs, ops::Mode::Eval);
  const int margin = 12;  // beyond the receptive-field radius of this net
  for (int i = margin; i < size - margin - shift; ++i)
    for (int j = margin; j < size - margin - shift; ++j) {
      CHECK(ys(0, 1, i + shift, j + shift) == doctest::Approx(y(0, 1, i, j)).epsilon(1e-5));
    }
}

TEST_CASE("grid padding") {
  CHECK(unet::grid_padding(64, 3) == std::pair{0, 0});
  CHECK(unet::grid_padding(145, 4) == std::pair{7, 8});
  CHECK(unet::grid_padding(1, 1) == std::pair{0, 1});

  const auto x = random_input(1, 2, 145, 64, 4);
  const auto [padded, rec] = unet::pad_to_grid(x, 4);
  CHECK(padded.h == 160);
  CHECK(padded.w == 64);
  CHECK(rec == unet::PadRecord{7, 8, 0, 0});
  CHECK(padded(0, 1, 7, 0) == x(0, 1, 0, 0));
  CHECK(padded(0, 1, 6, 0) == 0.0f);
  CHECK(unet::crop(padded, rec).data == x.data);

  const auto [same, none] = unet::pad_to_grid(random_input(1, 1, 64, 64, 5), 3);
  CHECK(none.empty());
  CHECK(same.h == 64);
}

TEST_CASE("checkpoint roundtrip is bitwise") {
  TempDir dir("unet");
  auto p = unet::build({9, 2, 6, 0.25}, 17);
  randomise_biases(p, 18);
  unet::save_params(p, dir / "net.ckpt");
  const auto back = unet::load_params(dir / "net.ckpt");
  CHECK(back == p);
  CHECK(back.config.dropout_p == 0.25);

  const auto bytes = testing::read_bytes(dir / "net.ckpt");
  CHECK(std::string(bytes.data(), 7) == "BSGUNET");
  CHECK(bytes[7] == '\0');
}

TEST_CASE("damaged checkpoints") {
  TempDir dir("unet");
  const auto p = unet::build({9, 3, 2, 0.4}, 1);
  unet::save_params(p, dir / "net.ckpt");
  const auto bytes = testing::read_bytes(dir / "net.ckpt");

  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  testing::write_bytes(dir / "short.ckpt", truncated);
  CHECK_THROWS_AS(unet::load_params(dir / "short.ckpt"), CorruptCheckpoint);

  auto trailing = bytes;
  trailing.push_back(0);
  testing::write_bytes(dir / "long.ckpt", trailing);
  CHECK_THROWS_AS(unet::load_params(dir / "long.ckpt"), CorruptCheckpoint);

  // header claims depth 2; payload is a depth-3 network
  auto shallow = bytes;
  const std::uint32_t two = 2;
  std::memcpy(shallow.data() + 16, &two, 4);
  testing::write_bytes(dir / "depth.ckpt", shallow);
  CHECK_THROWS_AS(unet::load_params(dir / "depth.ckpt"), CorruptCheckpoint);

  auto version = bytes;
  const std::uint32_t v2 = 2;
  std::memcpy(version.data() + 8, &v2, 4);
  testing::write_bytes(dir / "version.ckpt", version);
  CHECK_THROWS_AS(unet::load_params(dir / "version.ckpt"), FormatError);

  auto magic = bytes;
  magic[0] = 'X';
  testing::write_bytes(dir / "magic.ckpt", magic);
  CHECK_THROWS_AS(unet::load_params(dir / "magic.ckpt"), FormatError);

  CHECK_THROWS_AS(unet::load_params(dir / "absent.ckpt"), IoError);
}
