#include <cmath>
#include <fstream>
#include <sstream>

#include "bundleseg/phantom.hpp"
#include "bundleseg/rng.hpp"
#include "bundleseg/run_config.hpp"
#include "bundleseg/stack.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bundleseg;
using namespace bundleseg::stack;

namespace {

Volume<float> random_volume(Dims3 d, int channels, std::uint64_t seed) {
  Volume<float> v(d, channels);
  SplitMix64 rng(seed);
  for (auto& x : v.data()) x = static_cast<float>(rng.normal());
  return v;
}

PeakVolume random_peaks(Dims3 d, std::uint64_t seed) {
  PeakVolume p(d);
  p.data() = random_volume(d, kPeakChannels, seed).data();
  return p;
}

// Depth-1 network whose foreground logit is 8 * (channel 0 - 1/2) and whose
// background logit is 0: channel 0 rides the skip connection untouched.
unet::NetworkParams channel_copy_fusion(int filters) {
  const unet::UNetConfig cfg{kFusionChannels, 1, filters, 0.4};
  unet::NetworkParams p{cfg, {}};
  for (const auto& shape : unet::expected_shapes(cfg)) p.tensors.emplace_back(shape);
  auto center = [](ParamTensor<float>& w, int out, int in) {
    const int cin = w.dim(1);
    w.values[((static_cast<std::size_t>(out) * cin + in) * 3 + 1) * 3 + 1] = 1.0f;
  };
  center(p.tensors[0], 0, 0);   // encoder a
  center(p.tensors[2], 0, 0);   // encoder b
  center(p.tensors[9], 0, 0);   // decoder a, skip channels come first
  center(p.tensors[11], 0, 0);  // decoder b
  auto& head_w = p.tensors[13];
  REQUIRE(head_w.shape == std::vector<int>{2, filters, 1, 1});
  head_w.values[static_cast<std::size_t>(filters)] = 8.0f;  // class 1 from feature 0
  p.tensors[14].values[1] = -4.0f;
  unet::audit_shapes(p);
  return p;
}

StackedModel random_model(const std::string& preset, std::uint64_t seed) {
  StackedModel m;
  m.preset = preset;
  for (int k = 0; k < 3; ++k) m.axis[k] = unet::build(unet::preset_config(preset, kPeakChannels, 0.4), seed + k);
  m.fusion = unet::build(unet::preset_config(preset, kFusionChannels, 0.4), seed + 3);
  return m;
}

std::vector<Subject> phantom_subjects(int n, int dim, std::uint64_t seed) {
  std::vector<Subject> out;
  for (auto& p : phantom::generate_dataset(n, phantom::PhantomSpec::defaults(dim), seed)) {
    out.push_back({"s" + std::to_string(out.size()), std::move(p.peaks), std::move(p.mask)});
  }
  return out;
}

}  // namespace

TEST_CASE("plane names") {
  CHECK(plane_name(SlicePlane::YZ) == "yz");
  CHECK(parse_plane("ZX") == SlicePlane::ZX);
  CHECK_THROWS_AS(parse_plane("xz"), ConfigError);
}

TEST_CASE("slice counts and shapes") {
  const Dims3 d{5, 6, 7};
  const auto xy = slice_shape(d, SlicePlane::XY);
  const auto yz = slice_shape(d, SlicePlane::YZ);
  const auto zx = slice_shape(d, SlicePlane::ZX);
  CHECK((xy.count == 7 && xy.h == 5 && xy.w == 6));
  CHECK((yz.count == 5 && yz.h == 6 && yz.w == 7));
  CHECK((zx.count == 6 && zx.h == 7 && zx.w == 5));
  const auto v = random_volume(d, 2, 1);
  const auto slices = extract_slices(v, SlicePlane::YZ);
  REQUIRE(slices.size() == 5);
  // YZ slice x=3 holds (c, y, z)
  CHECK(slices[3].data[(1 * 6 + 4) * 7 + 2] == v.at(3, 4, 2, 1));
}

TEST_CASE("extract and reassemble are inverse for every plane") {
  for (const Dims3 d : {Dims3{4, 5, 6}, Dims3{1, 1, 1}, Dims3{7, 1, 3}}) {
    const auto v = random_volume(d, 9, 3);
    for (const auto plane : kPlanes) {
      const auto back = reassemble(extract_slices(v, plane), plane, d);
      CHECK(back.dims() == d);
      CHECK(back.channels() == 9);
      CHECK(back.data() == v.data());
    }
  }
}

TEST_CASE("single slice is the volume itself") {
  const auto v = random_volume({3, 4, 1}, 1, 5);
  const auto s = extract_slices(v, SlicePlane::XY);
  REQUIRE(s.size() == 1);
  for (int x = 0; x < 3; ++x)
    for (int y = 0; y < 4; ++y) CHECK(s[0].data[x * 4 + y] == v.at(x, y, 0));
}

TEST_CASE("reassembly rejects wrong slice sets") {
  const Dims3 d{4, 5, 6};
  auto slices = extract_slices(random_volume(d, 2, 7), SlicePlane::ZX);
  slices.pop_back();
  CHECK_THROWS_AS(reassemble(slices, SlicePlane::ZX, d), ShapeError);
  auto again = extract_slices(random_volume(d, 2, 7), SlicePlane::ZX);
  again[2].w += 1;
  CHECK_THROWS_AS(reassemble(again, SlicePlane::ZX, d), ShapeError);
}

TEST_CASE("axis prediction covers every voxel once and keeps the grid") {
  for (const Dims3 d : {Dims3{16, 16, 16}, Dims3{13, 10, 11}}) {
    const auto params = unet::build(unet::preset_config("phantom", kPeakChannels, 0.4), 9);
    const auto input = random_volume(d, kPeakChannels, 2);
    for (const auto plane : kPlanes) {
      Volume<int> coverage;
      const auto p = predict_axis(params, input, plane, &coverage);
      CHECK(p.dims() == d);
      for (int c : coverage.data()) CHECK(c == 1);
      for (float v : p.data()) CHECK((v >= 0.0f && v <= 1.0f));
    }
  }
}

TEST_CASE("zero input with zero biases gives one half everywhere") {
  const auto params = unet::build(unet::preset_config("tiny", kPeakChannels, 0.4), 1);
  const Volume<float> zero({9, 6, 5}, kPeakChannels, 0.0f);
  for (const auto plane : kPlanes) {
    const auto p = predict_axis(params, zero, plane);
    for (float v : p.data()) CHECK(v == 0.5f);
  }
}

TEST_CASE("fusion input layout") {
  ProbabilityVolume a({2, 3, 4}), b({2, 3, 4}), c({2, 3, 4});
  SplitMix64 rng(4);
  for (auto* v : {&a, &b, &c})
    for (auto& x : v->data()) x = rng.uniform_float();
  const auto f = build_fusion_input(a, b, c);
  CHECK(f.dims() == Dims3{2, 3, 4});
  CHECK(f.channels() == 3);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 2; ++x) {
        CHECK(f.at(x, y, z, 0) == a.at(x, y, z));
        CHECK(f.at(x, y, z, 1) == b.at(x, y, z));
        CHECK(f.at(x, y, z, 2) == c.at(x, y, z));
      }
  CHECK_THROWS_AS(build_fusion_input(a, b, ProbabilityVolume({2, 3, 5})), ShapeError);
}

TEST_CASE("stacked prediction keeps dimensions") {
  const auto model = random_model("tiny", 3);
  for (const Dims3 d : {Dims3{12, 12, 12}, Dims3{9, 10, 7}}) {
    const auto pred = predict_stacked(model, random_peaks(d, 6));
    CHECK(pred.probability.dims() == d);
    CHECK(pred.mask.dims() == d);
  }
}

TEST_CASE("stacking with a channel-copy fusion reproduces the plain xy network") {
  auto model = random_model("phantom", 21);
  const auto peaks = random_peaks({20, 18, 17}, 8);
  const auto plain = predict_plain(model.axis[0], peaks, SlicePlane::XY);

  // fusion function that returns channel XY unchanged
  const auto copied = predict_stacked(model, peaks, [](const Volume<float>& f) {
    ProbabilityVolume p(f.dims());
    for (int z = 0; z < f.dims().z; ++z)
      for (int y = 0; y < f.dims().y; ++y)
        for (int x = 0; x < f.dims().x; ++x) p.at(x, y, z) = f.at(x, y, z, 0);
    return p;
  });
  double worst = 0;
  for (std::size_t i = 0; i < plain.probability.size(); ++i)
    worst = std::max(worst, double(std::abs(copied.probability.data()[i] - plain.probability.data()[i])));
  CHECK(worst <= 1e-6);
  CHECK(copied.mask.data() == plain.mask.data());

  // a real fusion network wired to pass channel XY through its skip path
  model.fusion = channel_copy_fusion(4);
  model.axis[1] = unet::build(unet::preset_config("tiny", kPeakChannels, 0.4), 1);
  model.axis[2] = unet::build(unet::preset_config("tiny", kPeakChannels, 0.4), 2);
  const auto wired = predict_stacked(model, peaks, [&](const Volume<float>& f) {
    return predict_axis(model.fusion, f, SlicePlane::XY);
  });
  worst = 0;
  for (std::size_t i = 0; i < plain.probability.size(); ++i) {
    const double p = plain.probability.data()[i];
    const double expect = 1.0 / (1.0 + std::exp(-8.0 * (p - 0.5)));
    worst = std::max(worst, std::abs(wired.probability.data()[i] - expect));
  }
  CHECK(worst <= 1e-6);
  CHECK(wired.mask.data() == plain.mask.data());
}

TEST_CASE("plain prediction is the xy channel of the fusion input") {
  const auto model = random_model("tiny", 30);
  const auto peaks = random_peaks({8, 12, 10}, 9);
  const auto fused = fusion_input_for(model, train::normalize(static_cast<const Volume<float>&>(peaks)), 3);
  for (const auto plane : kPlanes) {
    const auto plain = predict_plain(model.axis[static_cast<int>(plane)], peaks, plane);
    bool same = true;
    for (int z = 0; z < 10; ++z)
      for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 8; ++x) same &= fused.at(x, y, z, static_cast<int>(plane)) == plain.probability.at(x, y, z);
    CHECK(same);
  }
}

TEST_CASE("thread count does not change predictions") {
  const auto model = random_model("tiny", 40);
  const auto peaks = random_peaks({10, 10, 10}, 10);
  CHECK(predict_stacked(model, peaks, 1).probability.data() == predict_stacked(model, peaks, 3).probability.data());
}

TEST_CASE("model validation") {
  auto model = random_model("tiny", 1);
  CHECK_NOTHROW(model.validate());
  model.fusion = unet::build(unet::preset_config("tiny", kPeakChannels, 0.4), 1);
  CHECK_THROWS_AS(model.validate(), ShapeError);
  model = random_model("tiny", 1);
  model.axis[2] = unet::build(unet::preset_config("phantom", kPeakChannels, 0.4), 1);
  CHECK_THROWS_AS(model.validate(), ShapeError);
}

TEST_CASE("model directory roundtrip") {
  testing::TempDir dir("stack");
  auto model = random_model("tiny", 50);
  model.bundle = "arc";
  train::TrainConfig cfg;
  cfg.epochs = 3;
  model.config_json = cli::train_config_json(cfg);
  model.config_hash = fnv1a(model.config_json);
  model.selected_epochs = {1, 2, 0, 2};
  save_model(model, dir.path());
  for (const char* f : {"xy.ckpt", "yz.ckpt", "zx.ckpt", "fusion.ckpt", "manifest.json"}) CHECK(std::filesystem::exists(dir / f));
  const auto back = load_model(dir.path());
  for (int k = 0; k < 3; ++k) CHECK(back.axis[k] == model.axis[k]);
  CHECK(back.fusion == model.fusion);
  CHECK(back.bundle == "arc");
  CHECK(back.preset == "tiny");
  CHECK(back.config_json == model.config_json);
  CHECK(back.config_hash == model.config_hash);
  CHECK(back.selected_epochs == model.selected_epochs);

  std::filesystem::remove(dir / "zx.ckpt");
  CHECK_THROWS_AS(load_model(dir.path()), Error);
  CHECK_THROWS_AS(load_model(dir / "nothing"), IoError);
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("stacked training") {
  const auto subjects = phantom_subjects(3, 24, 2);
  const std::span<const Subject> all(subjects);
  train::TrainConfig cfg;
  cfg.preset = "tiny";
  cfg.epochs = 3;
  cfg.seed = 6;

  std::vector<std::pair<std::string, Volume<float>>> seen;
  StackHooks hooks;
  hooks.on_fusion_input = [&](const std::string& id, const Volume<float>& f) { seen.emplace_back(id, f); };
  const auto run = train_stacked(all.first(2), all.last(1), cfg, "arc", 3, hooks);
  CHECK_NOTHROW(run.model.validate());
  CHECK(run.model.bundle == "arc");
  for (int k = 0; k < 4; ++k) {
    CHECK(run.model.selected_epochs[k] == run.results[k].best_epoch);
    CHECK(run.results[k].history.size() == 3);
  }
  CHECK(run.model.axis[1] == run.results[1].best);
  CHECK(run.model.fusion == run.results[3].best);

  // stage-2 inputs match what inference recomputes from the frozen nets
  REQUIRE(seen.size() == 3);
  for (const auto& [id, f] : seen) {
    const auto& s = *std::find_if(subjects.begin(), subjects.end(), [&](const Subject& x) { return x.id == id; });
    const auto again = fusion_input_for(run.model, train::normalize(static_cast<const Volume<float>&>(s.peaks)));
    CHECK(again.data() == f.data());
  }

  // each axis net equals a plain training with the derived seed
  train::TrainConfig plain_cfg = cfg;
  plain_cfg.seed = cfg.seed + 1;
  std::vector<train::LabeledVolume> labeled;
  for (const auto& s : subjects)
    labeled.push_back({s.id, train::normalize(static_cast<const Volume<float>&>(s.peaks)), s.mask});
  const auto plain = train::train_network(unet::preset_config("tiny", kPeakChannels, cfg.dropout_p),
                                          std::span<const train::LabeledVolume>(labeled).first(2),
                                          std::span<const train::LabeledVolume>(labeled).last(1), SlicePlane::YZ,
                                          plain_cfg);
  CHECK(plain.best == run.model.axis[1]);

  // single-threaded rerun is bitwise identical
  const auto again = train_stacked(all.first(2), all.last(1), cfg, "arc", 1);
  for (int k = 0; k < 3; ++k) CHECK(again.model.axis[k] == run.model.axis[k]);
  CHECK(again.model.fusion == run.model.fusion);

  CHECK_THROWS_AS(train_stacked(all.first(2), {}, cfg, "arc"), DegenerateDataset);
}
