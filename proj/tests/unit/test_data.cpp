// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <random>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "jvit/checkpoint.hpp"
#include "jvit/config.hpp"
#include "jvit/dataset.hpp"
#include "jvit/image_io.hpp"
#include "test_util.hpp"

using namespace jvit;

namespace {

std::vector<char> cifar_bytes(std::size_t records, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<char> b(records * kCifarRecordBytes);
  for (std::size_t r = 0; r < records; ++r) {
    b[r * kCifarRecordBytes] = static_cast<char>(rng() % 10);
    for (std::size_t i = 1; i < kCifarRecordBytes; ++i)
      b[r * kCifarRecordBytes + i] = static_cast<char>(rng() & 0xFF);
  }
  return b;
}

std::vector<float> flat(const Parameters<float>& p, const JigsawHead<float>& h) {
  std::vector<float> out;
  auto f = [&](const std::string&, const Tensor<float>& t, bool) {
    out.insert(out.end(), t.data().begin(), t.data().end());
  };
  p.for_each(f);
  h.for_each(f);
  return out;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("cifar loader: count, label byte, scaling, layout") {
  TempDir dir;
  auto bytes = cifar_bytes(5, 1);
  bytes[1] = static_cast<char>(255);         // R at (0, 0)
  bytes[1 + 1024 + 33] = static_cast<char>(0);  // G at (1, 1)
  write_bytes(dir / "b.bin", bytes);
  const auto d = load_cifar10_bin(dir / "b.bin");
  CHECK(d.size() == bytes.size() / kCifarRecordBytes);
  CHECK(d.records[0].label == static_cast<unsigned char>(bytes[0]));
  CHECK(d.records[0].pixels[0] == 1.0f);
  CHECK(d.records[0].pixels[(1 * 32 + 1) * 3 + 1] == 0.0f);
  CHECK(d.records[2].pixels[(5 * 32 + 7) * 3 + 2] ==
        static_cast<unsigned char>(bytes[2 * kCifarRecordBytes + 1 + 2048 + 5 * 32 + 7]) / 255.0f);
  CHECK(d.shape == ImageShape{32, 32, 3});
  CHECK(d.num_classes == 10);

  write_cifar10_bin(d, dir / "c.bin");
  CHECK(read_bytes(dir / "c.bin") == bytes);
}

TEST_CASE("cifar loader errors") {
  TempDir dir;
  auto bytes = cifar_bytes(2, 2);
  bytes.pop_back();
  write_bytes(dir / "short.bin", bytes);
  CHECK_THROWS_AS(load_cifar10_bin(dir / "short.bin"), FormatError);
  bytes = cifar_bytes(2, 2);
  bytes[kCifarRecordBytes] = 10;
  write_bytes(dir / "label.bin", bytes);
  CHECK_THROWS_AS(load_cifar10_bin(dir / "label.bin"), FormatError);
  CHECK_THROWS(load_cifar10_bin(dir / "missing.bin"));
}

TEST_CASE("synthetic data is a pure, clipped function of its spec") {
  SyntheticSpec s;
  s.num_images = 30;
  const auto a = gen_synthetic(s), b = gen_synthetic(s);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.records[i].pixels == b.records[i].pixels);
    CHECK(a.records[i].label == b.records[i].label);
    for (float v : a.records[i].pixels) CHECK((v >= 0.0f && v <= 1.0f));
  }
  CHECK_NOTHROW(a.validate());
  s.seed = 1;
  CHECK(gen_synthetic(s).records[0].pixels != a.records[0].pixels);
  s.h = 30;
  CHECK_THROWS_AS(gen_synthetic(s), std::invalid_argument);
}

TEST_CASE("synthetic patches carry their grid position") {
  SyntheticSpec s;
  s.num_images = 200;
  const auto d = gen_synthetic(s);
  // Channel 0 ramps 0.35..0.65 left to right, channel 1 top to bottom; the
  // random-phase texture averages out. Edge strips are 4 pixels wide.
  const double lo = 0.5 + 0.3 * (2.0 / 32 - 0.5), hi = 0.5 + 0.3 * (30.0 / 32 - 0.5);
  double left = 0, right = 0, top = 0, bottom = 0;
  for (const auto& r : d.records)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        left += r.pixels[(y * 32 + x) * 3];
        right += r.pixels[(y * 32 + 28 + x) * 3];
        top += r.pixels[(x * 32 + y) * 3 + 1];
        bottom += r.pixels[((28 + x) * 32 + y) * 3 + 1];
      }
  const double n = 200.0 * 32 * 4;
  CHECK(left / n == doctest::Approx(lo).epsilon(0.05));
  CHECK(right / n == doctest::Approx(hi).epsilon(0.05));
  CHECK(top / n == doctest::Approx(lo).epsilon(0.05));
  CHECK(bottom / n == doctest::Approx(hi).epsilon(0.05));
}

TEST_CASE("batches are [B, H, W, C]") {
  SyntheticSpec s;
  s.num_images = 4;
  const auto d = gen_synthetic(s);
  const std::size_t idx[] = {3, 1};
  auto t = make_batch<float>(d, idx);
  CHECK(t.shape() == Shape{2, 32, 32, 3});
  CHECK(t.data()[0] == d.records[3].pixels[0]);
  CHECK(t.data()[3072] == d.records[1].pixels[0]);
}

TEST_CASE("dataset validation") {
  SyntheticSpec s;
  s.num_images = 3;
  auto d = gen_synthetic(s);
  d.records[1].label = 10;
  CHECK_THROWS_AS(d.validate(), FormatError);
  d = gen_synthetic(s);
  d.records[2].pixels[5] = 1.5f;
  CHECK_THROWS_AS(d.validate(), FormatError);
}

TEST_CASE("checkpoint roundtrip and size") {
  TempDir dir;
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_layers = 2;
  auto p = init_parameters<float>(cfg, 3);
  auto h = init_jigsaw_head<float>(cfg, 4);
  OptimState st;
  st.step = 7;
  st.slots["head.bias"] = {{10}, std::vector<float>(10, 0.5f), std::vector<float>(10, 0.25f), 7};
  const nlohmann::json extra = {{"note", "x"}};
  save_checkpoint(dir / "a.jvit", cfg, p, h, &st, extra);

  const auto ck = load_checkpoint(dir / "a.jvit");
  CHECK(ck.model == cfg);
  CHECK(flat(ck.params, ck.head) == flat(p, h));
  REQUIRE(ck.optim.has_value());
  CHECK(ck.optim->step == 7);
  CHECK(ck.optim->slots.at("head.bias").v == st.slots["head.bias"].v);
  CHECK(ck.optim->slots.at("head.bias").step == 7);
  CHECK(ck.extra == extra);

  // header + blob + per tensor (u32 name length + name + u32 rank + 8 rank + 4 numel)
  const auto file = read_tensor_file(dir / "a.jvit");
  std::size_t expected = kCheckpointHeaderBytes + file.config.dump().size();
  for (const auto& t : file.tensors)
    expected += 4 + t.name.size() + 4 + 8 * t.shape.size() + 4 * t.data.size();
  CHECK(std::filesystem::file_size(dir / "a.jvit") == expected);
}

TEST_CASE("random tensor files roundtrip bit-exactly") {
  TempDir dir;
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<NamedTensor> ts;
    const std::size_t n = 1 + rng() % 5;
    for (std::size_t i = 0; i < n; ++i) {
      NamedTensor t;
      t.name = "t" + std::to_string(i) + std::string(rng() % 7, 'x');
      for (std::size_t r = 0, rank = 1 + rng() % 3; r < rank; ++r) t.shape.push_back(1 + rng() % 6);
      t.data.resize(shape_numel(t.shape));
      for (auto& v : t.data) {
        const auto bits = static_cast<std::uint32_t>(rng());
        std::memcpy(&v, &bits, 4);  // any bit pattern, NaN payloads included
      }
      ts.push_back(std::move(t));
    }
    write_tensor_file(dir / "r.bin", {{"trial", trial}}, ts);
    const auto back = read_tensor_file(dir / "r.bin");
    REQUIRE(back.tensors.size() == ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
      CHECK(back.tensors[i].name == ts[i].name);
      CHECK(back.tensors[i].shape == ts[i].shape);
      CHECK(std::memcmp(back.tensors[i].data.data(), ts[i].data.data(), 4 * ts[i].data.size()) == 0);
    }
  }
}

TEST_CASE("corrupt checkpoints are rejected with a reason") {
  TempDir dir;
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  save_checkpoint(dir / "ok.jvit", cfg, init_parameters<float>(cfg, 0), init_jigsaw_head<float>(cfg, 0));
  const auto good = read_bytes(dir / "ok.jvit");
  auto expect_error = [&](std::vector<char> bytes, const std::string& fragment) {
    write_bytes(dir / "bad.jvit", bytes);
    try {
      load_checkpoint(dir / "bad.jvit");
      FAIL("accepted a corrupt file: " << fragment);
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  auto b = good;
  b[0] = 'X';
  expect_error(b, "magic mismatch");
  b = good;
  b[4] = 9;
  expect_error(b, "unsupported checkpoint version 9");
  expect_error(std::vector<char>(good.begin(), good.end() - 3), "truncated");
  expect_error(std::vector<char>(good.begin(), good.begin() + 10), "truncated");
  b = good;
  b.push_back(0);
  expect_error(b, "trailing bytes");

  std::vector<NamedTensor> dup = {{"a", {1}, {1.0f}}, {"a", {1}, {2.0f}}};
  CHECK_THROWS_AS(write_tensor_file(dir / "d.bin", nlohmann::json::object(), dup), FormatError);
}

TEST_CASE("pgm export") {
  TempDir dir;
  Grid g{2, 2, {0.0, 1.0, 1.0, 0.0}};
  export_grid_pgm(g, 1, dir / "m.pgm");
  const auto bytes = read_bytes(dir / "m.pgm");
  const std::string header = "P5\n2 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 0]) == 0);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 1]) == 255);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 2]) == 255);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 3]) == 0);

  Grid big{14, 14, std::vector<double>(196, 0.5)};
  export_grid_pgm(big, 16, dir / "big.pgm");
  const auto img = read_pgm(dir / "big.pgm");
  CHECK(img.shape == ImageShape{224, 224, 1});

  Grid bad{1, 2, {0.5, 1.2}};
  CHECK_THROWS_AS(export_grid_pgm(bad, 1, dir / "x.pgm"), std::invalid_argument);
}

TEST_CASE("ppm roundtrip") {
  TempDir dir;
  PixelImage im{{3, 2, 3}, {}};
  for (int i = 0; i < 18; ++i) im.pixels.push_back(static_cast<float>(i * 15) / 255.0f);
  write_ppm(im, dir / "a.ppm");
  const auto back = read_ppm(dir / "a.ppm");
  CHECK(back.shape == im.shape);
  CHECK(back.pixels == im.pixels);
  CHECK_THROWS(read_ppm(dir / "nope.ppm"));
}

TEST_CASE("run config parsing") {
  using nlohmann::json;
  json j = {{"model", {{"embed_dim", 32}, {"num_heads", 4}}},
            {"train", {{"steps", 10}, {"jigsaw", {{"eta", 0.5}, {"gamma", 0.25}}}}},
            {"data", "synthetic:n=20,seed=3"}};
  const auto rc = run_from_json(j);
  CHECK(rc.model.embed_dim == 32);
  CHECK(rc.train.steps == 10);
  CHECK(rc.train.jigsaw.eta == 0.5);
  CHECK(rc.data.kind == DataSpec::Kind::kSynthetic);
  CHECK(rc.data.synthetic.num_images == 20);
  CHECK(run_from_json(to_json(rc)).train.jigsaw.gamma == 0.25);

  json typo = j;
  typo["train"]["jigsaw"]["gama"] = 0.5;
  try {
    run_from_json(typo);
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.jigsaw.gama") != std::string::npos);
  }
  json wrong = j;
  wrong["model"]["embed_dim"] = "wide";
  CHECK_THROWS_AS(run_from_json(wrong), ConfigError);
  json invalid = j;
  invalid["train"]["jigsaw"]["gamma"] = 1.0;
  CHECK_THROWS_AS(run_from_json(invalid), ConfigError);
  json missing = j;
  missing["data"] = "cifar10:/definitely/not/here.bin";
  CHECK_THROWS_AS(run_from_json(missing), ConfigError);
  CHECK_THROWS_AS(load_run_config("/definitely/not/here.json"), ConfigError);
}

TEST_CASE("data spec strings") {
  auto s = parse_data_spec("synthetic:n=7,seed=2,classes=4");
  CHECK(s.synthetic.num_images == 7);
  CHECK(s.synthetic.seed == 2);
  CHECK(s.synthetic.num_classes == 4);
  auto c = parse_data_spec("cifar10:/tmp/x.bin");
  CHECK(c.kind == DataSpec::Kind::kCifar10);
  CHECK(c.path == "/tmp/x.bin");
  CHECK_THROWS(parse_data_spec("imagenet:/x"));
  CHECK_THROWS(parse_data_spec("synthetic:n=abc"));
}

}
