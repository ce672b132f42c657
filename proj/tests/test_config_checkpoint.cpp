#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "convformer/checkpoint.hpp"
#include "convformer/config_io.hpp"
#include "convformer/error.hpp"

using namespace convformer;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  const fs::path dir = fs::path(testing::TempDir()) / "convformer_ckpt_tests";
  fs::create_directories(dir);
  return (dir / name).string();
}

std::string to_string(const std::vector<char>& bytes) { return {bytes.begin(), bytes.end()}; }

void expect_same_tensors(Model<float>& a, Model<float>& b) {
  const auto pa = param_set(a), pb = param_set(b);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(*pa[i].tensor, *pb[i].tensor) << pa[i].name;
  }
}

// Model whose BN running statistics differ from their initial values.
Model<float> trained_looking_model(std::uint64_t seed) {
  auto m = build_model<float>(presets::tiny(), seed);
  Rng rng(seed + 100);
  Eager<float> g;
  model_forward(g, m, Tensor<float>::create({4, 3, 32, 32}, init::Uniform{rng, -1, 1}), Mode::train, rng);
  return m;
}

}  // namespace

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(to_hex(sha256("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(to_hex(sha256("")), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(ConfigJson, RoundTripsEveryPreset) {
  for (const auto& cfg : {presets::tiny(), presets::convformer_s(), presets::convformer_l(),
                          apply_ablation(presets::convformer_s(), Ablation::no_expand),
                          apply_ablation(presets::convformer_l(), Ablation::no_parallel),
                          apply_ablation(presets::tiny(), Ablation::no_gating)}) {
    EXPECT_EQ(parse_config(canonical_config_text(cfg)), cfg) << cfg.name;
    EXPECT_EQ(config_from_json(config_to_json(cfg)), cfg);
  }
}

TEST(ConfigJson, PrettyAndCanonicalFormsParseTheSame) {
  const auto cfg = presets::convformer_s();
  EXPECT_EQ(parse_config(config_to_json(cfg).dump(2)), cfg);
}

TEST(ConfigJson, UnknownKeysAreErrors) {
  auto j = config_to_json(presets::tiny());
  j["learning_rate"] = 0.1;
  EXPECT_THROW(config_from_json(j), FormatError);

  j = config_to_json(presets::tiny());
  j["mca"]["kernel"] = 3;
  EXPECT_THROW(config_from_json(j), FormatError);

  j = config_to_json(presets::tiny());
  j["stages"][2]["width"] = 3;
  EXPECT_THROW(config_from_json(j), FormatError);

  j = config_to_json(presets::tiny());
  j["mca"]["branches"][0]["padding"] = 1;
  EXPECT_THROW(config_from_json(j), FormatError);
}

TEST(ConfigJson, MalformedOrInvalidConfigs) {
  EXPECT_THROW(parse_config("{not json"), FormatError);
  auto j = config_to_json(presets::tiny());
  j["stages"].erase(3);
  EXPECT_THROW(config_from_json(j), FormatError);
  j = config_to_json(presets::tiny());
  j["num_classes"] = "ten";
  EXPECT_THROW(config_from_json(j), FormatError);
  j = config_to_json(presets::tiny());
  j["stages"][0]["channels"] = 0;
  EXPECT_THROW(config_from_json(j), ConfigError);
  EXPECT_THROW(load_config_file(temp_path("does-not-exist.json")), FormatError);
}

TEST(ConfigJson, LoadsFromFile) {
  const auto path = temp_path("cfg.json");
  std::ofstream(path) << config_to_json(presets::convformer_l()).dump(2);
  EXPECT_EQ(load_config_file(path), presets::convformer_l());
}

TEST(Digest, StableAndSensitive) {
  EXPECT_EQ(config_digest(presets::tiny()), config_digest(presets::tiny()));
  EXPECT_EQ(config_digest(parse_config(config_to_json(presets::tiny()).dump(4))), config_digest(presets::tiny()));
  auto c = presets::tiny();
  c.stages[2].blocks = 3;
  EXPECT_NE(config_digest(c), config_digest(presets::tiny()));
  c = presets::tiny();
  c.mca.use_gating = false;
  EXPECT_NE(config_digest(c), config_digest(presets::tiny()));
}

TEST(Checkpoint, HeaderLayout) {
  const auto m = build_model<float>(presets::tiny(), 1);
  const auto bytes = serialize_checkpoint(m);
  ASSERT_GT(bytes.size(), 42u);
  EXPECT_EQ(std::memcmp(bytes.data(), "CVFM1\0", 6), 0);
  const Digest d = config_digest(m.config);
  EXPECT_EQ(std::memcmp(bytes.data() + 6, d.data(), 32), 0);
  const auto text = canonical_config_text(m.config);
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[38 + i])) << (8 * i);
  EXPECT_EQ(len, text.size());
  EXPECT_EQ(std::string(bytes.data() + 42, len), text);

  const auto path = temp_path("layout.ckpt");
  save_checkpoint(m, path);
  const auto h = read_checkpoint_header(path);
  const auto ps = param_set(m);
  ASSERT_EQ(h.directory.size(), ps.size());
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(h.directory[i].name, ps[i].name);
    EXPECT_EQ(h.directory[i].shape, ps[i].tensor->shape());
    EXPECT_EQ(h.directory[i].kind, ps[i].kind);
    EXPECT_EQ(h.directory[i].offset, offset);
    offset += static_cast<std::uint64_t>(ps[i].tensor->numel()) * 4;
  }
  EXPECT_EQ(fs::file_size(path), bytes.size());
  EXPECT_GT(bytes.size(), offset);
  // last four bytes are the final float of the last tensor, little-endian
  const float last = (*ps.back().tensor)[ps.back().tensor->numel() - 1];
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[bytes.size() - 4 + i])) << (8 * i);
  EXPECT_EQ(bits, std::bit_cast<std::uint32_t>(last));
}

TEST(Checkpoint, RoundTripIsBitwiseAndForwardIdentical) {
  auto m = trained_looking_model(3);
  Rng rng(9);
  const auto x = Tensor<float>::create({2, 3, 32, 32}, init::Uniform{rng, -1, 1});
  const auto before = predict(m, x);

  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(m, path);
  auto loaded = load_checkpoint<float>(path);
  EXPECT_EQ(loaded.config, m.config);
  expect_same_tensors(loaded, m);
  EXPECT_EQ(predict(loaded, x), before);

  auto other = build_model<float>(presets::tiny(), 77);
  load_checkpoint_into(other, path);
  expect_same_tensors(other, m);
  EXPECT_EQ(predict(other, x), before);
}

TEST(Checkpoint, MismatchedDigestIsRejected) {
  const auto m = build_model<float>(presets::tiny(), 1);
  const auto path = temp_path("mismatch.ckpt");
  save_checkpoint(m, path);
  auto cfg = presets::tiny();
  cfg.mca.use_gating = false;
  auto wrong = build_model<float>(cfg, 1);
  const auto snapshot = param_set(wrong);
  std::vector<Tensor<float>> copy;
  for (const auto& e : snapshot) copy.push_back(*e.tensor);
  try {
    load_checkpoint_into(wrong, path);
    FAIL() << "expected a digest mismatch";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("does not match model config digest"), std::string::npos);
  }
  for (std::size_t i = 0; i < snapshot.size(); ++i) EXPECT_EQ(*snapshot[i].tensor, copy[i]);

  // same architecture under a different name still has a different digest
  auto renamed = presets::tiny();
  renamed.name = "tiny-copy";
  auto r = build_model<float>(renamed, 1);
  EXPECT_THROW(load_checkpoint_into(r, path), FormatError);
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  auto m = build_model<float>(presets::tiny(), 1);
  const std::string good = to_string(serialize_checkpoint(m));

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint_into(m, bad_magic), FormatError);

  EXPECT_THROW(deserialize_checkpoint_into(m, good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_checkpoint_into(m, good.substr(0, 20)), FormatError);
  EXPECT_THROW(deserialize_checkpoint_into(m, good + "x"), FormatError);
  {
    auto target = build_model<float>(presets::tiny(), 2);
    const auto before = predict(target, Tensor<float>({1, 3, 32, 32}, 0.5f));
    EXPECT_THROW(deserialize_checkpoint_into(target, good + "xyzw"), FormatError);
    EXPECT_THROW(deserialize_checkpoint_into(target, good.substr(0, good.size() - 4)), FormatError);
    EXPECT_EQ(predict(target, Tensor<float>({1, 3, 32, 32}, 0.5f)), before);
  }
  EXPECT_THROW(deserialize_checkpoint_into(m, std::string()), FormatError);

  std::string bad_digest = good;
  bad_digest[10] ^= 0x1;
  EXPECT_THROW(deserialize_checkpoint_into(m, bad_digest), FormatError);

  std::string bad_config = good;
  bad_config[45] ^= 0x20;
  EXPECT_THROW(deserialize_checkpoint_into(m, bad_config), FormatError);

  const auto missing = temp_path("missing.ckpt");
  fs::remove(missing);
  EXPECT_THROW(load_checkpoint<float>(missing), FormatError);
  EXPECT_NO_THROW(deserialize_checkpoint_into(m, good));
}

TEST(Checkpoint, UnwritablePathIsFormatError) {
  const auto m = build_model<float>(presets::tiny(), 1);
  EXPECT_THROW(save_checkpoint(m, "/nonexistent-dir/x/model.ckpt"), FormatError);
}

TEST(Checkpoint, DoubleModelRoundTripsThroughFloat) {
  const auto m = build_model<float>(presets::tiny(), 5);
  const auto d = cast_model<double>(m);
  auto back = build_model<float>(presets::tiny(), 6);
  deserialize_checkpoint_into(back, to_string(serialize_checkpoint(d)));
  auto mm = m;
  expect_same_tensors(back, mm);
}
