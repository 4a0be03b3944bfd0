#include <fstream>
#include <set>

#include "layerlens/repr_store.hpp"
#include "test_util.hpp"

using namespace layerlens;
using namespace layerlens::testing;

namespace {

store::DumpManifest manifest_for(const std::vector<store::LayerDataset>& ds, std::uint32_t dim) {
  store::DumpManifest m;
  m.model_name = "synthetic";
  m.num_layers = 3;
  m.hidden_dim = dim;
  m.seq_len = 16;
  m.seed = 7;
  m.layer_files = store::describe_layer_files(ds);
  m.attributes["hook"] = "block_output";
  return m;
}

std::vector<store::LayerDataset> two_layers() {
  const auto id = [](const Eigen::VectorXd& x) { Eigen::VectorXd y = 2.0 * x; return y; };
  return {synthetic_dataset(0, 4, 24, 1, id), synthetic_dataset(1, 4, 16, 2, id),
          synthetic_dataset(1, 4, 8, 3, id, store::Split::kTest)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

}  // namespace

TEST(Store, RoundTripPreservesEverything) {
  TempDir dir("store");
  const auto ds = two_layers();
  const auto m = manifest_for(ds, 4);
  store::write_dump(m, ds, dir.path());
  const store::Dump back = store::read_dump(dir.path());
  EXPECT_EQ(back.manifest, m);
  ASSERT_EQ(back.datasets.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(back.datasets[i], ds[i]);
  ASSERT_NE(back.find(1, store::Split::kTest), nullptr);
  EXPECT_EQ(back.find(1, store::Split::kTest)->size(), 8u);
  EXPECT_EQ(back.find(0, store::Split::kTest), nullptr);
  EXPECT_EQ(store::read_manifest(dir.path()), m);
}

TEST(Store, InputsAndOutputsStackRows) {
  const auto ds = two_layers();
  const Eigen::MatrixXd x = ds[0].inputs();
  const Eigen::MatrixXd y = ds[0].outputs();
  ASSERT_EQ(x.rows(), 24);
  ASSERT_EQ(x.cols(), 4);
  EXPECT_DOUBLE_EQ(x(3, 2), static_cast<double>(ds[0].pairs[3].h_in[2]));
  EXPECT_DOUBLE_EQ(y(5, 1), static_cast<double>(ds[0].pairs[5].h_out[1]));
}

TEST(Store, ValidateRejectsBadDatasets) {
  auto ds = two_layers()[0];
  auto bad = ds;
  bad.pairs[2].h_out.pop_back();
  EXPECT_EQ(kind_of([&] { bad.validate(); }), ErrorKind::kFormat);
  bad = ds;
  bad.pairs[1].h_in[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_EQ(kind_of([&] { bad.validate(); }), ErrorKind::kFormat);
  bad = ds;
  bad.pairs[1].seq_id = bad.pairs[0].seq_id;
  bad.pairs[1].pos = bad.pairs[0].pos;
  EXPECT_EQ(kind_of([&] { bad.validate(); }), ErrorKind::kFormat);
  EXPECT_EQ(kind_of([&] { ds.validate(3); }), ErrorKind::kFormat);
  EXPECT_NO_THROW(ds.validate(16));
  bad = ds;
  bad.pairs.clear();
  EXPECT_EQ(kind_of([&] { bad.validate(); }), ErrorKind::kFormat);
}

TEST(Store, WriteRejectsManifestMismatch) {
  TempDir dir("store");
  const auto ds = two_layers();
  auto m = manifest_for(ds, 4);
  m.layer_files[0].count = 99;
  EXPECT_EQ(kind_of([&] { store::write_dump(m, ds, dir.path()); }), ErrorKind::kFormat);
  m = manifest_for(ds, 4);
  m.hidden_dim = 5;
  EXPECT_EQ(kind_of([&] { store::write_dump(m, ds, dir.path()); }), ErrorKind::kFormat);
  m = manifest_for(ds, 4);
  m.layer_files[1].layer_index = 3;  // >= num_layers
  EXPECT_EQ(kind_of([&] { store::write_dump(m, ds, dir.path()); }), ErrorKind::kFormat);
}

TEST(Store, ReadDetectsManifestProblems) {
  TempDir dir("store");
  const auto ds = two_layers();
  store::write_dump(manifest_for(ds, 4), ds, dir.path());
  const std::string text = slurp(dir / "manifest.json");

  spit(dir / "manifest.json", text.substr(0, text.size() / 2));
  EXPECT_EQ(kind_of([&] { store::read_dump(dir.path()); }), ErrorKind::kFormat);

  std::string v2 = text;
  v2.replace(v2.find("\"format_version\": 1"), 19, "\"format_version\": 2");
  spit(dir / "manifest.json", v2);
  try {
    store::read_dump(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("version mismatch"), std::string::npos);
  }

  spit(dir / "manifest.json", text);
  std::filesystem::remove(dir / "layer_1_test.lup");
  try {
    store::read_dump(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFormat);
    EXPECT_NE(std::string(e.what()).find("missing"), std::string::npos);
  }
}

TEST(Store, ReadDetectsDimensionMismatch) {
  TempDir dir("store");
  const auto ds = two_layers();
  store::write_dump(manifest_for(ds, 4), ds, dir.path());
  auto other = synthetic_dataset(0, 5, 24, 1, [](const Eigen::VectorXd& x) { return x; });
  store::write_pair_file(other, dir / "layer_0_train.lup");
  try {
    store::read_dump(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("dimension mismatch"), std::string::npos);
  }
}

// Every truncation and a sweep of single-byte corruptions must either load
// cleanly or fail with a format error; nothing may crash or allocate wildly.
TEST(Store, CorruptPairFilesFailCleanly) {
  TempDir dir("store");
  const auto ds = two_layers();
  store::write_dump(manifest_for(ds, 4), ds, dir.path());
  const auto file = dir / "layer_1_test.lup";
  const std::string good = slurp(file);
  for (std::size_t cut = 0; cut < good.size(); cut += 7) {
    spit(file, good.substr(0, cut));
    EXPECT_EQ(kind_of([&] { store::read_dump(dir.path()); }), ErrorKind::kFormat) << cut;
  }
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    std::string bad = good;
    const std::size_t at = rng.below(std::min<std::size_t>(bad.size(), 64));
    bad[at] = static_cast<char>(bad[at] ^ static_cast<char>(1 + rng.below(255)));
    spit(file, bad);
    try {
      store::read_dump(dir.path());
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kFormat) << e.what();
    }
  }
}

TEST(Store, SamplePositionsIsDeterministicAndRespectsMask) {
  std::vector<bool> mask(32, true);
  for (int i = 0; i < 32; i += 3) mask[i] = false;
  const auto a = store::sample_positions(32, mask, 8, 42);
  const auto b = store::sample_positions(32, mask, 8, 42);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 8u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<std::uint32_t>(a.begin(), a.end()).size(), 8u);
  for (auto p : a) EXPECT_TRUE(mask[p]);
  EXPECT_NE(a, store::sample_positions(32, mask, 8, 43));
  EXPECT_EQ(kind_of([&] { store::sample_positions(32, mask, 30, 1); }), ErrorKind::kConfig);
  EXPECT_EQ(store::sample_positions(32, mask, 0, 1).size(), 0u);
}

TEST(Store, SamplePositionsIsUniform) {
  std::vector<bool> mask(10, true);
  std::vector<int> hits(10, 0);
  for (std::uint64_t s = 0; s < 4000; ++s) {
    for (auto p : store::sample_positions(10, mask, 3, s)) ++hits[p];
  }
  // Expected 1200 per position; 5 sigma is about 145.
  for (int h : hits) EXPECT_NEAR(h, 1200, 150);
}

TEST(Store, SplitNames) {
  EXPECT_EQ(store::parse_split("train"), store::Split::kTrain);
  EXPECT_EQ(store::split_name(store::Split::kTest), "test");
  EXPECT_EQ(kind_of([] { store::parse_split("dev"); }), ErrorKind::kFormat);
}
