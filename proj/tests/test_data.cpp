#include <cstdio>
#include <fstream>
#include <set>

#include "test_util.hpp"

namespace grond {
namespace {

using testing::TempDir;

// Writes a CIFAR10-format batch: `records` rows of (label, 3072 pixel bytes).
void write_fake_batch(const std::filesystem::path& p, std::size_t records, std::uint32_t seed) {
  std::ofstream out(p, std::ios::binary);
  std::mt19937 rng(seed);
  std::vector<char> rec(3073);
  for (std::size_t r = 0; r < records; ++r) {
    rec[0] = static_cast<char>(r % 10);
    for (std::size_t i = 1; i < rec.size(); ++i) rec[i] = static_cast<char>(rng() & 0xFF);
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
}

void write_fake_root(const std::filesystem::path& root) {
  for (int i = 1; i <= 5; ++i)
    write_fake_batch(root / ("data_batch_" + std::to_string(i) + ".bin"), 10000, i);
  write_fake_batch(root / "test_batch.bin", 10000, 99);
}

// Standalone raw reader: sum of the 3072 pixel bytes of record 0.
long first_image_byte_sum(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) return -1;
  unsigned char label = 0;
  if (std::fread(&label, 1, 1, f) != 1) return -1;
  long sum = 0;
  for (int i = 0; i < 3072; ++i) {
    int c = std::fgetc(f);
    if (c == EOF) return -1;
    sum += c;
  }
  std::fclose(f);
  return sum;
}

TEST(Cifar10, LoadsStandardLayout) {
  TempDir tmp("cifar");
  write_fake_root(tmp.path());
  auto [train, test] = data::load_cifar10(tmp.path());
  EXPECT_EQ(train.size(), 50000u);
  EXPECT_EQ(test.size(), 10000u);
  EXPECT_EQ(train.image_shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(train.class_counts(), std::vector<std::size_t>(10, 5000));
  EXPECT_EQ(test.split, data::Split::Test);

  const long oracle = first_image_byte_sum((tmp / "data_batch_1.bin").string());
  double sum = 0.0;
  for (float v : train.image(0)) sum += std::round(v * 255.0f);
  EXPECT_EQ(static_cast<long>(sum), oracle);
  for (float v : train.images.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Cifar10, AcceptsBatchesSubdirectory) {
  TempDir tmp("cifar-sub");
  std::filesystem::create_directories(tmp / "cifar-10-batches-bin");
  write_fake_batch(tmp / "cifar-10-batches-bin" / "test_batch.bin", 10000, 1);
  // Only the test batch: loading must name the first missing training file.
  try {
    data::load_cifar10(tmp.path());
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("data_batch_1.bin"), std::string::npos);
    EXPECT_EQ(e.exit_code(), 3);
  }
}

TEST(Cifar10, EmptyDirectoryIsIngestionError) {
  TempDir tmp("cifar-empty");
  EXPECT_THROW(data::load_cifar10(tmp.path()), IngestionError);
}

TEST(Cifar10, SizeMismatchNamesTheFile) {
  TempDir tmp("cifar-size");
  write_fake_batch(tmp / "short.bin", 9999, 1);
  std::vector<float> px;
  std::vector<int> y;
  try {
    data::read_cifar10_batch(tmp / "short.bin", px, y);
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("short.bin"), std::string::npos);
  }
}

TEST(Cifar10, BadLabelIsRejected) {
  TempDir tmp("cifar-label");
  write_fake_batch(tmp / "b.bin", 10000, 1);
  {
    std::fstream f(tmp / "b.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(3073 * 5);
    const char bad = 10;
    f.write(&bad, 1);
  }
  std::vector<float> px;
  std::vector<int> y;
  EXPECT_THROW(data::read_cifar10_batch(tmp / "b.bin", px, y), IngestionError);
}

TEST(Synthetic, ShapeContract) {
  auto d = data::make_synthetic(4, 100, 16, 1);
  EXPECT_EQ(d.size(), 400u);
  EXPECT_EQ(d.image_shape(), (Shape{3, 16, 16}));
  EXPECT_EQ(d.class_counts(), std::vector<std::size_t>(4, 100));
  d.validate();
  for (float v : d.images.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Synthetic, DeterministicForSeed) {
  auto a = data::make_synthetic(4, 20, 16, 1);
  auto b = data::make_synthetic(4, 20, 16, 1);
  auto c = data::make_synthetic(4, 20, 16, 2);
  EXPECT_TRUE(a.images.bit_equal(b.images));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(a.images.bit_equal(c.images));
}

TEST(Synthetic, RejectsBadArguments) {
  EXPECT_THROW(data::make_synthetic(1, 10, 16, 1), ArgumentError);
  EXPECT_THROW(data::make_synthetic(4, 10, 7, 1), ArgumentError);
}

// Nearest class centroid on raw pixels, fit on one draw and scored on another.
double centroid_accuracy(const data::LabeledDataset& train, const data::LabeledDataset& test) {
  const std::size_t dim = train.image_size();
  std::vector<std::vector<double>> c(train.num_classes, std::vector<double>(dim, 0.0));
  auto counts = train.class_counts();
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto img = train.image(i);
    for (std::size_t j = 0; j < dim; ++j) c[train.labels[i]][j] += img[j];
  }
  for (int k = 0; k < train.num_classes; ++k)
    for (double& v : c[k]) v /= static_cast<double>(counts[k]);
  int ok = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto img = test.image(i);
    int best = 0;
    double bd = 1e300;
    for (int k = 0; k < test.num_classes; ++k) {
      double d = 0;
      for (std::size_t j = 0; j < dim; ++j) d += (img[j] - c[k][j]) * (img[j] - c[k][j]);
      if (d < bd) bd = d, best = k;
    }
    ok += best == test.labels[i];
  }
  return 100.0 * ok / static_cast<double>(test.size());
}

TEST(Synthetic, NearestCentroidIsAtLeast90Percent) {
  for (int classes : {4, 10}) {
    auto train = data::make_synthetic(classes, 100, 16, 1);
    auto test = data::make_synthetic(classes, 50, 16, 2, data::Split::Test);
    EXPECT_GE(centroid_accuracy(train, test), 90.0) << classes << " classes";
  }
}

// Tiny stand-in with the same size and class balance as the CIFAR10 train set.
data::LabeledDataset balanced(std::size_t n, int classes) {
  data::LabeledDataset d;
  d.num_classes = classes;
  d.images = Tensor({static_cast<int>(n), 1, 1, 1});
  for (std::size_t i = 0; i < n; ++i) {
    d.images[i] = static_cast<float>(i % 7) / 7.0f;
    d.labels.push_back(static_cast<int>(i % classes));
  }
  return d;
}

triggers::TriggerApplier noise_applier(float eps = 0.05f) {
  return triggers::TriggerApplier(triggers::make_noise_trigger(eps, 3, {1, 1, 1}));
}

TEST(Poison, TableFourArithmetic) {
  auto d = balanced(50000, 10);
  auto trig = noise_applier();
  data::PoisonPlan plan;
  plan.target_class = 2;
  plan.rate = 0.05;
  auto p = data::build_poisoned(d, trig, plan);
  EXPECT_EQ(p.poisoned_indices.size(), 2500u);
  for (std::size_t i : p.poisoned_indices) ASSERT_EQ(d.labels[i], 2);
  EXPECT_EQ(p.data.labels, d.labels);

  plan.rate = 0.2;
  try {
    data::build_poisoned(d, trig, plan);
    FAIL();
  } catch (const CapacityError& e) {
    EXPECT_EQ(e.needed(), 10000u);
    EXPECT_EQ(e.available(), 5000u);
  }
}

TEST(Poison, ZeroRateIsIdentity) {
  auto d = data::make_synthetic(4, 20, 8, 1);
  data::PoisonPlan plan;
  plan.rate = 0.0;
  auto p = data::build_poisoned(d, noise_applier(), plan);
  EXPECT_TRUE(p.poisoned_indices.empty());
  EXPECT_TRUE(p.data.images.bit_equal(d.images));
  EXPECT_EQ(p.data.labels, d.labels);
}

TEST(Poison, CountsAndBookkeepingOverRandomPairs) {
  std::mt19937_64 rng(2024);
  auto trig = noise_applier(0.1f);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 20 + rng() % 600;
    const double rate = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto mode = trial % 2 ? data::LabelMode::Dirty : data::LabelMode::Clean;
    auto d = balanced(n, 5);
    data::PoisonPlan plan{1, rate, mode, rng()};
    const auto want = static_cast<std::size_t>(std::llround(rate * n));
    const std::size_t cap = d.indices_of_class(1).size();
    if (mode == data::LabelMode::Clean && want > cap) {
      EXPECT_THROW(data::build_poisoned(d, trig, plan), CapacityError);
      continue;
    }
    auto p = data::build_poisoned(d, trig, plan);
    ASSERT_EQ(p.poisoned_indices.size(), want) << "n=" << n << " rate=" << rate;
    ASSERT_TRUE(std::is_sorted(p.poisoned_indices.begin(), p.poisoned_indices.end()));
    ASSERT_EQ(std::set<std::size_t>(p.poisoned_indices.begin(), p.poisoned_indices.end()).size(),
              want);
    for (std::size_t i = 0; i < n; ++i) {
      const bool pois = p.is_poisoned(i);
      if (!pois) {
        ASSERT_EQ(p.data.labels[i], d.labels[i]);
        ASSERT_EQ(std::memcmp(p.data.image(i).data(), d.image(i).data(), 4), 0);
      } else if (mode == data::LabelMode::Clean) {
        ASSERT_EQ(p.data.labels[i], d.labels[i]);
        ASSERT_EQ(d.labels[i], 1);
      } else {
        ASSERT_EQ(p.data.labels[i], 1);
      }
      ASSERT_GE(p.data.images[i], 0.0f);
      ASSERT_LE(p.data.images[i], 1.0f);
    }
  }
}

TEST(Poison, SeededAndTriggerApplied) {
  auto d = data::make_synthetic(4, 30, 8, 1);
  auto trig = triggers::TriggerApplier(triggers::make_patch_trigger(3));
  data::PoisonPlan plan{0, 0.1, data::LabelMode::Dirty, 9};
  auto a = data::build_poisoned(d, trig, plan);
  auto b = data::build_poisoned(d, trig, plan);
  EXPECT_EQ(a.poisoned_indices, b.poisoned_indices);
  EXPECT_TRUE(a.data.images.bit_equal(b.data.images));
  plan.seed = 10;
  EXPECT_NE(data::build_poisoned(d, trig, plan).poisoned_indices, a.poisoned_indices);
  for (std::size_t i : a.poisoned_indices) {
    auto expect = triggers::apply_trigger(trig.trigger(),
                                          Tensor(d.image_shape(), {d.image(i).begin(), d.image(i).end()}));
    ASSERT_EQ(std::memcmp(expect.data(), a.data.image(i).data(), d.image_size() * 4), 0);
  }
  EXPECT_EQ(a.trigger_ref, trig.trigger().id());
}

TEST(Poison, InvalidPlansAreConfigErrors) {
  auto d = data::make_synthetic(4, 10, 8, 1);
  EXPECT_THROW(data::build_poisoned(d, noise_applier(), {4, 0.1}), ConfigError);
  EXPECT_THROW(data::build_poisoned(d, noise_applier(), {0, 1.5}), ConfigError);
}

TEST(Poison, ExportsIndexList) {
  TempDir tmp("poison-idx");
  auto d = data::make_synthetic(4, 30, 8, 1);
  triggers::TriggerApplier trig(triggers::make_patch_trigger(3));
  auto p = data::build_poisoned(d, trig, {2, 0.1, data::LabelMode::Clean, 1});
  data::export_poisoned_indices(p, tmp / "idx.txt");
  std::ifstream in(tmp / "idx.txt");
  std::vector<std::size_t> read;
  for (std::size_t v; in >> v;) read.push_back(v);
  EXPECT_EQ(read, p.poisoned_indices);
}

TEST(Dataset, HoldoutSplitPartitionsRows) {
  auto d = data::make_synthetic(4, 25, 8, 1);
  auto [rest, held] = data::split_holdout(d, 30, 5);
  EXPECT_EQ(rest.size(), 70u);
  EXPECT_EQ(held.size(), 30u);
  EXPECT_EQ(held.split, data::Split::Val);
  EXPECT_THROW(data::split_holdout(d, 101, 5), ArgumentError);
}

}  // namespace
}  // namespace grond
