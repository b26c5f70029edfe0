#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "grond/data/dataset.hpp"

namespace grond::data {

namespace cifar10 {
inline constexpr int kSide = 32;
inline constexpr int kChannels = 3;
inline constexpr std::size_t kImageBytes = kChannels * kSide * kSide;
inline constexpr std::size_t kRecordBytes = 1 + kImageBytes;
inline constexpr std::size_t kPerBatch = 10000;
inline constexpr int kClasses = 10;
}  // namespace cifar10

/// Reads one CIFAR10 binary batch (label byte + 3072 pixel bytes per record)
/// and appends it to `out`.
inline void read_cifar10_batch(const std::filesystem::path& file, std::vector<float>& pixels,
                               std::vector<int>& labels) {
  using namespace cifar10;
  std::error_code ec;
  const auto size = std::filesystem::file_size(file, ec);
  if (ec) throw IngestionError("missing CIFAR10 file '" + file.string() + "'");
  if (size != kPerBatch * kRecordBytes)
    throw IngestionError("CIFAR10 file '" + file.string() + "' has " + std::to_string(size) +
                         " bytes, expected " + std::to_string(kPerBatch * kRecordBytes));
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError("cannot open CIFAR10 file '" + file.string() + "'");
  std::vector<unsigned char> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!in) throw IngestionError("short read on CIFAR10 file '" + file.string() + "'");
  std::vector<std::size_t> counts(kClasses, 0);
  for (std::size_t r = 0; r < kPerBatch; ++r) {
    const unsigned char* rec = buf.data() + r * kRecordBytes;
    if (rec[0] >= kClasses)
      throw IngestionError("CIFAR10 file '" + file.string() + "' record " + std::to_string(r) +
                           " has label " + std::to_string(rec[0]));
    labels.push_back(rec[0]);
    ++counts[rec[0]];
    for (std::size_t i = 0; i < kImageBytes; ++i) pixels.push_back(rec[1 + i] / 255.0f);
  }
  std::size_t total = 0;
  for (auto c : counts) total += c;
  if (total != kPerBatch) throw IngestionError("label count mismatch in '" + file.string() + "'");
}

inline LabeledDataset cifar10_from_files(const std::vector<std::filesystem::path>& files,
                                         Split split) {
  using namespace cifar10;
  std::vector<float> pixels;
  std::vector<int> labels;
  pixels.reserve(files.size() * kPerBatch * kImageBytes);
  for (const auto& f : files) read_cifar10_batch(f, pixels, labels);
  LabeledDataset d;
  d.num_classes = kClasses;
  d.split = split;
  d.images = Tensor({static_cast<int>(labels.size()), kChannels, kSide, kSide}, std::move(pixels));
  d.labels = std::move(labels);
  return d;
}

/// Loads the standard binary distribution: data_batch_{1..5}.bin and
/// test_batch.bin, optionally inside a `cifar-10-batches-bin` subdirectory.
inline std::pair<LabeledDataset, LabeledDataset> load_cifar10(std::filesystem::path root) {
  if (!std::filesystem::exists(root / "data_batch_1.bin") &&
      std::filesystem::exists(root / "cifar-10-batches-bin"))
    root /= "cifar-10-batches-bin";
  std::vector<std::filesystem::path> train_files;
  for (int i = 1; i <= 5; ++i) train_files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
  for (const auto& f : train_files)
    if (!std::filesystem::exists(f)) throw IngestionError("missing CIFAR10 file '" + f.string() + "'");
  const auto test_file = root / "test_batch.bin";
  if (!std::filesystem::exists(test_file))
    throw IngestionError("missing CIFAR10 file '" + test_file.string() + "'");
  return {cifar10_from_files(train_files, Split::Train), cifar10_from_files({test_file}, Split::Test)};
}

}  // namespace grond::data
