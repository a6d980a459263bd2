#include <cstdint>
#include <fstream>
#include <vector>

#include "cimlab/data/datasets.hpp"

namespace cimlab::data {

namespace {

std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "idx: cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f),
                                    std::istreambuf_iterator<char>());
}

std::uint32_t read_u32(const std::vector<unsigned char>& b, size_t off, const std::string& path) {
  require(off + 4 <= b.size(),
          "idx: '" + path + "' truncated at byte offset " + std::to_string(off));
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

} // namespace

std::pair<Tensor<float>, std::vector<int>> load_idx(const std::string& images_path,
                                                    const std::string& labels_path) {
  const auto img = read_all(images_path);
  require(!img.empty(), "idx: '" + images_path + "' is empty (error at byte offset 0)");
  require(read_u32(img, 0, images_path) == 0x00000803u,
          "idx: '" + images_path + "' bad image magic at byte offset 0");
  const std::uint32_t n = read_u32(img, 4, images_path);
  const std::uint32_t rows = read_u32(img, 8, images_path);
  const std::uint32_t cols = read_u32(img, 12, images_path);
  const size_t expect = 16 + size_t(n) * rows * cols;
  require(img.size() >= expect, "idx: '" + images_path + "' truncated at byte offset " +
                                    std::to_string(img.size()));

  const auto lab = read_all(labels_path);
  require(!lab.empty(), "idx: '" + labels_path + "' is empty (error at byte offset 0)");
  require(read_u32(lab, 0, labels_path) == 0x00000801u,
          "idx: '" + labels_path + "' bad label magic at byte offset 0");
  const std::uint32_t nl = read_u32(lab, 4, labels_path);
  require(lab.size() >= 8 + size_t(nl),
          "idx: '" + labels_path + "' truncated at byte offset " + std::to_string(lab.size()));
  require(n == nl, "idx: image count " + std::to_string(n) + " != label count " +
                       std::to_string(nl));

  Tensor<float> x({static_cast<int>(n), 1, static_cast<int>(rows), static_cast<int>(cols)});
  for (std::int64_t i = 0; i < x.numel(); ++i)
    x[i] = static_cast<float>(img[16 + static_cast<size_t>(i)]) / 255.0f;
  std::vector<int> labels(n);
  for (std::uint32_t i = 0; i < n; ++i) labels[i] = static_cast<int>(lab[8 + i]);
  return {std::move(x), std::move(labels)};
}

} // namespace cimlab::data
