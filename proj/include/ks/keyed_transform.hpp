#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ks/errors.hpp"

namespace ks {

/// Secret key: a 64-bit seed from which the block permutation is derived.
struct SecretKey {
  std::uint64_t seed = 0;

  friend bool operator==(const SecretKey&, const SecretKey&) = default;
};

/// A bijection on {0, ..., 3*M*M - 1}. Entry k names the source position in
/// the flattened block that lands at position k.
class PermutationVector {
 public:
  PermutationVector() = default;
  /// Throws DimensionError unless `entries` is a bijection of length 3*M*M.
  PermutationVector(int block_size, std::vector<std::uint32_t> entries);

  static PermutationVector identity(int block_size);

  int block_size() const { return block_size_; }
  std::size_t size() const { return entries_.size(); }
  std::span<const std::uint32_t> entries() const { return entries_; }
  std::uint32_t operator[](std::size_t k) const { return entries_[k]; }

  PermutationVector inverse() const;

  friend bool operator==(const PermutationVector&, const PermutationVector&) = default;

 private:
  int block_size_ = 0;
  std::vector<std::uint32_t> entries_;
};

/// RGB image, 8 bits per channel, stored channel-major (CHW).
struct ImageU8 {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(int h, int w, int c = 3)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, 0) {}

  std::uint8_t& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::uint8_t at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  friend bool operator==(const ImageU8&, const ImageU8&) = default;
};

struct LabeledImages {
  std::vector<ImageU8> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
};

/// splitmix64 seeded with key.seed, then a descending Fisher-Yates shuffle of
/// the identity with modulo draws. Requires block_size >= 1.
PermutationVector derive_permutation(const SecretKey& key, int block_size);

namespace detail {
void check_block_alignment(int channels, int height, int width, const PermutationVector& perm);
}

/// Applies `out_k = in_{perm[k]}` (or the inverse) to every M x M block of a
/// CHW buffer. Blocks are flattened channel-major, then row, then column.
template <typename Value>
void permute_blocks(std::span<const Value> in, std::span<Value> out, int channels, int height,
                    int width, const PermutationVector& perm, bool inverse = false) {
  detail::check_block_alignment(channels, height, width, perm);
  const int m = perm.block_size();
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  const std::size_t block_len = perm.size();
  std::vector<std::size_t> offsets(block_len);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        offsets[(static_cast<std::size_t>(c) * m + i) * m + j] =
            c * plane + static_cast<std::size_t>(i) * width + j;

  const auto entries = perm.entries();
  for (int by = 0; by < height; by += m) {
    for (int bx = 0; bx < width; bx += m) {
      const std::size_t base = static_cast<std::size_t>(by) * width + bx;
      for (std::size_t k = 0; k < block_len; ++k) {
        if (inverse)
          out[base + offsets[entries[k]]] = in[base + offsets[k]];
        else
          out[base + offsets[k]] = in[base + offsets[entries[k]]];
      }
    }
  }
}

/// Throws DimensionError if the image sides are not multiples of M.
ImageU8 shuffle_image(const ImageU8& image, const PermutationVector& perm);
ImageU8 unshuffle_image(const ImageU8& image, const PermutationVector& perm);

/// Shuffles every image with the permutation of `key`; labels and order are
/// kept. Validates all images before producing output.
LabeledImages encrypt_dataset(const LabeledImages& dataset, const SecretKey& key, int block_size);

/// Key files hold one decimal u64 per line.
std::vector<SecretKey> read_key_file(const std::filesystem::path& path);
void write_key_file(const std::filesystem::path& path, std::span<const SecretKey> keys);

/// Distinct keys drawn from splitmix64(seed).
std::vector<SecretKey> generate_keys(std::size_t count, std::uint64_t seed);

}  // namespace ks
