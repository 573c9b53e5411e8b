#include "ks/keyed_transform.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "ks/rng.hpp"

namespace ks {

PermutationVector::PermutationVector(int block_size, std::vector<std::uint32_t> entries)
    : block_size_(block_size), entries_(std::move(entries)) {
  if (block_size_ < 1) throw DimensionError("block size must be >= 1");
  const std::size_t n = 3 * static_cast<std::size_t>(block_size_) * block_size_;
  if (entries_.size() != n)
    throw DimensionError("permutation length " + std::to_string(entries_.size()) +
                         " != 3*M^2 = " + std::to_string(n));
  std::vector<bool> seen(n, false);
  for (auto e : entries_) {
    if (e >= n || seen[e]) throw DimensionError("permutation entries are not a bijection");
    seen[e] = true;
  }
}

PermutationVector PermutationVector::identity(int block_size) {
  if (block_size < 1) throw DimensionError("block size must be >= 1");
  std::vector<std::uint32_t> v(3 * static_cast<std::size_t>(block_size) * block_size);
  std::iota(v.begin(), v.end(), 0u);
  return {block_size, std::move(v)};
}

PermutationVector PermutationVector::inverse() const {
  std::vector<std::uint32_t> inv(entries_.size());
  for (std::size_t k = 0; k < entries_.size(); ++k) inv[entries_[k]] = static_cast<std::uint32_t>(k);
  return {block_size_, std::move(inv)};
}

PermutationVector derive_permutation(const SecretKey& key, int block_size) {
  if (block_size < 1) throw DimensionError("block size must be >= 1");
  std::vector<std::uint32_t> v(3 * static_cast<std::size_t>(block_size) * block_size);
  std::iota(v.begin(), v.end(), 0u);
  SplitMix64 rng(key.seed);
  for (std::size_t i = v.size() - 1; i >= 1; --i) {
    const std::size_t j = rng.next() % (i + 1);
    std::swap(v[i], v[j]);
  }
  return {block_size, std::move(v)};
}

namespace detail {
void check_block_alignment(int channels, int height, int width, const PermutationVector& perm) {
  const int m = perm.block_size();
  if (m < 1) throw DimensionError("empty permutation");
  if (channels != 3) throw DimensionError("block shuffling needs 3 channels, got " + std::to_string(channels));
  if (height % m != 0 || width % m != 0)
    throw DimensionError("image " + std::to_string(height) + "x" + std::to_string(width) +
                         " is not divisible by block size " + std::to_string(m));
}
}  // namespace detail

namespace {
ImageU8 apply(const ImageU8& image, const PermutationVector& perm, bool inverse) {
  ImageU8 out(image.height, image.width, image.channels);
  permute_blocks<std::uint8_t>(image.pixels, out.pixels, image.channels, image.height, image.width,
                               perm, inverse);
  return out;
}
}  // namespace

ImageU8 shuffle_image(const ImageU8& image, const PermutationVector& perm) {
  return apply(image, perm, false);
}

ImageU8 unshuffle_image(const ImageU8& image, const PermutationVector& perm) {
  return apply(image, perm, true);
}

LabeledImages encrypt_dataset(const LabeledImages& dataset, const SecretKey& key, int block_size) {
  const auto perm = derive_permutation(key, block_size);
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const auto& img = dataset.images[i];
    try {
      detail::check_block_alignment(img.channels, img.height, img.width, perm);
    } catch (const DimensionError& e) {
      throw DimensionError("image " + std::to_string(i) + ": " + e.what());
    }
  }
  LabeledImages out;
  out.labels = dataset.labels;
  out.images.reserve(dataset.images.size());
  for (const auto& img : dataset.images) out.images.push_back(shuffle_image(img, perm));
  return out;
}

std::vector<SecretKey> read_key_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open key file " + path.string());
  std::vector<SecretKey> keys;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    std::uint64_t seed = 0;
    const char* b = line.data() + first;
    const char* e = line.data() + last + 1;
    auto [ptr, ec] = std::from_chars(b, e, seed);
    if (ec != std::errc{} || ptr != e)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": not a decimal u64");
    keys.push_back({seed});
  }
  return keys;
}

void write_key_file(const std::filesystem::path& path, std::span<const SecretKey> keys) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write key file " + path.string());
  for (const auto& k : keys) out << k.seed << '\n';
}

std::vector<SecretKey> generate_keys(std::size_t count, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::unordered_set<std::uint64_t> seen;
  std::vector<SecretKey> keys;
  while (keys.size() < count) {
    const auto s = rng.next();
    if (seen.insert(s).second) keys.push_back({s});
  }
  return keys;
}

}  // namespace ks
