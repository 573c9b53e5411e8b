#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "ks/keyed_transform.hpp"
#include "ks/tensor.hpp"

namespace ks {

/// On-disk dataset: a directory holding `images.bin` and `labels.txt`.
///
/// `images.bin` starts with the magic "KSIMG1" followed by four u32 LE
/// fields (count, height, width, channels) and then count*h*w*c raw bytes,
/// channel-major per image. `labels.txt` has one integer label per line.
inline constexpr const char* kImagesFile = "images.bin";
inline constexpr const char* kLabelsFile = "labels.txt";

std::string encode_images(std::span<const ImageU8> images);
std::vector<ImageU8> decode_images(const std::string& bytes);

void save_dataset(const std::filesystem::path& dir, const LabeledImages& data);

/// Throws FormatError on a bad header or body size and LabelError on a label
/// count mismatch or, when num_classes > 0, a label outside [0, num_classes).
LabeledImages load_dataset(const std::filesystem::path& dir, int num_classes = 0);

/// Images scaled to [0, 1] as a (B, 3, H, W) tensor.
template <typename Scalar>
Tensor<Scalar> to_tensor(std::span<const ImageU8> images) {
  if (images.empty()) return Tensor<Scalar>({0, 3, 0, 0});
  const auto& first = images.front();
  Tensor<Scalar> t({Index(images.size()), first.channels, first.height, first.width});
  const Index per = Index(first.pixels.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].pixels.size() != first.pixels.size() || images[i].height != first.height)
      throw DimensionError("images in one batch must share dimensions");
    for (Index j = 0; j < per; ++j) t[Index(i) * per + j] = Scalar(images[i].pixels[std::size_t(j)]) / Scalar(255);
  }
  return t;
}

/// Inverse of to_tensor for one image, rounding to the nearest level.
ImageU8 to_image(const Tensor<float>& batch, Index index);

/// Quantizes an adversarial image without leaving the budget of `original`:
/// each coordinate's perturbation is truncated toward zero in 1/255 steps.
ImageU8 quantize_toward(const Tensor<float>& perturbed, const Tensor<float>& original, Index index);

/// Deterministic synthetic 10-class set: colored shapes on textured
/// backgrounds, balanced labels.
LabeledImages synthesize_dataset(std::size_t count, int side, std::uint64_t seed, int num_classes = 10);

LabeledImages subset(const LabeledImages& data, std::span<const std::size_t> indices);

}  // namespace ks
