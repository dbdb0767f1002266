#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ffpf/detect.hpp"
#include "ffpf/tensor.hpp"

namespace ffpf {

enum class ShapeKind { square = 0, disk = 1, bar = 2 };

/// Parameters of the synthetic scene generator. Class ids follow ShapeKind.
struct SceneSpec {
  int image_size = 64;
  int min_objects = 1;
  int max_objects = 6;
  int min_object_size = 4;
  int max_object_size = 10;
  double brightness_jitter = 0.15;
  double pixel_noise = 0.03;

  static constexpr int num_classes = 3;

  /// Throws std::invalid_argument when the ranges are empty or objects cannot fit.
  void validate() const;
};

/// Interleaved 8-bit RGB image, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};

struct Scene {
  Image image;
  std::vector<GroundTruth> objects;
};

/// Deterministic function of (spec, seed).
Scene generate_scene(const SceneSpec& spec, std::uint64_t seed);

/// Seed of image `index` in a split generated from `seed`.
std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t split, std::uint64_t index);

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Writes `n` images named NNNNN.ppm plus annotations.jsonl into `dir` (created if missing).
/// `split` separates the seed streams of train and test data.
void generate_split(const std::filesystem::path& dir, const SceneSpec& spec, int n,
                    std::uint64_t seed, std::uint64_t split);

/// `root/train` and `root/test`.
void generate_dataset(const std::filesystem::path& root, const SceneSpec& spec, int n_train,
                      int n_test, std::uint64_t seed);

/// Loaded split: images normalized to [N, 3, H, W].
struct Dataset {
  Tensor<float> images;
  std::vector<std::vector<GroundTruth>> boxes;
  std::vector<std::string> files;

  std::int64_t size() const { return images.shape().n; }
};

/// Reads annotations.jsonl and the images it names. Rejects malformed records, images of
/// differing sizes and boxes that are empty or leave the image.
Dataset load_dataset(const std::filesystem::path& dir);

/// Maps a byte to the network input range.
inline float normalize_pixel(std::uint8_t v) { return (static_cast<float>(v) / 255.0f - 0.5f) * 4.0f; }

}  // namespace ffpf
