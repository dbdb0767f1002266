#include "ffpf/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ffpf/parallel.hpp"
#include "ffpf/random.hpp"

namespace ffpf {
namespace {

using nlohmann::json;

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Bilinearly interpolated random lattice with `cell`-pixel spacing.
std::vector<double> value_noise(int size, int cell, Rng& rng) {
  const int n = size / cell + 2;
  std::vector<double> lattice(static_cast<std::size_t>(n * n));
  for (auto& v : lattice) v = rng.uniform();
  std::vector<double> out(static_cast<std::size_t>(size * size));
  for (int y = 0; y < size; ++y) {
    const double fy = (y + 0.5) / cell;
    const int iy = static_cast<int>(fy);
    const double ty = smoothstep(fy - iy);
    for (int x = 0; x < size; ++x) {
      const double fx = (x + 0.5) / cell;
      const int ix = static_cast<int>(fx);
      const double tx = smoothstep(fx - ix);
      auto at = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy * n + xx)]; };
      const double top = at(iy, ix) * (1 - tx) + at(iy, ix + 1) * tx;
      const double bottom = at(iy + 1, ix) * (1 - tx) + at(iy + 1, ix + 1) * tx;
      out[static_cast<std::size_t>(y * size + x)] = top * (1 - ty) + bottom * ty;
    }
  }
  return out;
}

bool overlaps(const Box& a, const Box& b, float margin) {
  return a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin &&
         b.y1 < a.y2 + margin;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

[[noreturn]] void bad_record(const std::filesystem::path& file, std::size_t line,
                             const std::string& what) {
  throw std::runtime_error(file.string() + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

void SceneSpec::validate() const {
  if (image_size <= 0) throw std::invalid_argument("SceneSpec: image size must be positive");
  if (min_objects < 1 || max_objects < min_objects)
    throw std::invalid_argument("SceneSpec: object count range is empty");
  if (min_object_size < 4 || max_object_size < min_object_size)
    throw std::invalid_argument("SceneSpec: object size range must satisfy 4 <= min <= max");
  if (max_object_size > image_size)
    throw std::invalid_argument("SceneSpec: objects larger than the image");
}

std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t split, std::uint64_t index) {
  return mix_seed(mix_seed(mix_seed(seed) ^ split) ^ index);
}

Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const int size = spec.image_size;
  Scene scene;
  scene.image.width = size;
  scene.image.height = size;

  const std::vector<double> coarse = value_noise(size, std::max(2, size / 4), rng);
  const std::vector<double> fine = value_noise(size, std::max(1, size / 8), rng);
  const double brightness = rng.uniform(-spec.brightness_jitter, spec.brightness_jitter);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(0.8, 1.2);

  std::vector<std::array<double, 3>> canvas(static_cast<std::size_t>(size * size));
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double g = 0.2 + 0.25 * (0.65 * coarse[i] + 0.35 * fine[i]) + brightness;
    for (int c = 0; c < 3; ++c) canvas[i][static_cast<std::size_t>(c)] = g * tint[static_cast<std::size_t>(c)];
  }

  const auto count = static_cast<int>(rng.integer(spec.min_objects, spec.max_objects));
  for (int k = 0; k < count; ++k) {
    const auto kind = static_cast<ShapeKind>(rng.integer(0, SceneSpec::num_classes - 1));
    const auto s = static_cast<int>(rng.integer(spec.min_object_size, spec.max_object_size));
    int w = s;
    int h = s;
    if (kind == ShapeKind::bar) {
      const int long_side = std::max(s, std::min(8, spec.max_object_size));
      const int short_side = std::max(4, long_side / 3);
      const bool horizontal = rng.uniform() < 0.5;
      w = horizontal ? long_side : short_side;
      h = horizontal ? short_side : long_side;
    }
    std::array<double, 3> color{};
    for (auto& c : color) c = rng.uniform(0.6, 1.0);

    // Placement is retried a bounded number of times; crowded scenes keep fewer objects.
    for (int attempt = 0; attempt < 100; ++attempt) {
      const auto x0 = static_cast<int>(rng.integer(0, size - w));
      const auto y0 = static_cast<int>(rng.integer(0, size - h));
      const Box box{static_cast<float>(x0), static_cast<float>(y0), static_cast<float>(x0 + w),
                    static_cast<float>(y0 + h)};
      bool clear = true;
      for (const auto& o : scene.objects) clear = clear && !overlaps(box, o.box, 1.0f);
      if (!clear) continue;
      const double cx = x0 + w / 2.0;
      const double cy = y0 + h / 2.0;
      const double r2 = (s / 2.0) * (s / 2.0);
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) {
          if (kind == ShapeKind::disk) {
            const double dx = x + 0.5 - cx;
            const double dy = y + 0.5 - cy;
            if (dx * dx + dy * dy > r2) continue;
          }
          canvas[static_cast<std::size_t>(y * size + x)] = color;
        }
      scene.objects.push_back(GroundTruth{box, static_cast<int>(kind)});
      break;
    }
  }

  scene.image.rgb.resize(static_cast<std::size_t>(size * size * 3));
  for (std::size_t i = 0; i < canvas.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c)
      scene.image.rgb[i * 3 + c] = to_byte(canvas[i][c] + spec.pixel_noise * rng.normal());
  return scene;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()),
            static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::string magic;
  int maxval = 0;
  Image image;
  in >> magic >> image.width >> image.height >> maxval;
  if (!in || magic != "P6" || maxval != 255 || image.width <= 0 || image.height <= 0)
    throw std::runtime_error("'" + path.string() + "' is not an 8-bit binary PPM");
  in.get();
  image.rgb.resize(static_cast<std::size_t>(image.width) * static_cast<std::size_t>(image.height) * 3);
  in.read(reinterpret_cast<char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.rgb.size()))
    throw std::runtime_error("'" + path.string() + "' is truncated");
  return image;
}

void generate_split(const std::filesystem::path& dir, const SceneSpec& spec, int n,
                    std::uint64_t seed, std::uint64_t split) {
  if (n <= 0) throw std::invalid_argument("generate_split: image count must be positive");
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + dir.string() + "': " + ec.message());

  std::vector<std::string> lines(static_cast<std::size_t>(n));
  parallel_for(n, [&](std::int64_t i) {
    const Scene scene = generate_scene(spec, scene_seed(seed, split, static_cast<std::uint64_t>(i)));
    char name[32];
    std::snprintf(name, sizeof name, "%05lld.ppm", static_cast<long long>(i));
    write_ppm(dir / name, scene.image);
    json boxes = json::array();
    for (const auto& o : scene.objects)
      boxes.push_back({std::lround(o.box.x1), std::lround(o.box.y1), std::lround(o.box.x2),
                       std::lround(o.box.y2), o.class_id});
    lines[static_cast<std::size_t>(i)] = nlohmann::ordered_json{{"image", name}, {"boxes", boxes}}.dump();
  });

  std::ofstream out(dir / "annotations.jsonl", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write annotations in '" + dir.string() + "'");
  for (const auto& line : lines) out << line << "\n";
  if (!out) throw std::runtime_error("write failed for annotations in '" + dir.string() + "'");
}

void generate_dataset(const std::filesystem::path& root, const SceneSpec& spec, int n_train,
                      int n_test, std::uint64_t seed) {
  generate_split(root / "train", spec, n_train, seed, 0);
  generate_split(root / "test", spec, n_test, seed, 1);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto index = dir / "annotations.jsonl";
  std::ifstream in(index);
  if (!in) throw std::runtime_error("cannot open '" + index.string() + "'");

  std::vector<Image> images;
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      bad_record(index, line_no, e.what());
    }
    if (!record.contains("image") || !record["image"].is_string() || !record.contains("boxes") ||
        !record["boxes"].is_array())
      bad_record(index, line_no, "expected {\"image\": str, \"boxes\": [...]}");
    const std::string file = record["image"];
    images.push_back(read_ppm(dir / file));
    const Image& img = images.back();
    if (img.width != images.front().width || img.height != images.front().height)
      bad_record(index, line_no, "image size differs from the first image");

    std::vector<GroundTruth> gts;
    for (const auto& b : record["boxes"]) {
      if (!b.is_array() || b.size() != 5) bad_record(index, line_no, "box must be [x1,y1,x2,y2,class]");
      for (const auto& v : b)
        if (!v.is_number()) bad_record(index, line_no, "box fields must be numbers");
      GroundTruth g{Box{b[0].get<float>(), b[1].get<float>(), b[2].get<float>(), b[3].get<float>()},
                    b[4].get<int>()};
      if (!(g.box.width() > 0 && g.box.height() > 0)) bad_record(index, line_no, "zero-area box");
      if (g.box.x1 < 0 || g.box.y1 < 0 || g.box.x2 > static_cast<float>(img.width) ||
          g.box.y2 > static_cast<float>(img.height))
        bad_record(index, line_no, "box leaves the image");
      if (g.class_id < 0) bad_record(index, line_no, "negative class id");
      gts.push_back(g);
    }
    ds.boxes.push_back(std::move(gts));
    ds.files.push_back(file);
  }
  if (images.empty()) throw std::runtime_error("'" + index.string() + "' lists no images");

  const std::int64_t h = images.front().height;
  const std::int64_t w = images.front().width;
  ds.images = Tensor<float>(Shape{static_cast<std::int64_t>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n)
    for (std::int64_t c = 0; c < 3; ++c) {
      float* dst = ds.images.plane(static_cast<std::int64_t>(n), c);
      for (std::int64_t p = 0; p < h * w; ++p)
        dst[p] = normalize_pixel(images[n].rgb[static_cast<std::size_t>(p * 3 + c)]);
    }
  return ds;
}

}  // namespace ffpf
