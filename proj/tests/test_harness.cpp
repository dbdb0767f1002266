#include <doctest.h>

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <unistd.h>

#include "ffpf/checkpoint.hpp"
#include "ffpf/train.hpp"
#include "oracles.hpp"

using namespace ffpf;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = fs::temp_directory_path() / ("ffpf_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CheckpointErrc parse_error(const std::vector<std::uint8_t>& bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.code();
  }
  FAIL("checkpoint parsed without error");
  return CheckpointErrc::io_error;
}

void rewrite_crc(std::vector<std::uint8_t>& bytes) {
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, bytes.data() + 12, static_cast<uInt>(bytes.size() - 16)));
  std::memcpy(bytes.data() + bytes.size() - 4, &crc, 4);
}

ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::tiny();
  c.num_classes = SceneSpec::num_classes;
  return c;
}

const Dataset& tiny_dataset() {
  static const Dataset data = [] {
    TempDir dir("tiny_data");
    generate_split(dir.path(), SceneSpec{}, 16, 3, 0);
    return load_dataset(dir.path());
  }();
  return data;
}

}  // namespace

TEST_CASE("scene generation is deterministic and seeds differ") {
  const SceneSpec spec;
  const Scene a = generate_scene(spec, 42);
  const Scene b = generate_scene(spec, 42);
  CHECK(a.image.rgb == b.image.rgb);
  CHECK(a.objects.size() == b.objects.size());
  CHECK(generate_scene(spec, 43).image.rgb != a.image.rgb);
  CHECK(scene_seed(0, 0, 1) != scene_seed(0, 1, 1));
  CHECK(scene_seed(0, 0, 1) != scene_seed(0, 0, 2));
  CHECK(scene_seed(0, 0, 1) != scene_seed(1, 0, 1));
}

TEST_CASE("scenes respect the object count, size and bounds over 10k images") {
  const SceneSpec spec;
  int counts[7] = {};
  int classes[3] = {};
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const Scene s = generate_scene(spec, scene_seed(7, 0, i));
    REQUIRE(s.image.width == 64);
    REQUIRE(s.image.rgb.size() == 64u * 64u * 3u);
    const auto n = s.objects.size();
    REQUIRE(n >= 1);
    REQUIRE(n <= 6);
    ++counts[n];
    for (const auto& o : s.objects) {
      REQUIRE(o.box.x1 >= 0.0f);
      REQUIRE(o.box.y1 >= 0.0f);
      REQUIRE(o.box.x2 <= 64.0f);
      REQUIRE(o.box.y2 <= 64.0f);
      REQUIRE(o.box.area() > 0.0);
      REQUIRE(o.box.area() < 0.03 * 64 * 64);
      REQUIRE(o.class_id >= 0);
      REQUIRE(o.class_id < 3);
      ++classes[o.class_id];
    }
  }
  for (int n = 1; n <= 6; ++n) CHECK(counts[n] > 500);
  for (int c : classes) CHECK(c > 5000);
}

TEST_CASE("scene spec validation") {
  SceneSpec spec;
  spec.min_objects = 3;
  spec.max_objects = 2;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = SceneSpec{};
  spec.max_object_size = 100;
  CHECK_THROWS_AS(generate_scene(spec, 0), std::invalid_argument);
}

TEST_CASE("same seed gives byte-identical dataset files") {
  TempDir a("gen_a"), b("gen_b");
  generate_dataset(a.path(), SceneSpec{}, 12, 4, 5);
  generate_dataset(b.path(), SceneSpec{}, 12, 4, 5);
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a.path());
    REQUIRE(fs::exists(b.path() / rel));
    CHECK(read_bytes(e.path()) == read_bytes(b.path() / rel));
    ++files;
  }
  CHECK(files == 12 + 4 + 2);

  const Dataset train = load_dataset(a.path() / "train");
  const Dataset test = load_dataset(a.path() / "test");
  CHECK(train.size() == 12);
  CHECK(test.size() == 4);
  CHECK(train.images.shape() == Shape{12, 3, 64, 64});
  CHECK(test.images.values()[0] != train.images.values()[0]);
}

TEST_CASE("ppm round trip and pixel normalization") {
  TempDir dir("ppm");
  const Scene s = generate_scene(SceneSpec{}, 9);
  write_ppm(dir.path() / "x.ppm", s.image);
  const Image back = read_ppm(dir.path() / "x.ppm");
  CHECK(back.width == s.image.width);
  CHECK(back.rgb == s.image.rgb);
  CHECK(normalize_pixel(0) == -2.0f);
  CHECK(normalize_pixel(255) == 2.0f);
}

TEST_CASE("load_dataset rejects malformed annotations") {
  TempDir dir("bad_ann");
  generate_split(dir.path(), SceneSpec{}, 2, 0, 0);
  auto write = [&](const std::string& text) {
    std::ofstream(dir.path() / "annotations.jsonl") << text;
  };
  write("{\"image\": \"00000.ppm\", \"boxes\": [[1, 1, 70, 5, 0]]}\n");
  CHECK_THROWS(load_dataset(dir.path()));
  write("{\"image\": \"00000.ppm\", \"boxes\": [[1, 1, 1, 5, 0]]}\n");
  CHECK_THROWS(load_dataset(dir.path()));
  write("{\"image\": \"00000.ppm\", \"boxes\": [[1, 1, 4, 5, -1]]}\n");
  CHECK_THROWS(load_dataset(dir.path()));
  write("{\"image\": \"00000.ppm\"\n");
  CHECK_THROWS(load_dataset(dir.path()));
  write("{\"image\": \"00000.ppm\", \"boxes\": [[1, 1, 4, 5, 2]]}\n");
  CHECK(load_dataset(dir.path()).size() == 1);
}

TEST_CASE("learning rate schedule") {
  TrainConfig config;
  for (int e = 1; e <= 8; ++e) CHECK(learning_rate(config, e) == 0.01);
  for (int e = 9; e <= 11; ++e) CHECK(learning_rate(config, e) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(learning_rate(config, 12) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(lr_milestones(12) == std::vector<int>{8, 11});
  CHECK(lr_milestones(24) == std::vector<int>{16, 22});
  CHECK(lr_milestones(6) == std::vector<int>{4});
  CHECK(lr_milestones(1).empty());
  CHECK(lr_milestones(3) == std::vector<int>{2});
}

TEST_CASE("sgd update rule") {
  ParameterStore<double> store;
  auto& p = store.add("w", Tensor<double>({1, 1, 1, 2}, std::vector<double>{1.0, -2.0}));
  Sgd<double> sgd(store, 0.9, 0.1);
  p.grad = Tensor<double>({1, 1, 1, 2}, std::vector<double>{0.5, 0.0});
  sgd.step(0.1);
  // v = g + wd w = (0.6, -0.2); w -= 0.1 v.
  CHECK(p.value[0] == doctest::Approx(0.94));
  CHECK(p.value[1] == doctest::Approx(-1.98));
  sgd.step(0.1);
  // v = 0.9 v + g + wd w.
  CHECK(sgd.velocity("w")[0] == doctest::Approx(0.9 * 0.6 + 0.5 + 0.1 * 0.94));
  CHECK_THROWS_AS(sgd.velocity("missing"), std::out_of_range);

  p.grad = Tensor<double>({1, 1, 1, 2}, std::vector<double>{3.0, 4.0});
  std::vector<Parameter<double>*> params{&p};
  CHECK(clip_grad_norm<double>(params, 1.0) == doctest::Approx(5.0));
  CHECK(p.grad[0] == doctest::Approx(0.6));
  CHECK(p.grad[1] == doctest::Approx(0.8));
  CHECK(clip_grad_norm<double>(params, 0.0) == doctest::Approx(1.0));
}

TEST_CASE("zero epochs leave the model at its initialization") {
  FFPFModel<float> model(tiny_config(), 4);
  FFPFModel<float> fresh(tiny_config(), 4);
  Sgd<float> sgd(model.store(), 0.9, 1e-4);
  TrainState state;
  TrainConfig config;
  config.epochs = 0;
  CHECK(train(model, sgd, state, tiny_dataset(), nullptr, config).empty());
  const Checkpoint a = capture_checkpoint(model, &sgd, state);
  const Checkpoint b = capture_checkpoint(fresh, nullptr, TrainState{});
  for (const auto& t : b.tensors) {
    const NamedTensor* u = a.find(t.name);
    REQUIRE(u != nullptr);
    CHECK(u->data == t.data);
  }
}

TEST_CASE("checkpoint round trip reproduces the forward pass bit for bit") {
  TempDir dir("ckpt");
  FFPFModel<float> model(tiny_config(), 5);
  Sgd<float> sgd(model.store(), 0.9, 1e-4);
  TrainState state;
  TrainConfig config;
  config.epochs = 1;
  config.batch_size = 4;
  train(model, sgd, state, tiny_dataset(), nullptr, config);
  save_checkpoint(dir.path() / "m.ckpt", model, &sgd, state);

  TrainState loaded_state;
  const auto loaded = load_model(dir.path() / "m.ckpt", &loaded_state);
  CHECK(loaded_state.epoch == 1);
  CHECK(loaded_state.step == 4);
  CHECK(loaded->config() == model.config());

  const Tensor<float> images = tiny_dataset().images;
  Tape<float> t1, t2;
  const auto a = model.forward(t1.constant(images), NormMode::eval);
  const auto b = loaded->forward(t2.constant(images), NormMode::eval);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.cls[i].value() == b.cls[i].value());
    CHECK(a.box[i].value() == b.box[i].value());
  }

  FFPFModel<float> other(tiny_config(), 99);
  Sgd<float> other_sgd(other.store(), 0.9, 1e-4);
  TrainState other_state;
  restore_checkpoint(read_checkpoint(dir.path() / "m.ckpt"), other, &other_sgd, &other_state);
  for (const auto* p : model.store().all()) CHECK(other.store().find(p->name)->value == p->value);
  for (const auto* p : sgd.params()) CHECK(other_sgd.velocity(p->name) == sgd.velocity(p->name));
}

TEST_CASE("checkpoint corruption maps to distinct error codes") {
  FFPFModel<float> model(tiny_config(), 6);
  const auto good = serialize_checkpoint(capture_checkpoint(model, nullptr, TrainState{}));
  REQUIRE_NOTHROW(parse_checkpoint(good));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(parse_error(bad_magic) == CheckpointErrc::bad_magic);

  auto bad_version = good;
  bad_version[4] = 7;
  CHECK(parse_error(bad_version) == CheckpointErrc::bad_version);

  auto truncated = good;
  truncated.resize(good.size() / 2);
  CHECK(parse_error(truncated) == CheckpointErrc::truncated);
  truncated.resize(10);
  CHECK(parse_error(truncated) == CheckpointErrc::truncated);

  auto flipped = good;
  flipped[good.size() - 6] ^= 0x40;
  CHECK(parse_error(flipped) == CheckpointErrc::checksum_mismatch);

  Checkpoint two;
  two.tensors.push_back({"aa", {1}, {1.0f}});
  two.tensors.push_back({"ab", {1}, {2.0f}});
  auto dup = serialize_checkpoint(two);
  // Second name starts after header(12) + len(2) + "aa" + rank(1) + dim(8) + payload(4) + len(2).
  dup[12 + 2 + 2 + 1 + 8 + 4 + 2 + 1] = 'a';
  rewrite_crc(dup);
  CHECK(parse_error(dup) == CheckpointErrc::name_collision);
  two.tensors[1].name = "aa";
  CHECK_THROWS_AS(serialize_checkpoint(two), CheckpointError);

  try {
    read_checkpoint("/nonexistent/dir/m.ckpt");
    FAIL("expected an io error");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrc::io_error);
  }

  ModelConfig other_config = tiny_config();
  other_config.fpn_channels = 6;
  FFPFModel<float> other(other_config, 6);
  try {
    restore_checkpoint(parse_checkpoint(good), other);
    FAIL("expected a configuration mismatch");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrc::config_mismatch);
  }

  Checkpoint partial = parse_checkpoint(good);
  std::erase_if(partial.tensors, [](const NamedTensor& t) { return t.name == "head.cls.bias"; });
  try {
    restore_checkpoint(partial, model);
    FAIL("expected a missing tensor");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrc::missing_tensor);
  }

  Checkpoint reshaped = parse_checkpoint(good);
  for (auto& t : reshaped.tensors)
    if (t.name == "head.cls.bias") t.dims = {1, 1, 1, t.data.size()};
  try {
    restore_checkpoint(reshaped, model);
    FAIL("expected a shape mismatch");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrc::shape_mismatch);
  }
}

TEST_CASE("non-finite loss aborts with the step number") {
  FFPFModel<float> model(tiny_config(), 7);
  model.store().at("head.cls.bias").value.fill(std::numeric_limits<float>::quiet_NaN());
  Sgd<float> sgd(model.store(), 0.9, 1e-4);
  TrainState state;
  state.step = 17;
  TrainConfig config;
  config.epochs = 1;
  try {
    train(model, sgd, state, tiny_dataset(), nullptr, config);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.step() == 17);
    CHECK(std::string(e.what()).find("step 17") != std::string::npos);
  }
}

TEST_CASE("training is deterministic under a fixed seed") {
  auto run = [] {
    FFPFModel<float> model(tiny_config(), 8);
    Sgd<float> sgd(model.store(), 0.9, 1e-4);
    TrainState state;
    TrainConfig config;
    config.epochs = 2;
    config.batch_size = 4;
    const auto history = train(model, sgd, state, tiny_dataset(), &tiny_dataset(), config);
    return std::make_pair(serialize_checkpoint(capture_checkpoint(model, &sgd, state)), history);
  };
  const auto [a, ha] = run();
  const auto [b, hb] = run();
  CHECK(a == b);
  REQUIRE(ha.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(ha[i].loss == hb[i].loss);
    const bool same = ha[i].ap50 == hb[i].ap50 || (std::isnan(ha[i].ap50) && std::isnan(hb[i].ap50));
    CHECK(same);
  }
  CHECK(ha[1].lr == 0.01);
}

TEST_CASE("resuming replays the same run") {
  const Dataset& data = tiny_dataset();
  TrainConfig config;
  config.epochs = 2;
  config.batch_size = 4;
  config.eval_every_epoch = false;

  FFPFModel<float> straight(tiny_config(), 10);
  Sgd<float> straight_sgd(straight.store(), 0.9, 1e-4);
  TrainState straight_state;
  train(straight, straight_sgd, straight_state, data, nullptr, config);

  FFPFModel<float> first(tiny_config(), 10);
  Sgd<float> first_sgd(first.store(), 0.9, 1e-4);
  TrainState state;
  TrainConfig one = config;
  one.epochs = 1;
  train(first, first_sgd, state, data, nullptr, one);
  const auto bytes = serialize_checkpoint(capture_checkpoint(first, &first_sgd, state));

  FFPFModel<float> resumed(tiny_config(), 11);
  Sgd<float> resumed_sgd(resumed.store(), 0.9, 1e-4);
  TrainState resumed_state;
  restore_checkpoint(parse_checkpoint(bytes), resumed, &resumed_sgd, &resumed_state);
  train(resumed, resumed_sgd, resumed_state, data, nullptr, config);
  CHECK(resumed_state.step == straight_state.step);
  for (const auto* p : straight.store().all()) CHECK(resumed.store().find(p->name)->value == p->value);
}

TEST_CASE("ablation rows with and without zero-initialized FU share the initial forward") {
  ModelConfig base;
  base.bs_fpn = false;
  base.fu_zero_init = true;
  ModelConfig with_fu = base;
  with_fu.set_fu(true);
  ModelConfig without_fu = base;
  without_fu.set_fu(false);
  FFPFModel<float> a(without_fu, 0);
  FFPFModel<float> b(with_fu, 0);
  const auto images = oracle::random_tensor<float>({2, 3, 64, 64}, 12);
  Tape<float> ta, tb;
  const auto oa = a.forward(ta.constant(images), NormMode::train);
  const auto ob = b.forward(tb.constant(images), NormMode::train);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(oa.cls[i].value() == ob.cls[i].value());
    CHECK(oa.box[i].value() == ob.box[i].value());
  }
}

TEST_CASE("model prediction output is well formed") {
  FFPFModel<float> model(tiny_config(), 13);
  const auto dets = model.predict(tiny_dataset().images);
  REQUIRE(dets.size() == 16);
  for (const auto& img : dets) {
    CHECK(img.size() <= 100);
    for (std::size_t i = 0; i < img.size(); ++i) {
      CHECK(img[i].box.x1 >= 0.0f);
      CHECK(img[i].box.x2 <= 64.0f);
      CHECK(img[i].score > 0.05f);
      if (i > 0) CHECK(img[i - 1].score >= img[i].score);
    }
  }
  CHECK(model.anchors(64, 64).size() == static_cast<std::size_t>((256 + 64 + 16 + 4) * 2));
}
