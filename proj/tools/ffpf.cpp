#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ffpf/checkpoint.hpp"
#include "ffpf/dataset.hpp"
#include "ffpf/fft.hpp"
#include "ffpf/grad_check.hpp"
#include "ffpf/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ffpf;

namespace {

json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json epoch_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"lr", m.lr},
          {"loss", m.loss},
          {"classification", m.classification},
          {"regression", m.regression},
          {"ap50", nan_to_null(m.ap50)},
          {"seconds", m.seconds}};
}

void print_epoch(const EpochMetrics& m) {
  std::printf("epoch %2d  lr %.5f  loss %.5f (cls %.5f, box %.5f)  AP@0.5 %.4f  %.1fs\n", m.epoch,
              m.lr, m.loss, m.classification, m.regression, m.ap50, m.seconds);
  std::fflush(stdout);
}

std::ofstream open_jsonl(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

// DIR/train and DIR/test when present, otherwise DIR alone.
fs::path split_dir(const fs::path& root, const char* split) {
  return fs::exists(root / split / "annotations.jsonl") ? root / split : root;
}

struct ModelFlags {
  bool no_fu = false;
  bool no_bsfpn = false;
  double anchor_scale = ModelConfig{}.anchor_base_scale;

  ModelConfig config() const {
    ModelConfig c;
    c.set_fu(!no_fu);
    c.bs_fpn = !no_bsfpn;
    c.anchor_base_scale = anchor_scale;
    return c;
  }
};

void add_train_flags(CLI::App* cmd, TrainConfig& tc) {
  cmd->add_option("--epochs", tc.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--lr", tc.lr, "Initial learning rate")->capture_default_str();
  cmd->add_option("--seed", tc.seed, "Seed for initialization and data order")->capture_default_str();
  cmd->add_option("--batch", tc.batch_size, "Images per step")->capture_default_str();
  cmd->add_option("--momentum", tc.momentum)->capture_default_str();
  cmd->add_option("--weight-decay", tc.weight_decay)->capture_default_str();
  cmd->add_option("--grad-clip", tc.grad_clip, "Global gradient norm bound, 0 to disable")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-aware feature pyramid detector: data generation, training and checks"};
  app.require_subcommand(1);

  // gen-data
  fs::path gen_out;
  int gen_n = 2000;
  int gen_n_test = -1;
  std::uint64_t gen_seed = 0;
  SceneSpec spec;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic small-object dataset");
  gen->add_option("--out", gen_out, "Output directory (gets train/ and test/)")->required();
  gen->add_option("--n", gen_n, "Training images")->capture_default_str();
  gen->add_option("--n-test", gen_n_test, "Test images (default n/4)");
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--size", spec.image_size, "Image side in pixels")->capture_default_str();

  // train
  fs::path train_data;
  fs::path train_out;
  fs::path train_resume;
  TrainConfig train_cfg;
  ModelFlags train_model;
  auto* tr = app.add_subcommand("train", "Train a detector and write a checkpoint");
  tr->add_option("--data", train_data, "Dataset directory")->required();
  tr->add_option("--out", train_out, "Checkpoint path")->required();
  tr->add_option("--resume", train_resume, "Continue from this checkpoint");
  add_train_flags(tr, train_cfg);
  tr->add_flag("--no-fu", train_model.no_fu, "Disable Fourier Units in the backbone");
  tr->add_flag("--no-bsfpn", train_model.no_bsfpn, "Use a plain FPN neck");
  tr->add_option("--anchor-scale", train_model.anchor_scale, "Anchor side / level stride")
      ->capture_default_str();

  // eval
  fs::path eval_data;
  fs::path eval_ckpt;
  fs::path eval_dump;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint (AP@0.5)");
  ev->add_option("--data", eval_data, "Dataset directory")->required();
  ev->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  ev->add_option("--dump", eval_dump, "Write detections as text lines");

  // ablate
  fs::path ablate_data;
  fs::path ablate_out;
  TrainConfig ablate_cfg;
  double ablate_anchor = ModelConfig{}.anchor_base_scale;
  auto* ab = app.add_subcommand("ablate", "Train the four ablation configurations");
  ab->add_option("--data", ablate_data, "Dataset directory")->required();
  ab->add_option("--out", ablate_out, "Table path; JSON lines go next to it")->required();
  add_train_flags(ab, ablate_cfg);
  ab->add_option("--anchor-scale", ablate_anchor)->capture_default_str();

  // grad-check
  std::string gc_config = "tiny";
  std::uint64_t gc_seed = 0;
  fs::path gc_json = "grad-check.jsonl";
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks in 64-bit");
  gc->add_option("--config", gc_config, "Model size")->check(CLI::IsMember({"tiny"}))
      ->capture_default_str();
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--json", gc_json, "JSON lines output")->capture_default_str();

  // bench-fft
  std::vector<int> bench_sizes{8, 16, 32, 64};
  int bench_channels = 16;
  int bench_batch = 8;
  int bench_reps = 20;
  fs::path bench_json = "bench-fft.jsonl";
  auto* bf = app.add_subcommand("bench-fft", "Time forward and inverse 2-D real FFTs");
  bf->add_option("--sizes", bench_sizes, "Square sizes")->delimiter(',')->capture_default_str();
  bf->add_option("--channels", bench_channels)->capture_default_str();
  bf->add_option("--batch", bench_batch)->capture_default_str();
  bf->add_option("--reps", bench_reps)->capture_default_str();
  bf->add_option("--json", bench_json, "JSON lines output")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      if (gen_n_test < 0) gen_n_test = std::max(1, gen_n / 4);
      generate_dataset(gen_out, spec, gen_n, gen_n_test, gen_seed);
      std::printf("wrote %d training and %d test images to %s\n", gen_n, gen_n_test,
                  gen_out.c_str());
      auto out = open_jsonl(gen_out / "gen-data.jsonl");
      out << json{{"train", gen_n}, {"test", gen_n_test}, {"seed", gen_seed},
                  {"size", spec.image_size}}.dump()
          << "\n";
    } else if (*tr) {
      const Dataset train_set = load_dataset(split_dir(train_data, "train"));
      std::optional<Dataset> test_set;
      if (fs::exists(train_data / "test" / "annotations.jsonl"))
        test_set = load_dataset(train_data / "test");
      std::optional<Checkpoint> resume;
      if (!train_resume.empty()) resume = read_checkpoint(train_resume);
      FFPFModel<float> model(resume ? checkpoint_config(*resume) : train_model.config(),
                             train_cfg.seed);
      Sgd<float> sgd(model.store(), train_cfg.momentum, train_cfg.weight_decay);
      TrainState state;
      if (resume) restore_checkpoint(*resume, model, &sgd, &state);
      auto log = open_jsonl(fs::path(train_out).concat(".metrics.jsonl"));
      train(model, sgd, state, train_set, test_set ? &*test_set : nullptr, train_cfg,
            [&](const EpochMetrics& m) {
              print_epoch(m);
              log << epoch_json(m).dump() << "\n" << std::flush;
            });
      save_checkpoint(train_out, model, &sgd, state);
      std::printf("saved %s\n", train_out.c_str());
    } else if (*ev) {
      const auto model = load_model(eval_ckpt);
      const Dataset data = load_dataset(split_dir(eval_data, "test"));
      std::vector<std::vector<BoxDetection>> dets;
      const MapResult r = evaluate(*model, data, 16, &dets);
      json record{{"images", data.size()}, {"map50", r.map}};
      for (std::size_t k = 0; k < r.ap.size(); ++k) {
        std::printf("class %zu  AP@0.5 %.4f  (%lld objects)\n", k, r.ap[k],
                    static_cast<long long>(r.gt_count[k]));
        record["ap50"].push_back(nan_to_null(r.ap[k]));
      }
      std::printf("mAP@0.5 %.4f over %lld images\n", r.map, static_cast<long long>(data.size()));
      if (!eval_dump.empty()) {
        std::ofstream dump(eval_dump);
        if (!dump) throw std::runtime_error("cannot write '" + eval_dump.string() + "'");
        write_detection_dump(dump, dets);
      }
      auto out = open_jsonl(fs::path(eval_ckpt).concat(".eval.jsonl"));
      out << record.dump() << "\n";
    } else if (*ab) {
      const Dataset train_set = load_dataset(split_dir(ablate_data, "train"));
      const Dataset test_set = load_dataset(split_dir(ablate_data, "test"));
      ModelConfig base;
      base.anchor_base_scale = ablate_anchor;
      auto jsonl = open_jsonl(fs::path(ablate_out).replace_extension(".jsonl"));
      const auto rows = ablate(
          train_set, test_set, base, ablate_cfg,
          [&](const AblationRow& r) {
            json hist = json::array();
            for (const auto& m : r.history) hist.push_back(epoch_json(m));
            jsonl << json{{"configuration", r.name}, {"fu", r.fu}, {"bs_fpn", r.bs_fpn},
                          {"ap50", r.ap50}, {"final_loss", r.final_loss},
                          {"seconds", r.seconds}, {"epochs", hist}}.dump()
                  << "\n" << std::flush;
            std::printf("%s: AP@0.5 %.4f (%.0fs)\n", r.name.c_str(), r.ap50, r.seconds);
          },
          print_epoch);
      const std::string table = format_ablation_table(rows);
      std::ofstream(ablate_out) << table;
      std::printf("\n%s", table.c_str());
    } else if (*gc) {
      const GradCheckReport report = grad_check_suite(ModelConfig::tiny(), gc_seed);
      std::printf("%s", report.format().c_str());
      std::printf("%s in %.1fs\n", report.passed() ? "all checks passed" : "CHECKS FAILED",
                  report.seconds);
      auto out = open_jsonl(gc_json);
      for (const auto& e : report.entries)
        out << json{{"check", e.name}, {"max_rel_error", e.result.max_rel_error},
                    {"max_elementwise_error", e.result.max_elementwise_error},
                    {"threshold", e.threshold}, {"probes", e.result.checked},
                    {"skipped", e.result.skipped}, {"passed", e.passed()}}.dump()
            << "\n";
      return report.passed() ? 0 : 1;
    } else if (*bf) {
      auto out = open_jsonl(bench_json);
      std::printf("size   forward ms  inverse ms  (batch %d x %d channels, %d reps)\n", bench_batch,
                  bench_channels, bench_reps);
      for (int n : bench_sizes) {
        Tensor<float> x(Shape{bench_batch, bench_channels, n, n});
        Rng rng(static_cast<std::uint64_t>(n));
        for (auto& v : x.values()) v = static_cast<float>(rng.normal());
        using clock = std::chrono::steady_clock;
        auto t0 = clock::now();
        fft::SpectrumData<float> s;
        for (int r = 0; r < bench_reps; ++r) s = fft::rfft2(x);
        auto t1 = clock::now();
        Tensor<float> y;
        for (int r = 0; r < bench_reps; ++r) y = fft::irfft2(s);
        auto t2 = clock::now();
        const double fwd = std::chrono::duration<double, std::milli>(t1 - t0).count() / bench_reps;
        const double inv = std::chrono::duration<double, std::milli>(t2 - t1).count() / bench_reps;
        std::printf("%-5d  %10.3f  %10.3f\n", n, fwd, inv);
        out << json{{"size", n}, {"forward_ms", fwd}, {"inverse_ms", inv},
                    {"batch", bench_batch}, {"channels", bench_channels}}.dump()
            << "\n";
      }
    }
  } catch (const NonFiniteLoss& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 10 + static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
