#include <omp.h>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>
#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "bevis/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

bevis::PipelineConfig load_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  bevis::KeyValueConfig kv;
  if (!path.empty()) kv = bevis::KeyValueConfig::load(path);
  if (seed) kv.set("seed", std::to_string(*seed));
  return bevis::PipelineConfig::from_config(kv);
}

void apply_worker_limit() {
  if (const char* env = std::getenv("BEVIS_NUM_WORKERS")) {
    const int n = std::atoi(env);
    if (n < 1) throw std::runtime_error("BEVIS_NUM_WORKERS must be a positive integer");
    omp_set_num_threads(n);
  }
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Tensors are freed and reallocated every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
  CLI::App app{"Bird's-eye-view instance segmentation of indoor point clouds"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value configuration file");
    cmd->add_option("--seed", seed, "overrides the configured seed");
    cmd->add_option("--out", out, "output directory")->required();
  };

  auto* gen = app.add_subcommand("gen", "generate synthetic scenes and a split manifest");
  common(gen);
  std::optional<std::size_t> num_scenes;
  gen->add_option("--scenes", num_scenes, "number of scenes (default from config)");

  auto* train = app.add_subcommand("train", "train one network stage");
  common(train);
  std::string stage, data_dir;
  bool resume = false;
  train->add_option("--stage", stage, "2d or 3d")->required()->check(CLI::IsMember({"2d", "3d"}));
  train->add_option("--data", data_dir, "scene directory written by gen")->required();
  train->add_flag("--resume", resume, "continue from the last saved state");

  auto* infer = app.add_subcommand("infer", "segment scenes with trained checkpoints");
  common(infer);
  std::string ckpt_dir, split = "test";
  std::vector<std::string> scene_files;
  bool render = false;
  infer->add_option("--ckpt", ckpt_dir, "training output directory")->required();
  auto* infer_data = infer->add_option("--data", data_dir, "scene directory with a manifest");
  infer->add_option("--split", split, "manifest split to process (train, val, test or all)");
  auto* infer_scene = infer->add_option("--scene", scene_files, "scene file(s)");
  infer_data->excludes(infer_scene);
  infer->add_flag("--render", render, "also write PPM renders");

  auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
  common(eval);
  std::string pred_dir, gt_dir;
  eval->add_option("--pred", pred_dir, "prediction directory")->required();
  eval->add_option("--gt", gt_dir, "ground-truth scene directory")->required();
  eval->add_option("--split", split, "manifest split to evaluate (train, val, test or all)");

  auto* rend = app.add_subcommand("render", "write PPM renders of a scene");
  common(rend);
  std::string render_scene;
  rend->add_option("--scene", render_scene, "scene file")->required();
  rend->add_option("--ckpt", ckpt_dir, "training output directory for embedding renders");

  CLI11_PARSE(app, argc, argv);

  try {
    apply_worker_limit();
    auto config = load_config(config_path, seed);
    if (*gen) {
      if (num_scenes) config.num_scenes = *num_scenes;
      bevis::cmd_gen(config, out, std::cerr);
    } else if (*train) {
      bevis::cmd_train(stage, config, data_dir, out, {resume}, std::cerr);
    } else if (*infer) {
      std::vector<fs::path> files;
      if (!data_dir.empty()) {
        for (const auto& name : bevis::scenes_in_split(bevis::read_manifest(data_dir), split))
          files.push_back(bevis::scene_path(data_dir, name));
      }
      for (const auto& f : scene_files) files.emplace_back(f);
      if (files.empty()) throw std::runtime_error("infer: no scenes given (use --data or --scene)");
      bevis::cmd_infer(config, ckpt_dir, files, out, {render, true}, std::cerr);
    } else if (*eval) {
      const auto result = bevis::cmd_eval(config, pred_dir, gt_dir, split);
      fs::create_directories(out);
      bevis::write_metrics_csv(fs::path(out) / "metrics.csv", result);
      bevis::print_metrics_table(std::cout, result);
      if (!result.thresholds_met) {
        std::cerr << "eval: configured acceptance thresholds not met\n";
        return 2;
      }
    } else if (*rend) {
      std::optional<bevis::TrainedModels> models;
      if (!ckpt_dir.empty()) models.emplace(bevis::load_models(config, ckpt_dir));
      bevis::cmd_render(config, render_scene, out, models ? &*models : nullptr, std::cerr);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
