#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bevis/bev.hpp"
#include "bevis/grouping.hpp"
#include "bevis/knn.hpp"
#include "bevis/losses.hpp"
#include "bevis/pipeline.hpp"
#include "bevis/scene.hpp"
#include "support/bev_checks.hpp"
#include "support/generators.hpp"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace bevis;
using namespace bevis::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fixed(double v, int digits = 3) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s.precision(2);
  s << std::scientific << v;
  return s.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::size_t runs = 0, failures = 0;
  double worst = 0.0;
  std::string worst_case;
  for (const auto& c : gradient_cases()) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const auto r = c.run(seed);
      ++runs;
      const bool ok = r.coords > 0 && r.analytic_norm > 0.0 && r.rel_error < 1e-4 &&
                      r.kink_mismatches == 0 && r.kinks * 4 <= r.coords;
      failures += !ok;
      if (r.rel_error >= worst) {
        worst = r.rel_error;
        worst_case = c.name;
      }
    }
  }
  const double t = seconds(t0);
  Outcome o;
  o.pass = failures == 0 && t < 120.0;
  o.detail = std::to_string(gradient_cases().size()) + " cases x 20 seeds, " + std::to_string(failures) +
             " failures, worst rel error " + sci(worst) + " (" + worst_case + "), " + fixed(t, 1) + " s";
  return o;
}

Outcome zero_loss() {
  const PairLossConfig cfg;
  // Same-instance pairs exactly delta_var apart, nearest cross pairs exactly delta_dist apart.
  std::vector<double> e;
  std::vector<int> ids;
  for (int inst = 0; inst < 3; ++inst)
    for (double off : {0.0, 0.5, 0.25}) {
      e.insert(e.end(), {2.0 * inst + off, 0.0, 0.0});
      ids.push_back(inst);
    }
  const auto exact = instance_loss_2d(Tensor({ids.size(), 3}, e), ids, cfg, 7).total.item();
  std::vector<double> collapsed;
  std::vector<int> cids;
  for (int inst = 0; inst < 5; ++inst)
    for (int k = 0; k < 20; ++k) {
      collapsed.insert(collapsed.end(), {1.5 * inst, 0.0, -1.5 * inst});
      cids.push_back(inst);
    }
  const auto flat = instance_loss_2d(Tensor({cids.size(), 3}, collapsed), cids, cfg, 7).total.item();
  return {exact == 0.0 && flat == 0.0, "boundary embedding " + sci(exact) + ", collapsed " + sci(flat)};
}

Outcome bev_invariants() {
  PipelineConfig cfg;
  cfg.seed = 1234;
  std::size_t bad = 0;
  std::string first;
  for (std::size_t i = 0; i < 100; ++i) {
    PointCloud cloud;
    for (std::size_t attempt = 0;; ++attempt) {
      auto spec = scene_spec_for(cfg, i, attempt);
      spec.ceiling = i % 2 == 0;
      spec.density = 120.0;
      try {
        cloud = generate_scene(spec);
        break;
      } catch (const std::invalid_argument&) {
        if (attempt == 15) throw;
      }
    }
    const auto cut = i % 4 == 0 ? remove_ceiling(cloud).cloud : cloud;
    const auto view = rasterize(cut, cfg.raster);
    const auto r = check_bev_invariants(cut, view);
    if (!r.ok) {
      if (!bad) first = "scene " + std::to_string(i) + ": " + r.message;
      ++bad;
    }
  }
  return {bad == 0, "100 scenes, " + std::to_string(bad) + " violations" + (bad ? " (" + first + ")" : "")};
}

Outcome mean_shift_oracle() {
  std::size_t recovered = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = planted_clusters(seed);
    recovered += same_partition(mean_shift(p.features, p.dim, MeanShiftConfig{}), p.truth);
  }
  const std::vector<double> f{0.0, 0.1, 5.0, 5.1};
  const auto ids = mean_shift(f, 1, MeanShiftConfig{});
  const bool hand = ids == std::vector<int>{0, 0, 1, 1} && ids == hand_mean_shift(f, 1, 1.0, 0.5);
  return {recovered == 50 && hand,
          std::to_string(recovered) + "/50 planted seeds recovered, hand case " + (hand ? "exact" : "differs")};
}

Outcome knn_oracle() {
  std::size_t equal = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    std::vector<double> xyz(3 * 500);
    for (auto& v : xyz) v = uniform(rng, -1.0, 1.0);
    equal += build_knn(xyz, 3, 20).neighbors == brute_force_knn(xyz, 20);
  }
  return {equal == 10, std::to_string(equal) + "/10 clouds of 500 points identical at k=20"};
}

Outcome ap_oracle(const fs::path& gt_dir) {
  std::size_t cases = 0, mismatches = 0, below_optimal = 0;
  for (std::uint64_t seed = 0; seed < 3000; ++seed) {
    Rng rng(seed);
    const std::size_t n = 10 + uniform_index(rng, 51), k = 1 + uniform_index(rng, 3);
    const auto gt = random_toy(rng, n, k, false), pred = random_toy(rng, n, k, true);
    const auto gs = to_segments(gt), ps = to_segments(pred);
    const auto matches = match_matrix(ps, gs);
    for (double t : {0.25, 0.5, 0.75}) {
      ++cases;
      const auto oracle = toy_average_precision(pred, gt, n, k, t);
      const auto hits = greedy_match(ps, gs, matches, t);
      bool same = hits == oracle.hits;
      const auto ap = ap_at_overlap(ps, gs, t, k);
      for (std::size_t c = 0; c < k; ++c) {
        if (ap[c].has_value() == std::isnan(oracle.class_ap[c])) same = false;
        else if (ap[c] && std::abs(*ap[c] - oracle.class_ap[c]) > 1e-12) same = false;
      }
      mismatches += !same;
      const auto greedy = static_cast<std::size_t>(std::count(hits.begin(), hits.end(), true));
      below_optimal += greedy < optimal_matches(pred, gt, n, t);
    }
  }
  const auto self = cmd_eval(PipelineConfig{}, gt_dir, gt_dir, "all");
  bool perfect = self.semantic.miou == 1.0 && self.semantic.oacc == 1.0 && self.semantic.macc == 1.0 &&
                 self.ap.ap == 1.0 && self.ap.ap25 == 1.0 && self.ap.ap50 == 1.0 && self.ap.ap75 == 1.0;
  for (const auto& s : self.scenes)
    perfect = perfect && s.semantic.miou == 1.0 && s.ap.ap == 1.0 && s.ap.ap25 == 1.0;
  return {mismatches == 0 && perfect,
          std::to_string(cases) + " random cases, " + std::to_string(mismatches) + " mismatches, greedy below optimal in " +
              std::to_string(below_optimal) + "; eval(gt,gt) over " + std::to_string(self.scenes.size()) +
              " scenes " + (perfect ? "all 1" : "not 1")};
}

Outcome split_rule() {
  SplitConfig cfg;
  cfg.average_size.assign(kNumClasses, 0.0);
  cfg.average_size[kWall] = 200.0;
  cfg.average_size[kBoard] = 160.0;
  std::vector<int> inst(180, 0), sem(180, kWall);
  std::fill(sem.begin() + 100, sem.end(), kBoard);
  const auto out = split_inconsistent(inst, sem, cfg);
  const std::size_t pieces = std::set<int>(out.begin(), out.end()).size();
  std::size_t stable = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const std::size_t n = 20 + uniform_index(rng, 400);
    std::vector<int> i(n), s(n);
    for (std::size_t p = 0; p < n; ++p) {
      i[p] = static_cast<int>(uniform_index(rng, 5));
      s[p] = static_cast<int>(uniform_index(rng, 3)) == 0 ? kBoard : (uniform01(rng) < 0.7 ? kWall : kChair);
    }
    const auto once = split_inconsistent(i, s, cfg);
    stable += split_inconsistent(once, s, cfg) == once;
  }
  return {pieces == 2 && stable == 1000,
          "wall/window gives " + std::to_string(pieces) + " instances, idempotent on " + std::to_string(stable) + "/1000"};
}

struct RunResult {
  bool ok = false;
  std::string error;
  double gen_s = 0.0, train2d_s = 0.0, train3d_s = 0.0, infer_s = 0.0;
  double ap50 = 0.0, miou = 0.0;
  std::size_t test_scenes = 0;
};

bool run_cli(const std::string& cli, const std::string& args, const fs::path& log, double& elapsed) {
  const auto t0 = Clock::now();
  const std::string cmd = "\"" + cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  elapsed = seconds(t0);
  return rc == 0;
}

RunResult end_to_end(const std::string& cli, const fs::path& root) {
  RunResult r;
  fs::remove_all(root);
  fs::create_directories(root);
  const auto data = root / "data", run = root / "run", pred = root / "pred", eval = root / "eval";
  const auto q = [](const fs::path& p) { return "\"" + p.string() + "\""; };
  struct Step {
    std::string name, args;
    double* seconds;
  };
  double eval_s = 0.0;
  const std::vector<Step> steps{
      {"gen", "gen --out " + q(data), &r.gen_s},
      {"train2d", "train --stage 2d --data " + q(data) + " --out " + q(run), &r.train2d_s},
      {"train3d", "train --stage 3d --data " + q(data) + " --out " + q(run), &r.train3d_s},
      {"infer", "infer --ckpt " + q(run) + " --data " + q(data) + " --split test --out " + q(pred), &r.infer_s},
      {"eval", "eval --pred " + q(pred) + " --gt " + q(data) + " --split test --out " + q(eval), &eval_s},
  };
  for (const auto& s : steps) {
    std::cout << "  " << root.filename().string() << ": " << s.name << "..." << std::flush;
    const bool ok = run_cli(cli, s.args, root / (s.name + ".log"), *s.seconds);
    std::cout << " " << fixed(*s.seconds, 1) << " s" << std::endl;
    if (!ok) {
      r.error = s.name + " failed, see " + (root / (s.name + ".log")).string();
      return r;
    }
  }
  std::ifstream csv(eval / "metrics.csv");
  std::string line;
  while (std::getline(csv, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    if (cols.size() != 8 || cols[0] == "scene") continue;
    if (cols[0] == "all") {
      r.miou = std::stod(cols[1]);
      r.ap50 = std::stod(cols[6]);
    } else {
      ++r.test_scenes;
    }
  }
  r.ok = true;
  return r;
}

std::vector<std::string> differing_outputs(const fs::path& a, const fs::path& b) {
  std::vector<std::string> diff;
  std::set<std::string> names;
  for (const auto& dir : {a / "pred", b / "pred"})
    for (const auto& e : fs::directory_iterator(dir)) names.insert(e.path().filename().string());
  for (const auto& n : names)
    if (!fs::exists(a / "pred" / n) || !fs::exists(b / "pred" / n) ||
        read_file(a / "pred" / n) != read_file(b / "pred" / n))
      diff.push_back(n);
  if (read_file(a / "eval" / "metrics.csv") != read_file(b / "eval" / "metrics.csv")) diff.push_back("metrics.csv");
  return diff;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string cli, work;
  app.add_option("--cli", cli, "path to the bevis executable")->required();
  app.add_option("--work", work, "scratch directory")->required();
  CLI11_PARSE(app, argc, argv);

  std::size_t failed = 0;
  auto report = [&](const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failed += !o.pass;
  };
  auto guarded = [&](const std::string& name, const std::function<Outcome()>& f) {
    try {
      report(name, f());
    } catch (const std::exception& e) {
      report(name, {false, std::string("exception: ") + e.what()});
    }
  };

  const fs::path root = fs::absolute(work);
  fs::create_directories(root);

  guarded("gradient suite", gradient_suite);
  guarded("loss zero case", zero_loss);
  guarded("bev invariants", bev_invariants);
  guarded("mean-shift oracle", mean_shift_oracle);
  guarded("knn oracle", knn_oracle);
  guarded("split rule", split_rule);

  RunResult first;
  try {
    first = end_to_end(cli, root / "run1");
  } catch (const std::exception& e) {
    first.error = e.what();
  }
  guarded("ap oracle", [&]() -> Outcome {
    if (!fs::exists(root / "run1" / "data" / "manifest.txt") && !first.ok) return {false, "no generated scenes: " + first.error};
    return ap_oracle(root / "run1" / "data");
  });
  if (!first.ok) {
    report("end-to-end run", {false, first.error});
  } else {
    const bool ok = first.train2d_s <= 300.0 && first.train3d_s <= 600.0 && first.ap50 >= 0.9 &&
                    first.miou >= 0.85 && first.test_scenes == 4;
    report("end-to-end run",
           {ok, "40 scenes, stage-2d " + fixed(first.train2d_s, 1) + " s (limit 300), stage-3d " +
                    fixed(first.train3d_s, 1) + " s (limit 600), " + std::to_string(first.test_scenes) +
                    " test scenes AP50 " + fixed(first.ap50, 4) + " (>= 0.9) mIoU " + fixed(first.miou, 4) +
                    " (>= 0.85)"});
  }

  RunResult second;
  try {
    second = end_to_end(cli, root / "run2");
  } catch (const std::exception& e) {
    second.error = e.what();
  }
  if (!first.ok || !second.ok) {
    report("determinism", {false, "a run failed: " + (first.ok ? second.error : first.error)});
  } else {
    const auto diff = differing_outputs(root / "run1", root / "run2");
    std::string detail = diff.empty() ? "prediction files and metrics.csv bit-identical across two full runs"
                                      : std::to_string(diff.size()) + " outputs differ, first " + diff.front();
    report("determinism", {diff.empty(), detail});
  }

  std::cout << (failed ? "acceptance: " + std::to_string(failed) + " criteria failed" : "acceptance: all criteria passed")
            << std::endl;
  return failed ? 1 : 0;
}
