// Times the OpenMP kernels against their serial reference versions.
#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "bevis/kernels.hpp"
#include "bevis/knn.hpp"
#include "bevis/losses.hpp"
#include "bevis/unet.hpp"

using namespace bevis;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / reps;
}

std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(rng, -1.0, 1.0);
  return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void row(const char* name, double fast, double ref, double diff) {
  std::printf("%-28s %10.3f %10.3f %8.2fx %10.2e\n", name, fast, ref, ref / fast, diff);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%-28s %10s %10s %9s %10s\n", "kernel", "omp ms", "serial ms", "speedup", "max diff");
  Rng rng(1);

  {
    const std::size_t m = 9216, k = 144, n = 32;
    auto a = random_vector(m * k, rng), b = random_vector(k * n, rng);
    std::vector<double> c1(m * n), c2(m * n);
    const double f = time_ms([&] { kernels::gemm_nn(m, n, k, a, b, c1); }, 10);
    const double r = time_ms([&] { kernels::reference::gemm_nn(m, n, k, a, b, c2); }, 3);
    row("gemm_nn 9216x144x32", f, r, max_diff(c1, c2));
  }
  {
    const std::size_t m = 144, k = 9216, n = 32;
    auto a = random_vector(k * m, rng), b = random_vector(k * n, rng);
    std::vector<double> c1(m * n), c2(m * n);
    const double f = time_ms([&] { kernels::gemm_tn(m, n, k, a, b, c1); }, 10);
    const double r = time_ms([&] { kernels::reference::gemm_tn(m, n, k, a, b, c2); }, 3);
    row("gemm_tn 144x32 over 9216", f, r, max_diff(c1, c2));
  }
  {
    const std::size_t h = 96, w = 96, c = 16;
    auto img = random_vector(h * w * c, rng);
    std::vector<double> col1(h * w * 9 * c), col2(col1.size());
    const double f = time_ms([&] { kernels::im2col3x3(img, h, w, c, col1); }, 10);
    const double r = time_ms([&] { kernels::reference::im2col3x3(img, h, w, c, col2); }, 10);
    row("im2col3x3 96x96x16", f, r, max_diff(col1, col2));
  }
  {
    const std::size_t n = 8000, d = 8;
    auto pts = random_vector(n * d, rng);
    std::vector<double> o1(n * d), o2(n * d);
    std::vector<std::size_t> c1(n), c2(n);
    const double f = time_ms([&] { kernels::ball_means(pts, n, d, pts, n, 1.0, o1, c1); }, 2);
    const double r = time_ms([&] { kernels::reference::ball_means(pts, n, d, pts, n, 1.0, o2, c2); }, 1);
    row("ball_means 8000x8", f, r, max_diff(o1, o2));
  }
  {
    const std::size_t n = 1024;
    auto pts = random_vector(n * 3, rng);
    KnnGraph g1, g2;
    const double f = time_ms([&] { g1 = build_knn(pts, 3, 20); }, 10);
    const double r = time_ms([&] { g2 = reference::build_knn(pts, 3, 20); }, 3);
    row("knn 1024 pts k=20", f, r, g1 == g2 ? 0.0 : 1.0);
  }
  {
    UNetConfig cfg;
    InstanceNet2D net(cfg);
    for (std::size_t side : {64, 96}) {
      Tensor x = Tensor::zeros({side, side, kBevChannels});
      for (auto& v : x.mutable_data()) v = uniform01(rng);
      std::vector<int> labels(side * side);
      for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>((i / side) / 16);
      std::vector<double> weights(kNumClasses, 1.0);
      std::vector<int> sem(labels.size(), 0);
      auto params = net.registry().param_tensors();
      const double fwd = time_ms([&] { net.forward(x); }, 2);
      const double step = time_ms([&] {
        zero_grad(params);
        auto out = net.forward(x);
        auto loss = ops::add(instance_loss_2d(out.embedding, labels, {}, 1).total,
                             cross_entropy(out.logits, sem, weights));
        backward(loss);
      }, 2);
      std::printf("unet %zux%zu: forward %.1f ms, forward+backward %.1f ms\n", side, side, fwd, step);
    }
  }
  return 0;
}
