// Timing harness comparing the serial reference kernels against the OpenMP
// front doors, and verifying they agree bit for bit while at it.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <vector>

#include "diffwin/kernels.hpp"
#include "diffwin/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int reps) {
  const auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r) fn();
  const auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<double> random_mat(diffwin::Rng& rng, int rows, int cols) {
  std::vector<double> m(static_cast<std::size_t>(rows) * cols);
  for (auto& v : m) v = rng.uniform(-1.0, 1.0);
  return m;
}

}  // namespace

int main() {
  using namespace diffwin;

#ifdef _OPENMP
  std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
  std::printf("openmp: disabled in this build\n");
#endif

  struct Case {
    int m, k, n;
  };
  // Shapes that actually occur in training: packed-batch projections,
  // feed-forward blocks, and a square case for reference.
  const Case cases[] = {{336, 128, 128}, {336, 128, 512}, {336, 512, 128},
                        {1024, 128, 128}, {256, 256, 256}, {64, 32, 64}};

  std::printf("%-18s %10s %10s %8s %10s\n", "case", "serial ms", "omp ms", "speedup",
              "omp gflops");
  Rng rng(1234);
  for (const auto& c : cases) {
    auto a = random_mat(rng, c.m, c.k);
    auto b = random_mat(rng, c.k, c.n);
    std::vector<double> out_s(static_cast<std::size_t>(c.m) * c.n);
    std::vector<double> out_p(out_s.size());

    const int reps = c.m * c.k >= 100000 ? 50 : 200;
    const double ms_s = time_ms(
        [&] { kernels::serial::matmul_nn(c.m, c.k, c.n, a.data(), b.data(), out_s.data()); },
        reps);
    const double ms_p = time_ms(
        [&] { kernels::matmul_nn(c.m, c.k, c.n, a.data(), b.data(), out_p.data()); }, reps);

    if (std::memcmp(out_s.data(), out_p.data(), out_s.size() * sizeof(double)) != 0) {
      std::printf("MISMATCH at %dx%dx%d\n", c.m, c.k, c.n);
      return 1;
    }
    const double gflops = 2.0 * c.m * c.k * c.n / (ms_p * 1e6);
    char name[64];
    std::snprintf(name, sizeof(name), "nn %dx%dx%d", c.m, c.k, c.n);
    std::printf("%-18s %10.3f %10.3f %8.2fx %10.2f\n", name, ms_s, ms_p, ms_s / ms_p, gflops);
  }

  // softmax
  {
    const int rows = 512, cols = 128;
    auto x = random_mat(rng, rows, cols);
    std::vector<double> out_s(x.size()), out_p(x.size());
    const double ms_s = time_ms(
        [&] { kernels::serial::softmax_rows(rows, cols, x.data(), out_s.data()); }, 500);
    const double ms_p =
        time_ms([&] { kernels::softmax_rows(rows, cols, x.data(), out_p.data()); }, 500);
    if (std::memcmp(out_s.data(), out_p.data(), out_s.size() * sizeof(double)) != 0) {
      std::printf("MISMATCH softmax\n");
      return 1;
    }
    std::printf("%-18s %10.3f %10.3f %8.2fx\n", "softmax 512x128", ms_s, ms_p, ms_s / ms_p);
  }
  return 0;
}
