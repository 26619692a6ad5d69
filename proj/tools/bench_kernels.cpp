// Times each OpenMP kernel against its serial reference on the shapes the
// model and the retriever actually hit, and verifies the outputs stay
// bitwise identical while doing so.
#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "emorag/kernels.hpp"
#include "emorag/rng.hpp"

using namespace emorag;

namespace {

std::vector<double> random_matrix(std::size_t n, Rng& rng) {
  std::vector<double> m(n);
  for (double& v : m) v = rng.normal();
  return m;
}

double time_of(const std::function<void()>& fn, int reps) {
  fn();  // warm-up, also the output used for verification
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

struct Case {
  std::string name;
  double serial_s = 0.0;
  double parallel_s = 0.0;
  bool bitwise = false;
};

void print_case(const Case& c) {
  std::printf("%-28s serial %10.3f ms   parallel %10.3f ms   speedup %5.2fx   %s\n",
              c.name.c_str(), c.serial_s * 1e3, c.parallel_s * 1e3,
              c.serial_s / c.parallel_s, c.bitwise ? "bitwise equal" : "MISMATCH");
}

Case bench_matmul(int m, int k, int n, int reps, Rng& rng) {
  const std::vector<double> a = random_matrix(static_cast<std::size_t>(m) * k, rng);
  const std::vector<double> b = random_matrix(static_cast<std::size_t>(k) * n, rng);
  std::vector<double> c_serial(static_cast<std::size_t>(m) * n);
  std::vector<double> c_parallel(c_serial.size());

  Case result;
  result.name = "matmul " + std::to_string(m) + "x" + std::to_string(k) + "x" +
                std::to_string(n);
  result.serial_s = time_of(
      [&] { kernels::serial::matmul(a.data(), b.data(), c_serial.data(), m, k, n); },
      reps);
  result.parallel_s = time_of(
      [&] { kernels::matmul(a.data(), b.data(), c_parallel.data(), m, k, n); }, reps);
  result.bitwise = std::memcmp(c_serial.data(), c_parallel.data(),
                               c_serial.size() * sizeof(double)) == 0;
  return result;
}

Case bench_matmul_tn(int m, int k, int n, int reps, Rng& rng) {
  const std::vector<double> a = random_matrix(static_cast<std::size_t>(k) * m, rng);
  const std::vector<double> b = random_matrix(static_cast<std::size_t>(k) * n, rng);
  std::vector<double> c_serial(static_cast<std::size_t>(m) * n, 0.25);
  std::vector<double> c_parallel(c_serial);

  Case result;
  result.name = "matmul_tn_acc " + std::to_string(m) + "x" + std::to_string(k) + "x" +
                std::to_string(n);
  result.serial_s = time_of(
      [&] {
        std::fill(c_serial.begin(), c_serial.end(), 0.25);
        kernels::serial::matmul_tn_acc(a.data(), b.data(), c_serial.data(), m, k, n);
      },
      reps);
  result.parallel_s = time_of(
      [&] {
        std::fill(c_parallel.begin(), c_parallel.end(), 0.25);
        kernels::matmul_tn_acc(a.data(), b.data(), c_parallel.data(), m, k, n);
      },
      reps);
  result.bitwise = std::memcmp(c_serial.data(), c_parallel.data(),
                               c_serial.size() * sizeof(double)) == 0;
  return result;
}

Case bench_dot_scan(std::size_t n, int dim, int reps, Rng& rng) {
  const std::vector<double> vectors = random_matrix(n * static_cast<std::size_t>(dim), rng);
  const std::vector<double> query = random_matrix(static_cast<std::size_t>(dim), rng);
  std::vector<double> sims_serial(n);
  std::vector<double> sims_parallel(n);

  Case result;
  result.name = "dot_scan " + std::to_string(n) + "x" + std::to_string(dim);
  result.serial_s = time_of(
      [&] {
        kernels::serial::dot_scan(vectors.data(), n, dim, query.data(),
                                  sims_serial.data());
      },
      reps);
  result.parallel_s = time_of(
      [&] { kernels::dot_scan(vectors.data(), n, dim, query.data(), sims_parallel.data()); },
      reps);
  result.bitwise = std::memcmp(sims_serial.data(), sims_parallel.data(),
                               n * sizeof(double)) == 0;
  return result;
}

}  // namespace

int main() {
  Rng rng(20240817);
  std::printf("threads: %d\n\n", omp_get_max_threads());

  bool all_bitwise = true;
  std::vector<Case> cases;
  // Model-sized shapes: projections, attention blocks, the prediction head.
  cases.push_back(bench_matmul(128, 64, 64, 200, rng));
  cases.push_back(bench_matmul(32, 256, 64, 200, rng));
  cases.push_back(bench_matmul_tn(64, 128, 64, 200, rng));
  // Training-scale composite and retrieval-scale scans.
  cases.push_back(bench_matmul(512, 512, 512, 5, rng));
  cases.push_back(bench_dot_scan(200, 256, 500, rng));
  cases.push_back(bench_dot_scan(100000, 256, 10, rng));

  for (const Case& c : cases) {
    print_case(c);
    all_bitwise = all_bitwise && c.bitwise;
  }
  std::printf("\n%s\n", all_bitwise
                            ? "all kernels bitwise-match their serial reference"
                            : "kernel outputs diverge from the serial reference");
  return all_bitwise ? 0 : 1;
}
