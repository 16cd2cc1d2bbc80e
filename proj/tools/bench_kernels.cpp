#include <omp.h>

#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "relgen/fixture.hpp"
#include "relgen/kernels.hpp"
#include "relgen/retrieval.hpp"
#include "relgen/tokenizer.hpp"

// Times the OpenMP kernels against their serial references and checks that the
// results are bit-identical (the parallel loops only split independent rows).
using namespace relgen;

namespace {

double bench(int reps, const std::function<void()>& fn) {
    fn();  // warm up
    const double t0 = omp_get_wtime();
    for (int r = 0; r < reps; ++r) fn();
    return (omp_get_wtime() - t0) / reps * 1e3;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace

int main() {
    std::printf("threads: %d\n\n", omp_get_max_threads());
    std::printf("%-28s %12s %12s %10s %10s\n", "kernel", "serial ms", "omp ms", "speedup",
                "bitwise");

    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const int m = 256, k = 192, n = 256;
    Mat a(m, k), b(k, n), c_serial(m, n), c_omp(m, n);
    for (auto& x : a.a) x = u(rng);
    for (auto& x : b.a) x = u(rng);

    const double mm_serial =
        bench(5, [&] { kernels::matmul_serial(a, b, c_serial); });
    const double mm_omp = bench(5, [&] { kernels::matmul(a, b, c_omp); });
    std::printf("%-28s %12.3f %12.3f %9.2fx %10s\n", "matmul 256x192x256", mm_serial, mm_omp,
                mm_serial / mm_omp, bits_equal(c_serial.a, c_omp.a) ? "yes" : "NO");

    const auto pairs = fixture::make_pairs(2000, 3);
    const auto index = retrieval::build_index(pairs);
    const auto query = tokenizer::tokenize(pairs[17].description);
    std::vector<double> s_serial, s_omp;
    const double sc_serial =
        bench(20, [&] { s_serial = retrieval::score_all_serial(index, query); });
    const double sc_omp = bench(20, [&] { s_omp = retrieval::score_all(index, query); });
    std::printf("%-28s %12.3f %12.3f %9.2fx %10s\n", "bm25 score_all 2000 docs", sc_serial, sc_omp,
                sc_serial / sc_omp, bits_equal(s_serial, s_omp) ? "yes" : "NO");

    const bool ok = bits_equal(c_serial.a, c_omp.a) && bits_equal(s_serial, s_omp);
    if (!ok) {
        std::fprintf(stderr, "parallel kernels diverged from serial reference\n");
        return 1;
    }
    return 0;
}
