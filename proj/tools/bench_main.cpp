// Compares the serial reference kernels against the OpenMP variants and
// verifies that they produce identical bits at every size.

#include <chrono>
#include <cstdio>
#include <vector>

#include "repq/kernels.hpp"
#include "repq/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace repq;

namespace {

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

struct Case {
    int64_t B, H, D, IN, OUT, K;
};

template <typename F>
double time_best_of(int reps, F&& fn) {
    double best = 1e30;
    for (int r = 0; r < reps; ++r) {
        double t0 = now_s();
        fn();
        best = std::min(best, now_s() - t0);
    }
    return best;
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("OpenMP enabled, max threads %d\n", omp_get_max_threads());
#else
    std::printf("built without OpenMP; parallel path falls back to serial\n");
#endif
    std::printf("%-28s %12s %12s %8s %9s\n", "case", "serial ms", "parallel ms", "speedup",
                "max|diff|");

    Rng rng(42);
    std::vector<Case> cases = {{8, 16, 16, 16, 16, 3},
                               {8, 16, 16, 16, 32, 3},
                               {4, 32, 32, 32, 32, 3},
                               {2, 64, 64, 16, 16, 3}};
    for (const auto& c : cases) {
        std::vector<float> x(size_t(c.B * c.H * c.D * c.IN)), w(size_t(c.K * c.K * c.IN * c.OUT));
        for (auto& v : x) v = float(rng.uniform(-1, 1));
        for (auto& v : w) v = float(rng.uniform(-1, 1));
        ConvSpec spec{c.K, c.K, c.IN, c.OUT, Padding::Same, 1};
        auto d = kernels::conv_dims({c.B, c.H, c.D, c.IN}, {c.K, c.K, c.IN, c.OUT}, spec);
        std::vector<float> ys(size_t(d.B * d.OH * d.OW * d.OUT)), yp(ys.size());

        kernels::set_parallel(false);
        double ts = time_best_of(3, [&] {
            kernels::conv2d_forward_serial(x.data(), w.data(), ys.data(), d);
        });
        kernels::set_parallel(true);
        double tp = time_best_of(3, [&] {
            kernels::conv2d_forward(x.data(), w.data(), yp.data(), d);
        });
        double md = 0;
        for (size_t i = 0; i < ys.size(); ++i) md = std::max(md, double(std::abs(ys[i] - yp[i])));
        char label[64];
        std::snprintf(label, sizeof label, "conv %lldx%lldx%lld c%lld->%lld",
                      (long long)c.B, (long long)c.H, (long long)c.D, (long long)c.IN,
                      (long long)c.OUT);
        std::printf("%-28s %12.3f %12.3f %8.2f %9.2g\n", label, ts * 1e3, tp * 1e3,
                    ts / (tp > 0 ? tp : 1e-12), md);

        // weight-gradient kernel
        std::vector<float> gy(ys.size());
        for (auto& v : gy) v = float(rng.uniform(-1, 1));
        std::vector<float> gws(w.size()), gwp(w.size());
        kernels::set_parallel(false);
        double tws = time_best_of(3, [&] {
            kernels::conv2d_backward_weight_serial(x.data(), gy.data(), gws.data(), d);
        });
        kernels::set_parallel(true);
        double twp = time_best_of(3, [&] {
            kernels::conv2d_backward_weight(x.data(), gy.data(), gwp.data(), d);
        });
        md = 0;
        for (size_t i = 0; i < gws.size(); ++i)
            md = std::max(md, double(std::abs(gws[i] - gwp[i])));
        std::snprintf(label, sizeof label, "  grad-weight");
        std::printf("%-28s %12.3f %12.3f %8.2f %9.2g\n", label, tws * 1e3, twp * 1e3,
                    tws / (twp > 0 ? twp : 1e-12), md);
    }

    // matmul
    const int64_t M = 256, K = 256, N = 256;
    std::vector<float> a(M * K), b(K * N), cs(M * N), cp(M * N);
    for (auto& v : a) v = float(rng.uniform(-1, 1));
    for (auto& v : b) v = float(rng.uniform(-1, 1));
    kernels::set_parallel(false);
    double ts = time_best_of(3, [&] { kernels::matmul_serial(a.data(), b.data(), cs.data(), M, K, N); });
    kernels::set_parallel(true);
    double tp = time_best_of(3, [&] { kernels::matmul(a.data(), b.data(), cp.data(), M, K, N); });
    double md = 0;
    for (size_t i = 0; i < cs.size(); ++i) md = std::max(md, double(std::abs(cs[i] - cp[i])));
    std::printf("%-28s %12.3f %12.3f %8.2f %9.2g\n", "matmul 256^3", ts * 1e3, tp * 1e3,
                ts / (tp > 0 ? tp : 1e-12), md);
    return 0;
}
