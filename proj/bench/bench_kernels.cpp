// Parallel kernels against their serial references on shapes that occur in
// default-config training. Run with --benchmark_filter to pick a family.

#include <benchmark/benchmark.h>

#include <vector>

#include "helix/kernels.hpp"
#include "helix/rng.hpp"

namespace kn = helix::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  helix::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

using GemmFn = void (*)(bool, bool, kn::index_t, kn::index_t, kn::index_t, const double*, const double*, double*);

template <GemmFn fn>
void bm_gemm(benchmark::State& state) {
  const auto m = state.range(0), n = state.range(1), k = state.range(2);
  const bool ta = state.range(3) & 1, tb = state.range(3) & 2;
  const auto a = random_vec(static_cast<std::size_t>(m * k), 1);
  const auto b = random_vec(static_cast<std::size_t>(k * n), 2);
  std::vector<double> c(static_cast<std::size_t>(m * n));
  for (auto _ : state) {
    fn(ta, tb, m, n, k, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["MAC/s"] = benchmark::Counter(static_cast<double>(m * n * k), benchmark::Counter::kIsIterationInvariantRate);
}

// m, n, k, transpose bits (1: a, 2: b)
void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({32, 1024, 16, 0})->Args({32, 16, 1024, 0})->Args({1024, 16, 32, 1})->Args({16, 1024, 144, 0})
      ->Args({16, 144, 1024, 2})->Args({128, 256, 32, 0})->Args({256, 256, 256, 0});
}

BENCHMARK_TEMPLATE(bm_gemm, kn::gemm)->Name("gemm/parallel")->Apply(gemm_shapes);
BENCHMARK_TEMPLATE(bm_gemm, kn::reference::gemm)->Name("gemm/reference")->Apply(gemm_shapes);

kn::ConvGeometry conv_shape(const benchmark::State& state) {
  kn::ConvGeometry g;
  g.batch = 4;
  g.in_channels = g.out_channels = state.range(0);
  g.in_h = g.in_w = state.range(1);
  g.kernel_h = g.kernel_w = 3;
  g.pad = 1;
  g.groups = 2;
  return g;
}

void conv_shapes(benchmark::internal::Benchmark* b) { b->Args({16, 32})->Args({32, 16})->Args({32, 8}); }

template <bool parallel>
void bm_conv_forward(benchmark::State& state) {
  const auto g = conv_shape(state);
  const auto x = random_vec(static_cast<std::size_t>(g.batch * g.in_channels * g.in_h * g.in_w), 3);
  const auto w = random_vec(static_cast<std::size_t>(g.out_channels * g.in_per_group() * 9), 4);
  const auto bias = random_vec(static_cast<std::size_t>(g.out_channels), 5);
  std::vector<double> y(static_cast<std::size_t>(g.batch * g.out_channels * g.out_h() * g.out_w()));
  for (auto _ : state) {
    if (parallel)
      kn::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    else
      kn::reference::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

BENCHMARK_TEMPLATE(bm_conv_forward, true)->Name("conv_forward/parallel")->Apply(conv_shapes);
BENCHMARK_TEMPLATE(bm_conv_forward, false)->Name("conv_forward/reference")->Apply(conv_shapes);

template <bool parallel>
void bm_conv_backward(benchmark::State& state) {
  const auto g = conv_shape(state);
  const auto nx = static_cast<std::size_t>(g.batch * g.in_channels * g.in_h * g.in_w);
  const auto nw = static_cast<std::size_t>(g.out_channels * g.in_per_group() * 9);
  const auto ny = static_cast<std::size_t>(g.batch * g.out_channels * g.out_h() * g.out_w());
  const auto x = random_vec(nx, 6), w = random_vec(nw, 7), gy = random_vec(ny, 8);
  std::vector<double> gx(nx), gw(nw), gb(static_cast<std::size_t>(g.out_channels));
  for (auto _ : state) {
    if (parallel) {
      kn::conv2d_backward_input(g, w.data(), gy.data(), gx.data());
      kn::conv2d_backward_weight(g, x.data(), gy.data(), gw.data());
      kn::conv2d_backward_bias(g, gy.data(), gb.data());
    } else {
      kn::reference::conv2d_backward_input(g, w.data(), gy.data(), gx.data());
      kn::reference::conv2d_backward_weight(g, x.data(), gy.data(), gw.data());
      kn::reference::conv2d_backward_bias(g, gy.data(), gb.data());
    }
    benchmark::DoNotOptimize(gx.data());
    benchmark::DoNotOptimize(gw.data());
  }
}

BENCHMARK_TEMPLATE(bm_conv_backward, true)->Name("conv_backward/parallel")->Apply(conv_shapes);
BENCHMARK_TEMPLATE(bm_conv_backward, false)->Name("conv_backward/reference")->Apply(conv_shapes);

template <bool parallel>
void bm_softmax(benchmark::State& state) {
  const auto rows = state.range(0), cols = state.range(1);
  const auto x = random_vec(static_cast<std::size_t>(rows * cols), 9);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    if (parallel)
      kn::softmax_rows(rows, cols, x.data(), y.data(), 0.25);
    else
      kn::reference::softmax_rows(rows, cols, x.data(), y.data(), 0.25);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * rows * cols);
}

BENCHMARK_TEMPLATE(bm_softmax, true)->Name("softmax/parallel")->Args({1024, 1024})->Args({4096, 16});
BENCHMARK_TEMPLATE(bm_softmax, false)->Name("softmax/reference")->Args({1024, 1024})->Args({4096, 16});

// batch, tokens, head width
template <bool parallel>
void bm_attention(benchmark::State& state) {
  const auto b = state.range(0), n = state.range(1), d = state.range(2);
  const auto size = static_cast<std::size_t>(b * n * d);
  const auto q = random_vec(size, 10), k = random_vec(size, 11), v = random_vec(size, 12), go = random_vec(size, 13);
  std::vector<double> out(size), gq(size), gk(size), gv(size);
  for (auto _ : state) {
    if (parallel) {
      kn::attention_forward(b, n, n, d, d, q.data(), k.data(), v.data(), 0.25, out.data());
      kn::attention_backward(b, n, n, d, d, q.data(), k.data(), v.data(), 0.25, go.data(), gq.data(), gk.data(),
                             gv.data());
    } else {
      kn::reference::attention_forward(b, n, n, d, d, q.data(), k.data(), v.data(), 0.25, out.data());
      kn::reference::attention_backward(b, n, n, d, d, q.data(), k.data(), v.data(), 0.25, go.data(), gq.data(),
                                        gk.data(), gv.data());
    }
    benchmark::DoNotOptimize(out.data());
    benchmark::DoNotOptimize(gk.data());
  }
}

BENCHMARK_TEMPLATE(bm_attention, true)->Name("attention_fwd_bwd/parallel")->Args({4, 1024, 16})->Args({4, 256, 32});
BENCHMARK_TEMPLATE(bm_attention, false)->Name("attention_fwd_bwd/reference")->Args({4, 1024, 16})->Args({4, 256, 32});

}  // namespace

BENCHMARK_MAIN();
