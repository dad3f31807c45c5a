#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "kpal/ops.hpp"
#include "kpal/rng.hpp"
#include "kpal/tensor.hpp"

using namespace kpal;

namespace {

// Central finite-difference check in double ("verify64") precision.
// builder must construct a scalar loss from the given inputs; it is invoked
// once under a tape for autodiff and repeatedly without one for the
// perturbed evaluations.
using Builder = std::function<Tensor<double>(Tape<double>*,
                                             std::vector<Tensor<double>>&)>;

void fd_check(const Builder& builder, std::vector<Tensor<double>> inputs,
              double tol = 1e-5, double eps = 1e-4) {
  Tape<double> tape;
  for (auto& in : inputs) in.set_requires_grad(true);
  auto loss = builder(&tape, inputs);
  REQUIRE(loss.is_scalar());
  tape.backward(loss);

  for (auto& in : inputs) {
    for (std::size_t j = 0; j < in.numel(); ++j) {
      const double orig = in[j];
      in[j] = orig + eps;
      const double lp = builder(nullptr, inputs)[0];
      in[j] = orig - eps;
      const double lm = builder(nullptr, inputs)[0];
      in[j] = orig;
      const double fd = (lp - lm) / (2 * eps);
      const double g = (*in.grad)[j];
      const double err =
          std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)});
      CHECK(err < tol);
      if (err >= tol) return;  // stop flooding on first systematic failure
    }
  }
}

// Reduce an arbitrary tensor to a scalar with fixed random weights so every
// output element influences the loss.
Tensor<double> weighted_sum(Tape<double>* tp, const Tensor<double>& x,
                            std::uint64_t seed) {
  Rng rng(seed);
  auto w = Tensor<double>::zeros(x.shape);
  for (auto& v : *w.data) v = rng.uniform(-1.0, 1.0);
  return sum_all(tp, mul(tp, x, w));
}

Tensor<double> rand_t(const Shape& s, Rng& rng, double sd = 1.0) {
  return Tensor<double>::randn(s, rng, sd);
}

// Keep values away from the ReLU kink so central differences are valid.
Tensor<double> rand_nokink(const Shape& s, Rng& rng) {
  auto t = rand_t(s, rng);
  for (auto& v : *t.data)
    if (std::abs(v) < 0.05) v += (v >= 0 ? 0.1 : -0.1);
  return t;
}

}  // namespace

TEST_CASE("gradcheck: elementwise and linear algebra ops") {
  for (int it = 0; it < 50; ++it) {
    Rng rng(1000 + static_cast<std::uint64_t>(it));
    const int m = 2 + static_cast<int>(rng.uniform_int(3));
    const int k = 2 + static_cast<int>(rng.uniform_int(3));
    const int n = 2 + static_cast<int>(rng.uniform_int(3));

    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, add(tp, in[0], in[1]), 1);
        },
        {rand_t({m, n}, rng), rand_t({m, n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, mul(tp, in[0], in[1]), 2);
        },
        {rand_t({m, n}, rng), rand_t({m, n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, scale(tp, in[0], 1.7), 3);
        },
        {rand_t({m, n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, matmul(tp, in[0], in[1]), 4);
        },
        {rand_t({m, k}, rng), rand_t({k, n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, linear(tp, in[0], in[1], in[2]), 5);
        },
        {rand_t({m, k}, rng), rand_t({k, n}, rng), rand_t({n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, relu(tp, in[0]), 6);
        },
        {rand_nokink({m, n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, sigmoid(tp, in[0]), 7);
        },
        {rand_t({m, n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, transpose2d(tp, in[0]), 8);
        },
        {rand_t({m, n}, rng)});
  }
}

TEST_CASE("gradcheck: softmax, layer_norm, gather, concat, slices") {
  for (int it = 0; it < 50; ++it) {
    Rng rng(2000 + static_cast<std::uint64_t>(it));
    const int m = 2 + static_cast<int>(rng.uniform_int(3));
    const int n = 4 + static_cast<int>(rng.uniform_int(4));

    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, softmax_rows(tp, in[0]), 11);
        },
        {rand_t({m, n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, layer_norm(tp, in[0], in[1], in[2]), 12);
        },
        {rand_t({m, n}, rng), rand_t({n}, rng, 0.5), rand_t({n}, rng, 0.5)},
        1e-5, 1e-5);
    std::vector<std::size_t> idx;
    for (int i = 0; i < 5; ++i)
      idx.push_back(rng.uniform_int(static_cast<std::uint64_t>(m * n)));
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, gather(tp, in[0], idx), 13);
        },
        {rand_t({m, n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          std::vector<Tensor<double>> parts = {in[0], in[1]};
          return weighted_sum(tp, concat_cols(tp, parts), 14);
        },
        {rand_t({m, n}, rng), rand_t({m, 3}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, slice_cols(tp, in[0], 1, n - 1), 15);
        },
        {rand_t({m, n}, rng)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          auto c = concat_channels(tp, in[0], in[1]);
          return weighted_sum(tp, c, 16);
        },
        {rand_t({1, 2, 3, 3}, rng), rand_t({1, 3, 3, 3}, rng)});
  }
}

TEST_CASE("gradcheck: conv2d / conv_transpose2d across configs") {
  for (int it = 0; it < 50; ++it) {
    Rng rng(3000 + static_cast<std::uint64_t>(it));
    const int groups = 1 + static_cast<int>(rng.uniform_int(2));
    const int cin = groups * (1 + static_cast<int>(rng.uniform_int(2)));
    const int cout = groups * (1 + static_cast<int>(rng.uniform_int(2)));
    const int kk = 2 + static_cast<int>(rng.uniform_int(2));
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int pad = static_cast<int>(rng.uniform_int(2));
    int h = kk + stride * (1 + static_cast<int>(rng.uniform_int(3))) - 2 * pad;
    if (h < kk) h = kk;

    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(
              tp, conv2d(tp, in[0], in[1], in[2], stride, pad, groups), 21);
        },
        {rand_t({1, cin, h, h}, rng),
         rand_t({cout, cin / groups, kk, kk}, rng), rand_t({cout}, rng)});

    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(
              tp, conv_transpose2d(tp, in[0], in[1], in[2], stride, groups),
              22);
        },
        {rand_t({1, cin, 3, 3}, rng),
         rand_t({cin, cout / groups, kk, kk}, rng), rand_t({cout}, rng)});
  }
}

TEST_CASE("gradcheck: bilinear ops") {
  for (int it = 0; it < 50; ++it) {
    Rng rng(4000 + static_cast<std::uint64_t>(it));
    const int h = 2 + static_cast<int>(rng.uniform_int(3));
    const int oh = h + static_cast<int>(rng.uniform_int(5));
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, bilinear_upsample(tp, in[0], oh, oh), 31);
        },
        {rand_t({1, 2, h, h}, rng)});

    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < 4; ++i)
      pts.push_back({rng.uniform(0.0, h - 1.0), rng.uniform(0.0, h - 1.0)});
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return weighted_sum(tp, bilinear_sample(tp, in[0], pts), 32);
        },
        {rand_t({2, h, h}, rng)});
  }
}

TEST_CASE("gradcheck: losses") {
  for (int it = 0; it < 50; ++it) {
    Rng rng(5000 + static_cast<std::uint64_t>(it));
    const int k = 2 + static_cast<int>(rng.uniform_int(3));
    const int hw = 6 + static_cast<int>(rng.uniform_int(10));
    std::vector<int> cells;
    for (int i = 0; i < k; ++i)
      cells.push_back(rng.uniform() < 0.2
                          ? -1
                          : static_cast<int>(rng.uniform_int(
                                static_cast<std::uint64_t>(hw))));
    if (std::all_of(cells.begin(), cells.end(),
                    [](int c) { return c < 0; }))
      cells[0] = 0;
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return spatial_softmax_ce(tp, in[0], cells);
        },
        {rand_t({k, hw}, rng, 2.0)});

    std::vector<double> targets;
    for (int i = 0; i < 12; ++i)
      targets.push_back(rng.uniform() < 0.5 ? 0.0 : 1.0);
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          return bce_with_logits_mean(tp, in[0], targets);
        },
        {rand_t({12}, rng, 2.0)});
  }
}

TEST_CASE("gradcheck: multi_head_attention end to end") {
  for (int it = 0; it < 50; ++it) {
    Rng rng(6000 + static_cast<std::uint64_t>(it));
    const int d = 4, heads = 2, q = 2, t = 3;
    fd_check(
        [&](Tape<double>* tp, std::vector<Tensor<double>>& in) {
          AttentionParams<double> p{in[3], in[4],  in[5],  in[6],
                                    in[7], in[8],  in[9],  in[10]};
          auto res =
              multi_head_attention(tp, in[0], in[1], in[2], heads, p);
          auto a = weighted_sum(tp, res.output, 41);
          auto b = weighted_sum(tp, res.attn, 42);
          auto c = weighted_sum(tp, res.value_proj, 43);
          return add(tp, add(tp, a, b), c);
        },
        {rand_t({q, d}, rng), rand_t({t, d}, rng), rand_t({t, d}, rng),
         rand_t({d, d}, rng, 0.5), rand_t({d}, rng, 0.2),
         rand_t({d, d}, rng, 0.5), rand_t({d}, rng, 0.2),
         rand_t({d, d}, rng, 0.5), rand_t({d}, rng, 0.2),
         rand_t({d, d}, rng, 0.5), rand_t({d}, rng, 0.2)});
  }
}
