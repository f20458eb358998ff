// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "strattn/gradcheck.hpp"
#include "strattn/mode_attention.hpp"
#include "strattn/naive.hpp"

using namespace strattn;
using testutil::random_tensor;

namespace {

ModeParams<double> random_mode_params(std::size_t per_mode, ModeConfig cfg, std::uint64_t seed) {
  Rng rng(seed);
  return ModeParams<double>::init(per_mode, cfg, rng);
}

}  // namespace

TEST_CASE("spatial masks: zero logits are uniform, saturated logits one-hot") {
  Tensor<double> s({1, 4, 4, 4});
  ModeConfig cfg;
  cfg.groups = 2;
  auto p = random_mode_params(2, cfg, 50);
  std::fill(p.mask_w.begin(), p.mask_w.end(), 0.0);
  auto m = spatial_masks(s, p.mask_w, 2);
  for (std::size_t i = 0; i < m.numel(); ++i)
    CHECK(m[i] == doctest::Approx(1.0 / 16).epsilon(1e-14));

  // a single dominating logit: drive it through the conv input
  Tensor<double> spike({1, 4, 4, 4});
  spike(0, 0, 2, 3) = 50.0;
  p.mask_w(0, 0, 0, 0) = 1.0;
  auto m2 = spatial_masks(spike, p.mask_w, 2);
  CHECK(m2(0, 0, 2, 3) == doctest::Approx(1.0).epsilon(1e-12));
  double rest = 0;
  for (std::size_t i = 0; i < 16; ++i) rest += m2.data()[i];
  CHECK(rest == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("spatial masks match the flatten-softmax oracle") {
  Rng rng(51);
  auto s = random_tensor({2, 6, 4, 5}, rng, -2, 2);
  ModeConfig cfg;
  cfg.groups = 3;
  auto p = random_mode_params(2, cfg, 52);
  auto fast = spatial_masks(s, p.mask_w, 3);
  auto ref = naive::spatial_masks(s, p.mask_w, 3);
  CHECK(max_rel_diff(fast, ref) < 1e-12);
}

TEST_CASE("modal vectors: selection, uniform weights, oracle") {
  Rng rng(53);
  auto s = random_tensor({1, 6, 4, 4}, rng);

  Tensor<double> onehot({1, 2, 4, 4});
  onehot(0, 0, 1, 2) = 1.0;
  onehot(0, 1, 3, 0) = 1.0;
  auto z = modal_vectors(s, onehot, false);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(z(0, 0, c) == s(0, c, 1, 2));
    CHECK(z(0, 1, c) == s(0, 3 + c, 3, 0));
  }

  auto uniform = Tensor<double>::full({1, 2, 4, 4}, 1.0 / 16);
  auto zu = modal_vectors(s, uniform, false);
  auto zm = modal_vectors(s, uniform, true);  // mean-features variant
  CHECK(max_rel_diff(zu, zm) < 1e-12);
  double mean0 = 0;
  for (std::size_t i = 0; i < 16; ++i) mean0 += s.data()[i] / 16.0;
  CHECK(zu(0, 0, 0) == doctest::Approx(mean0).epsilon(1e-13));

  auto masks = random_tensor({1, 2, 4, 4}, rng, 0, 1);
  auto fast = modal_vectors(s, masks, false);
  auto ref = naive::modal_vectors(s, masks, false);
  CHECK(max_rel_diff(fast, ref) < 1e-12);
}

TEST_CASE("mode interaction identities and closed form") {
  Rng rng(54);
  auto single = random_tensor({2, 1, 5}, rng);
  auto r1 = mode_interaction(single);
  CHECK(max_rel_diff(r1.mixed, single) < 1e-15);

  // all modes identical -> mixing is a fixpoint
  Tensor<double> same({1, 3, 4});
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t c = 0; c < 4; ++c) same(0, g, c) = 0.3 * double(c) - 0.2;
  auto r2 = mode_interaction(same);
  CHECK(max_rel_diff(r2.mixed, same) < 1e-14);

  // orthonormal pair: weights are [e/(e+1), 1/(e+1)]
  Tensor<double> ortho({1, 2, 2});
  ortho(0, 0, 0) = 1.0;
  ortho(0, 1, 1) = 1.0;
  auto r3 = mode_interaction(ortho);
  const double e = std::exp(1.0);
  const double w_self = e / (e + 1.0), w_other = 1.0 / (e + 1.0);
  CHECK(r3.weights(0, 0, 0) == doctest::Approx(w_self).epsilon(1e-12));
  CHECK(r3.weights(0, 0, 1) == doctest::Approx(w_other).epsilon(1e-12));
  CHECK(r3.mixed(0, 0, 0) == doctest::Approx(w_self).epsilon(1e-12));
  CHECK(r3.mixed(0, 0, 1) == doctest::Approx(w_other).epsilon(1e-12));

  auto fast = mode_interaction(random_tensor({2, 4, 3}, rng));
  // oracle comparison
  auto modes = random_tensor({2, 4, 3}, rng);
  CHECK(max_rel_diff(mode_interaction(modes).mixed, naive::mode_interaction(modes)) < 1e-12);
}

TEST_CASE("interaction convexity: rows sum to 1 and outputs stay in the hull") {
  Rng rng(55);
  auto modes = random_tensor({2, 4, 3}, rng, -2, 2);
  auto r = mode_interaction(modes);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t g = 0; g < 4; ++g) {
      double sum = 0;
      for (std::size_t j = 0; j < 4; ++j) sum += r.weights(b, g, j);
      CHECK(std::abs(sum - 1.0) <= 1e-12);
      for (std::size_t c = 0; c < 3; ++c) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t j = 0; j < 4; ++j) {
          lo = std::min(lo, modes(b, j, c));
          hi = std::max(hi, modes(b, j, c));
        }
        CHECK(r.mixed(b, g, c) >= lo - 1e-12);
        CHECK(r.mixed(b, g, c) <= hi + 1e-12);
      }
    }
}

TEST_CASE("attention coefficients: symmetry point, G=1 softmax, forced value") {
  Rng rng(56);
  auto s = random_tensor({1, 4, 3, 3}, rng);
  Tensor<double> zero_modes({1, 2, 2});
  auto r = attention_coefficients(s, zero_modes, Gating::sigmoid);
  for (std::size_t i = 0; i < r.numel(); ++i) CHECK(r[i] == 0.5);

  Tensor<double> modes1({1, 1, 4});
  auto r1 = attention_coefficients(s, modes1, Gating::softmax_modes);
  for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(r1[i] == doctest::Approx(1.0));

  // s == z with |z|^2 = ln 3  ->  sigmoid gives exactly 3/4
  Tensor<double> s2({1, 2, 1, 1});
  Tensor<double> z2({1, 1, 2});
  const double v = std::sqrt(std::log(3.0) / 2.0);
  s2(0, 0, 0, 0) = v;
  s2(0, 1, 0, 0) = v;
  z2(0, 0, 0) = v;
  z2(0, 0, 1) = v;
  auto r2 = attention_coefficients(s2, z2, Gating::sigmoid);
  CHECK(r2[0] == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("composed forward matches the naive pipeline across configs") {
  Rng rng(57);
  int combo = 0;
  for (bool interaction : {false, true})
    for (Gating gating : {Gating::sigmoid, Gating::softmax_modes})
      for (bool mean_pool : {false, true})
        for (bool from_input : {false, true})
          for (bool ctx_mixed : {false, true}) {
            ModeConfig cfg;
            cfg.groups = 2;
            cfg.interaction = interaction;
            cfg.gating = gating;
            cfg.mean_pool = mean_pool;
            cfg.masks_from_input = from_input;
            cfg.scaled_inner = (combo % 3 == 0);
            cfg.context_uses_mixed = ctx_mixed;
            auto p = random_mode_params(3, cfg, 58 + std::uint64_t(combo));
            auto s = random_tensor({2, 6, 4, 4}, rng);
            auto src = random_tensor({2, 6, 4, 4}, rng);
            const Tensor<double>* srcp = from_input ? &src : nullptr;
            auto fast = mode_attention_forward(s, p, srcp);
            auto ref = naive::mode_attention(s, p, srcp);
            CHECK(max_rel_diff(fast.out, ref) < 1e-12);
            ++combo;
          }
}

TEST_CASE("zero features flow through unchanged") {
  ModeConfig cfg;
  cfg.groups = 2;
  auto p = random_mode_params(3, cfg, 59);
  std::fill(p.mask_w.begin(), p.mask_w.end(), 0.0);
  Tensor<double> s({1, 6, 4, 4});
  auto r = mode_attention_forward(s, p);
  CHECK(max_abs(r.out) == 0.0);  // Y = r * z with z = 0
}

TEST_CASE("G=1: interaction on and off coincide") {
  Rng rng(60);
  auto s = random_tensor({2, 4, 3, 3}, rng);
  ModeConfig on, off;
  on.groups = off.groups = 1;
  on.interaction = true;
  off.interaction = false;
  auto p_on = random_mode_params(4, on, 61);
  auto p_off = p_on;
  p_off.cfg = off;
  auto a = mode_attention_forward(s, p_on);
  auto b = mode_attention_forward(s, p_off);
  CHECK(max_rel_diff(a.out, b.out) < 1e-14);
}

TEST_CASE("mask normalization and softmax-gating partition of unity") {
  Rng rng(62);
  auto s = random_tensor({2, 8, 5, 5}, rng, -2, 2);
  ModeConfig cfg;
  cfg.groups = 4;
  cfg.gating = Gating::softmax_modes;
  auto p = random_mode_params(2, cfg, 63);
  auto r = mode_attention_forward(s, p);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t g = 0; g < 4; ++g) {
      double sum = 0;
      for (std::size_t i = 0; i < 25; ++i) sum += r.cache.masks.data()[(b * 4 + g) * 25 + i];
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
    for (std::size_t i = 0; i < 25; ++i) {
      double sum = 0;
      for (std::size_t g = 0; g < 4; ++g) sum += r.cache.coeffs.data()[(b * 4 + g) * 25 + i];
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("sigmoid gating is monotone in the inner product") {
  Rng rng(64);
  auto s = random_tensor({1, 4, 2, 2}, rng);
  auto modes = random_tensor({1, 2, 2}, rng);
  auto base = attention_coefficients(s, modes, Gating::sigmoid);
  // nudge pixel (0,0) of group 0 along the modal vector -> r must increase
  auto s2 = s;
  s2(0, 0, 0, 0) += 0.1 * modes(0, 0, 0);
  s2(0, 1, 0, 0) += 0.1 * modes(0, 0, 1);
  auto bumped = attention_coefficients(s2, modes, Gating::sigmoid);
  CHECK(bumped(0, 0, 0, 0) > base(0, 0, 0, 0));
}

TEST_CASE("context slices are rank-1: pixels within a mode are parallel") {
  Rng rng(65);
  auto s = random_tensor({1, 6, 3, 3}, rng);
  ModeConfig cfg;
  cfg.groups = 2;
  auto p = random_mode_params(3, cfg, 66);
  auto r = mode_attention_forward(s, p);
  // Y = out - S; check cross products vanish for pixel pairs within a mode
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t k = i + 1; k < 9; ++k)
        for (std::size_t c = 0; c + 1 < 3; ++c) {
          const double yi_c = r.out.data()[(g * 3 + c) * 9 + i] - s.data()[(g * 3 + c) * 9 + i];
          const double yi_d =
              r.out.data()[(g * 3 + c + 1) * 9 + i] - s.data()[(g * 3 + c + 1) * 9 + i];
          const double yk_c = r.out.data()[(g * 3 + c) * 9 + k] - s.data()[(g * 3 + c) * 9 + k];
          const double yk_d =
              r.out.data()[(g * 3 + c + 1) * 9 + k] - s.data()[(g * 3 + c + 1) * 9 + k];
          CHECK(std::abs(yi_c * yk_d - yi_d * yk_c) < 1e-12);
        }
}

TEST_CASE("backward matches finite differences across the config lattice") {
  Rng rng(67);
  struct Case {
    bool interaction;
    Gating gating;
    bool mean_pool;
    bool from_input;
    bool ctx_mixed;
    bool scaled;
  };
  const Case cases[] = {
      {true, Gating::sigmoid, false, false, true, false},
      {false, Gating::sigmoid, false, false, true, false},
      {true, Gating::softmax_modes, false, false, true, false},
      {true, Gating::sigmoid, false, false, false, false},  // mixing for coefficients only
      {true, Gating::sigmoid, true, false, true, false},
      {true, Gating::sigmoid, false, true, true, true},
  };
  int idx = 0;
  for (const auto& c : cases) {
    ModeConfig cfg;
    cfg.groups = 2;
    cfg.interaction = c.interaction;
    cfg.gating = c.gating;
    cfg.mean_pool = c.mean_pool;
    cfg.masks_from_input = c.from_input;
    cfg.context_uses_mixed = c.ctx_mixed;
    cfg.scaled_inner = c.scaled;
    auto p = random_mode_params(3, cfg, 68 + std::uint64_t(idx));

    auto s = random_tensor({1, 6, 4, 4}, rng);
    auto src = random_tensor({1, 6, 4, 4}, rng);
    auto upstream = random_tensor({1, 6, 4, 4}, rng);
    auto mask_weight = random_tensor({1, 2, 4, 4}, rng);  // extra objective on M

    const Tensor<double>* srcp = c.from_input ? &src : nullptr;
    auto loss = [&] {
      auto r = mode_attention_forward(s, p, srcp);
      return testutil::dot(r.out, upstream) + testutil::dot(r.cache.masks, mask_weight);
    };
    auto r = mode_attention_forward(s, p, srcp);
    auto g = mode_attention_backward(upstream, r.cache, p, &mask_weight);

    std::vector<GradProbe<double>> probes = {
        {"S", &s, &g.features},
        {"mask_w", &p.mask_w, &g.mask_w},
    };
    if (c.from_input) probes.push_back({"mask_source", &src, &g.mask_source});
    auto report = gradcheck<double>(probes, loss, 1e-4);
    INFO("case " << idx << "\n" << format_report(report));
    CHECK(report.pass());
    ++idx;
  }
}

TEST_CASE("zero upstream and zero mask objective zero all gradients") {
  Rng rng(70);
  auto s = random_tensor({1, 6, 3, 3}, rng);
  ModeConfig cfg;
  cfg.groups = 2;
  auto p = random_mode_params(3, cfg, 71);
  auto r = mode_attention_forward(s, p);
  auto g = mode_attention_backward(Tensor<double>::zeros(s.shape()), r.cache, p);
  CHECK(max_abs(g.features) == 0.0);
  CHECK(max_abs(g.mask_w) == 0.0);
}

TEST_CASE("saturated one-hot mask selects a single pixel") {
  Rng rng(72);
  auto s = random_tensor({1, 4, 4, 4}, rng);
  // one-hot masks: z must equal the selected pixel's feature, and the
  // dependence of z on S must be confined to that pixel
  Tensor<double> onehot({1, 2, 4, 4});
  onehot(0, 0, 1, 1) = 1.0;
  onehot(0, 1, 2, 3) = 1.0;
  auto z = modal_vectors(s, onehot, false);
  for (std::size_t c = 0; c < 2; ++c) CHECK(z(0, 0, c) == s(0, c, 1, 1));

  auto s2 = s;
  s2(0, 0, 0, 0) += 10.0;  // not the selected pixel
  CHECK(testutil::bit_identical(modal_vectors(s2, onehot, false), z));
  s2 = s;
  s2(0, 0, 1, 1) += 1.0;  // the selected pixel
  auto z2 = modal_vectors(s2, onehot, false);
  CHECK(z2(0, 0, 0) == doctest::Approx(z(0, 0, 0) + 1.0).epsilon(1e-14));

  // saturated logits freeze the mask-softmax path: its backward is ~0
  ModeConfig cfg;
  cfg.groups = 2;
  cfg.masks_from_input = true;
  auto p = random_mode_params(2, cfg, 73);
  std::fill(p.mask_w.begin(), p.mask_w.end(), 0.0);
  p.mask_w(0, 0, 0, 0) = 1.0;
  p.mask_w(1, 0, 0, 0) = 1.0;  // group 1 reads source channel 2
  Tensor<double> src({1, 4, 4, 4});
  src(0, 0, 1, 1) = 400.0;
  src(0, 2, 2, 3) = 400.0;
  auto r = mode_attention_forward(s, p, &src);
  CHECK(r.cache.masks(0, 0, 1, 1) == 1.0);
  auto upstream = random_tensor({1, 4, 4, 4}, rng);
  auto g = mode_attention_backward(upstream, r.cache, p, nullptr);
  CHECK(max_abs(g.mask_w) < 1e-100);
}

TEST_CASE("mode attention shape errors") {
  Rng rng(74);
  auto s = random_tensor({1, 5, 3, 3}, rng);
  ModeConfig cfg;
  cfg.groups = 2;
  auto p = random_mode_params(3, cfg, 75);
  CHECK_THROWS_AS((void)mode_attention_forward(s, p), ShapeError);

  cfg.masks_from_input = true;
  auto p2 = random_mode_params(3, cfg, 76);
  auto ok = random_tensor({1, 6, 3, 3}, rng);
  CHECK_THROWS_AS((void)mode_attention_forward(ok, p2), ShapeError);  // missing source

  auto r = mode_attention_forward(ok, p);
  auto wrong = Tensor<double>::zeros({1, 6, 2, 2});
  CHECK_THROWS_AS((void)mode_attention_backward(wrong, r.cache, p), ShapeError);
}
