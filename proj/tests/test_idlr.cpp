#include <doctest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "id2face/error.hpp"
#include "id2face/idlr.hpp"
#include "id2face/perception.hpp"

using namespace id2face;
using namespace id2face::idlr;

namespace {

torch::Tensor face(uint64_t seed = 1) {
  perception::SyntheticFaceSpec s;
  s.identity = {0.2, 0.8, 0.6, 0.1, 0.9, 0.4};
  s.nuisance = {0.1, 0.3, 0.5, 0.05};
  return perception::synth_face(s, seed);
}

torch::Tensor half_mask() {
  auto m = torch::zeros({32, 32});
  m.slice(0, 8, 24).slice(1, 4, 20).fill_(1.0);
  return m;
}

int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

}  // namespace

TEST_SUITE("idlr") {

TEST_CASE("disabled degradation is the identity") {
  const auto x = face();
  CHECK(torch::equal(degrade(x, torch::ones({32, 32}), 5, DegradeConfig::none()), x));
}

TEST_CASE("degradation leaves pixels outside the mask untouched") {
  const auto x = face();
  const auto m = half_mask();
  const auto y = degrade(x, m, 9, DegradeConfig{});
  const auto outside = (m <= 0.5).unsqueeze(0).expand_as(x);
  CHECK(torch::equal(y.masked_select(outside), x.masked_select(outside)));
  const auto inside = (m > 0.5).unsqueeze(0).expand_as(x);
  CHECK(testing::max_abs(y.masked_select(inside) - x.masked_select(inside)) > 0.05);
}

TEST_CASE("degradation is seeded; batches use per-row derived seeds") {
  const auto x = torch::stack({face(1), face(2)});
  const auto m = torch::stack({half_mask(), torch::ones({32, 32})});
  const DegradeConfig cfg;
  const auto a = degrade(x, m, 11, cfg);
  CHECK(torch::equal(a, degrade(x, m, 11, cfg)));
  CHECK_FALSE(torch::equal(a, degrade(x, m, 12, cfg)));
  for (int64_t i = 0; i < 2; ++i) CHECK(torch::equal(a[i], degrade(x[i], m[i], derive_seed(11, i), cfg)));
}

TEST_CASE("degrade rejects inverted ranges and mismatched masks") {
  DegradeConfig bad;
  bad.noise_min = 0.5;
  bad.noise_max = 0.1;
  CHECK_THROWS_AS(degrade(face(), half_mask(), 0, bad), ValidationError);
  CHECK_THROWS_AS(degrade(face(), torch::ones({16, 16}), 0, DegradeConfig{}), ValidationError);
}

TEST_CASE("gaussian taps") {
  for (double sigma : {0.5, 1.0, 1.7, 2.0}) {
    const auto k = gaussian_kernel1d(sigma).to(torch::kFloat64);
    const int64_t r = static_cast<int64_t>(std::ceil(3 * sigma));
    CHECK(k.numel() == 2 * r + 1);
    CHECK(k.sum().item<double>() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(testing::max_abs(k - k.flip(0)) <= 1e-7);
    // ratio of neighbouring taps follows the Gaussian
    const double ratio = (k[r + 1] / k[r]).item<double>();
    CHECK(ratio == doctest::Approx(std::exp(-1.0 / (2 * sigma * sigma))).epsilon(1e-5));
  }
  CHECK(gaussian_kernel1d(0.0).numel() == 1);
}

TEST_CASE("blur matches a hand box filter with reflect borders") {
  CHECK(torch::allclose(blur2d(torch::full({3, 6, 6}, 0.4), torch::full({3, 3}, 1.0 / 9)),
                        torch::full({3, 6, 6}, 0.4), 0, 1e-6));
  auto gen = make_generator(3);
  const auto img = torch::rand({1, 6, 7}, gen, torch::kFloat64);
  const auto out = blur2d(img, torch::full({3, 3}, 1.0 / 9, torch::kFloat64));
  const auto a = img.accessor<double, 3>();
  double worst = 0;
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 7; ++x) {
      double s = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) s += a[0][reflect(y + dy, 6)][reflect(x + dx, 7)];
      worst = std::max(worst, std::abs(s / 9 - out[0][y][x].item<double>()));
    }
  CHECK(worst <= 1e-12);
  CHECK_THROWS_AS(blur2d(img, torch::ones({2, 3})), ValidationError);
}

TEST_CASE("fourier features against a direct evaluation") {
  auto gen = make_generator(4);
  const auto pts = torch::rand({2, 5, 2}, gen, torch::kFloat64);
  const int n = 6;
  const auto f = fourier_features(pts, n);
  CHECK(f.sizes() == torch::IntArrayRef({2, 5, 4 * n}));
  double worst = 0;
  for (int b = 0; b < 2; ++b)
    for (int k = 0; k < 5; ++k)
      for (int c = 0; c < 2; ++c)
        for (int j = 0; j < n; ++j) {
          const double v = pts[b][k][c].item<double>() * std::pow(2.0, j) * std::numbers::pi;
          const int base = c * 2 * n + 2 * j;
          worst = std::max(worst, std::abs(f[b][k][base].item<double>() - std::sin(v)));
          worst = std::max(worst, std::abs(f[b][k][base + 1].item<double>() - std::cos(v)));
        }
  CHECK(worst <= 1e-12);
  CHECK_THROWS_AS(fourier_features(torch::full({1, 2}, 1.2), n), ValidationError);
  CHECK_THROWS_AS(fourier_features(torch::zeros({1, 3}), n), ValidationError);
}

TEST_CASE("token shapes") {
  torch::manual_seed(5);
  Idlr idlr;
  const auto providers = perception::Providers::toy(64, 64, 32);
  const auto x = torch::stack({face(1), face(2), face(3)});
  const auto lm = torch::rand({3, 16, 2});
  torch::Tensor w;
  const auto e_non = build_nonid_embedding(x, lm, idlr, *providers.semantic, &w);
  const int64_t ns = providers.semantic->token_count();
  CHECK(e_non.sizes() == torch::IntArrayRef({3, ns, 64}));
  CHECK(w.sizes() == torch::IntArrayRef({3, 4, ns, 16}));
  CHECK(testing::max_abs(w.sum(-1) - 1.0) <= 1e-5);
  const auto e_id = idlr->project_identity(torch::randn({3, 64}));
  CHECK(e_id.sizes() == torch::IntArrayRef({3, 4, 64}));
  const auto c = idlr->align(e_non, e_id);
  CHECK(c.non_id.sizes() == e_non.sizes());
  CHECK(c.id.sizes() == e_id.sizes());
  CHECK_THROWS_AS(idlr->project_identity(torch::randn({3, 10})), ValidationError);
  CHECK_THROWS_AS(idlr->nonid_embedding(torch::randn({3, ns, 32}), lm), ValidationError);
}

TEST_CASE("spatial embedding depends on the landmarks") {
  torch::manual_seed(6);
  Idlr idlr;
  const auto sem = torch::randn({1, 8, 64});
  const auto lm = torch::rand({1, 16, 2}) * 0.8 + 0.1;
  const auto a = idlr->nonid_embedding(sem, lm);
  const auto b = idlr->nonid_embedding(sem, lm + 0.05);
  CHECK(testing::max_abs(a - b) > 1e-4);
}

TEST_CASE("zeroed value/output projections make alignment a pass-through") {
  torch::manual_seed(7);
  Idlr idlr;
  {
    torch::NoGradGuard g;
    for (auto attn : {idlr->align_nonid_attention(), idlr->align_id_attention()}) {
      attn->o()->weight.zero_();
      attn->o()->bias.zero_();
    }
  }
  const auto e_non = torch::randn({2, 8, 64});
  const auto e_id = torch::randn({2, 4, 64});
  const auto c = idlr->align(e_non, e_id);
  CHECK(torch::equal(c.non_id, e_non));
  CHECK(torch::equal(c.id, e_id));
}

TEST_CASE("identity projection is linear for positive scaling without bias") {
  torch::manual_seed(8);
  IdlrOptions o;
  o.id_proj_bias = false;
  Idlr idlr(o);
  const auto e = torch::randn({2, 64}, torch::kFloat32);
  const auto a = idlr->project_identity(e);
  const auto b = idlr->project_identity(2.5 * e);
  CHECK(testing::max_abs(b - 2.5 * a) <= 1e-5);
}

}  // TEST_SUITE
