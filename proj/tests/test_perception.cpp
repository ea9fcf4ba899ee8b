#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "helpers.hpp"
#include "id2face/error.hpp"
#include "id2face/perception.hpp"

using namespace id2face;
using namespace id2face::perception;

namespace {

SyntheticFaceSpec spec_with(std::array<double, 6> id, double pose = 0, double expr = 0, double hue = 0.3,
                            double illum = 0) {
  SyntheticFaceSpec s;
  s.identity = id;
  s.nuisance = {pose, expr, hue, illum};
  return s;
}

double cosine(const torch::Tensor& a, const torch::Tensor& b) {
  return (torch::dot(a, b) / (a.norm() * b.norm())).item<double>();
}

}  // namespace

TEST_SUITE("perception") {

TEST_CASE("rendering is deterministic and bounded") {
  const auto s = spec_with({0.1, 0.9, 0.4, 0.7, 0.2, 0.6}, 0.2, 0.4);
  const auto a = synth_face(s, 3);
  const auto b = synth_face(s, 3);
  CHECK(torch::equal(a, b));
  CHECK(a.sizes() == torch::IntArrayRef({3, 32, 32}));
  CHECK(a.min().item<double>() >= -1.0);
  CHECK(a.max().item<double>() <= 1.0);
}

TEST_CASE("out-of-range parameters are rejected") {
  auto s = spec_with({0.5, 0.5, 0.5, 0.5, 0.5, 1.5});
  CHECK_THROWS_AS(synth_face(s, 0), ValidationError);
  s = spec_with({0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, 0.9);
  CHECK_THROWS_AS(synth_face(s, 0), ValidationError);
  s = spec_with({0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, 0.0, 0.0, 0.0, 0.5);
  CHECK_THROWS_AS(synth_face(s, 0), ValidationError);
}

TEST_CASE("identity parameters invert exactly from any render") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int n = 0; n < 20; ++n) {
    std::array<double, 6> id{};
    for (auto& v : id) v = u(rng);
    const auto s = spec_with(id, u(rng) - 0.5, u(rng), u(rng), 0.4 * u(rng) - 0.2);
    const auto back = identity_params_from_image(synth_face(s, n));
    for (int k = 0; k < 6; ++k) CHECK(back[k] == doctest::Approx(id[k]).epsilon(1e-5));
  }
}

TEST_CASE("identity embedding ignores nuisance and separates distant identities") {
  const std::array<double, 6> id{0.2, 0.8, 0.3, 0.9, 0.1, 0.6};
  const auto a = toy_identity_embed(synth_face(spec_with(id, -0.4, 0.1, 0.1, -0.15), 1)).vector;
  const auto b = toy_identity_embed(synth_face(spec_with(id, 0.45, 0.9, 0.8, 0.18), 2)).vector;
  CHECK(a.norm().item<double>() == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(cosine(a, b) >= 0.99);

  std::array<double, 6> far{};
  for (int k = 0; k < 6; ++k) far[k] = id[k] >= 0.5 ? id[k] - 0.5 : id[k] + 0.5;
  const auto c = toy_identity_embed(synth_face(spec_with(far), 3)).vector;
  CHECK(cosine(a, c) <= 0.2);
}

TEST_CASE("blank identity patch is degenerate") {
  auto img = synth_face(spec_with({0.1, 0.9, 0.4, 0.7, 0.2, 0.6}), 0);
  const auto g = PatchGeometry::for_size(32);
  img.index_put_({torch::indexing::Slice(), torch::indexing::Slice(g.begin, g.end),
                  torch::indexing::Slice(g.begin, g.end)},
                 0.0);
  CHECK_THROWS_AS(toy_identity_embed(img), DegenerateError);
}

TEST_CASE("semantic features: shape, constant input, locality") {
  ToySemanticFeatures f(64, 32);
  const auto zero = torch::zeros({1, 3, 32, 32});
  const auto tok = f.features(zero);
  CHECK(tok.sizes() == torch::IntArrayRef({1, f.token_count(), 64}));
  CHECK(testing::max_abs(tok[0] - f.bias().unsqueeze(0)) == 0.0);

  const auto img = synth_face(spec_with({0.1, 0.9, 0.4, 0.7, 0.2, 0.6}, 0.1, 0.3), 4);
  auto shifted = img.clone();
  // move the right half of the image one pixel further right
  shifted.index_put_({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(17, 32)},
                     img.index({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(16, 31)}));
  const auto changed = (shifted != img).any(0);
  const auto a = f.features(img.unsqueeze(0))[0];
  const auto b = f.features(shifted.unsqueeze(0))[0];
  int moved = 0;
  for (int64_t n = 0; n < f.token_count(); ++n) {
    const auto rf = f.receptive_field(n);
    const bool touched = changed.index({torch::indexing::Slice(rf[0], rf[1]), torch::indexing::Slice(rf[2], rf[3])})
                             .any()
                             .item<bool>();
    if (!touched) CHECK(torch::equal(a[n], b[n]));
    moved += touched ? 1 : 0;
  }
  CHECK(moved > 0);
  CHECK(moved < f.token_count());
}

TEST_CASE("landmarks: template, mirror symmetry, rigid transform") {
  const auto canon = toy_landmarks(spec_with({0.5, 0.5, 0.5, 0.5, 0.5, 0.5})).points;
  const double tpl[16][2] = {{10, 0},
                             {10 * std::cos(M_PI / 4), 12.5 * std::sin(M_PI / 4)},
                             {0, 12.5},
                             {-10 * std::cos(M_PI / 4), 12.5 * std::sin(M_PI / 4)},
                             {-10, 0},
                             {-10 * std::cos(M_PI / 4), -12.5 * std::sin(M_PI / 4)},
                             {0, -12.5},
                             {10 * std::cos(M_PI / 4), -12.5 * std::sin(M_PI / 4)},
                             {-7, -6.5},
                             {-3, -6.5},
                             {3, -6.5},
                             {7, -6.5},
                             {-4, 7.5},
                             {4, 7.5},
                             {0, 7},
                             {0, 8}};
  for (int k = 0; k < 16; ++k) {
    CHECK(canon[k][0].item<double>() == doctest::Approx((16 + tpl[k][0]) / 32).epsilon(1e-12));
    CHECK(canon[k][1].item<double>() == doctest::Approx((16 + tpl[k][1]) / 32).epsilon(1e-12));
  }

  const auto pos = toy_landmarks(spec_with({0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, 0.37, 0.6)).points;
  const auto neg = toy_landmarks(spec_with({0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, -0.37, 0.6)).points;
  const auto perm = landmark_mirror_permutation();
  for (int k = 0; k < 16; ++k) {
    CHECK(neg[perm[k]][0].item<double>() == doctest::Approx(1.0 - pos[k][0].item<double>()).epsilon(1e-12));
    CHECK(neg[perm[k]][1].item<double>() == doctest::Approx(pos[k][1].item<double>()).epsilon(1e-12));
  }

  // left mouth corner at expression 0.5, pose 0.3: (-(4 + 0.75), 7.5) rotated
  const double th = 0.3, u = -4.75, v = 7.5;
  const auto lm = toy_landmarks(spec_with({0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, th, 0.5)).points;
  CHECK(lm[12][0].item<double>() == doctest::Approx((16 + u * std::cos(th) - v * std::sin(th)) / 32).epsilon(1e-12));
  CHECK(lm[12][1].item<double>() == doctest::Approx((16 + u * std::sin(th) + v * std::cos(th)) / 32).epsilon(1e-12));
  CHECK(lm.min().item<double>() >= 0.0);
  CHECK(lm.max().item<double>() <= 1.0);
}

TEST_CASE("face mask covers the identity patch") {
  for (double pose : {-0.5, 0.0, 0.31}) {
    const auto s = spec_with({0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, pose);
    const auto m = toy_face_mask(s).mask;
    const double frac = m.mean().item<double>();
    CHECK(frac >= 0.01);
    CHECK(frac <= 0.80);
    CHECK(torch::equal(m, toy_face_mask(s).mask));
    const auto g = PatchGeometry::for_size(32);
    for (int64_t i = g.begin; i < g.end; ++i)
      for (int64_t j = g.begin; j < g.end; ++j) CHECK(m[i][j].item<float>() == 1.0f);
  }
}

TEST_CASE("nuisance fit recovers the generator's parameters") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int n = 0; n < 6; ++n) {
    const auto s = spec_with({u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)}, u(rng) - 0.5, u(rng), u(rng),
                             0.4 * u(rng) - 0.2);
    const auto fit = fit_nuisance(synth_face(s, n));
    CHECK(std::abs(fit.params.pose - s.nuisance.pose) <= 0.02);
    CHECK(std::abs(fit.params.expression - s.nuisance.expression) <= 0.05);
    CHECK(std::abs(fit.params.illumination - s.nuisance.illumination) <= 0.02);
    CHECK(fit.rms_residual < 0.05);
  }
}

TEST_CASE("corpus generation and manifest round trip") {
  CorpusConfig cfg;
  cfg.n_identities = 5;
  cfg.renders_per_identity = 3;
  cfg.seed = 9;
  const auto a = generate_corpus(cfg);
  const auto b = generate_corpus(cfg);
  REQUIRE(a.size() == 15);
  const auto path = std::filesystem::temp_directory_path() / "id2face_manifest_test.jsonl";
  write_manifest(path, a);
  const auto c = read_manifest(path);
  REQUIRE(c.size() == a.size());
  CHECK(torch::equal(render_all(a), render_all(b)));
  CHECK(torch::equal(render_all(a), render_all(c)));
  std::filesystem::remove(path);

  const auto extra = resample_nuisance(a, 2, 4);
  CHECK(extra.size() == 10);
  for (const auto& r : extra) CHECK(r.identity_id < 5);
}

}  // TEST_SUITE
