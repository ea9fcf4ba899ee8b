#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "id2face/error.hpp"
#include "id2face/idvae.hpp"

using namespace id2face;
using namespace id2face::idvae;

TEST_SUITE("idvae") {

TEST_CASE("encode/decode shapes, determinism, normalization") {
  torch::manual_seed(0);
  IdVae vae(IdVaeOptions{64, 32, 128});
  const auto e = torch::nn::functional::normalize(torch::randn({5, 64}),
                                                  torch::nn::functional::NormalizeFuncOptions().dim(1));
  const auto a = vae->encode(e);
  const auto b = vae->encode(e);
  CHECK(a.mu.sizes() == torch::IntArrayRef({5, 32}));
  CHECK(a.log_var.sizes() == torch::IntArrayRef({5, 32}));
  CHECK(torch::equal(a.mu, b.mu));
  CHECK(torch::equal(a.log_var, b.log_var));
  const auto d = vae->decode(a.mu);
  CHECK(testing::max_abs(d.norm(2, 1) - 1.0) <= 1e-5);
  CHECK(torch::equal(d, vae->decode(a.mu)));
  CHECK_THROWS_AS(vae->encode(torch::randn({3, 10})), ValidationError);
  CHECK_THROWS_AS(vae->encode(torch::full({64}, std::nan(""))), ValidationError);
}

TEST_CASE("zero input encodes to the propagated bias chain") {
  torch::manual_seed(1);
  IdVae vae;
  const auto lat = vae->encode(torch::zeros({64}));
  // forward trace by hand through the encoder layers
  auto& seq = *vae->encoder();
  auto l0 = seq[0]->as<torch::nn::Linear>();
  auto l2 = seq[2]->as<torch::nn::Linear>();
  auto l4 = seq[4]->as<torch::nn::Linear>();
  const auto h1 = torch::silu(l0->bias);
  const auto h2 = torch::silu(torch::matmul(l2->weight, h1) + l2->bias);
  const auto out = torch::matmul(l4->weight, h2) + l4->bias;
  CHECK(testing::max_abs(lat.mu - out.slice(0, 0, 32)) <= 1e-6);
}

TEST_CASE("log variance is clamped") {
  torch::manual_seed(2);
  IdVae vae;
  {
    torch::NoGradGuard g;
    auto l4 = (*vae->encoder())[4]->as<torch::nn::Linear>();
    l4->bias.slice(0, 32, 64).fill_(100.0);
  }
  const auto lat = vae->encode(torch::zeros({64}));
  CHECK(lat.log_var.max().item<double>() <= kLogVarClamp);
}

TEST_CASE("reparameterization") {
  IdLatent lat{torch::tensor({1.0}, torch::kFloat64), torch::tensor({std::log(4.0)}, torch::kFloat64)};
  CHECK(reparameterize(lat, torch::tensor({0.5}, torch::kFloat64), true).item<double>() ==
        doctest::Approx(2.0).epsilon(1e-12));
  CHECK(reparameterize(lat, torch::tensor({0.0}, torch::kFloat64), true).item<double>() == 1.0);
  CHECK(reparameterize(lat, torch::tensor({0.5}, torch::kFloat64), false).item<double>() == 1.0);
  IdLatent unit{torch::randn({8}, torch::kFloat64), torch::zeros({8}, torch::kFloat64)};
  const auto n = torch::randn({8}, torch::kFloat64);
  CHECK(testing::max_abs(reparameterize(unit, n, true) - (unit.mu + n)) <= 1e-12);

  // d output / d mu is the identity: every coordinate's gradient is exactly one
  const auto lv = torch::randn({6}, torch::kFloat64);
  const auto noise = torch::randn({6}, torch::kFloat64);
  const auto w = torch::randn({6}, torch::kFloat64);
  const double err = testing::gradient_rel_error(
      [&](const torch::Tensor& mu) { return (reparameterize({mu, lv}, noise, true) * w).sum(); },
      torch::randn({6}, torch::kFloat64));
  CHECK(err <= 1e-4);
}

TEST_CASE("orthogonal projection examples") {
  const auto d = torch::kFloat64;
  auto p = orthogonal_project(torch::tensor({1.0, 1.0}, d), torch::tensor({1.0, 0.0}, d));
  CHECK(testing::max_abs(p.u - torch::tensor({0.0, 1.0}, d)) == 0.0);
  CHECK_FALSE(p.near_parallel);
  const auto r = torch::tensor({0.0, 3.0, -1.0}, d);
  p = orthogonal_project(r, torch::tensor({2.0, 0.0, 0.0}, d));
  CHECK(torch::equal(p.u, r));
  p = orthogonal_project(torch::tensor({1.0, 2.0}, d), torch::tensor({1.0, 2.0}, d));
  CHECK(p.near_parallel);
  CHECK_THROWS_AS(orthogonal_project(r, torch::zeros({3}, d)), DegenerateError);
}

TEST_CASE("orthogonality and Pythagoras over random draws") {
  auto gen = make_generator(7);
  double worst_dot = 0, worst_pyth = 0, worst_f32 = 0;
  for (int n = 0; n < 10000; ++n) {
    const auto r = torch::randn({32}, gen, torch::kFloat64);
    const auto v = torch::randn({32}, gen, torch::kFloat64);
    const auto u = orthogonal_project(r, v).u;
    const double rn = r.norm().item<double>(), vn = v.norm().item<double>();
    worst_dot = std::max(worst_dot, std::abs(torch::dot(u, v).item<double>()) / (rn * vn));
    const double rv = torch::dot(r, v).item<double>();
    const double lhs = rn * rn;
    const double rhs = u.norm().item<double>() * u.norm().item<double>() + rv * rv / (vn * vn);
    worst_pyth = std::max(worst_pyth, std::abs(lhs - rhs) / lhs);
    CHECK(u.norm().item<double>() <= rn * (1 + 1e-12));
    if (n < 1000) {
      const auto u32 = orthogonal_project(r.to(torch::kFloat32), v.to(torch::kFloat32)).u.to(torch::kFloat64);
      worst_f32 = std::max(worst_f32, std::abs(torch::dot(u32, v).item<double>()) / (rn * vn));
    }
  }
  CHECK(worst_dot <= 1e-12);
  CHECK(worst_pyth <= 1e-6);
  CHECK(worst_f32 <= 1e-6);
}

TEST_CASE("projected draws are standard normal on the orthogonal complement") {
  auto gen = make_generator(8);
  const auto v = torch::randn({16}, gen, torch::kFloat64);
  // a unit direction orthogonal to v
  auto w = orthogonal_project(torch::randn({16}, gen, torch::kFloat64), v).u;
  w = w / w.norm();
  const int n = 10000;
  std::vector<double> comp(n);
  for (int i = 0; i < n; ++i) {
    const auto u = orthogonal_project(torch::randn({16}, gen, torch::kFloat64), v).u;
    comp[i] = torch::dot(u, w).item<double>();
  }
  double mean = 0, var = 0;
  for (double c : comp) mean += c;
  mean /= n;
  for (double c : comp) var += (c - mean) * (c - mean);
  var /= (n - 1);
  CHECK(std::abs(mean) <= 3.0 * std::sqrt(var / n));
  CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("anonymous identity sampling") {
  torch::manual_seed(3);
  IdVae vae;
  const auto e = torch::nn::functional::normalize(torch::randn({64}),
                                                  torch::nn::functional::NormalizeFuncOptions().dim(0));
  const auto a = sample_anonymous_identity({e, true}, vae, 10);
  const auto b = sample_anonymous_identity({e, true}, vae, 10);
  const auto c = sample_anonymous_identity({e, true}, vae, 11);
  CHECK(torch::equal(a.embedding.vector, b.embedding.vector));
  CHECK_FALSE(torch::equal(a.embedding.vector, c.embedding.vector));
  CHECK(a.embedding.vector.norm().item<double>() == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(torch::equal(a.v, vae->encode(e).mu.detach()));
  const double bound = 1e-6 * a.r.norm().item<double>() * a.v.norm().item<double>();
  CHECK(std::abs(torch::dot(a.u, a.v).item<double>()) <= bound);
  CHECK(a.u.norm().item<double>() <= a.r.norm().item<double>() * (1 + 1e-6));
  CHECK(a.attempts == 1);
  CHECK_FALSE(a.embedding.vector.requires_grad());
}

TEST_CASE("one-dimensional latent exhausts the resampling budget") {
  torch::manual_seed(4);
  IdVae vae(IdVaeOptions{8, 1, 16});
  const auto e = torch::ones({8}) / std::sqrt(8.0);
  CHECK_THROWS_AS(sample_anonymous_identity({e, true}, vae, 0), SamplingFailure);
}

}  // TEST_SUITE
