#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "id2face/error.hpp"
#include "id2face/pipeline.hpp"

using namespace id2face;
using namespace id2face::pipeline;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.d_id = 64;
  m.d_tok = 32;
  m.d_lat = 16;
  m.vae_hidden = 64;
  m.n_id_tokens = 2;
  m.n_freq = 4;
  m.d_attn = 32;
  m.heads = 2;
  m.channels = {16, 32, 32};
  m.time_dim = 32;
  m.encoder_attention = {2};
  return m;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.model = tiny_model();
  c.batch = 4;
  c.lr = 1e-3;
  c.seed = 3;
  return c;
}

const Dataset& corpus() {
  static const Dataset data(perception::generate_corpus({5, 3, 32, 11}));
  return data;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("id2face_test_" + name);
  fs::remove_all(p);
  return p;
}

double eval_total(Models& models, const TrainBatch& batch, const TrainConfig& cfg) {
  torch::NoGradGuard g;
  double sum = 0;
  for (uint64_t s = 0; s < 4; ++s) sum += compute_losses(batch, models, cfg, 1000 + s).loss.breakdown.total;
  return sum / 4;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("pair sampling rules") {
  const auto& data = corpus();
  auto gen = make_generator(1);
  std::vector<int> hits(data.num_identities(), 0);
  const perception::ToyIdentityEmbedder embedder;
  for (int n = 0; n < 1000; ++n) {
    const auto p = sample_pair(data, gen);
    const auto& rx = data.records()[p.x_index];
    const auto& ry = data.records()[p.y_index];
    REQUIRE(p.x_index != p.y_index);
    REQUIRE(rx.identity_id == p.identity_id);
    REQUIRE(ry.identity_id == p.identity_id);
    for (int64_t s = 0; s < data.num_identities(); ++s)
      if (data.identities()[s] == p.identity_id) ++hits[s];
    if (n < 20) {
      const auto e = embedder.embed(torch::stack({data.images()[p.x_index], data.images()[p.y_index]}));
      CHECK(torch::dot(e[0], e[1]).item<double>() >= 0.99);
    }
  }
  for (int h : hits) CHECK(h > 0);

  auto single = perception::generate_corpus({3, 1, 32, 4});
  const Dataset one(single);
  for (int n = 0; n < 10; ++n) {
    const auto p = sample_pair(one, gen);
    CHECK(p.x_index == p.y_index);
    CHECK(torch::equal(one.images()[p.x_index], one.images()[p.y_index]));
  }
  CHECK_THROWS_AS(Dataset({}), DatasetError);
}

TEST_CASE("batch assembly") {
  auto gen = make_generator(2);
  const auto b = make_batch(corpus(), 6, gen);
  CHECK(b.x.sizes() == torch::IntArrayRef({6, 3, 32, 32}));
  CHECK(b.mask.sizes() == torch::IntArrayRef({6, 32, 32}));
  CHECK(b.landmarks.sizes() == torch::IntArrayRef({6, 16, 2}));
  CHECK(b.pairs.size() == 6);
}

TEST_CASE("config validation and serialization") {
  auto c = tiny_train();
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  auto m = tiny_model();
  m.num_landmarks = 12;
  CHECK_THROWS_AS(m.validate(), ValidationError);
}

TEST_CASE("first step is finite and every parameter group gets gradient") {
  const auto cfg = tiny_train();
  auto models = Models::create(cfg.model, cfg.schedule, 5);
  auto gen = make_generator(3);
  const auto batch = make_batch(corpus(), 4, gen);
  models.train();
  auto out = compute_losses(batch, models, cfg, 77);
  CHECK(std::isfinite(out.loss.breakdown.total));
  out.loss.total.backward();
  for (const auto& [group, params] : parameter_groups(models)) {
    double g = 0;
    for (const auto& [name, p] : params)
      if (p.grad().defined()) g += p.grad().abs().sum().item<double>();
    INFO("group " << group);
    CHECK(g > 0.0);
  }
}

TEST_CASE("overfitting a fixed batch lowers the loss") {
  auto cfg = tiny_train();
  cfg.batch = 8;
  auto models = Models::create(cfg.model, cfg.schedule, 6);
  auto gen = make_generator(4);
  const auto batch = make_batch(corpus(), 8, gen);
  const double before = eval_total(models, batch, cfg);
  Trainer trainer(models, cfg);
  for (int i = 0; i < 100; ++i) trainer.step(batch);
  CHECK(trainer.step_count() == 100);
  CHECK(eval_total(models, batch, cfg) < before);
}

TEST_CASE("seeded training is reproducible") {
  const auto cfg = tiny_train();
  std::vector<double> curves[2];
  for (auto& curve : curves) {
    auto models = Models::create(cfg.model, cfg.schedule, cfg.seed);
    Trainer trainer(models, cfg);
    for (int i = 0; i < 3; ++i) curve.push_back(trainer.step(corpus()).total);
  }
  CHECK(curves[0] == curves[1]);
}

TEST_CASE("checkpoint round trip is bit-identical") {
  const auto cfg = tiny_train();
  auto models = Models::create(cfg.model, cfg.schedule, 7);
  Trainer trainer(models, cfg);
  trainer.step(corpus());
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(dir, models, cfg, trainer.step_count(), &trainer.optimizer());

  auto loaded = load_checkpoint(dir);
  CHECK(loaded.step == 1);
  CHECK(loaded.config.to_json() == cfg.to_json());
  const auto a = parameter_groups(models);
  const auto b = parameter_groups(loaded.models);
  REQUIRE(a.size() == b.size());
  for (size_t g = 0; g < a.size(); ++g)
    for (size_t i = 0; i < a[g].second.size(); ++i) CHECK(torch::equal(a[g].second[i].second, b[g].second[i].second));

  auto gen = make_generator(5);
  const auto batch = make_batch(corpus(), 2, gen);
  models.eval();
  loaded.models.eval();
  torch::NoGradGuard g;
  CHECK(torch::equal(compute_losses(batch, models, cfg, 9).denoiser.eps_hat,
                     compute_losses(batch, loaded.models, cfg, 9).denoiser.eps_hat));

  Trainer resumed(loaded.models, loaded.config);
  CHECK(load_optimizer_state(dir, resumed.optimizer()));
  fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto cfg = tiny_train();
  auto models = Models::create(cfg.model, cfg.schedule, 8);
  const auto dir = scratch_dir("corrupt");
  save_checkpoint(dir, models, cfg, 0);
  {
    std::fstream f(dir / "idlr.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(100);
    const char byte = static_cast<char>(f.get() ^ 0x5a);
    f.seekp(100);
    f.put(byte);
  }
  CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  fs::remove(dir / "manifest.json");
  CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
  fs::remove_all(dir);

  const auto arch = scratch_dir("archive.bin");
  write_param_archive(arch, {{"w", torch::arange(6, torch::kFloat32).view({2, 3})}});
  const auto back = read_param_archive(arch);
  REQUIRE(back.size() == 1);
  CHECK(back[0].first == "w");
  CHECK(torch::equal(back[0].second, torch::arange(6, torch::kFloat32).view({2, 3})));
  fs::resize_file(arch, fs::file_size(arch) - 3);
  CHECK_THROWS_AS(read_param_archive(arch), IoError);
  fs::remove(arch);
}

TEST_CASE("estimated conditions track the rendered geometry") {
  const auto& data = corpus();
  const auto est = estimate_conditions(data.images().slice(0, 0, 3));
  CHECK(est.mask.sizes() == torch::IntArrayRef({3, 32, 32}));
  CHECK(testing::max_abs(est.landmarks - data.landmarks().slice(0, 0, 3)) * 32 <= 1.0);
  const double agree = (est.mask == data.masks().slice(0, 0, 3)).to(torch::kFloat64).mean().item<double>();
  CHECK(agree >= 0.97);
}

TEST_CASE("anonymization is forward-only, seeded and orthogonal") {
  const auto cfg = tiny_train();
  auto models = Models::create(cfg.model, cfg.schedule, 9);
  {
    // a non-trivial output head so distinct seeds can differ beyond the start noise
    torch::NoGradGuard g;
    models.denoiser->output_conv()->weight.normal_(0, 0.05);
  }
  const auto x = corpus().images().slice(0, 0, 2);
  InferenceAudit audit;
  GenerateOptions opts;
  opts.steps = 5;
  opts.audit = &audit;
  const auto a = anonymize(models, x, {1, 2}, opts);
  CHECK(audit.parameter_updates == 0);
  CHECK(audit.gradient_passes == 0);
  CHECK(audit.denoiser_calls == 5);
  CHECK(a.x_hat.sizes() == x.sizes());

  const auto b = anonymize(models, x, {1, 2}, opts);
  CHECK(torch::equal(a.x_hat, b.x_hat));
  CHECK(torch::equal(a.e_ctrl, b.e_ctrl));
  const auto c = anonymize(models, x, {3, 4}, opts);
  CHECK_FALSE(torch::equal(a.x_hat, c.x_hat));
  CHECK_FALSE(torch::equal(a.e_ctrl, c.e_ctrl));

  for (int64_t i = 0; i < 2; ++i) {
    const double dot = torch::dot(a.oim_latent[i].to(torch::kFloat64), a.source_latent[i].to(torch::kFloat64)).item<double>();
    CHECK(std::abs(dot) <= 1e-6 * a.oim_latent[i].norm().item<double>() * a.source_latent[i].norm().item<double>());
  }
  CHECK(audit.parameter_updates == 0);

  const auto single = anonymize(models, x[0], 1, opts);
  // batched and single-image kernels may round differently
  CHECK(testing::max_abs(single.x_hat - a.x_hat[0]) <= 1e-3);
  CHECK_THROWS_AS(anonymize(models, x, {1}, opts), ValidationError);
}

TEST_CASE("reconstruction control path") {
  const auto cfg = tiny_train();
  auto models = Models::create(cfg.model, cfg.schedule, 10);
  GenerateOptions opts;
  opts.steps = 3;
  const auto x = corpus().images().slice(0, 0, 2);
  const auto r = reconstruct(models, x, {5, 6}, opts);
  CHECK(r.sizes() == x.sizes());
  CHECK(all_finite(r));
}

}  // TEST_SUITE
