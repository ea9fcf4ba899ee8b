#include "id2face/pipeline.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "id2face/error.hpp"
#include "id2face/hash.hpp"

namespace id2face::pipeline {

namespace fs = std::filesystem;

namespace {

constexpr char kArchiveMagic[8] = {'I', 'D', '2', 'F', 'P', 'A', 'R', 'M'};
constexpr uint32_t kArchiveVersion = 1;
constexpr int kManifestVersion = 1;

int64_t randint(int64_t high, torch::Generator& gen) {
  return torch::randint(high, {1}, gen, torch::kInt64).item<int64_t>();
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (image_size <= 0 || num_landmarks <= 0 || d_id <= 0 || d_tok <= 0 || d_lat <= 0 || vae_hidden <= 0 ||
      n_id_tokens <= 0 || n_freq <= 0 || d_attn <= 0 || heads <= 0 || time_dim <= 0)
    throw ValidationError("model dims must be positive");
  if (d_attn % heads != 0) throw ValidationError("d_attn must be divisible by heads");
  if (num_landmarks != 16) throw ValidationError("the toy landmark provider emits exactly 16 points");
  iglh::DenoiserOptions o;
  o.image_size = image_size;
  o.channels = channels;
  o.encoder_attention = encoder_attention;
  o.validate();
}

nlohmann::json ModelConfig::to_json() const {
  return {{"image_size", image_size}, {"num_landmarks", num_landmarks}, {"d_id", d_id},
          {"d_tok", d_tok},           {"d_lat", d_lat},                 {"vae_hidden", vae_hidden},
          {"n_id_tokens", n_id_tokens}, {"n_freq", n_freq},             {"d_attn", d_attn},
          {"heads", heads},           {"channels", channels},           {"time_dim", time_dim},
          {"encoder_attention", encoder_attention}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = get_or(j, "image_size", c.image_size);
  c.num_landmarks = get_or(j, "num_landmarks", c.num_landmarks);
  c.d_id = get_or(j, "d_id", c.d_id);
  c.d_tok = get_or(j, "d_tok", c.d_tok);
  c.d_lat = get_or(j, "d_lat", c.d_lat);
  c.vae_hidden = get_or(j, "vae_hidden", c.vae_hidden);
  c.n_id_tokens = get_or(j, "n_id_tokens", c.n_id_tokens);
  c.n_freq = get_or(j, "n_freq", c.n_freq);
  c.d_attn = get_or(j, "d_attn", c.d_attn);
  c.heads = get_or(j, "heads", c.heads);
  c.channels = get_or(j, "channels", c.channels);
  c.time_dim = get_or(j, "time_dim", c.time_dim);
  c.encoder_attention = get_or(j, "encoder_attention", c.encoder_attention);
  c.validate();
  return c;
}

nlohmann::json ScheduleConfig::to_json() const {
  return {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}};
}

ScheduleConfig ScheduleConfig::from_json(const nlohmann::json& j) {
  ScheduleConfig c;
  c.T = get_or(j, "T", c.T);
  c.beta_start = get_or(j, "beta_start", c.beta_start);
  c.beta_end = get_or(j, "beta_end", c.beta_end);
  c.build();  // validates the range
  return c;
}

void TrainConfig::validate() const {
  if (steps <= 0) throw ValidationError("train.steps must be positive");
  if (batch <= 0) throw ValidationError("train.batch must be positive");
  if (!(lr > 0)) throw ValidationError("train.lr must be positive");
  if (weight_decay < 0) throw ValidationError("train.weight_decay must be nonnegative");
  if (checkpoint_interval < 0) throw ValidationError("train.checkpoint_interval must be nonnegative");
  model.validate();
  degrade.validate();
  schedule.build();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch", batch},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"seed", seed},
          {"weights", weights.to_json()},
          {"schedule", schedule.to_json()},
          {"model", model.to_json()},
          {"degrade", degrade.to_json()},
          {"manifest", manifest},
          {"checkpoint_interval", checkpoint_interval}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = get_or(j, "steps", c.steps);
  c.batch = get_or(j, "batch", c.batch);
  c.lr = get_or(j, "lr", c.lr);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay);
  c.seed = get_or(j, "seed", c.seed);
  if (j.contains("weights")) c.weights = losses::LossWeights::from_json(j.at("weights"));
  if (j.contains("schedule")) c.schedule = ScheduleConfig::from_json(j.at("schedule"));
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("degrade")) c.degrade = idlr::DegradeConfig::from_json(j.at("degrade"));
  c.manifest = get_or(j, "manifest", c.manifest);
  c.checkpoint_interval = get_or(j, "checkpoint_interval", c.checkpoint_interval);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Models

Models Models::create(const ModelConfig& config, const ScheduleConfig& schedule, uint64_t seed) {
  config.validate();
  torch::manual_seed(seed);
  Models m{config, schedule.build()};
  iglh::DenoiserOptions dopt;
  dopt.image_size = config.image_size;
  dopt.channels = config.channels;
  dopt.time_dim = config.time_dim;
  dopt.d_tok = config.d_tok;
  dopt.d_attn = config.d_attn;
  dopt.heads = config.heads;
  dopt.encoder_attention = config.encoder_attention;
  dopt.T = schedule.T;
  m.denoiser = iglh::Denoiser(dopt);

  idlr::IdlrOptions lopt;
  lopt.d_id = config.d_id;
  lopt.d_tok = config.d_tok;
  lopt.n_id_tokens = config.n_id_tokens;
  lopt.n_freq = config.n_freq;
  lopt.d_attn = config.d_attn;
  lopt.heads = config.heads;
  m.idlr = idlr::Idlr(lopt);

  m.idvae = idvae::IdVae(idvae::IdVaeOptions{config.d_id, config.d_lat, config.vae_hidden});
  m.providers = perception::Providers::toy(config.d_id, config.d_tok, config.image_size);
  return m;
}

std::vector<torch::Tensor> Models::parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto* mod : {static_cast<const torch::nn::Module*>(denoiser.get()),
                          static_cast<const torch::nn::Module*>(idlr.get()),
                          static_cast<const torch::nn::Module*>(idvae.get())}) {
    auto p = mod->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void Models::train(bool on) {
  denoiser->train(on);
  idlr->train(on);
  idvae->train(on);
}

std::vector<std::pair<std::string, std::vector<std::pair<std::string, torch::Tensor>>>> parameter_groups(
    const Models& models) {
  std::vector<std::pair<std::string, torch::Tensor>> backbone, gates, idlr, vae;
  for (const auto& item : models.denoiser->named_parameters()) {
    (item.key().rfind("iglh", 0) == 0 ? gates : backbone).emplace_back(item.key(), item.value());
  }
  for (const auto& item : models.idlr->named_parameters()) idlr.emplace_back(item.key(), item.value());
  for (const auto& item : models.idvae->named_parameters()) vae.emplace_back(item.key(), item.value());
  return {{"denoiser", backbone}, {"iglh", gates}, {"idlr", idlr}, {"idvae", vae}};
}

// ---------------------------------------------------------------------------
// Data

Dataset::Dataset(std::vector<perception::ManifestRecord> records, int64_t num_landmarks)
    : records_(std::move(records)) {
  if (records_.empty()) throw DatasetError("dataset manifest is empty");
  std::map<int64_t, int64_t> slot_of;
  std::vector<torch::Tensor> masks, lms;
  for (int64_t i = 0; i < size(); ++i) {
    const auto& r = records_[i];
    auto [it, inserted] = slot_of.try_emplace(r.identity_id, static_cast<int64_t>(identities_.size()));
    if (inserted) {
      identities_.push_back(r.identity_id);
      by_identity_.emplace_back();
    }
    by_identity_[it->second].push_back(i);
    masks.push_back(perception::toy_face_mask(r.spec).mask);
    lms.push_back(perception::toy_landmarks(r.spec, static_cast<int>(num_landmarks)).points.to(torch::kFloat32));
  }
  images_ = perception::render_all(records_);
  masks_ = torch::stack(masks);
  landmarks_ = torch::stack(lms);
}

Pair sample_pair(const Dataset& data, torch::Generator& gen) {
  if (data.num_identities() == 0) throw DatasetError("sample_pair: no identities");
  const int64_t slot = randint(data.num_identities(), gen);
  const auto& renders = data.renders_of(slot);
  const auto n = static_cast<int64_t>(renders.size());
  Pair p;
  p.identity_id = data.identities()[slot];
  if (n < 2) {
    p.x_index = p.y_index = renders.front();
    return p;
  }
  const int64_t a = randint(n, gen);
  int64_t b = randint(n - 1, gen);
  if (b >= a) ++b;
  p.x_index = renders[a];
  p.y_index = renders[b];
  return p;
}

TrainBatch make_batch(const Dataset& data, int64_t batch, torch::Generator& gen) {
  TrainBatch b;
  std::vector<int64_t> xi, yi;
  for (int64_t i = 0; i < batch; ++i) {
    b.pairs.push_back(sample_pair(data, gen));
    xi.push_back(b.pairs.back().x_index);
    yi.push_back(b.pairs.back().y_index);
  }
  const auto xs = torch::tensor(xi, torch::kInt64);
  const auto ys = torch::tensor(yi, torch::kInt64);
  b.x = data.images().index_select(0, xs);
  b.y = data.images().index_select(0, ys);
  b.mask = data.masks().index_select(0, xs);
  b.landmarks = data.landmarks().index_select(0, xs);
  return b;
}

// ---------------------------------------------------------------------------
// Training

StepOutput compute_losses(const TrainBatch& batch, Models& models, const TrainConfig& config, uint64_t step_seed) {
  auto gen = make_generator(step_seed);
  const auto& embedder = *models.providers.identity;

  torch::Tensor e_y;
  {
    torch::NoGradGuard no_grad;
    e_y = embedder.embed(batch.y);
  }
  const auto lat = models.idvae->encode(e_y);
  const auto vae_noise = torch::randn(lat.mu.sizes(), gen, lat.mu.options());
  const auto e_ctrl = models.idvae->decode(idvae::reparameterize(lat, vae_noise, true));
  const auto id_tokens = models.idlr->project_identity(e_ctrl);

  const auto x_d = idlr::degrade(batch.x, batch.mask, derive_seed(step_seed, kDegradeStream), config.degrade);
  const auto e_non_id =
      idlr::build_nonid_embedding(x_d, batch.landmarks, models.idlr, *models.providers.semantic);
  const auto cond = models.idlr->align(e_non_id, id_tokens);

  const int64_t t = 1 + randint(models.schedule.T(), gen);
  const auto eps = torch::randn(batch.x.sizes(), gen, batch.x.options());
  const auto z0 = batch.x;  // identity latent encoder
  const auto z_t = diffusion::add_noise(z0, t, eps, models.schedule);

  StepOutput out;
  out.denoiser = models.denoiser->forward(z_t, t, cond);
  const auto z0_hat = diffusion::recover_z0(z_t, out.denoiser.eps_hat, t, models.schedule);

  losses::LossTerms terms;
  terms.diff_noise = losses::loss_diff_noise(eps, out.denoiser.eps_hat);
  terms.diff_recon = losses::loss_diff_recon(z0, z0_hat);
  terms.id_sim = losses::loss_id_sim(z0_hat, e_ctrl, embedder);
  terms.id_region = losses::loss_id_region(out.denoiser.gate_logits, batch.mask);
  const auto vae = losses::loss_vae(e_y, e_ctrl, lat);
  terms.vae_recon = vae.recon;
  terms.kl = vae.kl;
  out.loss = losses::total_loss(terms, t, models.schedule, config.weights);
  return out;
}

Trainer::Trainer(Models& models, TrainConfig config) : models_(models), config_(std::move(config)) {
  config_.validate();
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      models_.parameters(), torch::optim::AdamWOptions(config_.lr).weight_decay(config_.weight_decay));
}

losses::LossBreakdown Trainer::step(const Dataset& data) {
  auto gen = make_generator(derive_seed(derive_seed(config_.seed, kBatchStream), static_cast<uint64_t>(step_)));
  return step(make_batch(data, config_.batch, gen));
}

losses::LossBreakdown Trainer::step(const TrainBatch& batch) {
  models_.train();
  optimizer_->zero_grad();
  const uint64_t seed = derive_seed(derive_seed(config_.seed, kStepStream), static_cast<uint64_t>(step_));
  StepOutput out;
  try {
    out = compute_losses(batch, models_, config_, seed);
  } catch (const NumericalError& e) {
    throw NumericalError("training aborted at step " + std::to_string(step_) + ": " + e.what());
  }
  out.loss.total.backward();
  optimizer_->step();
  ++step_;
  return out.loss.breakdown;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const fs::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated parameter archive " + path.string());
  return v;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

void write_param_archive(const fs::path& path, const std::vector<std::pair<std::string, torch::Tensor>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kArchiveMagic, sizeof kArchiveMagic);
  put<uint32_t>(os, kArchiveVersion);
  put<uint64_t>(os, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    const auto t = tensor.detach().to(torch::kFloat32).contiguous();
    put<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint32_t>(os, static_cast<uint32_t>(t.dim()));
    for (auto d : t.sizes()) put<int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<std::pair<std::string, torch::Tensor>> read_param_archive(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[sizeof kArchiveMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kArchiveMagic, sizeof magic) != 0)
    throw IoError("not a parameter archive: " + path.string());
  if (get<uint32_t>(is, path) != kArchiveVersion) throw IoError("unsupported archive version in " + path.string());
  const auto count = get<uint64_t>(is, path);
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (uint64_t i = 0; i < count; ++i) {
    const auto len = get<uint32_t>(is, path);
    if (len > 4096) throw IoError("corrupt tensor name in " + path.string());
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated parameter archive " + path.string());
    const auto ndim = get<uint32_t>(is, path);
    if (ndim > 8) throw IoError("corrupt tensor rank in " + path.string());
    std::vector<int64_t> dims(ndim);
    int64_t numel = 1;
    for (auto& d : dims) {
      d = get<int64_t>(is, path);
      if (d < 0 || d > (int64_t{1} << 31)) throw IoError("corrupt tensor shape in " + path.string());
      numel *= d;
    }
    auto t = torch::empty(dims, torch::kFloat32);
    if (!is.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(numel * sizeof(float))))
      throw IoError("truncated parameter archive " + path.string());
    out.emplace_back(std::move(name), std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in " + path.string());
  return out;
}

void save_checkpoint(const fs::path& dir, const Models& models, const TrainConfig& config, int64_t step,
                     const torch::optim::AdamW* optimizer) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  nlohmann::json archives = nlohmann::json::object();
  for (const auto& [group, tensors] : parameter_groups(models)) {
    const auto file = group + ".bin";
    write_param_archive(dir / file, tensors);
    archives[group] = {{"file", file}, {"sha256", sha256_file(dir / file)}, {"tensors", tensors.size()}};
  }
  nlohmann::json manifest = {{"format_version", kManifestVersion},
                             {"code_version", kCodeVersion},
                             {"step", step},
                             {"config", config.to_json()},
                             {"schedule", models.schedule.to_json()},
                             {"archives", archives}};
  if (optimizer) {
    torch::save(*optimizer, (dir / "optimizer.pt").string());
    manifest["optimizer"] = "optimizer.pt";
  }
  write_json(dir / "manifest.json", manifest);
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("missing checkpoint manifest " + manifest_path.string());
  LoadedCheckpoint ck{};
  try {
    ck.manifest = nlohmann::json::parse(in);
    if (ck.manifest.at("format_version").get<int>() != kManifestVersion)
      throw IoError("unsupported checkpoint format in " + dir.string());
    ck.config = TrainConfig::from_json(ck.manifest.at("config"));
    ck.step = ck.manifest.at("step").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  ck.models = Models::create(ck.config.model, ck.config.schedule, ck.config.seed);
  ck.models.degrade = ck.config.degrade;

  torch::NoGradGuard no_grad;
  for (const auto& [group, tensors] : parameter_groups(ck.models)) {
    if (!ck.manifest["archives"].contains(group)) throw IoError("checkpoint lacks the " + group + " archive");
    const auto& entry = ck.manifest["archives"][group];
    const auto path = dir / entry.at("file").get<std::string>();
    if (sha256_file(path) != entry.at("sha256").get<std::string>())
      throw IoError("checksum mismatch for " + path.string());
    const auto stored = read_param_archive(path);
    std::map<std::string, torch::Tensor> by_name(stored.begin(), stored.end());
    if (by_name.size() != tensors.size())
      throw IoError(path.string() + ": expected " + std::to_string(tensors.size()) + " tensors, found " +
                    std::to_string(by_name.size()));
    for (const auto& [name, param] : tensors) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw IoError(path.string() + ": missing tensor " + name);
      if (!it->second.sizes().equals(param.sizes())) throw IoError(path.string() + ": shape mismatch for " + name);
      param.copy_(it->second);
    }
  }
  return ck;
}

bool load_optimizer_state(const fs::path& dir, torch::optim::AdamW& optimizer) {
  const auto path = dir / "optimizer.pt";
  if (!fs::exists(path)) return false;
  try {
    torch::load(optimizer, path.string());
  } catch (const c10::Error& e) {
    throw IoError("corrupt optimizer state " + path.string() + ": " + e.what_without_backtrace());
  }
  return true;
}

// ---------------------------------------------------------------------------
// Inference

FaceConditions estimate_conditions(const torch::Tensor& images, int64_t num_landmarks) {
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  std::vector<torch::Tensor> masks, lms;
  for (int64_t i = 0; i < x.size(0); ++i) {
    perception::SyntheticFaceSpec spec;
    spec.identity.fill(0.5);
    spec.image_size = x.size(-1);
    spec.nuisance = perception::fit_nuisance(x[i]).params;
    masks.push_back(perception::toy_face_mask(spec).mask);
    lms.push_back(perception::toy_landmarks(spec, static_cast<int>(num_landmarks)).points.to(torch::kFloat32));
  }
  return {torch::stack(masks), torch::stack(lms)};
}

namespace {

int64_t version_sum(const std::vector<torch::Tensor>& params) {
  int64_t total = 0;
  for (const auto& p : params) total += static_cast<int64_t>(p._version());
  return total;
}

int64_t grads_defined(const std::vector<torch::Tensor>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.grad().defined() ? 1 : 0;
  return n;
}

void check_batch(const torch::Tensor& images, size_t seeds, int64_t size) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != size || images.size(3) != size)
    throw ValidationError("images must be (B, 3, " + std::to_string(size) + ", " + std::to_string(size) + ")");
  if (static_cast<int64_t>(seeds) != images.size(0)) throw ValidationError("one seed per image expected");
}

}  // namespace

torch::Tensor generate(Models& models, const torch::Tensor& images, const torch::Tensor& e_ctrl,
                       const std::vector<uint64_t>& seeds, const GenerateOptions& options) {
  check_batch(images, seeds.size(), models.config.image_size);
  const int64_t B = images.size(0);
  if (e_ctrl.dim() != 2 || e_ctrl.size(0) != B || e_ctrl.size(1) != models.config.d_id)
    throw ValidationError("e_ctrl must be (B, d_id)");

  const auto params = models.parameters();
  const int64_t versions_before = version_sum(params);
  const int64_t grads_before = grads_defined(params);

  torch::Tensor z0;
  int64_t grad_calls = 0;
  int64_t calls = 0;
  {
    torch::NoGradGuard no_grad;
    models.eval();
    FaceConditions estimated;
    const FaceConditions* cond_in = options.conditions;
    if (!cond_in) {
      estimated = estimate_conditions(images, models.config.num_landmarks);
      cond_in = &estimated;
    }
    std::vector<torch::Tensor> degraded, starts;
    for (int64_t i = 0; i < B; ++i) {
      degraded.push_back(idlr::degrade(images[i], cond_in->mask[i], derive_seed(seeds[i], kDegradeStream), models.degrade));
      auto gen = make_generator(derive_seed(seeds[i], kNoiseStream));
      starts.push_back(torch::randn(images[i].sizes(), gen, images.options()));
    }
    const auto x_d = torch::stack(degraded);
    const auto e_non_id =
        idlr::build_nonid_embedding(x_d, cond_in->landmarks, models.idlr, *models.providers.semantic);
    const auto cond = models.idlr->align(e_non_id, models.idlr->project_identity(e_ctrl.to(torch::kFloat32)));

    auto& denoiser = models.denoiser;
    const diffusion::EpsPredictor predictor = [&](const LatentTensor& z, int64_t t, const ConditionTokens& c) {
      ++calls;
      if (torch::GradMode::is_enabled()) ++grad_calls;
      return denoiser->forward(z, t, c).eps_hat;
    };
    z0 = diffusion::ddim_sample_from(predictor, cond, torch::stack(starts), options.steps, models.schedule,
                                     nullptr, options.clip);
  }

  if (options.audit) {
    options.audit->denoiser_calls += calls;
    options.audit->gradient_passes += grad_calls + (grads_defined(params) - grads_before);
    options.audit->parameter_updates += version_sum(params) - versions_before;
  }
  return z0;  // identity latent decoder
}

AnonymizeResult anonymize(Models& models, const torch::Tensor& images, const std::vector<uint64_t>& seeds,
                          const GenerateOptions& options) {
  check_batch(images, seeds.size(), models.config.image_size);
  AnonymizeResult out;
  {
    torch::NoGradGuard no_grad;
    models.eval();
    const auto e_x = models.providers.identity->embed(images);
    std::vector<torch::Tensor> ctrl, u, v;
    for (int64_t i = 0; i < images.size(0); ++i) {
      const auto a = idvae::sample_anonymous_identity({e_x[i], true}, models.idvae,
                                                      derive_seed(seeds[i], kIdentityStream));
      ctrl.push_back(a.embedding.vector);
      u.push_back(a.u);
      v.push_back(a.v);
    }
    out.e_ctrl = torch::stack(ctrl);
    out.oim_latent = torch::stack(u);
    out.source_latent = torch::stack(v);
  }
  out.x_hat = generate(models, images, out.e_ctrl, seeds, options);
  return out;
}

AnonymizeResult anonymize(Models& models, const torch::Tensor& image, uint64_t seed, const GenerateOptions& options) {
  if (image.dim() != 3) throw ValidationError("single-image anonymize expects (3, H, W)");
  auto r = anonymize(models, image.unsqueeze(0), std::vector<uint64_t>{seed}, options);
  r.x_hat = r.x_hat.squeeze(0);
  r.e_ctrl = r.e_ctrl.squeeze(0);
  r.oim_latent = r.oim_latent.squeeze(0);
  r.source_latent = r.source_latent.squeeze(0);
  return r;
}

torch::Tensor reconstruct(Models& models, const torch::Tensor& images, const std::vector<uint64_t>& seeds,
                          const GenerateOptions& options) {
  check_batch(images, seeds.size(), models.config.image_size);
  torch::Tensor e_ctrl;
  {
    torch::NoGradGuard no_grad;
    models.eval();
    const auto e_x = models.providers.identity->embed(images);
    e_ctrl = models.idvae->decode(models.idvae->encode(e_x).mu);
  }
  return generate(models, images, e_ctrl, seeds, options);
}

}  // namespace id2face::pipeline
