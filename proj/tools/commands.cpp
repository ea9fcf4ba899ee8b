#include "commands.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <utility>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "id2face/error.hpp"
#include "id2face/image_io.hpp"
#include "id2face/metrics.hpp"
#include "id2face/pipeline.hpp"

namespace id2face::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int64_t kChunk = 16;

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

double cosine(const torch::Tensor& a, const torch::Tensor& b) {
  const auto x = a.to(torch::kFloat64);
  const auto y = b.to(torch::kFloat64);
  return (torch::dot(x, y) / (x.norm() * y.norm()).clamp_min(1e-300)).item<double>();
}

uint64_t item_seed(uint64_t seed, int64_t index, int64_t variant) {
  return derive_seed(derive_seed(seed, static_cast<uint64_t>(index)), static_cast<uint64_t>(variant));
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  int64_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace

fs::path Context::resolve(const std::string& p) const {
  const fs::path path(p);
  return path.is_absolute() ? path : workdir / path;
}

std::string record_id(const perception::ManifestRecord& r) {
  return "i" + std::to_string(r.identity_id) + "_r" + std::to_string(r.render_id);
}

InputSet load_inputs(const fs::path& path) {
  InputSet in;
  if (path.empty()) throw ValidationError("no input given");
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path))
      if (e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ValidationError("no PNG files in " + path.string());
    std::vector<torch::Tensor> imgs;
    for (const auto& f : files) {
      imgs.push_back(image_io::read_png(f));
      in.ids.push_back(f.stem().string());
      in.source_ids.push_back(-1);
    }
    in.images = torch::stack(imgs);
  } else if (path.extension() == ".png") {
    in.images = image_io::read_png(path).unsqueeze(0);
    in.ids.push_back(path.stem().string());
    in.source_ids.push_back(-1);
  } else {
    const auto records = perception::read_manifest(path);
    if (records.empty()) throw ValidationError("empty manifest " + path.string());
    in.images = perception::render_all(records);
    for (const auto& r : records) {
      in.ids.push_back(record_id(r));
      in.source_ids.push_back(r.identity_id);
    }
  }
  return in;
}

// ---------------------------------------------------------------------------

void gen_data(const Context& ctx) {
  const auto& cfg = ctx.config.gen_data;
  const auto out = ctx.resolve(cfg.out);
  const auto manifest = out / "manifest.jsonl";
  if (fs::exists(manifest) && !cfg.overwrite)
    throw IoError(manifest.string() + " exists; set gen_data.overwrite to replace it");
  ensure_dir(out);

  const auto records = perception::generate_corpus(cfg.corpus);
  perception::write_manifest(manifest, records);
  std::vector<perception::ManifestRecord> test;
  if (cfg.test_renders_per_identity > 0) {
    test = perception::resample_nuisance(records, cfg.test_renders_per_identity,
                                         derive_seed(cfg.corpus.seed, 0x7E57));
    perception::write_manifest(out / "test.jsonl", test);
  }
  if (cfg.write_png) {
    for (const auto& [name, set] : {std::pair{"images", &records}, std::pair{"test_images", &std::as_const(test)}}) {
      if (set->empty()) continue;
      ensure_dir(out / name);
      for (const auto& r : *set) image_io::write_png(out / name / (record_id(r) + ".png"), perception::render(r));
    }
  }
  write_json_file(out / "gen_data.json", {{"config_hash", ctx.config.hash()},
                                          {"records", records.size()},
                                          {"test_records", test.size()}});
  std::cerr << "wrote " << records.size() << " records to " << manifest.string() << '\n';
}

void train(const Context& ctx) {
  const auto& tc = ctx.config.train;
  auto cfg = tc.train;
  const auto manifest =
      cfg.manifest.empty() ? ctx.resolve(ctx.config.gen_data.out) / "manifest.jsonl" : ctx.resolve(cfg.manifest);
  const pipeline::Dataset data(perception::read_manifest(manifest), cfg.model.num_landmarks);

  std::optional<pipeline::LoadedCheckpoint> resumed;
  pipeline::Models fresh;
  if (!tc.resume.empty()) {
    resumed = pipeline::load_checkpoint(ctx.resolve(tc.resume));
    if (resumed->config.model.to_json() != cfg.model.to_json())
      throw ValidationError("resume: checkpoint model config differs from train.model");
  } else {
    fresh = pipeline::Models::create(cfg.model, cfg.schedule, cfg.seed);
  }
  auto& models = resumed ? resumed->models : fresh;
  models.degrade = cfg.degrade;

  pipeline::Trainer trainer(models, cfg);
  if (resumed) {
    trainer.set_step_count(resumed->step);
    pipeline::load_optimizer_state(ctx.resolve(tc.resume), trainer.optimizer());
  }

  const auto out = ctx.resolve(tc.out);
  const auto log_path = ctx.resolve(tc.log);
  if (log_path.has_parent_path()) ensure_dir(log_path.parent_path());
  const bool append = resumed.has_value() && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());
  if (!append) log << losses::LossBreakdown::csv_header() << '\n';
  log.precision(9);

  auto save = [&] {
    pipeline::save_checkpoint(out, models, cfg, trainer.step_count(), &trainer.optimizer());
    write_json_file(out / "run.json", {{"config_hash", ctx.config.hash()}, {"step", trainer.step_count()}});
  };
  while (trainer.step_count() < cfg.steps) {
    const int64_t step = trainer.step_count();
    const auto b = trainer.step(data);
    log << b.csv_row(step) << '\n';
    if ((step + 1) % 50 == 0 || step + 1 == cfg.steps)
      std::cerr << "step " << step + 1 << "/" << cfg.steps << " loss " << b.total << '\n';
    if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) save();
  }
  if (!log) throw IoError("failed writing " + log_path.string());
  save();
}

void anonymize(const Context& ctx) {
  const auto& cfg = ctx.config.anonymize;
  auto ck = pipeline::load_checkpoint(ctx.resolve(cfg.checkpoint));
  auto& models = ck.models;
  const auto input = load_inputs(ctx.resolve(cfg.input));
  const auto out = ctx.resolve(cfg.out);
  ensure_dir(out);
  const std::string hash = ctx.config.hash();
  const auto& embedder = *models.providers.identity;

  std::ofstream rows(out / "anonymize.jsonl");
  if (!rows) throw IoError("cannot write " + (out / "anonymize.jsonl").string());
  const int64_t n = input.images.size(0);
  for (int64_t begin = 0; begin < n; begin += kChunk) {
    const int64_t end = std::min(n, begin + kChunk);
    const auto x = input.images.slice(0, begin, end);
    const auto cond = pipeline::estimate_conditions(x, models.config.num_landmarks);
    pipeline::GenerateOptions opts;
    opts.steps = cfg.steps;
    opts.conditions = &cond;
    for (int64_t v = 0; v < cfg.num_variants; ++v) {
      std::vector<uint64_t> seeds;
      for (int64_t i = begin; i < end; ++i) seeds.push_back(item_seed(cfg.seed, i, v));
      const auto r = pipeline::anonymize(models, x, seeds, opts);
      torch::Tensor ex, eh;
      {
        torch::NoGradGuard no_grad;
        ex = embedder.embed(x);
        eh = embedder.embed(r.x_hat.clamp(-1, 1));
      }
      for (int64_t i = begin; i < end; ++i) {
        const int64_t k = i - begin;
        const std::string name = input.ids[i] + "_v" + std::to_string(v) + ".png";
        image_io::write_png(out / name, r.x_hat[k]);
        if (cfg.write_grid) {
          torch::NoGradGuard no_grad;
          const auto degraded =
              idlr::degrade(x[k], cond.mask[k], derive_seed(seeds[k], pipeline::kDegradeStream), models.degrade);
          image_io::write_png(out / (input.ids[i] + "_v" + std::to_string(v) + "_grid.png"),
                              image_io::hstack({x[k], degraded, r.x_hat[k]}));
        }
        rows << json{{"input_id", input.ids[i]},
                     {"source_id", input.source_ids[i]},
                     {"variant", v},
                     {"seed", seeds[k]},
                     {"output", name},
                     {"oim_latent_norm", r.oim_latent[k].norm().item<double>()},
                     {"source_cosine", cosine(ex[k], eh[k])},
                     {"config_hash", hash}}
                    .dump()
             << '\n';
      }
    }
    std::cerr << "anonymized " << end << "/" << n << '\n';
  }
  if (!rows) throw IoError("failed writing anonymize.jsonl");
}

void evaluate(const Context& ctx) {
  const auto& cfg = ctx.config.evaluate;
  const auto originals_path =
      ctx.resolve(cfg.originals.empty() ? ctx.config.anonymize.input : cfg.originals);
  const auto anonymized_path = cfg.anonymized.empty()
                                   ? ctx.resolve(ctx.config.anonymize.out) / "anonymize.jsonl"
                                   : ctx.resolve(cfg.anonymized);
  const auto records = perception::read_manifest(originals_path);
  if (records.empty()) throw ValidationError("empty gallery manifest " + originals_path.string());
  const auto gallery = perception::render_all(records);
  std::vector<int64_t> gallery_labels;
  std::map<std::string, int64_t> by_id;
  for (size_t j = 0; j < records.size(); ++j) {
    gallery_labels.push_back(records[j].identity_id);
    by_id[record_id(records[j])] = static_cast<int64_t>(j);
  }

  // Queries: anonymize rows (with an "output" image) or plain manifest rows.
  std::vector<torch::Tensor> queries, paired;
  std::vector<int64_t> labels;
  std::vector<std::string> ids, unpaired;
  const auto rows = read_jsonl(anonymized_path);
  const bool plain = !rows.empty() && !rows.front().contains("output");
  const auto plain_records = plain ? perception::read_manifest(anonymized_path)
                                   : std::vector<perception::ManifestRecord>{};
  for (size_t i = 0; i < rows.size(); ++i) {
    const std::string input_id = plain ? record_id(plain_records[i]) : rows[i].at("input_id").get<std::string>();
    const auto it = by_id.find(input_id);
    if (it == by_id.end()) {
      unpaired.push_back(input_id);
      continue;
    }
    queries.push_back(plain ? perception::render(plain_records[i])
                            : image_io::read_png(anonymized_path.parent_path() / rows[i].at("output").get<std::string>()));
    paired.push_back(gallery[it->second]);
    labels.push_back(plain ? plain_records[i].identity_id : rows[i].at("source_id").get<int64_t>());
    ids.push_back(plain ? input_id : rows[i].at("output").get<std::string>());
  }
  if (queries.empty()) throw ValidationError("evaluate: no paired queries in " + anonymized_path.string());

  const auto providers = perception::Providers::toy(ctx.config.train.train.model.d_id, 1, gallery.size(-1));
  const auto q = torch::stack(queries);
  torch::Tensor eq, eg;
  {
    torch::NoGradGuard no_grad;
    eq = providers.identity->embed(q);
    eg = providers.identity->embed(gallery);
  }
  const auto pairing = cfg.pairing == "nearest" ? metrics::CosinePairing::kNearestTrue : metrics::CosinePairing::kCentroid;
  const auto retrieval = metrics::retrieval_eval(eq, labels, eg, gallery_labels, pairing);
  const auto attributes = metrics::attribute_eval(torch::stack(paired), q, cfg.residual_threshold);
  if (!cfg.embeddings.empty()) metrics::dump_embeddings(q, ids, labels, *providers.identity, ctx.resolve(cfg.embeddings));

  const json report{{"config_hash", ctx.config.hash()},
                    {"originals", originals_path.string()},
                    {"anonymized", anonymized_path.string()},
                    {"retrieval", retrieval.to_json()},
                    {"attributes", attributes.to_json()},
                    {"n_unpaired", unpaired.size()},
                    {"unpaired", unpaired}};
  const auto out = ctx.resolve(cfg.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_json_file(out, report);
  std::cout << report.dump(2) << '\n';
}

void sample_identity(const Context& ctx) {
  const auto& cfg = ctx.config.sample_identity;
  auto ck = pipeline::load_checkpoint(ctx.resolve(cfg.checkpoint));
  auto& models = ck.models;
  models.eval();
  const auto input = load_inputs(ctx.resolve(cfg.input));
  const auto out = ctx.resolve(cfg.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  std::ofstream rows(out);
  if (!rows) throw IoError("cannot write " + out.string());
  const std::string hash = ctx.config.hash();

  torch::NoGradGuard no_grad;
  const auto e_x = models.providers.identity->embed(input.images);
  for (int64_t i = 0; i < e_x.size(0); ++i) {
    for (int64_t k = 0; k < cfg.count; ++k) {
      const uint64_t seed = item_seed(cfg.seed, i, k);
      const auto a = idvae::sample_anonymous_identity({e_x[i], true}, models.idvae,
                                                      derive_seed(seed, pipeline::kIdentityStream));
      const auto e = a.embedding.vector.to(torch::kFloat64).contiguous();
      rows << json{{"input_id", input.ids[i]},
                   {"source_id", input.source_ids[i]},
                   {"index", k},
                   {"seed", seed},
                   {"attempts", a.attempts},
                   {"oim_latent_norm", a.u.norm().item<double>()},
                   {"source_cosine", cosine(e_x[i], a.embedding.vector)},
                   {"embedding", std::vector<double>(e.data_ptr<double>(), e.data_ptr<double>() + e.numel())},
                   {"config_hash", hash}}
                  .dump()
           << '\n';
    }
  }
  if (!rows) throw IoError("failed writing " + out.string());
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"Identity-decoupled diffusion face anonymization on synthetic faces"};
  app.require_subcommand(1);
  std::string config_path;
  std::string workdir = ".";
  std::optional<uint64_t> seed;
  std::optional<int64_t> variants;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON or TOML run configuration");
    sub->add_option("-w,--workdir", workdir, "root for every relative path")->capture_default_str();
    sub->add_option("-s,--seed", seed, "overrides the command's seed");
  };
  auto* gen = app.add_subcommand("gen-data", "render the synthetic corpus and write its manifest");
  auto* tr = app.add_subcommand("train", "train denoiser, recomposer and identity VAE jointly");
  auto* an = app.add_subcommand("anonymize", "anonymize images with a trained checkpoint");
  auto* ev = app.add_subcommand("evaluate", "identity retrieval and attribute reports");
  auto* si = app.add_subcommand("sample-identity", "draw anonymous identity embeddings");
  for (auto* sub : {gen, tr, an, ev, si}) add_common(sub);
  an->add_option("-n,--num-variants", variants, "anonymized variants per input")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorKind::kValidation);
  }

  try {
    torch::set_num_threads(1);
    Context ctx;
    ctx.workdir = workdir;
    if (!config_path.empty()) {
      const fs::path p(config_path);
      ctx.config = config::load(p.is_absolute() || fs::exists(p) ? p : ctx.workdir / p);
    }
    auto& c = ctx.config;
    if (seed) {
      if (*gen) c.gen_data.corpus.seed = *seed;
      if (*tr) c.train.train.seed = *seed;
      if (*an) c.anonymize.seed = *seed;
      if (*si) c.sample_identity.seed = *seed;
    }
    if (variants) c.anonymize.num_variants = *variants;

    if (*gen) gen_data(ctx);
    else if (*tr) train(ctx);
    else if (*an) anonymize(ctx);
    else if (*ev) evaluate(ctx);
    else sample_identity(ctx);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::kRuntime);
  }
}

}  // namespace id2face::cli
