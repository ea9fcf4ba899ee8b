#include "id2face/perception.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "id2face/error.hpp"

namespace id2face::perception {
namespace {

// Template geometry in 32-pixel units, relative to the image center.
constexpr double kFaceAx = 10.0;
constexpr double kFaceAy = 12.5;
constexpr double kEyeX = 5.0;
constexpr double kEyeY = -6.5;
constexpr double kEyeAx = 2.0;
constexpr double kEyeAy = 1.0;
constexpr double kMouthY = 7.5;
constexpr double kSensorNoise = 0.02;

constexpr std::array<double, 3> kSkin{0.30, 0.05, -0.10};
constexpr std::array<double, 3> kEyeColor{-0.75, -0.75, -0.70};
constexpr std::array<double, 3> kMouthColor{0.05, -0.65, -0.55};

double mouth_half_width(double expression) { return 4.0 + 1.5 * expression; }
double mouth_half_height(double expression) { return 0.5 + 1.0 * expression; }

double soft_edge(double r, double minor_axis_px) {
  return 1.0 / (1.0 + std::exp(-(1.0 - r) * minor_axis_px * 3.0));
}

double background(int channel, double hue, double v) {
  return 0.45 * std::cos(2.0 * std::numbers::pi * (hue - channel / 3.0)) - 0.15 + 0.15 * v;
}

double amplitude(double factor) { return kIdentityAmplitude * (2.0 * factor - 1.0); }

void check_range(double value, double lo, double hi, const char* name) {
  if (!(value >= lo && value <= hi)) {
    std::ostringstream os;
    os << "synthetic face parameter '" << name << "' = " << value << " outside [" << lo << ", "
       << hi << "]";
    throw ValidationError(os.str());
  }
}

// Renders into a (3, S, S) row-major buffer. When `noise_seed` is empty no
// sensor noise is drawn; when `patch` is false the identity patch is left as
// plain skin.
void render_into(const SyntheticFaceSpec& spec, std::optional<uint64_t> noise_seed, bool patch,
                 std::vector<double>& out) {
  const int64_t size = spec.image_size;
  const double scale = size / 32.0;
  const double center = size / 2.0;
  const auto& n = spec.nuisance;
  const double cs = std::cos(n.pose);
  const double sn = std::sin(n.pose);
  const double mw = mouth_half_width(n.expression);
  const double mh = mouth_half_height(n.expression);
  const auto geo = PatchGeometry::for_size(size);

  out.assign(static_cast<size_t>(3 * size * size), 0.0);
  std::mt19937_64 rng(noise_seed.value_or(0));
  std::normal_distribution<double> normal(0.0, kSensorNoise);

  for (int64_t i = 0; i < size; ++i) {
    const double v_img = ((i + 0.5) - center) / size;
    for (int64_t j = 0; j < size; ++j) {
      const double u = ((j + 0.5) - center) / scale;
      const double v = ((i + 0.5) - center) / scale;
      const double p = u * cs + v * sn;
      const double q = -u * sn + v * cs;

      const double face = soft_edge(std::hypot(p / kFaceAx, q / kFaceAy), kFaceAx * scale);
      const double eye_l = soft_edge(std::hypot((p + kEyeX) / kEyeAx, (q - kEyeY) / kEyeAy), kEyeAy * scale);
      const double eye_r = soft_edge(std::hypot((p - kEyeX) / kEyeAx, (q - kEyeY) / kEyeAy), kEyeAy * scale);
      const double eye = std::max(eye_l, eye_r) * face;
      const double mouth = soft_edge(std::hypot(p / mw, (q - kMouthY) / mh), mh * scale) * face;
      const bool in_patch = patch && geo.contains(i, j);
      const bool inner = i >= geo.inner_begin && i < geo.inner_end && j >= geo.inner_begin &&
                         j < geo.inner_end;
      const double sign = ((i + j) % 2 == 0) ? 1.0 : -1.0;

      for (int c = 0; c < 3; ++c) {
        double value;
        if (in_patch) {
          const double a = amplitude(spec.identity[static_cast<size_t>(inner ? c : c + 3)]);
          value = kSkin[c] + a * sign;
        } else {
          value = background(c, n.background_hue, v_img);
          value += face * (kSkin[c] - value);
          value += eye * (kEyeColor[c] - value);
          value += mouth * (kMouthColor[c] - value);
        }
        value += n.illumination;
        out[static_cast<size_t>((c * size + i) * size + j)] = value;
      }
    }
  }
  if (noise_seed) {
    for (int c = 0; c < 3; ++c)
      for (int64_t i = 0; i < size; ++i)
        for (int64_t j = 0; j < size; ++j) {
          const double e = normal(rng);
          if (!geo.contains(i, j)) out[static_cast<size_t>((c * size + i) * size + j)] += e;
        }
  }
  for (auto& x : out) x = std::clamp(x, -1.0, 1.0);
}

std::array<double, 2> rotate(double p, double q, double pose) {
  return {p * std::cos(pose) - q * std::sin(pose), p * std::sin(pose) + q * std::cos(pose)};
}

torch::Tensor fixed_gaussian(std::vector<int64_t> shape, uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randn(shape, gen, torch::kFloat64);
}

}  // namespace

void SyntheticFaceSpec::validate() const {
  for (size_t k = 0; k < identity.size(); ++k) check_range(identity[k], 0.0, 1.0, "identity");
  check_range(nuisance.pose, -NuisanceParams::kPoseMax, NuisanceParams::kPoseMax, "pose");
  check_range(nuisance.expression, 0.0, 1.0, "expression");
  check_range(nuisance.background_hue, 0.0, 1.0, "background_hue");
  check_range(nuisance.illumination, -NuisanceParams::kIlluminationMax,
              NuisanceParams::kIlluminationMax, "illumination");
  if (image_size < 16 || image_size % 16 != 0)
    throw ValidationError("image_size must be a positive multiple of 16, got " +
                          std::to_string(image_size));
}

nlohmann::json to_json(const SyntheticFaceSpec& spec) {
  return {
      {"identity_params", spec.identity},
      {"nuisance",
       {{"pose", spec.nuisance.pose},
        {"expression", spec.nuisance.expression},
        {"background_hue", spec.nuisance.background_hue},
        {"illumination", spec.nuisance.illumination}}},
      {"image_size", spec.image_size},
  };
}

SyntheticFaceSpec spec_from_json(const nlohmann::json& j) {
  SyntheticFaceSpec spec;
  try {
    spec.identity = j.at("identity_params").get<std::array<double, kIdentityFactors>>();
    const auto& n = j.at("nuisance");
    spec.nuisance.pose = n.at("pose").get<double>();
    spec.nuisance.expression = n.at("expression").get<double>();
    spec.nuisance.background_hue = n.at("background_hue").get<double>();
    spec.nuisance.illumination = n.at("illumination").get<double>();
    spec.image_size = j.value("image_size", 32);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed face spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

PatchGeometry PatchGeometry::for_size(int64_t image_size) {
  const int64_t half = image_size / 8;
  const int64_t c = image_size / 2;
  return {c - half, c + half, c - half / 2, c + half / 2};
}

ImageTensor synth_face(const SyntheticFaceSpec& spec, uint64_t seed) {
  spec.validate();
  std::vector<double> buf;
  render_into(spec, seed, true, buf);
  const int64_t s = spec.image_size;
  return torch::from_blob(buf.data(), {3, s, s}, torch::kFloat64).to(torch::kFloat32);
}

std::array<double, kIdentityFactors> identity_params_from_image(const ImageTensor& image) {
  const auto img = image.to(torch::kFloat64).contiguous();
  const int64_t size = img.size(-1);
  const auto geo = PatchGeometry::for_size(size);
  auto acc = img.accessor<double, 3>();
  std::array<double, kIdentityFactors> out{};
  for (int c = 0; c < 3; ++c) {
    for (int region = 0; region < 2; ++region) {
      double demod = 0.0;
      int count = 0;
      for (int64_t i = geo.begin; i < geo.end; ++i)
        for (int64_t j = geo.begin; j < geo.end; ++j) {
          const bool inner = i >= geo.inner_begin && i < geo.inner_end && j >= geo.inner_begin &&
                             j < geo.inner_end;
          if (inner != (region == 0)) continue;
          const double sign = ((i + j) % 2 == 0) ? 1.0 : -1.0;
          demod += sign * acc[c][i][j];
          ++count;
        }
      // Regions are sign-balanced, so demodulation cancels the mean exactly.
      const double a = demod / count;
      out[static_cast<size_t>(region * 3 + c)] = (a / kIdentityAmplitude + 1.0) / 2.0;
    }
  }
  return out;
}

LandmarkSet toy_landmarks(const SyntheticFaceSpec& spec, int num_landmarks) {
  if (num_landmarks < 10 || (num_landmarks - 8) % 2 != 0)
    throw ValidationError("landmark count must be >= 10 and even");
  spec.validate();
  const int contour = num_landmarks - 8;
  const double e = spec.nuisance.expression;
  std::vector<std::array<double, 2>> tpl;
  tpl.reserve(static_cast<size_t>(num_landmarks));
  for (int k = 0; k < contour; ++k) {
    const double phi = 2.0 * std::numbers::pi * k / contour;
    tpl.push_back({kFaceAx * std::cos(phi), kFaceAy * std::sin(phi)});
  }
  tpl.push_back({-kEyeX - kEyeAx, kEyeY});
  tpl.push_back({-kEyeX + kEyeAx, kEyeY});
  tpl.push_back({kEyeX - kEyeAx, kEyeY});
  tpl.push_back({kEyeX + kEyeAx, kEyeY});
  tpl.push_back({-mouth_half_width(e), kMouthY});
  tpl.push_back({mouth_half_width(e), kMouthY});
  tpl.push_back({0.0, kMouthY - mouth_half_height(e)});
  tpl.push_back({0.0, kMouthY + mouth_half_height(e)});

  const double size = spec.image_size;
  const double scale = size / 32.0;
  auto pts = torch::empty({num_landmarks, 2}, torch::kFloat64);
  auto acc = pts.accessor<double, 2>();
  for (int k = 0; k < num_landmarks; ++k) {
    const auto [u, v] = rotate(tpl[static_cast<size_t>(k)][0], tpl[static_cast<size_t>(k)][1],
                               spec.nuisance.pose);
    acc[k][0] = (size / 2.0 + scale * u) / size;
    acc[k][1] = (size / 2.0 + scale * v) / size;
  }
  return {pts};
}

std::vector<int64_t> landmark_mirror_permutation(int num_landmarks) {
  const int contour = num_landmarks - 8;
  std::vector<int64_t> perm(static_cast<size_t>(num_landmarks));
  for (int k = 0; k < contour; ++k) perm[static_cast<size_t>(k)] = ((contour / 2 - k) % contour + contour) % contour;
  const int e = contour;
  perm[static_cast<size_t>(e + 0)] = e + 3;
  perm[static_cast<size_t>(e + 1)] = e + 2;
  perm[static_cast<size_t>(e + 2)] = e + 1;
  perm[static_cast<size_t>(e + 3)] = e + 0;
  perm[static_cast<size_t>(e + 4)] = e + 5;
  perm[static_cast<size_t>(e + 5)] = e + 4;
  perm[static_cast<size_t>(e + 6)] = e + 6;
  perm[static_cast<size_t>(e + 7)] = e + 7;
  return perm;
}

FaceMask toy_face_mask(const SyntheticFaceSpec& spec) {
  spec.validate();
  const int64_t size = spec.image_size;
  const double scale = size / 32.0;
  const double center = size / 2.0;
  const double cs = std::cos(spec.nuisance.pose);
  const double sn = std::sin(spec.nuisance.pose);
  auto mask = torch::zeros({size, size}, torch::kFloat32);
  auto acc = mask.accessor<float, 2>();
  for (int64_t i = 0; i < size; ++i)
    for (int64_t j = 0; j < size; ++j) {
      const double u = ((j + 0.5) - center) / scale;
      const double v = ((i + 0.5) - center) / scale;
      const double p = u * cs + v * sn;
      const double q = -u * sn + v * cs;
      if (std::hypot(p / kFaceAx, q / kFaceAy) <= 1.0) acc[i][j] = 1.0f;
    }
  return {mask};
}

NuisanceFit fit_nuisance(const ImageTensor& image) {
  const auto img = image.to(torch::kFloat64).contiguous();
  if (img.dim() != 3 || img.size(0) != 3 || img.size(1) != img.size(2))
    throw ValidationError("fit_nuisance expects a (3, S, S) image");
  const int64_t size = img.size(1);
  const auto geo = PatchGeometry::for_size(size);
  const double* px = img.data_ptr<double>();
  const auto at = [&](int c, int64_t i, int64_t j) { return px[(c * size + i) * size + j]; };

  // Hue and illumination from the corner blocks, which the face never reaches.
  const int64_t cb = std::max<int64_t>(2, size * 5 / 32);
  std::vector<std::array<int64_t, 2>> corners;
  for (int64_t i = 0; i < size; ++i)
    for (int64_t j = 0; j < size; ++j)
      if ((i < cb || i >= size - cb) && (j < cb || j >= size - cb)) corners.push_back({i, j});

  const auto bg_cost = [&](double hue, double* illum) {
    double sum = 0.0;
    for (int c = 0; c < 3; ++c)
      for (const auto& [i, j] : corners)
        sum += at(c, i, j) - background(c, hue, ((i + 0.5) - size / 2.0) / size);
    const double ell = std::clamp(sum / (3.0 * corners.size()), -NuisanceParams::kIlluminationMax,
                                  NuisanceParams::kIlluminationMax);
    double sse = 0.0;
    for (int c = 0; c < 3; ++c)
      for (const auto& [i, j] : corners) {
        const double r = at(c, i, j) - background(c, hue, ((i + 0.5) - size / 2.0) / size) - ell;
        sse += r * r;
      }
    if (illum) *illum = ell;
    return sse;
  };
  double best_hue = 0.0;
  double best = std::numeric_limits<double>::infinity();
  constexpr int kHueGrid = 360;
  for (int k = 0; k < kHueGrid; ++k) {
    const double h = static_cast<double>(k) / kHueGrid;
    const double cost = bg_cost(h, nullptr);
    if (cost < best) {
      best = cost;
      best_hue = h;
    }
  }
  for (double step = 0.5 / kHueGrid; step > 1e-7; step *= 0.5) {
    for (double cand : {best_hue - step, best_hue + step}) {
      const double h = std::clamp(cand, 0.0, 1.0);
      const double cost = bg_cost(h, nullptr);
      if (cost < best) {
        best = cost;
        best_hue = h;
      }
    }
  }
  double illumination = 0.0;
  bg_cost(best_hue, &illumination);

  SyntheticFaceSpec trial;
  trial.image_size = static_cast<int>(size);
  trial.nuisance.background_hue = best_hue;
  trial.nuisance.illumination = illumination;
  std::vector<double> buf;
  const auto face_cost = [&](double pose, double expression) {
    trial.nuisance.pose = std::clamp(pose, -NuisanceParams::kPoseMax, NuisanceParams::kPoseMax);
    trial.nuisance.expression = std::clamp(expression, 0.0, 1.0);
    render_into(trial, std::nullopt, false, buf);
    double sse = 0.0;
    for (int c = 0; c < 3; ++c)
      for (int64_t i = 0; i < size; ++i)
        for (int64_t j = 0; j < size; ++j) {
          if (geo.contains(i, j)) continue;
          const double r = at(c, i, j) - buf[static_cast<size_t>((c * size + i) * size + j)];
          sse += r * r;
        }
    return sse;
  };

  double pose = 0.0;
  double expression = 0.0;
  best = std::numeric_limits<double>::infinity();
  constexpr int kPoseGrid = 41;
  constexpr int kExprGrid = 11;
  for (int a = 0; a < kPoseGrid; ++a)
    for (int b = 0; b < kExprGrid; ++b) {
      const double p = -NuisanceParams::kPoseMax + 2.0 * NuisanceParams::kPoseMax * a / (kPoseGrid - 1);
      const double e = static_cast<double>(b) / (kExprGrid - 1);
      const double cost = face_cost(p, e);
      if (cost < best) {
        best = cost;
        pose = p;
        expression = e;
      }
    }
  double pose_step = NuisanceParams::kPoseMax / (kPoseGrid - 1);
  double expr_step = 0.5 / (kExprGrid - 1);
  for (int round = 0; round < 10; ++round) {
    double bp = pose;
    double be = expression;
    for (int a = -2; a <= 2; ++a)
      for (int b = -2; b <= 2; ++b) {
        const double p = std::clamp(pose + a * pose_step, -NuisanceParams::kPoseMax, NuisanceParams::kPoseMax);
        const double e = std::clamp(expression + b * expr_step, 0.0, 1.0);
        const double cost = face_cost(p, e);
        if (cost < best) {
          best = cost;
          bp = p;
          be = e;
        }
      }
    pose = bp;
    expression = be;
    pose_step *= 0.5;
    expr_step *= 0.5;
  }

  int64_t count = 0;
  for (int64_t i = 0; i < size; ++i)
    for (int64_t j = 0; j < size; ++j)
      if (!geo.contains(i, j)) ++count;
  NuisanceFit fit;
  fit.params = trial.nuisance;
  fit.params.pose = pose;
  fit.params.expression = expression;
  fit.rms_residual = std::sqrt(best / (3.0 * count));
  return fit;
}

// ---------------------------------------------------------------------------

ToyIdentityEmbedder::ToyIdentityEmbedder(int64_t dim, int64_t image_size)
    : dim_(dim), image_size_(image_size) {
  if (dim <= 0) throw ValidationError("identity embedding dim must be positive");
  const int64_t features = 2 * 3 * kBins;
  // Orthonormal columns preserve cosine similarity of the statistics.
  if (dim >= features) {
    auto [q, r] = torch::linalg_qr(fixed_gaussian({dim, features}, 0x1D2FACE));
    probe_ = q;
  } else {
    auto [q, r] = torch::linalg_qr(fixed_gaussian({features, dim}, 0x1D2FACE));
    probe_ = q.t();
  }
  probe_ = probe_.to(torch::kFloat32).contiguous();
  bin_centers_ = torch::linspace(-kBinRange, kBinRange, kBins, torch::kFloat32);

  const auto geo = PatchGeometry::for_size(image_size);
  const int64_t p = geo.end - geo.begin;
  sign_ = torch::empty({p, p}, torch::kFloat32);
  inner_weight_ = torch::zeros({p, p}, torch::kFloat32);
  ring_weight_ = torch::zeros({p, p}, torch::kFloat32);
  auto s = sign_.accessor<float, 2>();
  auto iw = inner_weight_.accessor<float, 2>();
  auto rw = ring_weight_.accessor<float, 2>();
  const int64_t inner_n = (geo.inner_end - geo.inner_begin) * (geo.inner_end - geo.inner_begin);
  const int64_t ring_n = p * p - inner_n;
  for (int64_t a = 0; a < p; ++a)
    for (int64_t b = 0; b < p; ++b) {
      const int64_t i = geo.begin + a;
      const int64_t j = geo.begin + b;
      s[a][b] = ((i + j) % 2 == 0) ? 1.0f : -1.0f;
      const bool inner = i >= geo.inner_begin && i < geo.inner_end && j >= geo.inner_begin &&
                         j < geo.inner_end;
      if (inner)
        iw[a][b] = 1.0f / static_cast<float>(inner_n);
      else
        rw[a][b] = 1.0f / static_cast<float>(ring_n);
    }
}

torch::Tensor ToyIdentityEmbedder::region_statistics(const torch::Tensor& images) const {
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != image_size_ || x.size(3) != image_size_)
    throw ValidationError("identity embedder expects (B, 3, S, S) images of the configured size");
  const auto geo = PatchGeometry::for_size(image_size_);
  const auto opts = x.options();
  auto patch = x.slice(2, geo.begin, geo.end).slice(3, geo.begin, geo.end);  // (B,3,P,P)
  const auto sign = sign_.to(opts);
  const auto centers = bin_centers_.to(opts).view({1, 1, 1, 1, kBins});
  const double inv_two_w2 = 1.0 / (2.0 * kKernelWidth * kKernelWidth);

  std::vector<torch::Tensor> groups;
  for (const auto& w : {inner_weight_, ring_weight_}) {
    const auto weight = w.to(opts);
    const auto mean = (patch * weight).sum({-2, -1}, true);
    const auto d = (sign * (patch - mean)).unsqueeze(-1);  // (B,3,P,P,1)
    const auto kernel = torch::exp(-(d - centers).pow(2) * inv_two_w2);
    const auto hist = (d.abs() * kernel * weight.unsqueeze(-1)).sum({2, 3});  // (B,3,bins)
    groups.push_back(hist.flatten(1));
  }
  return torch::cat(groups, 1);
}

torch::Tensor ToyIdentityEmbedder::embed(const torch::Tensor& images) const {
  const auto stats = region_statistics(images);
  const auto e = torch::matmul(stats, probe_.to(stats.options()).t());
  return torch::nn::functional::normalize(e, torch::nn::functional::NormalizeFuncOptions().dim(1).eps(1e-12));
}

ToySemanticFeatures::ToySemanticFeatures(int64_t token_dim, int64_t image_size)
    : token_dim_(token_dim), image_size_(image_size) {
  if (image_size % 16 != 0) throw ValidationError("semantic features need image_size % 16 == 0");
  weight_ = (fixed_gaussian({token_dim, 12}, 0x5E3A11C) / std::sqrt(12.0)).to(torch::kFloat32);
  bias_ = (0.1 * fixed_gaussian({token_dim}, 0x5E3A11D)).to(torch::kFloat32);
}

int64_t ToySemanticFeatures::token_count() const { return 16 + 4; }

torch::Tensor ToySemanticFeatures::features(const torch::Tensor& images) const {
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != image_size_ || x.size(3) != image_size_)
    throw ValidationError("semantic features expect (B, 3, S, S) images of the configured size");
  const int64_t b = x.size(0);
  namespace F = torch::nn::functional;
  // Fine scale: 8x8 cells, grouped 2x2 into 16 tokens.
  auto fine = F::avg_pool2d(x, F::AvgPool2dFuncOptions(image_size_ / 8));
  fine = fine.view({b, 3, 4, 2, 4, 2}).permute({0, 2, 4, 1, 3, 5}).reshape({b, 16, 12});
  // Coarse scale: 4x4 cells, grouped 2x2 into 4 tokens.
  auto coarse = F::avg_pool2d(x, F::AvgPool2dFuncOptions(image_size_ / 4));
  coarse = coarse.view({b, 3, 2, 2, 2, 2}).permute({0, 2, 4, 1, 3, 5}).reshape({b, 4, 12});
  const auto desc = torch::cat({fine, coarse}, 1);
  return torch::matmul(desc, weight_.to(desc.options()).t()) + bias_.to(desc.options());
}

std::array<int64_t, 4> ToySemanticFeatures::receptive_field(int64_t token) const {
  if (token < 16) {
    const int64_t step = image_size_ / 4;
    const int64_t r = token / 4;
    const int64_t c = token % 4;
    return {r * step, (r + 1) * step, c * step, (c + 1) * step};
  }
  const int64_t step = image_size_ / 2;
  const int64_t m = token - 16;
  return {(m / 2) * step, (m / 2 + 1) * step, (m % 2) * step, (m % 2 + 1) * step};
}

IdentityEmbedding toy_identity_embed(const ImageTensor& image) {
  const ToyIdentityEmbedder embedder(64, image.size(-1));
  const auto x = image.to(torch::kFloat32);
  const auto raw = torch::matmul(embedder.region_statistics(x), embedder.probe().t());
  if (raw.norm().item<double>() < 1e-8)
    throw DegenerateError("identity region carries no signal; embedding is degenerate");
  return {embedder.embed(x).squeeze(0), true};
}

torch::Tensor toy_semantic_features(const ImageTensor& image) {
  ToySemanticFeatures features(64, image.size(-1));
  return features.features(image.to(torch::kFloat32)).squeeze(0);
}

Providers Providers::toy(int64_t d_id, int64_t d_tok, int64_t image_size) {
  return {std::make_shared<ToyIdentityEmbedder>(d_id, image_size),
          std::make_shared<ToySemanticFeatures>(d_tok, image_size)};
}

// ---------------------------------------------------------------------------

std::vector<ManifestRecord> generate_corpus(const CorpusConfig& cfg) {
  if (cfg.n_identities <= 0 || cfg.renders_per_identity <= 0)
    throw ValidationError("corpus needs at least one identity and one render per identity");
  auto gen = make_generator(cfg.seed);
  const auto ids = torch::rand({cfg.n_identities, kIdentityFactors}, gen, torch::kFloat64);
  std::vector<ManifestRecord> base;
  for (int i = 0; i < cfg.n_identities; ++i) {
    ManifestRecord r;
    r.identity_id = i;
    r.spec.image_size = cfg.image_size;
    for (int k = 0; k < kIdentityFactors; ++k) r.spec.identity[static_cast<size_t>(k)] = ids[i][k].item<double>();
    base.push_back(r);
  }
  return resample_nuisance(base, cfg.renders_per_identity, derive_seed(cfg.seed, 1));
}

std::vector<ManifestRecord> resample_nuisance(const std::vector<ManifestRecord>& identities,
                                              int renders_per_identity, uint64_t seed) {
  std::vector<ManifestRecord> unique;
  for (const auto& r : identities) {
    const bool seen = std::any_of(unique.begin(), unique.end(),
                                  [&](const ManifestRecord& u) { return u.identity_id == r.identity_id; });
    if (!seen) unique.push_back(r);
  }
  auto gen = make_generator(seed);
  const int64_t n = static_cast<int64_t>(unique.size()) * renders_per_identity;
  const auto u = torch::rand({std::max<int64_t>(n, 1), 4}, gen, torch::kFloat64);
  std::vector<ManifestRecord> out;
  int64_t row = 0;
  for (const auto& id : unique) {
    for (int k = 0; k < renders_per_identity; ++k, ++row) {
      ManifestRecord r = id;
      r.render_id = k;
      auto& nu = r.spec.nuisance;
      nu.pose = NuisanceParams::kPoseMax * (2.0 * u[row][0].item<double>() - 1.0);
      nu.expression = u[row][1].item<double>();
      nu.background_hue = u[row][2].item<double>();
      nu.illumination = NuisanceParams::kIlluminationMax * (2.0 * u[row][3].item<double>() - 1.0);
      r.seed = derive_seed(seed, static_cast<uint64_t>(row) + 1000);
      out.push_back(r);
    }
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open manifest for writing: " + path.string());
  for (const auto& r : records) {
    auto j = to_json(r.spec);
    j["identity_id"] = r.identity_id;
    j["render_id"] = r.render_id;
    j["seed"] = r.seed;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("failed writing manifest: " + path.string());
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  std::vector<ManifestRecord> records;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestRecord r;
      r.spec = spec_from_json(j);
      r.identity_id = j.at("identity_id").get<int64_t>();
      r.render_id = j.value("render_id", int64_t{0});
      r.seed = j.at("seed").get<uint64_t>();
      records.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

ImageTensor render(const ManifestRecord& record) { return synth_face(record.spec, record.seed); }

ImageTensor render_all(const std::vector<ManifestRecord>& records) {
  std::vector<torch::Tensor> imgs;
  imgs.reserve(records.size());
  for (const auto& r : records) imgs.push_back(render(r));
  return torch::stack(imgs);
}

}  // namespace id2face::perception
