#pragma once

// Perception providers: a procedural face renderer with known identity and
// nuisance factors, and deterministic stand-ins for the recognizer, semantic
// feature extractor, landmark detector and face parser.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "id2face/types.hpp"

namespace id2face::perception {

inline constexpr int kIdentityFactors = 6;
inline constexpr double kIdentityAmplitude = 0.5;

// Ranges: pose [-0.5, 0.5] rad (in-plane roll), expression [0, 1] (mouth
// opening), background_hue [0, 1], illumination [-0.2, 0.2] (additive).
struct NuisanceParams {
  double pose = 0.0;
  double expression = 0.0;
  double background_hue = 0.0;
  double illumination = 0.0;

  static constexpr double kPoseMax = 0.5;
  static constexpr double kIlluminationMax = 0.2;
};

/// Identity factors each lie in [0, 1]. Factor k maps to a checker amplitude
/// a_k = 0.5 * (2 p_k - 1) inside the central identity patch: factors 0-2 drive
/// the inner block (R, G, B) and 3-5 drive the surrounding ring.
struct SyntheticFaceSpec {
  std::array<double, kIdentityFactors> identity{0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  NuisanceParams nuisance;
  int image_size = 32;

  void validate() const;
};

nlohmann::json to_json(const SyntheticFaceSpec& spec);
SyntheticFaceSpec spec_from_json(const nlohmann::json& j);

struct LandmarkSet {
  torch::Tensor points;  // (K, 2) float64, (x, y) normalized to [0, 1]
};

struct FaceMask {
  torch::Tensor mask;  // (H, W) float32 with values in {0, 1}
};

/// Geometry of the fixed identity patch for a given image size.
struct PatchGeometry {
  int64_t begin;        // first row/col of the patch
  int64_t end;          // one past the last row/col
  int64_t inner_begin;
  int64_t inner_end;

  static PatchGeometry for_size(int64_t image_size);
  bool contains(int64_t row, int64_t col) const {
    return row >= begin && row < end && col >= begin && col < end;
  }
};

/// Renders (3, S, S) float32 in [-1, 1]. The seed only drives a faint sensor
/// noise outside the identity patch.
ImageTensor synth_face(const SyntheticFaceSpec& spec, uint64_t seed);

/// Exact inverse of the identity rendering: recovers identity factors from the
/// patch pixels of any render.
std::array<double, kIdentityFactors> identity_params_from_image(const ImageTensor& image);

LandmarkSet toy_landmarks(const SyntheticFaceSpec& spec, int num_landmarks = 16);

/// Index permutation mapping each keypoint to its mirror partner.
std::vector<int64_t> landmark_mirror_permutation(int num_landmarks = 16);

FaceMask toy_face_mask(const SyntheticFaceSpec& spec);

/// Least-squares inversion of the nuisance map on pixels outside the identity
/// patch. Background hue and illumination come from the always-background
/// corners, pose and expression from a coarse grid refined by local search.
struct NuisanceFit {
  NuisanceParams params;
  double rms_residual = 0.0;
};
NuisanceFit fit_nuisance(const ImageTensor& image);

// ---------------------------------------------------------------------------
// Provider interfaces

class IdentityProvider {
 public:
  virtual ~IdentityProvider() = default;
  virtual int64_t dim() const = 0;
  /// Differentiable batched embedding, (B, 3, H, W) -> (B, d). Degenerate rows
  /// normalize against a small epsilon instead of throwing.
  virtual torch::Tensor embed(const torch::Tensor& images) const = 0;
};

class SemanticProvider {
 public:
  virtual ~SemanticProvider() = default;
  virtual int64_t token_count() const = 0;
  virtual int64_t token_dim() const = 0;
  /// (B, 3, H, W) -> (B, N_s, d_tok)
  virtual torch::Tensor features(const torch::Tensor& images) const = 0;
};

/// Soft histograms of the checker-demodulated patch pixels, weighted by
/// magnitude, followed by a fixed probe with orthonormal columns.
class ToyIdentityEmbedder final : public IdentityProvider {
 public:
  static constexpr int kBins = 10;
  static constexpr double kBinRange = 0.6;
  static constexpr double kKernelWidth = 0.09;

  explicit ToyIdentityEmbedder(int64_t dim = 64, int64_t image_size = 32);

  int64_t dim() const override { return dim_; }
  torch::Tensor embed(const torch::Tensor& images) const override;
  /// Unnormalized statistics (B, 2 * 3 * kBins) before the probe.
  torch::Tensor region_statistics(const torch::Tensor& images) const;
  const torch::Tensor& probe() const { return probe_; }

 private:
  int64_t dim_;
  int64_t image_size_;
  torch::Tensor probe_;          // (dim, features)
  torch::Tensor bin_centers_;    // (kBins)
  torch::Tensor sign_;           // (S, S) checker signs over the patch
  torch::Tensor inner_weight_;   // (S, S) 1/|inner| on the inner block
  torch::Tensor ring_weight_;    // (S, S) 1/|ring| on the ring
};

/// Average-pooled patch descriptors at two scales (4x and 8x pooling, grouped
/// into 2x2 cells) mapped through a fixed affine projection.
class ToySemanticFeatures final : public SemanticProvider {
 public:
  explicit ToySemanticFeatures(int64_t token_dim = 64, int64_t image_size = 32);

  int64_t token_count() const override;
  int64_t token_dim() const override { return token_dim_; }
  torch::Tensor features(const torch::Tensor& images) const override;

  const torch::Tensor& weight() const { return weight_; }
  const torch::Tensor& bias() const { return bias_; }
  /// Pixel-space receptive field of token n as [row0, row1) x [col0, col1).
  std::array<int64_t, 4> receptive_field(int64_t token) const;

 private:
  int64_t token_dim_;
  int64_t image_size_;
  torch::Tensor weight_;  // (token_dim, 12)
  torch::Tensor bias_;    // (token_dim)
};

/// Checked single-image wrapper around the default embedder: throws
/// DegenerateError when the identity patch carries no signal.
IdentityEmbedding toy_identity_embed(const ImageTensor& image);

torch::Tensor toy_semantic_features(const ImageTensor& image);

struct Providers {
  std::shared_ptr<const IdentityProvider> identity;
  std::shared_ptr<const SemanticProvider> semantic;

  static Providers toy(int64_t d_id, int64_t d_tok, int64_t image_size);
};

// ---------------------------------------------------------------------------
// Dataset manifest

struct ManifestRecord {
  int64_t identity_id = 0;
  int64_t render_id = 0;
  SyntheticFaceSpec spec;
  uint64_t seed = 0;
};

struct CorpusConfig {
  int n_identities = 20;
  int renders_per_identity = 8;
  int image_size = 32;
  uint64_t seed = 0;
};

/// Samples identities uniformly in [0, 1]^6 and nuisances uniformly in range.
std::vector<ManifestRecord> generate_corpus(const CorpusConfig& cfg);

/// Extra renders of existing identities under fresh nuisances.
std::vector<ManifestRecord> resample_nuisance(const std::vector<ManifestRecord>& identities,
                                              int renders_per_identity, uint64_t seed);

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

ImageTensor render(const ManifestRecord& record);
/// Stacks renders into (N, 3, S, S).
ImageTensor render_all(const std::vector<ManifestRecord>& records);

}  // namespace id2face::perception
