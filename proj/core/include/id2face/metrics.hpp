#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "id2face/perception.hpp"

namespace id2face::metrics {

enum class CosinePairing {
  kCentroid,     // query vs. the mean of its identity's gallery items
  kNearestTrue,  // query vs. its most similar same-identity gallery item
};

struct RetrievalReport {
  double top1 = 0, top5 = 0, map = 0, mean_cosine = 0;
  int64_t n_queries = 0;  // queries that entered the rates
  int64_t n_gallery = 0;
  int64_t n_missing = 0;  // queries whose label has no gallery item
  std::vector<int64_t> missing_queries;

  nlohmann::json to_json() const;
};

/// Ranks the gallery by cosine similarity per query, descending; equal
/// similarities keep gallery order. AP is taken over the full ranked list.
RetrievalReport retrieval_eval(const torch::Tensor& queries, const std::vector<int64_t>& query_labels,
                               const torch::Tensor& gallery, const std::vector<int64_t>& gallery_labels,
                               CosinePairing pairing = CosinePairing::kCentroid);

/// Average precision of one ranked relevance list.
double average_precision(const std::vector<bool>& relevant_in_rank_order);

/// Mean cosine over all unordered pairs of rows.
double mean_pairwise_cosine(const torch::Tensor& embeddings);

struct AttributeReport {
  double landmark_l2 = 0;  // pixels, L2 norm of the stacked keypoint offsets
  double pose_l2 = 0;      // radians
  double expression_l2 = 0;
  int64_t n_pairs = 0;     // pairs that entered the means
  int64_t n_flagged = 0;   // pairs excluded for a poor nuisance fit
  std::vector<int64_t> flagged;

  nlohmann::json to_json() const;
};

inline constexpr double kFitResidualThreshold = 0.15;

/// Pairwise attribute distances from nuisance parameters fitted to both images.
AttributeReport attribute_eval(const torch::Tensor& x, const torch::Tensor& x_hat,
                               double residual_threshold = kFitResidualThreshold);

/// CSV rows (image_id, source_id, e_0 .. e_{d-1}).
void dump_embeddings(const torch::Tensor& images, const std::vector<std::string>& image_ids,
                     const std::vector<int64_t>& source_ids, const perception::IdentityProvider& embedder,
                     const std::filesystem::path& path);

struct EmbeddingRow {
  std::string image_id;
  int64_t source_id = 0;
  std::vector<double> values;
};
std::vector<EmbeddingRow> read_embeddings(const std::filesystem::path& path);

}  // namespace id2face::metrics
