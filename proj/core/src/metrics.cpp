#include "id2face/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "id2face/error.hpp"

namespace id2face::metrics {

namespace {

torch::Tensor unit_rows(const torch::Tensor& x) {
  auto d = x.to(torch::kFloat64);
  return d / d.norm(2, 1, true).clamp_min(1e-300);
}

}  // namespace

nlohmann::json RetrievalReport::to_json() const {
  return {{"top1", top1},         {"top5", top5},           {"map", map},
          {"mean_cosine", mean_cosine}, {"n_queries", n_queries}, {"n_gallery", n_gallery},
          {"n_missing", n_missing}, {"missing_queries", missing_queries}};
}

nlohmann::json AttributeReport::to_json() const {
  return {{"landmark_l2", landmark_l2}, {"pose_l2", pose_l2}, {"expression_l2", expression_l2},
          {"n_pairs", n_pairs},         {"n_flagged", n_flagged}, {"flagged", flagged}};
}

double average_precision(const std::vector<bool>& relevant) {
  double hits = 0, sum = 0;
  for (size_t k = 0; k < relevant.size(); ++k) {
    if (relevant[k]) {
      hits += 1;
      sum += hits / static_cast<double>(k + 1);
    }
  }
  return hits > 0 ? sum / hits : 0.0;
}

RetrievalReport retrieval_eval(const torch::Tensor& queries, const std::vector<int64_t>& query_labels,
                               const torch::Tensor& gallery, const std::vector<int64_t>& gallery_labels,
                               CosinePairing pairing) {
  if (queries.dim() != 2 || gallery.dim() != 2 || queries.size(1) != gallery.size(1))
    throw ValidationError("retrieval: embeddings must be (N, d) with a shared d");
  if (queries.size(0) == 0 || gallery.size(0) == 0) throw ValidationError("retrieval: empty query or gallery set");
  if (static_cast<int64_t>(query_labels.size()) != queries.size(0) ||
      static_cast<int64_t>(gallery_labels.size()) != gallery.size(0))
    throw ValidationError("retrieval: labels are not aligned with embeddings");

  const auto q = unit_rows(queries);
  const auto g = unit_rows(gallery);
  const auto sim_t = torch::matmul(q, g.t()).contiguous();
  const auto* sim = sim_t.data_ptr<double>();
  const int64_t G = g.size(0);

  std::map<int64_t, std::vector<int64_t>> members;
  for (int64_t j = 0; j < G; ++j) members[gallery_labels[j]].push_back(j);

  RetrievalReport r;
  r.n_gallery = G;
  double top1 = 0, top5 = 0, ap = 0, cos = 0;
  std::vector<int64_t> order(G);
  for (int64_t i = 0; i < q.size(0); ++i) {
    auto it = members.find(query_labels[i]);
    if (it == members.end()) {
      r.missing_queries.push_back(i);
      continue;
    }
    const double* row = sim + i * G;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return row[a] > row[b]; });
    std::vector<bool> rel(G);
    for (int64_t k = 0; k < G; ++k) rel[k] = gallery_labels[order[k]] == query_labels[i];
    top1 += rel[0] ? 1 : 0;
    top5 += std::any_of(rel.begin(), rel.begin() + std::min<int64_t>(5, G), [](bool b) { return b; }) ? 1 : 0;
    ap += average_precision(rel);
    if (pairing == CosinePairing::kCentroid) {
      const auto idx = torch::tensor(it->second, torch::kInt64);
      const auto centroid = g.index_select(0, idx).mean(0);
      cos += torch::dot(q[i], centroid).item<double>() / std::max(centroid.norm().item<double>(), 1e-300);
    } else {
      double best = -2;
      for (auto j : it->second) best = std::max(best, row[j]);
      cos += best;
    }
    ++r.n_queries;
  }
  r.n_missing = static_cast<int64_t>(r.missing_queries.size());
  if (r.n_queries > 0) {
    const double n = static_cast<double>(r.n_queries);
    r.top1 = top1 / n;
    r.top5 = top5 / n;
    r.map = ap / n;
    r.mean_cosine = cos / n;
  }
  return r;
}

double mean_pairwise_cosine(const torch::Tensor& embeddings) {
  if (embeddings.dim() != 2 || embeddings.size(0) < 2) throw ValidationError("need at least two embeddings");
  const auto u = unit_rows(embeddings);
  const auto sim = torch::matmul(u, u.t());
  const int64_t n = u.size(0);
  const double off_diag = sim.sum().item<double>() - sim.diagonal().sum().item<double>();
  return off_diag / static_cast<double>(n * (n - 1));
}

AttributeReport attribute_eval(const torch::Tensor& x, const torch::Tensor& x_hat, double residual_threshold) {
  if (!x.sizes().equals(x_hat.sizes()) || x.dim() != 4) throw ValidationError("attribute_eval: unpaired batches");
  AttributeReport r;
  double lm = 0, pose = 0, expr = 0;
  const double size = static_cast<double>(x.size(-1));
  for (int64_t i = 0; i < x.size(0); ++i) {
    const auto fa = perception::fit_nuisance(x[i]);
    const auto fb = perception::fit_nuisance(x_hat[i]);
    if (fa.rms_residual > residual_threshold || fb.rms_residual > residual_threshold) {
      r.flagged.push_back(i);
      continue;
    }
    perception::SyntheticFaceSpec sa, sb;
    sa.identity.fill(0.5);
    sb.identity.fill(0.5);
    sa.image_size = sb.image_size = x.size(-1);
    sa.nuisance = fa.params;
    sb.nuisance = fb.params;
    const auto la = perception::toy_landmarks(sa).points;
    const auto lb = perception::toy_landmarks(sb).points;
    lm += ((la - lb) * size).norm().item<double>();
    pose += std::abs(fa.params.pose - fb.params.pose);
    expr += std::abs(fa.params.expression - fb.params.expression);
    ++r.n_pairs;
  }
  r.n_flagged = static_cast<int64_t>(r.flagged.size());
  if (r.n_pairs > 0) {
    const double n = static_cast<double>(r.n_pairs);
    r.landmark_l2 = lm / n;
    r.pose_l2 = pose / n;
    r.expression_l2 = expr / n;
  }
  return r;
}

void dump_embeddings(const torch::Tensor& images, const std::vector<std::string>& image_ids,
                     const std::vector<int64_t>& source_ids, const perception::IdentityProvider& embedder,
                     const std::filesystem::path& path) {
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (static_cast<int64_t>(image_ids.size()) != x.size(0) || source_ids.size() != image_ids.size())
    throw ValidationError("dump_embeddings: ids are not aligned with images");
  torch::Tensor e;
  {
    torch::NoGradGuard no_grad;
    e = embedder.embed(x).to(torch::kFloat64).contiguous();
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "image_id,source_id";
  for (int64_t k = 0; k < e.size(1); ++k) out << ",e" << k;
  out << '\n';
  out.precision(17);
  const auto* p = e.data_ptr<double>();
  for (int64_t i = 0; i < e.size(0); ++i) {
    out << image_ids[i] << ',' << source_ids[i];
    for (int64_t k = 0; k < e.size(1); ++k) out << ',' << p[i * e.size(1) + k];
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<EmbeddingRow> read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);  // header
  std::vector<EmbeddingRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    EmbeddingRow row;
    std::getline(ss, row.image_id, ',');
    std::getline(ss, cell, ',');
    row.source_id = std::stoll(cell);
    while (std::getline(ss, cell, ',')) row.values.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace id2face::metrics
