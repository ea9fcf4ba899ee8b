#pragma once

// Shared test utilities and independent reference implementations. The
// oracles use plain double arithmetic and never call into the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include <torch/torch.h>

namespace testing {

inline double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) with central
/// differences on every element of x (float64).
inline double gradient_rel_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x,
                                 double h = 1e-5) {
  x = x.detach().to(torch::kFloat64).clone().set_requires_grad(true);
  auto y = f(x);
  auto analytic = torch::autograd::grad({y}, {x})[0].detach().flatten();
  auto numeric = torch::zeros_like(analytic);
  torch::NoGradGuard no_grad;
  auto flat = x.detach().flatten();
  for (int64_t i = 0; i < flat.numel(); ++i) {
    auto xp = flat.clone();
    auto xm = flat.clone();
    xp[i] += h;
    xm[i] -= h;
    numeric[i] = (f(xp.view(x.sizes())).item<double>() - f(xm.view(x.sizes())).item<double>()) / (2 * h);
  }
  const double denom = std::max({analytic.norm().item<double>(), numeric.norm().item<double>(), 1e-12});
  return (analytic - numeric).norm().item<double>() / denom;
}

// ---------------------------------------------------------------------------
// Oracles

inline double oracle_sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double oracle_bce(double logit, double target) {
  const double p = oracle_sigmoid(logit);
  return -(target * std::log(p) + (1 - target) * std::log(1 - p));
}

/// Monte-Carlo KL(N(mu, diag(exp(log_var))) || N(0, I)).
inline double oracle_kl_mc(const std::vector<double>& mu, const std::vector<double>& log_var, int n,
                           uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  double acc = 0;
  for (int s = 0; s < n; ++s) {
    double log_q = 0, log_p = 0;
    for (size_t k = 0; k < mu.size(); ++k) {
      const double sd = std::exp(0.5 * log_var[k]);
      const double eps = normal(rng);
      const double z = mu[k] + sd * eps;
      log_q += -0.5 * eps * eps - std::log(sd);
      log_p += -0.5 * z * z;
    }
    acc += log_q - log_p;
  }
  return acc / n;
}

struct OracleRetrieval {
  double top1 = 0, top5 = 0, map = 0, mean_cosine = 0;
  int64_t n_queries = 0, n_missing = 0;
};

/// Brute force: for every query and every gallery item, the rank of the item
/// is counted directly as 1 + (#items strictly more similar) + (#equally
/// similar items with a smaller index).
inline OracleRetrieval oracle_retrieval(const std::vector<std::vector<double>>& q, const std::vector<int64_t>& ql,
                                        const std::vector<std::vector<double>>& g, const std::vector<int64_t>& gl) {
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (size_t k = 0; k < a.size(); ++k) {
      ab += a[k] * b[k];
      aa += a[k] * a[k];
      bb += b[k] * b[k];
    }
    return ab / std::sqrt(aa * bb);
  };
  auto unit = [](std::vector<double> a) {
    double n = 0;
    for (double v : a) n += v * v;
    n = std::sqrt(n);
    for (double& v : a) v /= n;
    return a;
  };
  OracleRetrieval r;
  for (size_t i = 0; i < q.size(); ++i) {
    std::vector<double> sim(g.size());
    for (size_t j = 0; j < g.size(); ++j) sim[j] = cosine(unit(q[i]), unit(g[j]));
    std::vector<size_t> rank(g.size());
    for (size_t j = 0; j < g.size(); ++j) {
      size_t above = 0;
      for (size_t k = 0; k < g.size(); ++k)
        if (sim[k] > sim[j] || (sim[k] == sim[j] && k < j)) ++above;
      rank[j] = above + 1;
    }
    std::vector<size_t> rel_ranks;
    for (size_t j = 0; j < g.size(); ++j)
      if (gl[j] == ql[i]) rel_ranks.push_back(rank[j]);
    if (rel_ranks.empty()) {
      ++r.n_missing;
      continue;
    }
    std::sort(rel_ranks.begin(), rel_ranks.end());
    r.top1 += rel_ranks.front() == 1 ? 1 : 0;
    r.top5 += rel_ranks.front() <= 5 ? 1 : 0;
    double ap = 0;
    for (size_t m = 0; m < rel_ranks.size(); ++m) ap += static_cast<double>(m + 1) / static_cast<double>(rel_ranks[m]);
    r.map += ap / static_cast<double>(rel_ranks.size());
    std::vector<double> centroid(q[i].size(), 0.0);
    for (size_t j = 0; j < g.size(); ++j)
      if (gl[j] == ql[i]) {
        auto u = unit(g[j]);
        for (size_t k = 0; k < u.size(); ++k) centroid[k] += u[k];
      }
    r.mean_cosine += cosine(q[i], centroid);
    ++r.n_queries;
  }
  if (r.n_queries) {
    r.top1 /= r.n_queries;
    r.top5 /= r.n_queries;
    r.map /= r.n_queries;
    r.mean_cosine /= r.n_queries;
  }
  return r;
}

inline std::vector<std::vector<double>> to_rows(const torch::Tensor& t) {
  auto d = t.to(torch::kFloat64).contiguous();
  std::vector<std::vector<double>> rows(d.size(0), std::vector<double>(d.size(1)));
  for (int64_t i = 0; i < d.size(0); ++i)
    for (int64_t k = 0; k < d.size(1); ++k) rows[i][k] = d[i][k].item<double>();
  return rows;
}

}  // namespace testing
