#include "surfbayes/inference.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <numeric>

namespace surfbayes {

ExcursionResult excursion_set(const Mat& samples, double gamma, double alpha) {
  const int H = static_cast<int>(samples.rows());
  const int V = static_cast<int>(samples.cols());
  if (H < 100)
    throw ValidationError("need at least 100 posterior draws for excursions");
  if (!samples.allFinite())
    throw ValidationError("posterior draws contain non-finite values");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha in (0,1)");

  ExcursionResult res;
  res.gamma = gamma;
  res.alpha = alpha;
  res.n_samples = H;
  res.active.assign(V, 0);

  // marginal exceedance counts, ordering ties broken by vertex index
  std::vector<int> count(V, 0);
  for (int v = 0; v < V; ++v)
    for (int h = 0; h < H; ++h)
      if (samples(h, v) > gamma) ++count[v];
  std::vector<int> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return count[a] > count[b]; });

  // greedy prefix: running AND over draws
  std::vector<std::uint8_t> all_exceed(H, 1);
  std::vector<double> trace;
  const double bound = 1.0 - alpha;
  int kept = 0;
  for (int rank = 0; rank < V; ++rank) {
    const int v = order[rank];
    int joint = 0;
    for (int h = 0; h < H; ++h) {
      if (all_exceed[h] && samples(h, v) > gamma) ++joint;
    }
    const double prob = static_cast<double>(joint) / H;
    if (prob < bound) break;
    for (int h = 0; h < H; ++h)
      if (all_exceed[h] && !(samples(h, v) > gamma)) all_exceed[h] = 0;
    res.active[v] = 1;
    trace.push_back(prob);
    ++kept;
  }
  res.joint_prob_trace = Eigen::Map<Vec>(trace.data(), kept);
  return res;
}

std::vector<ExcursionResult> excursion_sets_nested(
    const Mat& samples, const std::vector<double>& gammas, double alpha) {
  std::vector<size_t> order(gammas.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return gammas[a] < gammas[b]; });

  std::vector<ExcursionResult> out(gammas.size());
  std::vector<std::uint8_t> outer;  // mask of the previous (smaller) gamma
  for (size_t pos = 0; pos < order.size(); ++pos) {
    ExcursionResult res = excursion_set(samples, gammas[order[pos]], alpha);
    if (!outer.empty())
      for (size_t v = 0; v < res.active.size(); ++v)
        res.active[v] = res.active[v] && outer[v];
    outer = res.active;
    out[order[pos]] = std::move(res);
  }
  return out;
}

double marginal_exceedance(double mu, double sd, double gamma) {
  if (!(sd > 0.0)) throw ValidationError("sd must be positive");
  const double z = (gamma - mu) / sd;
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

double student_t_sf(double t, int df) {
  boost::math::students_t dist(df);
  return boost::math::cdf(boost::math::complement(dist, t));
}

std::vector<std::uint8_t> benjamini_hochberg(const Vec& pvalues, double q) {
  const int m = static_cast<int>(pvalues.size());
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return pvalues(a) < pvalues(b); });
  int cutoff = -1;
  for (int i = m - 1; i >= 0; --i) {
    if (pvalues(order[i]) <= q * (i + 1) / m) {
      cutoff = i;
      break;
    }
  }
  std::vector<std::uint8_t> reject(m, 0);
  for (int i = 0; i <= cutoff; ++i) reject[order[i]] = 1;
  return reject;
}

std::vector<std::uint8_t> classical_activation(const Vec& beta_hat,
                                               const Vec& se, int df,
                                               double gamma, double q) {
  const int m = static_cast<int>(beta_hat.size());
  Vec pvals(m);
  for (int v = 0; v < m; ++v) {
    if (!(se(v) > 0.0) || !std::isfinite(beta_hat(v))) {
      pvals(v) = 1.0;  // masked locations never reject
      continue;
    }
    pvals(v) = student_t_sf((beta_hat(v) - gamma) / se(v), df);
  }
  return benjamini_hochberg(pvals, q);
}

double rmse(const Vec& estimate, const Vec& truth) {
  if (estimate.size() != truth.size())
    throw ValidationError("rmse length mismatch");
  return std::sqrt((estimate - truth).squaredNorm() / estimate.size());
}

double dice(const std::vector<std::uint8_t>& a,
            const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) throw ValidationError("dice mask length mismatch");
  long na = 0, nb = 0, inter = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    na += a[i] ? 1 : 0;
    nb += b[i] ? 1 : 0;
    inter += (a[i] && b[i]) ? 1 : 0;
  }
  if (na + nb == 0) return 1.0;  // identical empty sets
  return 2.0 * inter / static_cast<double>(na + nb);
}

}  // namespace surfbayes
