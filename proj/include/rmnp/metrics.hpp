#pragma once

// Classification and calibration metrics over two-class probability rows.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <vector>

#include "rmnp/dataset.hpp"
#include "rmnp/errors.hpp"
#include "rmnp/numerics.hpp"

namespace rmnp::metrics {

inline constexpr double kProbFloor = 1e-12;
inline constexpr int kDefaultEceBins = 10;
inline constexpr int kEntropyBins = 30;

/// Shannon entropy in nats; 0 ln 0 counts as 0.
inline double entropy(const Eigen::Ref<const Eigen::RowVectorXd>& p) {
  double h = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) {
      h -= p[k] * std::log(p[k]);
    }
  }
  return std::clamp(h, 0.0, std::log(static_cast<double>(p.size())));
}

struct Metrics {
  double accuracy = 0.0;
  double f1 = 0.0;        // bot is the positive class
  double nll_x100 = 0.0;  // mean over accounts, times 100
  double brier = 0.0;     // summed over classes, averaged over accounts
  double ece = 0.0;
  double mean_entropy = 0.0;
  std::size_t n = 0;
};

/// probs: N x 2 rows on the simplex; labels in {0, 1}.
inline Metrics evaluate(const Matrix& probs, const std::vector<int>& labels, int n_bins = kDefaultEceBins) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  if (n == 0) {
    throw ContractError("evaluate: empty input");
  }
  if (probs.rows() != n || probs.cols() != 2) {
    throw ContractError("evaluate: probabilities must be N x 2 with one row per label");
  }
  if (n_bins < 1) {
    throw ContractError("evaluate: need at least one confidence bin");
  }
  Metrics m;
  m.n = labels.size();
  std::size_t correct = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::vector<double> bin_conf(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> bin_acc(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<std::size_t> bin_count(static_cast<std::size_t>(n_bins), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y != data::kHuman && y != data::kBot) {
      throw ContractError("evaluate: labels must be 0 or 1");
    }
    const double p0 = probs(i, 0);
    const double p1 = probs(i, 1);
    if (!(p0 >= 0.0 && p1 >= 0.0) || std::abs(p0 + p1 - 1.0) > 1e-6) {
      throw ContractError("evaluate: probability row off the simplex");
    }
    // ties go to human
    const int pred = p1 > p0 ? data::kBot : data::kHuman;
    const bool hit = pred == y;
    correct += hit ? 1 : 0;
    if (pred == data::kBot && y == data::kBot) {
      ++tp;
    } else if (pred == data::kBot) {
      ++fp;
    } else if (y == data::kBot) {
      ++fn;
    }
    m.nll_x100 -= std::log(std::clamp(probs(i, y), kProbFloor, 1.0));
    const double t0 = y == 0 ? 1.0 : 0.0;
    m.brier += (p0 - t0) * (p0 - t0) + (p1 - (1.0 - t0)) * (p1 - (1.0 - t0));
    m.mean_entropy += entropy(probs.row(i));

    const double conf = std::max(p0, p1);
    auto b = static_cast<std::size_t>(std::floor(conf * n_bins));
    b = std::min(b, static_cast<std::size_t>(n_bins - 1));
    bin_conf[b] += conf;
    bin_acc[b] += hit ? 1.0 : 0.0;
    ++bin_count[b];
  }
  const auto nd = static_cast<double>(n);
  m.accuracy = static_cast<double>(correct) / nd;
  const std::size_t denom = 2 * tp + fp + fn;
  m.f1 = denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  m.nll_x100 = 100.0 * m.nll_x100 / nd;
  m.brier /= nd;
  m.mean_entropy /= nd;
  for (std::size_t b = 0; b < bin_count.size(); ++b) {
    if (bin_count[b] > 0) {
      m.ece += std::abs(bin_acc[b] - bin_conf[b]) / nd;
    }
  }
  return m;
}

inline void write_metrics_header(std::ostream& os) { os << "accuracy,f1,nll_x100,brier,ece,mean_entropy\n"; }

inline void write_metrics_row(std::ostream& os, const Metrics& m) {
  using data::format_double;
  os << format_double(m.accuracy) << ',' << format_double(m.f1) << ',' << format_double(m.nll_x100) << ','
     << format_double(m.brier) << ',' << format_double(m.ece) << ',' << format_double(m.mean_entropy) << '\n';
}

struct EntropyHistogram {
  std::vector<double> edges;  // bins + 1 edges on [0, ln 2]
  std::vector<std::size_t> counts;
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t n = 0;
};

inline EntropyHistogram entropy_histogram(const std::vector<double>& entropies, int bins = kEntropyBins) {
  if (bins < 1) {
    throw ContractError("entropy_histogram: need at least one bin");
  }
  EntropyHistogram h;
  const double top = std::numbers::ln2;
  for (int b = 0; b <= bins; ++b) {
    h.edges.push_back(top * b / bins);
  }
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  h.n = entropies.size();
  for (double e : entropies) {
    auto b = static_cast<std::size_t>(std::floor(e / top * bins));
    ++h.counts[std::min(b, static_cast<std::size_t>(bins - 1))];
    h.mean += e;
  }
  if (h.n > 0) {
    h.mean /= static_cast<double>(h.n);
    for (double e : entropies) {
      h.std += (e - h.mean) * (e - h.mean);
    }
    h.std = std::sqrt(h.std / static_cast<double>(h.n));
  }
  return h;
}

inline void write_histogram_csv(std::ostream& os, const EntropyHistogram& h) {
  os << "bin_left,bin_right,count\n";
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    os << data::format_double(h.edges[b]) << ',' << data::format_double(h.edges[b + 1]) << ',' << h.counts[b] << '\n';
  }
}

}  // namespace rmnp::metrics
