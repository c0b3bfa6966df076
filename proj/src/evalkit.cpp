#include "genalign/evalkit.hpp"

#include "genalign/parallel.hpp"
#include "genalign/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace genalign::eval {

RetrievalIndex::RetrievalIndex(std::vector<std::string> k, Mat m, std::string mod)
    : keys(std::move(k)), matrix(std::move(m)), modality(std::move(mod)) {
  if (static_cast<Eigen::Index>(keys.size()) != matrix.rows()) {
    throw std::invalid_argument("RetrievalIndex: one key per row required");
  }
  std::unordered_set<std::string> seen;
  for (const auto& key : keys) {
    if (!seen.insert(key).second) throw std::invalid_argument("RetrievalIndex: duplicate key '" + key + "'");
  }
  for (Eigen::Index i = 0; i < matrix.rows(); ++i) {
    if (std::abs(matrix.row(i).norm() - 1.0) > 1e-4) {
      throw std::invalid_argument("RetrievalIndex: row for '" + keys[static_cast<std::size_t>(i)] + "' is not unit-norm");
    }
  }
}

RankedList retrieve(const std::string& query_id, const RowVec& query, const RetrievalIndex& index, bool exclude_self) {
  if (index.size() == 0) throw std::invalid_argument("retrieve: empty index");
  if (query.size() != index.matrix.cols()) throw std::invalid_argument("retrieve: query width differs from index");
  if (std::abs(query.norm() - 1.0) > 1e-4) throw std::invalid_argument("retrieve: query is not unit-norm");
  const Eigen::VectorXd scores = index.matrix * query.transpose();
  std::vector<int> order;
  order.reserve(index.size());
  for (int i = 0; i < static_cast<int>(index.size()); ++i) {
    if (exclude_self && index.keys[static_cast<std::size_t>(i)] == query_id) continue;
    order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return index.keys[static_cast<std::size_t>(a)] < index.keys[static_cast<std::size_t>(b)];
  });
  RankedList out;
  out.query = query_id;
  out.ids.reserve(order.size());
  out.scores.reserve(order.size());
  for (int i : order) {
    out.ids.push_back(index.keys[static_cast<std::size_t>(i)]);
    out.scores.push_back(scores(i));
  }
  return out;
}

int rank_of(const RankedList& list, const std::string& id) {
  auto it = std::find(list.ids.begin(), list.ids.end(), id);
  return it == list.ids.end() ? 0 : static_cast<int>(it - list.ids.begin()) + 1;
}

int first_relevant_rank(const RankedList& list, const std::set<std::string>& relevant) {
  for (std::size_t i = 0; i < list.ids.size(); ++i)
    if (relevant.count(list.ids[i])) return static_cast<int>(i) + 1;
  return 0;
}

namespace {

void check_pairs(std::size_t lists, std::size_t truth) {
  if (lists != truth) throw std::invalid_argument("one ground-truth entry per ranked list required");
  if (lists == 0) throw std::invalid_argument("no queries");
}

}  // namespace

double topk_accuracy(std::span<const RankedList> lists, std::span<const std::string> truth, int k) {
  check_pairs(lists.size(), truth.size());
  if (k < 1) throw std::invalid_argument("topk_accuracy: k must be >= 1");
  int hits = 0;
  for (std::size_t q = 0; q < lists.size(); ++q) {
    const int r = rank_of(lists[q], truth[q]);
    if (r >= 1 && r <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(lists.size());
}

double mrr(std::span<const RankedList> lists, std::span<const std::string> truth) {
  check_pairs(lists.size(), truth.size());
  double sum = 0.0;
  for (std::size_t q = 0; q < lists.size(); ++q) {
    const int r = rank_of(lists[q], truth[q]);
    if (r > 0) sum += 1.0 / r;
  }
  return sum / static_cast<double>(lists.size());
}

std::optional<double> average_precision_at_k(const RankedList& list, const std::set<std::string>& relevant, int k) {
  if (k < 1) throw std::invalid_argument("average_precision_at_k: k must be >= 1");
  if (relevant.empty()) return std::nullopt;
  const int depth = std::min<int>(k, static_cast<int>(list.ids.size()));
  int hits = 0;
  double sum = 0.0;
  for (int i = 0; i < depth; ++i) {
    if (relevant.count(list.ids[static_cast<std::size_t>(i)])) {
      ++hits;
      sum += static_cast<double>(hits) / (i + 1);
    }
  }
  return sum / std::min<double>(static_cast<double>(relevant.size()), k);
}

MapResult map_at_k(std::span<const RankedList> lists, std::span<const std::set<std::string>> relevant, int k) {
  if (lists.size() != relevant.size()) throw std::invalid_argument("map_at_k: one relevance set per list required");
  MapResult out;
  double sum = 0.0;
  for (std::size_t q = 0; q < lists.size(); ++q) {
    if (auto ap = average_precision_at_k(lists[q], relevant[q], k)) {
      sum += *ap;
      ++out.evaluated;
    } else {
      ++out.skipped;
    }
  }
  out.value = out.evaluated > 0 ? sum / out.evaluated : 0.0;
  return out;
}

double f1_score(int true_positives, int predicted, int positives) {
  const int denom = predicted + positives;
  return denom == 0 ? 0.0 : 2.0 * true_positives / denom;
}

std::vector<GeneF1> per_gene_f1(std::span<const RankedList> gene_lists, std::span<const std::set<std::string>> positives,
                                std::span<const std::string> genes) {
  if (gene_lists.size() != positives.size() || genes.size() != positives.size()) {
    throw std::invalid_argument("per_gene_f1: lists, positive sets and genes must align");
  }
  std::vector<GeneF1> out;
  for (std::size_t g = 0; g < genes.size(); ++g) {
    const int n_pos = static_cast<int>(positives[g].size());
    if (n_pos == 0) continue;
    const int cutoff = std::min<int>(n_pos, static_cast<int>(gene_lists[g].ids.size()));
    int tp = 0;
    for (int i = 0; i < cutoff; ++i) tp += static_cast<int>(positives[g].count(gene_lists[g].ids[static_cast<std::size_t>(i)]));
    out.push_back({genes[g], n_pos, cutoff, tp, f1_score(tp, cutoff, n_pos)});
  }
  return out;
}

std::vector<GeneF1> per_gene_f1_from_assignments(std::span<const std::set<std::string>> predicted,
                                                 std::span<const std::set<std::string>> positives,
                                                 std::span<const std::string> genes) {
  if (predicted.size() != positives.size() || genes.size() != positives.size()) {
    throw std::invalid_argument("per_gene_f1_from_assignments: inputs must align");
  }
  std::vector<GeneF1> out;
  for (std::size_t g = 0; g < genes.size(); ++g) {
    const int n_pos = static_cast<int>(positives[g].size());
    if (n_pos == 0) continue;
    int tp = 0;
    for (const auto& id : predicted[g]) tp += static_cast<int>(positives[g].count(id));
    const int n_pred = static_cast<int>(predicted[g].size());
    out.push_back({genes[g], n_pos, n_pred, tp, f1_score(tp, n_pred, n_pos)});
  }
  return out;
}

double balanced_accuracy(std::span<const int> truth, std::span<const int> pred) {
  if (truth.size() != pred.size()) throw std::invalid_argument("balanced_accuracy: length mismatch");
  if (truth.empty()) throw std::invalid_argument("balanced_accuracy: no samples");
  std::map<int, std::pair<int, int>> per;  // class -> (correct, total)
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto& e = per[truth[i]];
    e.second += 1;
    if (pred[i] == truth[i]) e.first += 1;
  }
  double sum = 0.0;
  for (const auto& [c, e] : per) sum += static_cast<double>(e.first) / e.second;
  return sum / static_cast<double>(per.size());
}

std::vector<int> knn_predict(const Mat& train, std::span<const int> train_labels, const Mat& test, int k) {
  if (train.rows() == 0) throw std::invalid_argument("knn: empty training set");
  if (static_cast<Eigen::Index>(train_labels.size()) != train.rows()) throw std::invalid_argument("knn: label count");
  if (train.cols() != test.cols()) throw std::invalid_argument("knn: width mismatch");
  if (k < 1) throw std::invalid_argument("knn: k must be >= 1");
  Mat a = train, b = test;
  a.rowwise().normalize();
  b.rowwise().normalize();
  const Mat sim = b * a.transpose();
  const int kk = std::min<int>(k, static_cast<int>(train.rows()));
  std::vector<int> pred(static_cast<std::size_t>(test.rows()));
  std::vector<int> order(static_cast<std::size_t>(train.rows()));
  for (Eigen::Index q = 0; q < test.rows(); ++q) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](int x, int y) {
      if (sim(q, x) != sim(q, y)) return sim(q, x) > sim(q, y);
      return x < y;
    });
    std::map<int, int> votes;
    for (int i = 0; i < kk; ++i) ++votes[train_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]];
    int best = 0;
    for (const auto& [c, v] : votes) best = std::max(best, v);
    for (int i = 0; i < kk; ++i) {
      const int c = train_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      if (votes[c] == best) {
        pred[static_cast<std::size_t>(q)] = c;
        break;
      }
    }
  }
  return pred;
}

double knn_probe(const Mat& train, std::span<const int> train_labels, const Mat& test, std::span<const int> test_labels,
                 int k) {
  const auto pred = knn_predict(train, train_labels, test, k);
  return balanced_accuracy(test_labels, pred);
}

namespace {

Mat with_bias(const Mat& x) {
  Mat out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setOnes();
  return out;
}

Mat softmax_rows(const Mat& z) {
  Mat p = z.colwise() - z.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

double logreg_loss(const Mat& xb, std::span<const int> y, const Mat& theta, double inv_c) {
  const Mat z = xb * theta;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    loss += m + std::log((z.row(i).array() - m).exp().sum()) - z(i, y[static_cast<std::size_t>(i)]);
  }
  const auto d = theta.rows() - 1;
  return loss + 0.5 * inv_c * theta.topRows(d).squaredNorm();
}

}  // namespace

LogRegModel fit_logreg(const Mat& x, std::span<const int> y, int n_classes, double c, int max_iter, double tol) {
  if (x.rows() == 0 || static_cast<Eigen::Index>(y.size()) != x.rows()) throw std::invalid_argument("logreg: bad data");
  if (n_classes < 2) throw std::invalid_argument("logreg: need at least two classes");
  if (!(c > 0)) throw std::invalid_argument("logreg: C must be positive");
  for (int v : y)
    if (v < 0 || v >= n_classes) throw std::invalid_argument("logreg: label out of range");

  const Mat xb = with_bias(x);
  const auto n = xb.rows();
  const auto p = xb.cols();
  const auto d = p - 1;
  const int k = n_classes;
  const double inv_c = 1.0 / c;
  Mat yone = Mat::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) yone(i, y[static_cast<std::size_t>(i)]) = 1.0;

  Mat theta = Mat::Zero(p, k);
  LogRegModel model;
  model.initial_loss = logreg_loss(xb, y, theta, inv_c);
  double loss = model.initial_loss;
  // theta is flattened class-major: entry (a, c) sits at c * p + a.
  const auto dim = p * k;
  for (int it = 0; it < max_iter; ++it) {
    const Mat prob = softmax_rows(xb * theta);
    Mat grad = xb.transpose() * (prob - yone);
    grad.topRows(d) += inv_c * theta.topRows(d);
    Eigen::VectorXd g(dim);
    for (int cc = 0; cc < k; ++cc) g.segment(cc * p, p) = grad.col(cc);
    model.grad_norm = g.norm();
    model.iterations = it;
    if (model.grad_norm <= tol) {
      model.converged = true;
      break;
    }
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
    for (int c1 = 0; c1 < k; ++c1) {
      for (int c2 = c1; c2 < k; ++c2) {
        Eigen::VectorXd w = -(prob.col(c1).array() * prob.col(c2).array()).matrix();
        if (c1 == c2) w += prob.col(c1);
        const Eigen::MatrixXd block = xb.transpose() * w.asDiagonal() * xb;
        h.block(c1 * p, c2 * p, p, p) = block;
        if (c1 != c2) h.block(c2 * p, c1 * p, p, p) = block.transpose();
      }
      for (Eigen::Index a = 0; a < d; ++a) h(c1 * p + a, c1 * p + a) += inv_c;
    }
    // Softmax is invariant to a common shift of all intercepts, leaving H
    // singular along that direction; a tiny ridge keeps the solve defined.
    const double ridge = 1e-10 * std::max(1.0, h.diagonal().maxCoeff());
    h.diagonal().array() += ridge;
    const Eigen::VectorXd step = h.ldlt().solve(g);
    Mat delta(p, k);
    for (int cc = 0; cc < k; ++cc) delta.col(cc) = step.segment(cc * p, p);
    double t = 1.0;
    const double slope = g.dot(step);
    bool moved = false;
    for (int ls = 0; ls < 50; ++ls) {
      const Mat cand = theta - t * delta;
      const double cand_loss = logreg_loss(xb, y, cand, inv_c);
      if (cand_loss <= loss - 1e-4 * t * slope || cand_loss < loss) {
        theta = cand;
        loss = cand_loss;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    model.iterations = it + 1;
    if (!moved) break;
  }
  if (!model.converged) {
    const Mat prob = softmax_rows(xb * theta);
    Mat grad = xb.transpose() * (prob - yone);
    grad.topRows(d) += inv_c * theta.topRows(d);
    model.grad_norm = grad.norm();
    model.converged = model.grad_norm <= tol;
  }
  model.weights = theta.topRows(d);
  model.intercept = theta.row(d);
  model.final_loss = loss;
  return model;
}

std::vector<int> predict_logreg(const LogRegModel& model, const Mat& x) {
  const Mat z = (x * model.weights).rowwise() + model.intercept;
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index best = 0;
    z.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

namespace {

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

BootstrapResult bootstrap(const std::function<double(std::span<const int>)>& metric, int n_items, int n_boot,
                          std::uint64_t seed, int threads) {
  if (n_items < 1) throw std::invalid_argument("bootstrap: empty test set");
  if (n_boot < 1) throw std::invalid_argument("bootstrap: n_boot must be >= 1");
  Rng master(seed);
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_boot));
  for (auto& s : seeds) s = master.next();
  std::vector<double> values(static_cast<std::size_t>(n_boot));
  parallel_for(n_boot, threads, [&](int b) {
    Rng rng(seeds[static_cast<std::size_t>(b)]);
    std::vector<int> idx(static_cast<std::size_t>(n_items));
    for (auto& i : idx) i = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_items)));
    values[static_cast<std::size_t>(b)] = metric(idx);
  });
  BootstrapResult r;
  r.n_boot = n_boot;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / n_boot;
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / n_boot);
  r.ci_low = quantile(values, 0.025);
  r.ci_high = quantile(values, 0.975);
  return r;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: samples must be paired");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    if (diff != 0.0) d.push_back(diff);
  }
  WilcoxonResult r;
  r.n = static_cast<int>(d.size());
  if (d.empty()) {
    r.degenerate = true;
    r.p_value = 1.0;
    return r;
  }
  const int n = r.n;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int x, int y) { return std::abs(d[static_cast<std::size_t>(x)]) < std::abs(d[static_cast<std::size_t>(y)]); });
  std::vector<double> rank(static_cast<std::size_t>(n));
  double tie_term = 0.0;
  for (int i = 0; i < n;) {
    int j = i;
    const double mag = std::abs(d[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
    while (j + 1 < n && std::abs(d[static_cast<std::size_t>(order[static_cast<std::size_t>(j + 1)])]) == mag) ++j;
    const double mid = 0.5 * (i + j) + 1.0;
    for (int t = i; t <= j; ++t) rank[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])] = mid;
    const double t = j - i + 1;
    tie_term += t * t * t - t;
    i = j + 1;
  }
  for (int i = 0; i < n; ++i)
    if (d[static_cast<std::size_t>(i)] > 0) r.statistic += rank[static_cast<std::size_t>(i)];

  if (n <= 12) {
    r.exact = true;
    const std::uint32_t total = 1u << n;
    std::uint32_t le = 0, ge = 0;
    for (std::uint32_t mask = 0; mask < total; ++mask) {
      double w = 0.0;
      for (int i = 0; i < n; ++i)
        if (mask & (1u << i)) w += rank[static_cast<std::size_t>(i)];
      if (w <= r.statistic + 1e-9) ++le;
      if (w >= r.statistic - 1e-9) ++ge;
    }
    r.p_value = std::min(1.0, 2.0 * static_cast<double>(std::min(le, ge)) / static_cast<double>(total));
    return r;
  }
  const double nn = n;
  const double mu = nn * (nn + 1.0) / 4.0;
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
  if (var <= 0.0) {
    r.p_value = 1.0;
    return r;
  }
  const double z = std::max(0.0, std::abs(r.statistic - mu) - 0.5) / std::sqrt(var);
  r.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return r;
}

double bonferroni(double p, int m) {
  if (m < 1) throw std::invalid_argument("bonferroni: m must be >= 1");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("bonferroni: p outside [0, 1]");
  return std::min(1.0, p * m);
}

}  // namespace genalign::eval
