#include "genalign/evalkit.hpp"
#include "genalign/rng.hpp"
#include "metric_checks.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace genalign;
using namespace genalign::eval;

namespace {

Mat rows(std::initializer_list<std::initializer_list<double>> v) {
  Mat m(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(v.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : v) {
    Eigen::Index j = 0;
    for (double x : r) m(i, j++) = x;
    ++i;
  }
  return m;
}

RankedList list_of(std::vector<std::string> ids) {
  RankedList l;
  l.ids = std::move(ids);
  l.scores.assign(l.ids.size(), 0.0);
  return l;
}

// Majority vote among the k nearest by cosine, tie to the nearest tied class.
std::vector<int> knn_oracle(const Mat& train, const std::vector<int>& labels, const Mat& test, int k) {
  std::vector<int> out;
  for (Eigen::Index q = 0; q < test.rows(); ++q) {
    std::vector<std::pair<double, int>> sims;
    for (Eigen::Index i = 0; i < train.rows(); ++i)
      sims.push_back({-train.row(i).normalized().dot(test.row(q).normalized()), static_cast<int>(i)});
    std::sort(sims.begin(), sims.end());
    std::map<int, int> votes;
    const int kk = std::min<int>(k, static_cast<int>(sims.size()));
    for (int i = 0; i < kk; ++i) ++votes[labels[static_cast<std::size_t>(sims[static_cast<std::size_t>(i)].second)]];
    int best = 0;
    for (const auto& [c, v] : votes) best = std::max(best, v);
    for (int i = 0; i < kk; ++i) {
      const int c = labels[static_cast<std::size_t>(sims[static_cast<std::size_t>(i)].second)];
      if (votes[c] == best) {
        out.push_back(c);
        break;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("retrieve orders by cosine with ties to the smaller id") {
  const RetrievalIndex index({"b", "a", "c"}, rows({{1, 0}, {1, 0}, {0, 1}}), "K");
  RowVec q(2);
  q << 1, 0;
  const auto l = retrieve("b", q, index);
  CHECK(l.ids == std::vector<std::string>{"a", "b", "c"});
  CHECK(l.scores[0] == 1.0);
  CHECK(rank_of(l, "c") == 3);
  CHECK(rank_of(l, "zz") == 0);
  const auto no_self = retrieve("b", q, index, true);
  CHECK(no_self.ids == std::vector<std::string>{"a", "c"});
  CHECK(first_relevant_rank(l, {"c", "b"}) == 2);
  CHECK(first_relevant_rank(l, {"x"}) == 0);
}

TEST_CASE("retrieval index rejects bad input") {
  CHECK_THROWS_AS(RetrievalIndex({"a", "a"}, rows({{1, 0}, {0, 1}}), "K"), std::invalid_argument);
  CHECK_THROWS_AS(RetrievalIndex({"a"}, rows({{1, 0}, {0, 1}}), "K"), std::invalid_argument);
  CHECK_THROWS_AS(RetrievalIndex({"a"}, rows({{2, 0}}), "K"), std::invalid_argument);
  const RetrievalIndex index({"a"}, rows({{1, 0}}), "K");
  RowVec q(3);
  q << 1, 0, 0;
  CHECK_THROWS_AS(retrieve("q", q, index), std::invalid_argument);
}

TEST_CASE("top-k, MRR and AP on a worked example") {
  const std::vector<RankedList> lists = {list_of({"x", "y", "z"}), list_of({"z", "y", "x"})};
  const std::vector<std::string> truth = {"y", "z"};
  CHECK(topk_accuracy(lists, truth, 1) == doctest::Approx(0.5));
  CHECK(topk_accuracy(lists, truth, 2) == doctest::Approx(1.0));
  CHECK(mrr(lists, truth) == doctest::Approx((0.5 + 1.0) / 2));
  // Relevant at ranks 1 and 3 of three: (1/1 + 2/3) / 2.
  CHECK(*average_precision_at_k(lists[0], {"x", "z"}, 3) == doctest::Approx((1.0 + 2.0 / 3) / 2));
  // Only one relevant item fits in the cutoff but the normalizer is min(|R|, k).
  CHECK(*average_precision_at_k(lists[0], {"y", "w", "v", "u"}, 3) == doctest::Approx(0.5 / 3));
  CHECK_FALSE(average_precision_at_k(lists[0], {}, 3).has_value());
  const std::vector<std::set<std::string>> rel = {{"x"}, {}};
  const auto m = map_at_k(lists, rel, 3);
  CHECK(m.value == doctest::Approx(1.0));
  CHECK(m.evaluated == 1);
  CHECK(m.skipped == 1);
  CHECK_THROWS_AS(topk_accuracy(lists, truth, 0), std::invalid_argument);
  CHECK_THROWS_AS(mrr(lists, std::vector<std::string>{"y"}), std::invalid_argument);
}

TEST_CASE("F1 and balanced accuracy examples") {
  CHECK(f1_score(2, 4, 4) == doctest::Approx(0.5));
  CHECK(f1_score(0, 0, 3) == 0.0);
  const std::vector<int> truth = {0, 0, 0, 1};
  const std::vector<int> pred = {0, 0, 0, 0};
  // Accuracy is 0.75 but the minority class is never recovered.
  CHECK(balanced_accuracy(truth, pred) == doctest::Approx(0.5));
  const std::vector<int> short_pred = {0};
  CHECK_THROWS(balanced_accuracy(truth, short_pred));
}

TEST_CASE("metrics agree with brute force on 200 random instances each") {
  for (const auto& s : checks::all_metric_checks(200, 4242)) {
    INFO(s.metric);
    CHECK(s.instances == 200);
    CHECK(s.mismatches == 0);
  }
}

TEST_CASE("exact Wilcoxon on hand examples") {
  // All five differences positive: W+ = 15, p = 2 / 32.
  const std::vector<double> a = {2, 3, 4, 5, 6}, b = {1, 1, 1, 1, 1};
  const auto r = wilcoxon_signed_rank(a, b);
  CHECK(r.exact);
  CHECK(r.statistic == 15.0);
  CHECK(r.p_value == doctest::Approx(2.0 / 32));
  const auto z = wilcoxon_signed_rank(a, a);
  CHECK(z.degenerate);
  CHECK(z.p_value == 1.0);
  // Differences +1, -1, +2: mid-ranks 1.5, 1.5, 3 give W+ = 4.5.
  const std::vector<double> c = {1, 0, 2}, d = {0, 1, 0};
  CHECK(wilcoxon_signed_rank(c, d).statistic == 4.5);
  CHECK_THROWS_AS(wilcoxon_signed_rank(a, std::vector<double>{1}), std::invalid_argument);
}

TEST_CASE("Wilcoxon uses the normal approximation above twelve pairs") {
  Rng rng(9);
  std::vector<double> a(40), b(40);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.normal() + 1.0;
    b[i] = rng.normal();
  }
  const auto r = wilcoxon_signed_rank(a, b);
  CHECK_FALSE(r.exact);
  CHECK(r.n == 40);
  CHECK(r.p_value < 0.05);
  // Symmetric: swapping the samples leaves p unchanged.
  CHECK(wilcoxon_signed_rank(b, a).p_value == doctest::Approx(r.p_value));
}

TEST_CASE("bonferroni") {
  CHECK(bonferroni(0.01, 4) == doctest::Approx(0.04));
  CHECK(bonferroni(0.5, 4) == 1.0);
  CHECK_THROWS(bonferroni(0.1, 0));
  CHECK_THROWS(bonferroni(1.5, 2));
}

TEST_CASE("bootstrap std of a Bernoulli mean matches the analytic value") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto c = checks::check_bootstrap_bernoulli(200, 0.3, 1000, seed);
    INFO(c.observed_std, " vs ", c.analytic_std);
    CHECK(c.ok());
  }
}

TEST_CASE("bootstrap is independent of the thread count") {
  auto metric = [](std::span<const int> idx) {
    double s = 0.0;
    for (int i : idx) s += i * i;
    return s / static_cast<double>(idx.size());
  };
  const auto one = bootstrap(metric, 50, 300, 7, 1);
  const auto four = bootstrap(metric, 50, 300, 7, 4);
  CHECK(one.mean == four.mean);
  CHECK(one.std == four.std);
  CHECK(one.ci_low == four.ci_low);
  CHECK(one.ci_high == four.ci_high);
  CHECK(one.ci_low <= one.mean);
  CHECK(one.mean <= one.ci_high);
  CHECK_THROWS(bootstrap(metric, 0, 10, 1));
}

TEST_CASE("kNN matches a sorted brute force") {
  Rng rng(31);
  for (int t = 0; t < 100; ++t) {
    const int n = 2 + static_cast<int>(rng.below(15));
    const int m = 1 + static_cast<int>(rng.below(6));
    const int d = 2 + static_cast<int>(rng.below(4));
    Mat train(n, d), test(m, d);
    for (Eigen::Index i = 0; i < train.size(); ++i) train.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < test.size(); ++i) test.data()[i] = rng.normal();
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<int>(rng.below(3));
    const int k = 1 + static_cast<int>(rng.below(7));
    CHECK(knn_predict(train, labels, test, k) == knn_oracle(train, labels, test, k));
  }
}

TEST_CASE("kNN vote tie goes to the nearest tied class") {
  const Mat train = rows({{1, 0.1}, {1, -0.5}});
  const std::vector<int> labels = {1, 0};
  const Mat test = rows({{1, 0}});
  CHECK(knn_predict(train, labels, test, 2) == std::vector<int>{1});
}

TEST_CASE("logistic regression reaches a stationary point of its objective") {
  Rng rng(5);
  const int n = 60, d = 3, k = 3;
  Mat x(n, d);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = i % k;
    for (int j = 0; j < d; ++j) x(i, j) = rng.normal() + (j == i % k ? 1.5 : 0.0);
  }
  const double c = 0.5;
  const auto model = fit_logreg(x, y, k, c);
  CHECK(model.converged);
  CHECK(model.final_loss < model.initial_loss);
  CHECK(model.initial_loss == doctest::Approx(n * std::log(3.0)));

  // Independent gradient of sum CE + ||W||^2 / (2C) at the returned solution.
  Mat grad_w = Mat::Zero(d, k);
  RowVec grad_b = RowVec::Zero(k);
  for (int i = 0; i < n; ++i) {
    RowVec z = x.row(i) * model.weights + model.intercept;
    z.array() -= z.maxCoeff();
    RowVec p = z.array().exp();
    p /= p.sum();
    p(y[static_cast<std::size_t>(i)]) -= 1.0;
    grad_w += x.row(i).transpose() * p;
    grad_b += p;
  }
  grad_w += model.weights / c;
  CHECK(grad_w.norm() < 1e-5);
  CHECK(grad_b.norm() < 1e-5);

  const auto pred = predict_logreg(model, x);
  CHECK(balanced_accuracy(y, pred) > 0.6);
}

TEST_CASE("stronger regularization shrinks logistic weights") {
  Rng rng(6);
  Mat x(40, 2);
  std::vector<int> y(40);
  for (int i = 0; i < 40; ++i) {
    y[static_cast<std::size_t>(i)] = i % 2;
    x(i, 0) = rng.normal() + (i % 2 ? 1.0 : -1.0);
    x(i, 1) = rng.normal();
  }
  const auto loose = fit_logreg(x, y, 2, 10.0);
  const auto tight = fit_logreg(x, y, 2, 0.01);
  CHECK(tight.weights.norm() < loose.weights.norm());
  CHECK_THROWS(fit_logreg(x, y, 1));
  CHECK_THROWS(fit_logreg(x, y, 2, 0.0));
  std::vector<int> bad = y;
  bad[0] = 5;
  CHECK_THROWS(fit_logreg(x, bad, 2));
}
