#pragma once

// Retrieval metrics, probes and the statistics used to report them.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace genalign::eval {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;

struct RetrievalIndex {
  std::vector<std::string> keys;
  Mat matrix;  // one unit-norm row per key
  std::string modality;

  /// Checks unit-norm rows (within 1e-4) and unique keys.
  RetrievalIndex(std::vector<std::string> keys, Mat matrix, std::string modality);
  std::size_t size() const { return keys.size(); }
};

struct RankedList {
  std::string query;
  std::vector<std::string> ids;  // best first
  std::vector<double> scores;    // non-increasing
};

/// Cosine ranking of every candidate; ties go to the smaller id. With
/// `exclude_self` the candidate whose key equals `query_id` is dropped.
RankedList retrieve(const std::string& query_id, const RowVec& query, const RetrievalIndex& index,
                    bool exclude_self = false);

/// 1-based rank of `id`, or 0 when absent.
int rank_of(const RankedList& list, const std::string& id);
/// 1-based position of the first relevant id; 0 when none is listed.
int first_relevant_rank(const RankedList& list, const std::set<std::string>& relevant);

double topk_accuracy(std::span<const RankedList> lists, std::span<const std::string> truth, int k);
double mrr(std::span<const RankedList> lists, std::span<const std::string> truth);

/// AP@k = (1 / min(|R|, k)) sum_{i <= k} P@i rel_i; nullopt when R is empty.
std::optional<double> average_precision_at_k(const RankedList& list, const std::set<std::string>& relevant, int k);

struct MapResult {
  double value = 0.0;
  int evaluated = 0;
  int skipped = 0;  // queries with no relevant items
};

MapResult map_at_k(std::span<const RankedList> lists, std::span<const std::set<std::string>> relevant, int k);

struct GeneF1 {
  std::string gene;
  int positives = 0;
  int predicted = 0;
  int true_positives = 0;
  double f1 = 0.0;
};

/// 2 tp / (predicted + positives).
double f1_score(int true_positives, int predicted, int positives);

/// Gene-query direction: for gene g, the top N_g candidates of its list are
/// predicted positive, N_g = |positives[g]|. Genes with N_g = 0 are skipped.
std::vector<GeneF1> per_gene_f1(std::span<const RankedList> gene_lists, std::span<const std::set<std::string>> positives,
                                std::span<const std::string> genes);

/// Assignment direction: `predicted[g]` holds the items assigned gene g.
std::vector<GeneF1> per_gene_f1_from_assignments(std::span<const std::set<std::string>> predicted,
                                                 std::span<const std::set<std::string>> positives,
                                                 std::span<const std::string> genes);

/// Mean recall over the classes present in `truth`.
double balanced_accuracy(std::span<const int> truth, std::span<const int> pred);

/// Cosine k-NN majority vote. A tied vote goes to the tied class whose member
/// ranks nearest.
std::vector<int> knn_predict(const Mat& train, std::span<const int> train_labels, const Mat& test, int k);
double knn_probe(const Mat& train, std::span<const int> train_labels, const Mat& test, std::span<const int> test_labels,
                 int k);

struct LogRegModel {
  Mat weights;       // d x C
  RowVec intercept;  // 1 x C
  int iterations = 0;
  bool converged = false;
  double grad_norm = 0.0;
  double final_loss = 0.0;
  double initial_loss = 0.0;  // at zero weights
};

/// Multinomial logistic regression minimizing sum_i CE_i + ||W||^2 / (2C), the
/// intercept unpenalized, by damped Newton from zero weights until the
/// gradient norm is <= tol.
LogRegModel fit_logreg(const Mat& x, std::span<const int> y, int n_classes, double c = 1.0, int max_iter = 100,
                       double tol = 1e-6);
std::vector<int> predict_logreg(const LogRegModel& model, const Mat& x);

struct BootstrapResult {
  double mean = 0.0;
  double std = 0.0;  // population std of the replicates
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_boot = 0;
};

/// `metric` receives n_items indices drawn with replacement. Iteration i uses
/// its own stream forked from `seed`, so results do not depend on threads.
BootstrapResult bootstrap(const std::function<double(std::span<const int>)>& metric, int n_items, int n_boot,
                          std::uint64_t seed, int threads = 1);

struct WilcoxonResult {
  double statistic = 0.0;  // W+, the rank sum of positive differences
  double p_value = 1.0;
  int n = 0;  // non-zero differences
  bool exact = false;
  bool degenerate = false;  // every difference was zero
};

/// Two-sided signed-rank test on a - b. Zero differences are dropped and tied
/// magnitudes get mid-ranks. Exact enumeration of sign patterns when n <= 12,
/// otherwise a normal approximation with tie and continuity corrections.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

double bonferroni(double p, int m);

}  // namespace genalign::eval
