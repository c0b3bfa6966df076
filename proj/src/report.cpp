#include "genalign/report.hpp"

#include "genalign/config.hpp"
#include "genalign/parallel.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <map>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace genalign {

void EvalConfig::validate() const {
  static const std::set<std::string> known{"retrieval", "knn", "logreg"};
  for (const auto& t : tasks)
    if (!known.count(t)) throw ConfigError("eval: unknown task '" + t + "'");
  if (n_boot < 1 || knn_k < 1 || map_k < 1 || random_draws < 1 || bonferroni_m < 1 || !(logreg_c > 0)) {
    throw ConfigError("eval: n_boot, knn_k, map_k, random_draws, bonferroni_m and logreg_c must be positive");
  }
  if (threads < 1) throw ConfigError("eval: threads must be >= 1");
}

bool EvalConfig::has_task(const std::string& t) const { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); }

nlohmann::json EvalConfig::to_json() const {
  return {{"tasks", tasks},       {"n_boot", n_boot},           {"knn_k", knn_k},
          {"logreg_c", logreg_c}, {"map_k", map_k},             {"random_draws", random_draws},
          {"bonferroni_m", bonferroni_m}, {"seed", seed}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
  EvalConfig c;
  ConfigReader r(j, "eval");
  r.read("tasks", c.tasks);
  r.read("n_boot", c.n_boot);
  r.read("knn_k", c.knn_k);
  r.read("logreg_c", c.logreg_c);
  r.read("map_k", c.map_k);
  r.read("random_draws", c.random_draws);
  r.read("bonferroni_m", c.bonferroni_m);
  r.read("seed", c.seed);
  r.read("threads", c.threads);
  r.finish();
  c.validate();
  return c;
}

nlohmann::json StatReport::to_json() const {
  nlohmann::json j = {{"metric", metric},          {"point", point},          {"mean", boot.mean},
                      {"std", boot.std},           {"ci_low", boot.ci_low},   {"ci_high", boot.ci_high},
                      {"n_boot", boot.n_boot}};
  j["p_value"] = p_value ? nlohmann::json(*p_value) : nlohmann::json(nullptr);
  j["p_bonferroni"] = p_bonferroni ? nlohmann::json(*p_bonferroni) : nlohmann::json(nullptr);
  return j;
}

nd::Matrix<float> raw_mean_pool(const std::vector<CellBag>& bags) {
  if (bags.empty()) return {};
  nd::Matrix<float> out(static_cast<nd::Index>(bags.size()), bags.front().cells.cols());
  for (std::size_t i = 0; i < bags.size(); ++i) out.row(static_cast<nd::Index>(i)) = bags[i].cells.colwise().mean();
  return out;
}

namespace {

// Stable per-block seeds so adding a task does not shift the others.
std::uint64_t block_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return seed ^ h;
}

double mean_at(const std::vector<double>& v, std::span<const int> idx) {
  double s = 0.0;
  for (int i : idx) s += v[static_cast<std::size_t>(i)];
  return s / static_cast<double>(idx.size());
}

StatReport mean_stat(const std::string& metric, const std::vector<double>& per_item, const EvalConfig& cfg,
                     const std::string& seed_name) {
  StatReport r;
  r.metric = metric;
  r.point = std::accumulate(per_item.begin(), per_item.end(), 0.0) / static_cast<double>(per_item.size());
  r.boot = eval::bootstrap([&](std::span<const int> idx) { return mean_at(per_item, idx); },
                           static_cast<int>(per_item.size()), cfg.n_boot, block_seed(cfg.seed, seed_name), cfg.threads);
  return r;
}

eval::Mat rows_of(const nd::Matrix<float>& m, const std::vector<int>& idx) {
  eval::Mat out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(idx[r]).cast<double>();
  return out;
}

eval::Mat unit_rows(eval::Mat m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0) m.row(i) /= n;
  }
  return m;
}

struct DirectionScores {
  std::vector<double> rr, top1, top5;
  std::vector<double> rand_rr, rand_top1, rand_top5;
};

// Number of distinct genetic vectors among `rows`; identical vectors embed
// identically, so this bounds how well a cross-modal query can be resolved.
int distinct_profiles(const nd::Matrix<float>& vectors, const std::vector<int>& rows) {
  std::set<std::vector<float>> seen;
  for (int r : rows) seen.emplace(vectors.row(r).data(), vectors.row(r).data() + vectors.cols());
  return static_cast<int>(seen.size());
}

DirectionScores score_direction(const eval::Mat& queries, const eval::Mat& candidates,
                                const std::vector<std::string>& ids, const EvalConfig& cfg, const std::string& name) {
  const eval::RetrievalIndex index(ids, candidates, name);
  const int n = static_cast<int>(ids.size());
  DirectionScores s;
  Rng rng(block_seed(cfg.seed, "random:" + name));
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int q = 0; q < n; ++q) {
    const auto list = eval::retrieve(ids[static_cast<std::size_t>(q)], queries.row(q), index);
    const int r = eval::rank_of(list, ids[static_cast<std::size_t>(q)]);
    s.rr.push_back(1.0 / r);
    s.top1.push_back(r <= 1 ? 1.0 : 0.0);
    s.top5.push_back(r <= 5 ? 1.0 : 0.0);
    // random system: a uniformly shuffled candidate list per query
    double rr = 0.0, t1 = 0.0, t5 = 0.0;
    for (int d = 0; d < cfg.random_draws; ++d) {
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(std::span<int>(perm));
      const int rank = static_cast<int>(std::find(perm.begin(), perm.end(), q) - perm.begin()) + 1;
      rr += 1.0 / rank;
      t1 += rank <= 1;
      t5 += rank <= 5;
    }
    s.rand_rr.push_back(rr / cfg.random_draws);
    s.rand_top1.push_back(t1 / cfg.random_draws);
    s.rand_top5.push_back(t5 / cfg.random_draws);
  }
  return s;
}

nlohmann::json retrieval_direction(const std::string& name, const DirectionScores& s, const EvalConfig& cfg,
                                   int n_candidates) {
  nlohmann::json out = {{"n_queries", s.rr.size()}, {"n_candidates", n_candidates}};
  nlohmann::json random = nlohmann::json::object();
  auto add = [&](const char* metric, const std::vector<double>& model, const std::vector<double>& rnd) {
    auto st = mean_stat(metric, model, cfg, name + ":" + metric);
    const auto w = eval::wilcoxon_signed_rank(model, rnd);
    st.p_value = w.p_value;
    st.p_bonferroni = eval::bonferroni(w.p_value, cfg.bonferroni_m);
    out[metric] = st.to_json();
    random[metric] = mean_stat(metric, rnd, cfg, name + ":random:" + metric).to_json();
  };
  add("top1", s.top1, s.rand_top1);
  add("top5", s.top5, s.rand_top5);
  add("mrr", s.rr, s.rand_rr);
  out["random"] = random;
  return out;
}

struct ProbeScores {
  StatReport knn;
  StatReport logreg;
  bool logreg_converged = false;
  int logreg_iterations = 0;
};

StatReport bacc_stat(const std::string& metric, const std::vector<int>& truth, const std::vector<int>& pred,
                     const EvalConfig& cfg, const std::string& seed_name) {
  StatReport r;
  r.metric = metric;
  r.point = eval::balanced_accuracy(truth, pred);
  r.boot = eval::bootstrap(
      [&](std::span<const int> idx) {
        std::vector<int> t, p;
        for (int i : idx) {
          t.push_back(truth[static_cast<std::size_t>(i)]);
          p.push_back(pred[static_cast<std::size_t>(i)]);
        }
        return eval::balanced_accuracy(t, p);
      },
      static_cast<int>(truth.size()), cfg.n_boot, block_seed(cfg.seed, seed_name), cfg.threads);
  return r;
}

nlohmann::json probe_knn(const eval::Mat& train, const std::vector<int>& ytr, const eval::Mat& test,
                         const std::vector<int>& yte, const EvalConfig& cfg, const std::string& name) {
  const auto pred = eval::knn_predict(train, ytr, test, cfg.knn_k);
  return bacc_stat("bacc", yte, pred, cfg, "knn:" + name).to_json();
}

nlohmann::json probe_logreg(const eval::Mat& train, const std::vector<int>& ytr, const eval::Mat& test,
                            const std::vector<int>& yte, int n_classes, const EvalConfig& cfg, const std::string& name) {
  const auto model = eval::fit_logreg(train, ytr, n_classes, cfg.logreg_c);
  if (!model.converged) spdlog::warn("logistic regression on '{}' did not converge (|g| = {:.3g})", name, model.grad_norm);
  auto j = bacc_stat("bacc", yte, eval::predict_logreg(model, test), cfg, "logreg:" + name).to_json();
  j["converged"] = model.converged;
  j["iterations"] = model.iterations;
  return j;
}

std::vector<int> labels_of(const CohortData& data, const std::vector<int>& idx) {
  std::vector<int> out;
  for (int i : idx) out.push_back(data.labels[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<std::string> ids_of(const CohortData& data, const std::vector<int>& idx) {
  std::vector<std::string> out;
  for (int i : idx) out.push_back(data.ids[static_cast<std::size_t>(i)]);
  return out;
}

nlohmann::json per_gene_block(const CohortData& data, const LoadedAlign& model, const AlignedTable& table,
                              const std::vector<int>& test, const std::vector<std::string>& genes) {
  const int d_m = static_cast<int>(data.mut.cols());
  const auto ids = ids_of(data, test);
  const int m = static_cast<int>(test.size());
  // Gene queries: the mutation projection of each one-hot gene vector.
  nd::Graph<float> g;
  BoundParams<float> heads(g, model.state.heads, false);
  const eval::Mat gene_z =
      project(heads, "phi_m", g.constant(nd::Matrix<float>::Identity(d_m, d_m))).value().cast<double>();
  const eval::Mat zs = rows_of(table.z_s, test);

  std::vector<std::set<std::string>> positives(static_cast<std::size_t>(d_m));
  for (int r = 0; r < m; ++r)
    for (int k = 0; k < d_m; ++k)
      if (data.mut(test[static_cast<std::size_t>(r)], k) != 0.0f) positives[static_cast<std::size_t>(k)].insert(ids[static_cast<std::size_t>(r)]);

  const eval::RetrievalIndex slides(ids, zs, "slide");
  std::vector<eval::RankedList> lists;
  for (int k = 0; k < d_m; ++k) lists.push_back(eval::retrieve(genes[static_cast<std::size_t>(k)], gene_z.row(k), slides));
  const auto m2s = eval::per_gene_f1(lists, positives, genes);

  // Each slide takes as many nearest genes as the patient carries mutations.
  std::vector<std::set<std::string>> assigned(static_cast<std::size_t>(d_m));
  const eval::RetrievalIndex gene_index(genes, gene_z, "gene");
  for (int r = 0; r < m; ++r) {
    const int n_mut = static_cast<int>(data.mut.row(test[static_cast<std::size_t>(r)]).sum());
    if (n_mut == 0) continue;
    const auto list = eval::retrieve(ids[static_cast<std::size_t>(r)], zs.row(r), gene_index);
    for (int i = 0; i < n_mut && i < d_m; ++i) {
      const auto k = std::find(genes.begin(), genes.end(), list.ids[static_cast<std::size_t>(i)]) - genes.begin();
      assigned[static_cast<std::size_t>(k)].insert(ids[static_cast<std::size_t>(r)]);
    }
  }
  const auto s2m = eval::per_gene_f1_from_assignments(assigned, positives, genes);

  auto dump = [&](const std::vector<eval::GeneF1>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    double sum = 0.0, rsum = 0.0;
    for (const auto& r : rows) {
      const double random_f1 = static_cast<double>(r.positives) / m;
      arr.push_back({{"gene", r.gene}, {"positives", r.positives}, {"predicted", r.predicted},
                     {"true_positives", r.true_positives}, {"f1", r.f1}, {"random_f1", random_f1}});
      sum += r.f1;
      rsum += random_f1;
    }
    const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
    return nlohmann::json{{"genes", arr}, {"macro_f1", sum / n}, {"random_macro_f1", rsum / n}};
  };
  return {{"M->S", dump(m2s)}, {"S->M", dump(s2m)}};
}

}  // namespace

nlohmann::json evaluate(const CohortData& data, const LoadedAlign& model, const std::vector<ProbeSet>& extra,
                        const EvalConfig& cfg, const std::vector<std::string>& genes_in) {
  cfg.validate();
  const auto train = data.indices(false);
  const auto test = data.indices(true);
  if (test.size() < 2) throw std::invalid_argument("evaluate: need at least two test patients");
  if (train.empty()) throw std::invalid_argument("evaluate: no training patients for the probes");
  if (data.karyo.cols() != model.d_k || data.mut.cols() != model.d_m) {
    throw std::invalid_argument("evaluate: cohort modality widths do not match the aligned checkpoint");
  }
  std::vector<std::string> genes = genes_in;
  if (genes.empty())
    for (int k = 0; k < model.d_m; ++k) genes.push_back("gene_" + std::to_string(k));

  AlignConfig acfg = model.config;
  acfg.threads = cfg.threads;
  const auto table = embed_aligned(model.state, model.aggregator, acfg, data);
  const auto test_ids = ids_of(data, test);

  nlohmann::json report;
  report["eval_config"] = cfg.to_json();
  report["n_train"] = train.size();
  report["n_test"] = test.size();
  report["class_names"] = data.class_names;
  report["notes"] = {
      {"true_match", "the correct cross-modal match is the query patient's own record; exact score ties go to the smaller id"},
      {"map_at_k", "AP@k = (1/min(|R|,k)) * sum_{i<=k} P@i * rel_i; relevant = same-class test patients, self excluded"},
      {"random_baseline", "a seeded uniformly shuffled ranking per query (averaged over random_draws shuffles); p-values are "
                          "Wilcoxon signed-rank on per-query model vs random values, Bonferroni over the four directions"},
      {"per_gene_f1", "M->S: top-N_g slides per gene query, N_g = positives; S->M: each slide takes its n_p nearest genes"},
      {"bootstrap", "test items resampled with replacement; std is the population std of the replicates"}};

  if (cfg.has_task("retrieval")) {
    const eval::Mat zs = rows_of(table.z_s, test), zk = rows_of(table.z_k, test), zm = rows_of(table.z_m, test);
    const int n = static_cast<int>(test.size());
    nlohmann::json r;
    r["S->K"] = retrieval_direction("S->K", score_direction(zs, zk, test_ids, cfg, "S->K"), cfg, n);
    r["K->S"] = retrieval_direction("K->S", score_direction(zk, zs, test_ids, cfg, "K->S"), cfg, n);
    r["S->M"] = retrieval_direction("S->M", score_direction(zs, zm, test_ids, cfg, "S->M"), cfg, n);
    r["M->S"] = retrieval_direction("M->S", score_direction(zm, zs, test_ids, cfg, "M->S"), cfg, n);
    r["distinct_profiles"] = {{"karyotype", distinct_profiles(data.karyo, test)},
                              {"mutation", distinct_profiles(data.mut, test)}};

    const eval::RetrievalIndex slides(test_ids, zs, "slide");
    std::vector<double> ap;
    int skipped = 0;
    for (int q = 0; q < n; ++q) {
      std::set<std::string> rel;
      for (int j = 0; j < n; ++j)
        if (j != q && data.labels[static_cast<std::size_t>(test[static_cast<std::size_t>(j)])] ==
                          data.labels[static_cast<std::size_t>(test[static_cast<std::size_t>(q)])])
          rel.insert(test_ids[static_cast<std::size_t>(j)]);
      const auto list = eval::retrieve(test_ids[static_cast<std::size_t>(q)], zs.row(q), slides, true);
      if (auto v = eval::average_precision_at_k(list, rel, cfg.map_k)) {
        ap.push_back(*v);
      } else {
        ++skipped;
      }
    }
    if (!ap.empty()) {
      auto j = mean_stat("map@" + std::to_string(cfg.map_k), ap, cfg, "slide_map").to_json();
      j["skipped_queries"] = skipped;
      r["S->S"] = j;
    }
    r["per_gene_f1"] = per_gene_block(data, model, table, test, genes);
    report["retrieval"] = r;
  }

  std::vector<ProbeSet> sets{{"aligned", table.z_s}, {"aligned_cls", table.slide}};
  sets.insert(sets.end(), extra.begin(), extra.end());
  const auto ytr = labels_of(data, train);
  const auto yte = labels_of(data, test);
  const int n_classes = static_cast<int>(data.class_names.size());
  for (const char* task : {"knn", "logreg"}) {
    if (!cfg.has_task(task)) continue;
    nlohmann::json block = nlohmann::json::object();
    for (const auto& s : sets) {
      if (s.embeddings.rows() != static_cast<nd::Index>(data.size())) {
        throw std::invalid_argument("evaluate: probe set '" + s.name + "' has the wrong number of rows");
      }
      const eval::Mat tr = rows_of(s.embeddings, train), te = rows_of(s.embeddings, test);
      block[s.name] = std::string(task) == "knn" ? probe_knn(tr, ytr, te, yte, cfg, s.name)
                                                 : probe_logreg(unit_rows(tr), ytr, unit_rows(te), yte, n_classes, cfg, s.name);
    }
    report[task] = block;
  }
  return report;
}

namespace {

void flatten_stats(const nlohmann::json& node, const std::string& path, std::ostringstream& out) {
  if (!node.is_object()) return;
  if (node.contains("metric") && node.contains("point") && node.contains("n_boot")) {
    auto num = [](const nlohmann::json& v) { return v.is_null() ? std::string("NA") : v.dump(); };
    out << path << '\t' << node["metric"].get<std::string>() << '\t' << num(node["point"]) << '\t' << num(node["mean"])
        << '\t' << num(node["std"]) << '\t' << num(node["ci_low"]) << '\t' << num(node["ci_high"]) << '\t'
        << num(node["p_value"]) << '\t' << num(node["p_bonferroni"]) << '\n';
    return;
  }
  for (const auto& [k, v] : node.items()) flatten_stats(v, path.empty() ? k : path + "/" + k, out);
}

}  // namespace

std::string report_tsv(const nlohmann::json& report) {
  std::ostringstream out;
  out << "path\tmetric\tpoint\tmean\tstd\tci_low\tci_high\tp_value\tp_bonferroni\n";
  flatten_stats(report, "", out);
  return out.str();
}

void AblationGrid::validate() const {
  static const std::set<std::string> known{"finetune_pretrained", "finetune_random", "mean_pool", "frozen_pretrained"};
  if (aggregator.empty() || karyotype_resolution.empty() || lambda_r.empty()) {
    throw ConfigError("ablation: every axis needs at least one value");
  }
  for (const auto& a : aggregator)
    if (!known.count(a)) throw ConfigError("ablation: unknown aggregator setting '" + a + "'");
  for (double l : lambda_r)
    if (l < 0) throw ConfigError("ablation: lambda_r must be >= 0");
  align.validate();
  eval.validate();
}

nlohmann::json AblationGrid::to_json() const {
  std::vector<std::string> res;
  for (auto r : karyotype_resolution) res.push_back(to_string(r));
  return {{"axes", {{"aggregator", aggregator}, {"karyotype_resolution", res}, {"lambda_r", lambda_r}}},
          {"align", align.to_json()},
          {"eval", eval.to_json()}};
}

AblationGrid AblationGrid::from_json(const nlohmann::json& j) {
  AblationGrid g;
  ConfigReader r(j, "ablation");
  if (const auto* axes = r.child("axes")) {
    ConfigReader ar(*axes, "ablation.axes");
    std::vector<std::string> res;
    ar.read("aggregator", g.aggregator);
    ar.read("lambda_r", g.lambda_r);
    if (axes->contains("karyotype_resolution")) {
      ar.read("karyotype_resolution", res);
      g.karyotype_resolution.clear();
      for (const auto& s : res) g.karyotype_resolution.push_back(parse_karyotype_resolution(s));
    }
    ar.finish();
  }
  if (const auto* a = r.child("align")) g.align = AlignConfig::from_json(*a);
  if (const auto* e = r.child("eval")) g.eval = EvalConfig::from_json(*e);
  r.finish();
  g.validate();
  return g;
}

nlohmann::json run_ablation(const CohortData& data, const ParamSet<float>& pretrained_agg,
                            const AggregatorConfig& agg_cfg, const AblationGrid& grid,
                            const karyo::CytobandTable& table) {
  grid.validate();
  const auto train_idx = data.indices(false);
  const auto test_idx = data.indices(true);
  CohortData arm = data;
  arm.karyo = to_arm_level(data.karyo, table);

  nlohmann::json rows = nlohmann::json::array();
  for (const auto& agg_setting : grid.aggregator) {
    for (auto res : grid.karyotype_resolution) {
      for (double lambda : grid.lambda_r) {
        AlignConfig cfg = grid.align;
        cfg.lambda_r = lambda;
        cfg.karyotype_resolution = res;
        if (agg_setting == "finetune_pretrained") {
          cfg.init = AlignInit::pretrained;
          cfg.aggregator_mode = AggregatorMode::finetune;
        } else if (agg_setting == "finetune_random") {
          cfg.init = AlignInit::random;
          cfg.aggregator_mode = AggregatorMode::finetune;
        } else if (agg_setting == "frozen_pretrained") {
          cfg.init = AlignInit::pretrained;
          cfg.aggregator_mode = AggregatorMode::frozen;
        } else {
          cfg.init = AlignInit::pretrained;
          cfg.aggregator_mode = AggregatorMode::mean_pool;
        }
        const CohortData& source = res == KaryotypeResolution::arm ? arm : data;
        spdlog::info("ablation cell: aggregator={} karyotype={} lambda_r={}", agg_setting, to_string(res), lambda);
        const auto trained = train_align(source.subset(train_idx), agg_cfg, &pretrained_agg, cfg);

        LoadedAlign model{agg_cfg, cfg, trained.state, static_cast<int>(source.karyo.cols()),
                          static_cast<int>(source.mut.cols()), source.class_names};
        EvalConfig ecfg = grid.eval;
        ecfg.tasks = {"retrieval", "logreg"};
        const auto rep = evaluate(source, model, {}, ecfg);
        rows.push_back({{"aggregator", agg_setting},
                        {"karyotype_resolution", to_string(res)},
                        {"lambda_r", lambda},
                        {"final_loss", trained.history.back().loss},
                        {"logreg_bacc", rep["logreg"]["aligned"]},
                        {"s_to_k_mrr", rep["retrieval"]["S->K"]["mrr"]},
                        {"k_to_s_mrr", rep["retrieval"]["K->S"]["mrr"]}});
      }
    }
  }
  return {{"grid", grid.to_json()}, {"rows", rows}};
}

std::string ablation_tsv(const nlohmann::json& table) {
  static const char* kMetrics[] = {"logreg_bacc", "s_to_k_mrr", "k_to_s_mrr"};
  std::ostringstream out;
  out << "aggregator\tkaryotype_resolution\tlambda_r\tfinal_loss";
  for (const char* m : kMetrics) out << '\t' << m << "_mean\t" << m << "_std\t" << m << "_ci_low\t" << m << "_ci_high";
  out << '\n';
  for (const auto& r : table.at("rows")) {
    out << r.at("aggregator").get<std::string>() << '\t' << r.at("karyotype_resolution").get<std::string>() << '\t'
        << r.at("lambda_r").dump() << '\t' << r.at("final_loss").dump();
    for (const char* m : kMetrics) {
      const auto& st = r.at(m);
      out << '\t' << st.at("mean").dump() << '\t' << st.at("std").dump() << '\t' << st.at("ci_low").dump() << '\t'
          << st.at("ci_high").dump();
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace genalign
