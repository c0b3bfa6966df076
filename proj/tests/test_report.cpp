#include "genalign/align.hpp"
#include "genalign/config.hpp"
#include "genalign/report.hpp"
#include "genalign/synthcohort.hpp"

#include <doctest.h>

#include <sstream>

using namespace genalign;

namespace {

CohortData tiny_cohort(std::uint64_t seed) {
  synth::SynthConfig sc;
  sc.n_patients = 40;
  sc.n_test = 12;
  sc.cells_min = sc.cells_max = 8;
  sc.input_dim = 6;
  sc.seed = seed;
  return synth::to_cohort_data(synth::generate(sc));
}

AggregatorConfig tiny_agg() {
  AggregatorConfig c;
  c.depth = 1;
  c.heads = 2;
  c.embed_dim = 8;
  c.mlp_dim = 16;
  c.input_dim = 6;
  c.max_cells = 8;
  return c;
}

AlignConfig tiny_align() {
  AlignConfig c;
  c.proj_hidden = 12;
  c.proj_dim = 6;
  c.decoder_hidden = 12;
  c.batch_size = 14;
  c.epochs = 2;
  c.lr_heads = 1e-3;
  c.init = AlignInit::random;
  return c;
}

LoadedAlign trained_model(const CohortData& data) {
  const auto cfg = tiny_align();
  const auto r = train_align(data.subset(data.indices(false)), tiny_agg(), nullptr, cfg);
  return {tiny_agg(), cfg, r.state, static_cast<int>(data.karyo.cols()), static_cast<int>(data.mut.cols()),
          data.class_names};
}

EvalConfig quick_eval() {
  EvalConfig e;
  e.n_boot = 50;
  return e;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("evaluate emits every block with intervals and corrected p-values") {
  const auto data = tiny_cohort(1);
  const auto model = trained_model(data);
  const std::vector<ProbeSet> extra = {{"mean_pool_raw", raw_mean_pool(data.bags)}};
  std::vector<std::string> genes(synth::kGenes.begin(), synth::kGenes.end());
  const auto rep = evaluate(data, model, extra, quick_eval(), genes);

  CHECK(rep.at("n_test") == 12);
  for (const char* dir : {"S->K", "K->S", "S->M", "M->S"}) {
    const auto& d = rep.at("retrieval").at(dir);
    CHECK(d.at("n_queries") == 12);
    for (const char* m : {"top1", "top5", "mrr"}) {
      const auto& st = d.at(m);
      CHECK(st.at("n_boot") == 50);
      CHECK(st.at("ci_low").get<double>() <= st.at("ci_high").get<double>());
      const double p = st.at("p_value").get<double>();
      CHECK(st.at("p_bonferroni").get<double>() == doctest::Approx(std::min(1.0, 4 * p)));
      CHECK(d.at("random").contains(m));
    }
  }
  CHECK(rep.at("retrieval").contains("S->S"));
  CHECK(rep.at("retrieval").contains("per_gene_f1"));
  for (const char* probe : {"aligned", "aligned_cls", "mean_pool_raw"}) {
    CHECK(rep.at("knn").contains(probe));
    CHECK(rep.at("logreg").contains(probe));
  }

  const auto tsv = report_tsv(rep);
  std::istringstream in(tsv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "path\tmetric\tpoint\tmean\tstd\tci_low\tci_high\tp_value\tp_bonferroni");
  CHECK(count_lines(tsv) > 20);
}

TEST_CASE("evaluate is deterministic and independent of the thread count") {
  const auto data = tiny_cohort(2);
  const auto model = trained_model(data);
  auto one = quick_eval();
  auto three = quick_eval();
  three.threads = 3;
  const auto a = evaluate(data, model, {}, one);
  const auto b = evaluate(data, model, {}, one);
  const auto c = evaluate(data, model, {}, three);
  CHECK(report_tsv(a) == report_tsv(b));
  CHECK(report_tsv(a) == report_tsv(c));
}

TEST_CASE("evaluate rejects a checkpoint with different modality widths") {
  const auto data = tiny_cohort(3);
  auto model = trained_model(data);
  model.d_k = 144;
  CHECK_THROWS_AS(evaluate(data, model, {}, quick_eval()), std::invalid_argument);
}

TEST_CASE("eval config parsing is strict") {
  EvalConfig e;
  CHECK(EvalConfig::from_json(e.to_json()).to_json() == e.to_json());
  auto j = e.to_json();
  j["bootstrap"] = 10;
  CHECK_THROWS_AS(EvalConfig::from_json(j), ConfigError);
  j = e.to_json();
  j["tasks"] = {"retrieval", "astrology"};
  CHECK_THROWS(EvalConfig::from_json(j));
  e.n_boot = 0;
  CHECK_THROWS(e.validate());
}

TEST_CASE("ablation covers the full grid and reruns byte-identically") {
  const auto data = tiny_cohort(4);
  Rng rng(5);
  const auto pre = init_aggregator<float>(tiny_agg(), rng);
  AblationGrid grid;
  grid.align = tiny_align();
  grid.align.epochs = 1;
  grid.eval = quick_eval();
  grid.eval.n_boot = 20;
  const auto a = run_ablation(data, pre, tiny_agg(), grid);
  const auto b = run_ablation(data, pre, tiny_agg(), grid);
  CHECK(a.at("rows").size() == 18);
  const auto tsv = ablation_tsv(a);
  CHECK(tsv == ablation_tsv(b));
  CHECK(a.dump() == b.dump());
  CHECK(count_lines(tsv) == 19);
  CHECK(tsv.find("ci_low") != std::string::npos);
  std::set<std::tuple<std::string, std::string, double>> cells;
  for (const auto& r : a.at("rows"))
    cells.insert({r.at("aggregator"), r.at("karyotype_resolution"), r.at("lambda_r").get<double>()});
  CHECK(cells.size() == 18);

  const auto back = AblationGrid::from_json(grid.to_json());
  CHECK(back.to_json() == grid.to_json());
  auto bad = grid.to_json();
  bad["axes"]["aggregator"] = {"attention_pool"};
  CHECK_THROWS(AblationGrid::from_json(bad));
}
