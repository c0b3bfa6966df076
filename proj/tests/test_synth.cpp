#include "genalign/cohort.hpp"
#include "genalign/config.hpp"
#include "genalign/digest.hpp"
#include "genalign/evalkit.hpp"
#include "genalign/formats.hpp"
#include "genalign/karyogram.hpp"
#include "genalign/report.hpp"
#include "genalign/synthcohort.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace genalign;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("genalign_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

synth::SynthConfig small_config(std::uint64_t seed) {
  synth::SynthConfig c;
  c.n_patients = 80;
  c.n_test = 20;
  c.cells_min = 8;
  c.cells_max = 12;
  c.input_dim = 6;
  c.seed = seed;
  return c;
}

// Pearson statistic of the label x mutated table for one gene.
double chi_square(const synth::Cohort& cohort, int gene, int n_classes) {
  std::vector<double> hit(static_cast<std::size_t>(n_classes)), tot(static_cast<std::size_t>(n_classes));
  double all_hit = 0.0;
  for (const auto& p : cohort.patients) {
    tot[static_cast<std::size_t>(p.label)] += 1;
    hit[static_cast<std::size_t>(p.label)] += p.mvec[static_cast<std::size_t>(gene)];
    all_hit += p.mvec[static_cast<std::size_t>(gene)];
  }
  const double n = static_cast<double>(cohort.patients.size());
  double chi = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    const double e1 = tot[static_cast<std::size_t>(c)] * all_hit / n;
    const double e0 = tot[static_cast<std::size_t>(c)] - e1;
    const double o1 = hit[static_cast<std::size_t>(c)];
    const double o0 = tot[static_cast<std::size_t>(c)] - o1;
    if (e1 > 0) chi += (o1 - e1) * (o1 - e1) / e1;
    if (e0 > 0) chi += (o0 - e0) * (o0 - e0) / e0;
  }
  return chi;
}

double raw_knn_bacc(const synth::Cohort& cohort) {
  const auto data = synth::to_cohort_data(cohort);
  const auto pooled = raw_mean_pool(data.bags);
  const auto train = data.indices(false), test = data.indices(true);
  eval::Mat xtr(static_cast<Eigen::Index>(train.size()), pooled.cols()), xte(static_cast<Eigen::Index>(test.size()), pooled.cols());
  std::vector<int> ytr, yte;
  for (std::size_t i = 0; i < train.size(); ++i) {
    xtr.row(static_cast<Eigen::Index>(i)) = pooled.row(train[i]).cast<double>();
    ytr.push_back(data.labels[static_cast<std::size_t>(train[i])]);
  }
  for (std::size_t i = 0; i < test.size(); ++i) {
    xte.row(static_cast<Eigen::Index>(i)) = pooled.row(test[i]).cast<double>();
    yte.push_back(data.labels[static_cast<std::size_t>(test[i])]);
  }
  return eval::knn_probe(xtr, ytr, xte, yte, 5);
}

}  // namespace

TEST_CASE("sha256 of the standard test vectors") {
  CHECK(sha256_hex(std::string_view("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex(std::string_view("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("gbm round trip for f32 and u8 payloads") {
  const auto dir = scratch_dir("gbm");
  nd::Matrix<float> m(2, 3);
  m << 1.5f, -2.f, 0.f, 3.25f, 1e-7f, -0.f;
  io::write_gbm(dir / "a.gbm", {{"patient_ids", {"P1", "P2"}}, {"note", "x"}}, m);
  const auto back = io::read_gbm(dir / "a.gbm");
  CHECK(back.dtype == io::DType::f32);
  CHECK(back.rows == 2);
  CHECK(back.cols == 3);
  CHECK(back.f32 == m);
  CHECK(back.patient_ids() == std::vector<std::string>{"P1", "P2"});
  CHECK(back.header.at("note") == "x");
  CHECK(back.header.at("band_table_sha256").is_null());

  const std::vector<std::uint8_t> bits = {1, 0, 0, 1};
  io::write_gbm_u8(dir / "b.gbm", {{"patient_ids", {"P1", "P2"}}}, 2, 2, bits);
  const auto u = io::read_gbm(dir / "b.gbm");
  CHECK(u.dtype == io::DType::u8);
  CHECK(u.u8 == bits);
  CHECK(u.as_float()(1, 1) == 1.0f);
  CHECK(io::inspect(dir / "b.gbm").at("magic") == "GBM1");

  CHECK_THROWS_AS(io::write_gbm(dir / "c.gbm", {{"note", 1}}, m), std::invalid_argument);
  CHECK_THROWS_AS(io::write_gbm_u8(dir / "c.gbm", {{"patient_ids", {"P1"}}}, 1, 3, bits), std::invalid_argument);
}

TEST_CASE("gbm readers reject damaged files") {
  const auto dir = scratch_dir("gbm_bad");
  nd::Matrix<float> m = nd::Matrix<float>::Ones(4, 4);
  io::write_gbm(dir / "ok.gbm", {{"patient_ids", {"a", "b", "c", "d"}}}, m);
  const auto bytes = test::file_bytes(dir / "ok.gbm");
  {
    std::ofstream(dir / "short.gbm", std::ios::binary) << bytes.substr(0, bytes.size() - 5);
    CHECK_THROWS_AS(io::read_gbm(dir / "short.gbm"), io::FormatError);
  }
  {
    std::string wrong = bytes;
    wrong[0] = 'X';
    std::ofstream(dir / "magic.gbm", std::ios::binary) << wrong;
    CHECK_THROWS_AS(io::read_gbm(dir / "magic.gbm"), io::FormatError);
    CHECK_THROWS_AS(io::inspect(dir / "magic.gbm"), io::FormatError);
  }
  {
    std::ofstream(dir / "tiny.gbm", std::ios::binary) << "GB";
    CHECK_THROWS_AS(io::read_gbm(dir / "tiny.gbm"), io::FormatError);
  }
  CHECK_THROWS(io::read_gbm(dir / "absent.gbm"));
}

TEST_CASE("checkpoint round trip keeps tensors and manifest") {
  const auto dir = scratch_dir("ckpt");
  io::Checkpoint ck;
  ck.manifest = {{"kind", "test"}, {"epochs", 3}};
  Rng rng(1);
  ck.tensors.add("w", test::randn(3, 2, rng).cast<float>());
  ck.tensors.add("b", test::randn(1, 2, rng).cast<float>());
  io::write_checkpoint(dir / "m.gbck", ck);
  const auto back = io::read_checkpoint(dir / "m.gbck");
  CHECK(back.manifest.at("kind") == "test");
  CHECK(back.tensors.size() == 2);
  CHECK(back.tensors.at("w") == ck.tensors.at("w"));
  CHECK(back.tensors.at("b") == ck.tensors.at("b"));
  CHECK(io::inspect(dir / "m.gbck").at("magic") == "GBCK");
  CHECK_THROWS_AS(io::read_gbm(dir / "m.gbck"), io::FormatError);
}

TEST_CASE("noiseless cohort: same-class patients are identical and frequencies are exact") {
  auto cfg = small_config(3);
  cfg.composition_noise = 0.0;
  cfg.embedding_noise = 0.0;
  cfg.label_noise = 0.0;
  cfg.event_dropout = 0.0;
  cfg.extra_event_rate = 0.0;
  for (auto& c : cfg.classes)
    for (auto& r : c.mutation_rates) r = r >= 0.5 ? 1.0 : 0.0;
  const auto cohort = synth::generate(cfg);
  std::map<int, const synth::SynthPatient*> first;
  for (const auto& p : cohort.patients) {
    auto [it, fresh] = first.emplace(p.label, &p);
    if (fresh) continue;
    CHECK(p.composition == it->second->composition);
    CHECK(p.kvec.bits == it->second->kvec.bits);
    CHECK(p.mvec == it->second->mvec);
  }
  const auto oracle = synth::oracle_report(cohort, cfg);
  for (const auto& c : oracle.at("classes")) {
    if (c.at("n_patients") == 0) continue;
    for (const auto& [gene, rate] : c.at("mutation_rates").items()) CHECK(c.at("mutation_frequency").at(gene) == rate);
  }
}

TEST_CASE("default cohort: class composition means differ and frequencies sit in binomial intervals") {
  const synth::SynthConfig cfg;
  const auto cohort = synth::generate(cfg);
  CHECK(cohort.patients.size() == 250);
  CHECK(std::count_if(cohort.patients.begin(), cohort.patients.end(), [](const auto& p) { return p.test; }) == 50);
  const int k = static_cast<int>(cfg.classes.size());
  std::vector<Eigen::RowVectorXd> mean(static_cast<std::size_t>(k), Eigen::RowVectorXd::Zero(cfg.n_archetypes));
  std::vector<int> count(static_cast<std::size_t>(k));
  for (const auto& p : cohort.patients) {
    mean[static_cast<std::size_t>(p.label)] += Eigen::Map<const Eigen::RowVectorXd>(p.composition.data(), cfg.n_archetypes);
    ++count[static_cast<std::size_t>(p.label)];
  }
  for (int a = 0; a < k; ++a) {
    REQUIRE(count[static_cast<std::size_t>(a)] > 0);
    mean[static_cast<std::size_t>(a)] /= count[static_cast<std::size_t>(a)];
  }
  for (int a = 0; a < k; ++a)
    for (int b = a + 1; b < k; ++b) CHECK((mean[static_cast<std::size_t>(a)] - mean[static_cast<std::size_t>(b)]).norm() > 0.0);

  // 100 class x gene cells at 99.9% two-sided each.
  int outside = 0;
  const auto oracle = synth::oracle_report(cohort, cfg);
  for (const auto& c : oracle.at("classes")) {
    const double n = c.at("n_patients").get<double>();
    for (const auto& [gene, rate] : c.at("mutation_rates").items()) {
      const double p = rate.get<double>();
      const double obs = c.at("mutation_frequency").at(gene).get<double>();
      const double half = 3.29 * std::sqrt(p * (1.0 - p) / n) + 0.5 / n;
      if (std::abs(obs - p) > half) ++outside;
    }
  }
  CHECK(outside <= 1);
  CHECK(oracle.at("band_table_sha256") == karyo::CytobandTable::builtin().sha256());
}

TEST_CASE("every generated karyotype re-encodes to the stored vector") {
  const auto cohort = synth::generate(small_config(9));
  const auto& table = karyo::CytobandTable::builtin();
  for (const auto& p : cohort.patients) {
    CHECK(karyo::encode_karyotype(karyo::parse_iscn(p.karyotype, table), table).bits == p.kvec.bits);
    CHECK(p.bag.cells.rows() >= 8);
    CHECK(p.bag.cells.rows() <= 12);
    CHECK(p.mvec.size() == 25);
  }
}

TEST_CASE("label noise 1.0 decouples mutations from the class label") {
  const int npm1 = synth::gene_index("NPM1");
  // chi-square(3) critical value at 0.05
  const double critical = 7.815;
  int significant = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto cfg = small_config(seed);
    cfg.n_patients = 200;
    cfg.label_noise = 1.0;
    if (chi_square(synth::generate(cfg), npm1, 4) > critical) ++significant;
  }
  CHECK(significant <= 2);
  auto coupled = small_config(1);
  coupled.n_patients = 200;
  CHECK(chi_square(synth::generate(coupled), npm1, 4) > 50.0);
}

TEST_CASE("raw mean-pool kNN accuracy falls as embedding noise grows") {
  std::vector<double> mean_bacc;
  for (double sigma : {1.0, 6.0, 18.0}) {
    double sum = 0.0;
    for (std::uint64_t seed : {11u, 12u, 13u}) {
      auto cfg = small_config(seed);
      cfg.n_patients = 160;
      cfg.n_test = 60;
      cfg.embedding_noise = sigma;
      sum += raw_knn_bacc(synth::generate(cfg));
    }
    mean_bacc.push_back(sum / 3);
  }
  INFO(mean_bacc[0], " ", mean_bacc[1], " ", mean_bacc[2]);
  CHECK(mean_bacc[0] > mean_bacc[1]);
  CHECK(mean_bacc[1] > mean_bacc[2]);
}

TEST_CASE("synth config validation and JSON round trip") {
  synth::SynthConfig cfg = small_config(4);
  const auto j = cfg.to_json();
  CHECK(synth::SynthConfig::from_json(j).to_json() == j);
  auto bad = j;
  bad["unknown_knob"] = 1;
  CHECK_THROWS_AS(synth::SynthConfig::from_json(bad), ConfigError);
  cfg.embedding_noise = -1;
  CHECK_THROWS(cfg.validate());
  cfg = small_config(4);
  cfg.classes[0].signature = {"t(15;17)(q99;q21)"};
  CHECK_THROWS(synth::generate(cfg));
  cfg = small_config(4);
  cfg.classes[0].mutation_rates[0] = 1.5;
  CHECK_THROWS(cfg.validate());
  CHECK_THROWS_AS(synth::gene_index("BRCA1"), std::out_of_range);
  CHECK_THROWS(synth::oracle_report(synth::Cohort{}, small_config(4)));
}

TEST_CASE("written cohort is byte-identical across runs and loads back") {
  const auto cfg = small_config(21);
  const auto a = scratch_dir("cohort_a"), b = scratch_dir("cohort_b");
  const auto cohort = synth::generate(cfg);
  const auto pa = synth::write_cohort(a, cohort, cfg);
  synth::write_cohort(b, synth::generate(cfg), cfg);
  for (const auto& p : pa) CHECK(test::file_bytes(p) == test::file_bytes(b / p.filename()));

  const auto loaded = load_cohort({a / "bags.gbm", a / "kvec.gbm", a / "mvec.gbm", a / "labels.tsv"}, 64, 0);
  const auto direct = synth::to_cohort_data(cohort);
  CHECK(loaded.ids == direct.ids);
  CHECK(loaded.labels == direct.labels);
  CHECK(loaded.class_names == direct.class_names);
  CHECK(loaded.is_test == direct.is_test);
  CHECK(loaded.karyo == direct.karyo);
  CHECK(loaded.mut == direct.mut);
  CHECK(loaded.excluded.empty());
  for (std::size_t i = 0; i < loaded.size(); ++i) CHECK(loaded.bags[i].cells == direct.bags[i].cells);
}

TEST_CASE("patients missing a modality are excluded") {
  const auto cfg = small_config(22);
  const auto dir = scratch_dir("cohort_missing");
  const auto cohort = synth::generate(cfg);
  synth::write_cohort(dir, cohort, cfg);
  auto rows = read_labels(dir / "labels.tsv");
  const std::string dropped = rows[3].patient_id;
  rows.erase(rows.begin() + 3);
  write_labels(dir / "labels.tsv", rows);
  const auto loaded = load_cohort({dir / "bags.gbm", dir / "kvec.gbm", dir / "mvec.gbm", dir / "labels.tsv"}, 64, 0);
  CHECK(loaded.size() == cohort.patients.size() - 1);
  CHECK(loaded.excluded == std::vector<std::string>{dropped});
}

TEST_CASE("cap_bags subsamples deterministically") {
  const auto cohort = synth::generate(small_config(23));
  auto a = synth::to_cohort_data(cohort).bags, b = a;
  cap_bags(a, 5, 77);
  cap_bags(b, 5, 77);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].cells.rows() == 5);
    CHECK(a[i].cells == b[i].cells);
  }
}

TEST_CASE("label and two-column TSV readers") {
  const auto dir = scratch_dir("tsv");
  {
    std::ofstream out(dir / "k.tsv");
    out << "# comment\npatient_id\tiscn\nP1\t46,XX\nP2\t47,XY,+8\n";
  }
  const auto rows = read_two_column_tsv(dir / "k.tsv");
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].second == "47,XY,+8");
  {
    std::ofstream out(dir / "bad.tsv");
    out << "P1\tA\tvalidation\n";
  }
  CHECK_THROWS(read_labels(dir / "bad.tsv"));
}
