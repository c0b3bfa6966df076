#include "genalign/synthcohort.hpp"

#include "genalign/config.hpp"
#include "genalign/formats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

namespace genalign::synth {

const std::array<const char*, kGeneCount> kGenes{
    "ASXL1", "BCOR", "CBL",    "CEBPA", "DNMT3A", "ETV6",  "EZH2",  "FLT3-ITD", "FLT3-TKD",
    "GATA2", "IDH1", "IDH2",   "JAK2",  "KIT",    "KRAS",  "NPM1",  "NRAS",     "PTPN11",
    "RUNX1", "SF3B1", "SRSF2", "STAG2", "TET2",   "TP53",  "WT1"};

int gene_index(const std::string& gene) {
  for (int i = 0; i < kGeneCount; ++i)
    if (gene == kGenes[static_cast<std::size_t>(i)]) return i;
  throw std::out_of_range("unknown gene '" + gene + "'");
}

namespace {

SynthClass make_class(std::string name, std::vector<std::string> signature,
                      std::initializer_list<std::pair<const char*, double>> rates, double base = 0.01) {
  SynthClass c{std::move(name), std::move(signature), {}};
  c.mutation_rates.fill(base);
  for (const auto& [gene, r] : rates) c.mutation_rates[static_cast<std::size_t>(gene_index(gene))] = r;
  return c;
}

bool is_whole_gain(const std::string& tok) { return tok.size() > 1 && tok[0] == '+'; }
bool is_whole_loss(const std::string& tok) { return tok.size() > 1 && tok[0] == '-'; }

}  // namespace

std::vector<SynthClass> SynthConfig::default_classes() {
  return {
      make_class("APL_PML_RARA", {"t(15;17)(q24;q21)"},
                 {{"FLT3-ITD", 0.70}, {"FLT3-TKD", 0.30}, {"WT1", 0.40}, {"NRAS", 0.10}}),
      make_class("CBF_CBFB_MYH11", {"inv(16)(p13.1q22)"},
                 {{"KIT", 0.45}, {"NRAS", 0.70}, {"FLT3-TKD", 0.20}, {"KRAS", 0.35}}),
      make_class("CBF_RUNX1_RUNX1T1", {"t(8;21)(q22;q22)"},
                 {{"KIT", 0.40}, {"ASXL1", 0.50}, {"CBL", 0.35}, {"EZH2", 0.35}, {"NRAS", 0.10}}),
      make_class("NPM1_TRISOMY8", {"+8"},
                 {{"NPM1", 0.95}, {"DNMT3A", 0.60}, {"FLT3-ITD", 0.40}, {"IDH2", 0.25}, {"TET2", 0.30},
                  {"IDH1", 0.20}, {"SRSF2", 0.15}}),
  };
}

void SynthConfig::validate() const {
  if (n_patients < 1) throw std::invalid_argument("synth: n_patients must be >= 1");
  if (n_test < 0 || n_test > n_patients) throw std::invalid_argument("synth: n_test must be in [0, n_patients]");
  if (cells_min < 1 || cells_max < cells_min) throw std::invalid_argument("synth: bad cells range");
  if (input_dim < 1 || n_archetypes < 1) throw std::invalid_argument("synth: dimensions must be positive");
  if (archetype_scale < 0 || composition_noise < 0 || embedding_noise < 0 || prototype_sharpness < 0) {
    throw std::invalid_argument("synth: noise scales must be >= 0");
  }
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string("synth: ") + what + " must be in [0, 1]");
  };
  prob(label_noise, "label_noise");
  prob(event_dropout, "event_dropout");
  prob(extra_event_rate, "extra_event_rate");
  if (classes.size() < 2) throw std::invalid_argument("synth: need at least two classes");
  std::set<std::string> names;
  for (const auto& c : classes) {
    if (c.name.empty() || c.name.find_first_of("\t\n") != std::string::npos) {
      throw std::invalid_argument("synth: bad class name '" + c.name + "'");
    }
    if (!names.insert(c.name).second) throw std::invalid_argument("synth: duplicate class '" + c.name + "'");
    for (double r : c.mutation_rates) prob(r, "mutation rate");
  }
}

nlohmann::json SynthConfig::to_json() const {
  nlohmann::json cls = nlohmann::json::array();
  for (const auto& c : classes) {
    nlohmann::json rates = nlohmann::json::object();
    for (int g = 0; g < kGeneCount; ++g) rates[kGenes[static_cast<std::size_t>(g)]] = c.mutation_rates[static_cast<std::size_t>(g)];
    cls.push_back({{"name", c.name}, {"signature", c.signature}, {"mutation_rates", rates}});
  }
  return {{"n_patients", n_patients},
          {"n_test", n_test},
          {"cells_min", cells_min},
          {"cells_max", cells_max},
          {"input_dim", input_dim},
          {"n_archetypes", n_archetypes},
          {"archetype_scale", archetype_scale},
          {"prototype_sharpness", prototype_sharpness},
          {"composition_noise", composition_noise},
          {"embedding_noise", embedding_noise},
          {"label_noise", label_noise},
          {"event_dropout", event_dropout},
          {"extra_event_rate", extra_event_rate},
          {"extra_event_pool", extra_event_pool},
          {"classes", cls},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  ConfigReader r(j, "synth");
  r.read("n_patients", c.n_patients);
  r.read("n_test", c.n_test);
  r.read("cells_min", c.cells_min);
  r.read("cells_max", c.cells_max);
  r.read("input_dim", c.input_dim);
  r.read("n_archetypes", c.n_archetypes);
  r.read("archetype_scale", c.archetype_scale);
  r.read("prototype_sharpness", c.prototype_sharpness);
  r.read("composition_noise", c.composition_noise);
  r.read("embedding_noise", c.embedding_noise);
  r.read("label_noise", c.label_noise);
  r.read("event_dropout", c.event_dropout);
  r.read("extra_event_rate", c.extra_event_rate);
  r.read("extra_event_pool", c.extra_event_pool);
  r.read("seed", c.seed);
  if (const auto* cls = r.child("classes")) {
    if (!cls->is_array()) throw ConfigError("synth.classes: expected an array");
    c.classes.clear();
    for (const auto& cj : *cls) {
      SynthClass sc;
      ConfigReader cr(cj, "synth.classes[]");
      cr.read("name", sc.name);
      cr.read("signature", sc.signature);
      sc.mutation_rates.fill(0.0);
      if (const auto* rates = cr.child("mutation_rates")) {
        if (!rates->is_object()) throw ConfigError("synth.classes[].mutation_rates: expected an object");
        for (const auto& [gene, v] : rates->items()) {
          try {
            sc.mutation_rates[static_cast<std::size_t>(gene_index(gene))] = v.get<double>();
          } catch (const std::out_of_range&) {
            throw ConfigError("synth.classes[].mutation_rates: unknown gene '" + gene + "'");
          }
        }
      }
      cr.finish();
      c.classes.push_back(std::move(sc));
    }
  }
  r.finish();
  c.validate();
  return c;
}

Cohort generate(const SynthConfig& cfg, const karyo::CytobandTable& table) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int n_classes = static_cast<int>(cfg.classes.size());
  Cohort out;
  for (const auto& c : cfg.classes) out.class_names.push_back(c.name);

  out.archetypes.resize(cfg.n_archetypes, cfg.input_dim);
  for (int a = 0; a < cfg.n_archetypes; ++a)
    for (int d = 0; d < cfg.input_dim; ++d) out.archetypes(a, d) = cfg.archetype_scale * rng.normal();

  out.prototypes.resize(n_classes, cfg.n_archetypes);
  for (int c = 0; c < n_classes; ++c) {
    for (int a = 0; a < cfg.n_archetypes; ++a) out.prototypes(c, a) = cfg.prototype_sharpness * rng.normal();
    Eigen::RowVectorXd row = out.prototypes.row(c).array().exp();
    out.prototypes.row(c) = row / row.sum();
  }

  for (int i = 0; i < cfg.n_patients; ++i) {
    Rng prng = rng.fork();
    SynthPatient p;
    char id[16];
    std::snprintf(id, sizeof id, "P%04d", i + 1);
    p.patient_id = id;
    p.label = static_cast<int>(prng.below(static_cast<std::uint64_t>(n_classes)));
    p.genetics_class = prng.bernoulli(cfg.label_noise) ? static_cast<int>(prng.below(static_cast<std::uint64_t>(n_classes)))
                                                        : p.label;
    p.test = i >= cfg.n_patients - cfg.n_test;

    p.composition.resize(static_cast<std::size_t>(cfg.n_archetypes));
    double total = 0.0;
    for (int a = 0; a < cfg.n_archetypes; ++a) {
      const double w = std::max(0.0, out.prototypes(p.label, a) + cfg.composition_noise * prng.normal());
      p.composition[static_cast<std::size_t>(a)] = w;
      total += w;
    }
    for (int a = 0; a < cfg.n_archetypes; ++a) {
      auto& w = p.composition[static_cast<std::size_t>(a)];
      w = total > 0.0 ? w / total : out.prototypes(p.label, a);
    }

    const int n_cells =
        cfg.cells_min + static_cast<int>(prng.below(static_cast<std::uint64_t>(cfg.cells_max - cfg.cells_min + 1)));
    p.bag.patient_id = p.patient_id;
    p.bag.cells.resize(n_cells, cfg.input_dim);
    for (int c = 0; c < n_cells; ++c) {
      const int a = prng.categorical(p.composition);
      for (int d = 0; d < cfg.input_dim; ++d) {
        p.bag.cells(c, d) = static_cast<float>(out.archetypes(a, d) + cfg.embedding_noise * prng.normal());
      }
    }

    const bool male = prng.bernoulli(0.5);
    std::vector<std::string> tokens;
    for (const auto& t : cfg.classes[static_cast<std::size_t>(p.genetics_class)].signature) {
      if (!prng.bernoulli(cfg.event_dropout)) tokens.push_back(t);
    }
    for (const auto& t : cfg.extra_event_pool) {
      const bool applicable = !(t == "-Y" && !male);
      if (prng.bernoulli(cfg.extra_event_rate) && applicable &&
          std::find(tokens.begin(), tokens.end(), t) == tokens.end()) {
        tokens.push_back(t);
      }
    }
    int modal = 46;
    for (const auto& t : tokens) modal += is_whole_gain(t) ? 1 : is_whole_loss(t) ? -1 : 0;
    p.karyotype = std::to_string(modal) + (male ? ",XY" : ",XX");
    for (const auto& t : tokens) p.karyotype += "," + t;
    p.kvec = karyo::encode_karyotype(karyo::parse_iscn(p.karyotype, table), table);

    p.mvec.resize(kGeneCount);
    const auto& rates = cfg.classes[static_cast<std::size_t>(p.genetics_class)].mutation_rates;
    for (int g = 0; g < kGeneCount; ++g) {
      p.mvec[static_cast<std::size_t>(g)] = prng.bernoulli(rates[static_cast<std::size_t>(g)]) ? 1 : 0;
    }
    out.patients.push_back(std::move(p));
  }
  return out;
}

nlohmann::json oracle_report(const Cohort& cohort, const SynthConfig& cfg, const karyo::CytobandTable& table) {
  if (cohort.patients.empty()) throw std::invalid_argument("oracle_report: empty cohort");
  const auto n_bands = static_cast<int>(table.size());
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < cohort.class_names.size(); ++c) {
    std::vector<const SynthPatient*> members;
    for (const auto& p : cohort.patients)
      if (p.label == static_cast<int>(c)) members.push_back(&p);
    const double n = static_cast<double>(members.size());

    nlohmann::json configured = nlohmann::json::object();
    nlohmann::json observed = nlohmann::json::object();
    for (int g = 0; g < kGeneCount; ++g) {
      double hits = 0.0;
      for (const auto* p : members) hits += p->mvec[static_cast<std::size_t>(g)];
      configured[kGenes[static_cast<std::size_t>(g)]] = cfg.classes[c].mutation_rates[static_cast<std::size_t>(g)];
      observed[kGenes[static_cast<std::size_t>(g)]] = members.empty() ? 0.0 : hits / n;
    }

    nlohmann::json bands = nlohmann::json::object();
    for (auto kind : {karyo::EventKind::loss, karyo::EventKind::gain, karyo::EventKind::fusion}) {
      nlohmann::json per = nlohmann::json::object();
      const int base = static_cast<int>(kind) * n_bands;
      for (int b = 0; b < n_bands; ++b) {
        double hits = 0.0;
        for (const auto* p : members) hits += p->kvec.bits[static_cast<std::size_t>(base + b)];
        if (hits > 0) per[table.band(b).name()] = hits / n;
      }
      bands[karyo::to_string(kind)] = per;
    }

    std::vector<double> proto(static_cast<std::size_t>(cohort.prototypes.cols()));
    for (std::size_t a = 0; a < proto.size(); ++a) proto[a] = cohort.prototypes(static_cast<nd::Index>(c), static_cast<nd::Index>(a));
    const auto n_test = std::count_if(members.begin(), members.end(), [](const SynthPatient* p) { return p->test; });
    classes.push_back({{"name", cohort.class_names[c]},
                       {"signature", cfg.classes[c].signature},
                       {"n_patients", members.size()},
                       {"n_test", n_test},
                       {"mutation_rates", configured},
                       {"mutation_frequency", observed},
                       {"band_event_frequency", bands},
                       {"composition_prototype", proto}});
  }
  std::vector<std::string> genes(kGenes.begin(), kGenes.end());
  return {{"n_patients", cohort.patients.size()},
          {"seed", cfg.seed},
          {"genes", genes},
          {"band_table_sha256", table.sha256()},
          {"label_noise", cfg.label_noise},
          {"classes", classes}};
}

CohortData to_cohort_data(const Cohort& cohort) {
  std::vector<std::string> sorted = cohort.class_names;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> remap(cohort.class_names.size());
  for (std::size_t c = 0; c < remap.size(); ++c) {
    remap[c] = static_cast<int>(std::find(sorted.begin(), sorted.end(), cohort.class_names[c]) - sorted.begin());
  }
  CohortData out;
  out.class_names = sorted;
  const auto n = static_cast<nd::Index>(cohort.patients.size());
  const auto dk = static_cast<nd::Index>(cohort.patients.front().kvec.bits.size());
  out.karyo.resize(n, dk);
  out.mut.resize(n, kGeneCount);
  for (nd::Index i = 0; i < n; ++i) {
    const auto& p = cohort.patients[static_cast<std::size_t>(i)];
    out.ids.push_back(p.patient_id);
    out.bags.push_back(p.bag);
    for (nd::Index j = 0; j < dk; ++j) out.karyo(i, j) = p.kvec.bits[static_cast<std::size_t>(j)];
    for (nd::Index j = 0; j < kGeneCount; ++j) out.mut(i, j) = p.mvec[static_cast<std::size_t>(j)];
    out.labels.push_back(remap[static_cast<std::size_t>(p.label)]);
    out.is_test.push_back(p.test);
  }
  return out;
}

std::vector<std::filesystem::path> write_cohort(const std::filesystem::path& dir, const Cohort& cohort,
                                                const SynthConfig& cfg, const karyo::CytobandTable& table) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> ids;
  std::vector<CellBag> bags;
  std::vector<LabelRow> labels;
  std::vector<std::uint8_t> kbits, mbits;
  for (const auto& p : cohort.patients) {
    ids.push_back(p.patient_id);
    bags.push_back(p.bag);
    labels.push_back({p.patient_id, cohort.class_names[static_cast<std::size_t>(p.label)], p.test ? "test" : "train"});
    kbits.insert(kbits.end(), p.kvec.bits.begin(), p.kvec.bits.end());
    mbits.insert(mbits.end(), p.mvec.begin(), p.mvec.end());
  }
  const std::vector<std::filesystem::path> paths{dir / "bags.gbm",   dir / "karyotypes.tsv", dir / "kvec.gbm",
                                                 dir / "mvec.gbm",   dir / "labels.tsv",     dir / "oracle.json"};
  write_bags(paths[0], bags);
  {
    std::ofstream out(paths[1]);
    if (!out) throw std::runtime_error("cannot write " + paths[1].string());
    out << "patient_id\tiscn\n";
    for (const auto& p : cohort.patients) out << p.patient_id << '\t' << p.karyotype << '\n';
  }
  io::write_gbm_u8(paths[2],
                   {{"kind", "karyotype"}, {"layout", "loss|gain|fusion"}, {"level", "band"},
                    {"band_table_sha256", table.sha256()}, {"patient_ids", ids}},
                   ids.size(), static_cast<std::size_t>(karyo::kKaryotypeDim), kbits);
  std::vector<std::string> genes(kGenes.begin(), kGenes.end());
  io::write_gbm_u8(paths[3], {{"kind", "mutations"}, {"genes", genes}, {"patient_ids", ids}}, ids.size(),
                   static_cast<std::size_t>(kGeneCount), mbits);
  write_labels(paths[4], labels);
  {
    std::ofstream out(paths[5]);
    if (!out) throw std::runtime_error("cannot write " + paths[5].string());
    out << oracle_report(cohort, cfg, table).dump(2) << '\n';
  }
  return paths;
}

}  // namespace genalign::synth
