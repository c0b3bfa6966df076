// genalign: command-line entry point for every pipeline stage.

#include "genalign/align.hpp"
#include "genalign/cohort.hpp"
#include "genalign/config.hpp"
#include "genalign/digest.hpp"
#include "genalign/evalkit.hpp"
#include "genalign/formats.hpp"
#include "genalign/karyogram.hpp"
#include "genalign/pretrain.hpp"
#include "genalign/report.hpp"
#include "genalign/synthcohort.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace genalign;

namespace {

constexpr int kManifestVersion = 1;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string log_level = "info";
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string config_hash(const json& config) { return sha256_hex(config.dump()); }

// Collects what a command read and wrote, then records it next to the outputs.
class Run {
 public:
  Run(std::string command, const Globals& g) : command_(std::move(command)), globals_(g) {
    start_ = std::chrono::steady_clock::now();
  }

  void set_config(const json& config, std::uint64_t seed) {
    config_ = config;
    seed_ = seed;
  }
  std::string config_sha256() const { return config_hash(config_); }
  void input(const fs::path& p) { inputs_.push_back(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  void write_manifest(const fs::path& path) const {
    json in = json::object(), out = json::object();
    for (const auto& p : inputs_) in[p.string()] = sha256_file(p);
    for (const auto& p : outputs_) out[p.string()] = sha256_file(p);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const json m = {{"tool", "genalign"},
                    {"manifest_version", kManifestVersion},
                    {"command", command_},
                    {"config", config_},
                    {"config_sha256", config_sha256()},
                    {"seed", seed_},
                    {"threads", globals_.threads.value_or(1)},
                    {"inputs", in},
                    {"outputs", out},
                    {"wall_seconds", wall}};
    write_text(path, m.dump(2) + "\n");
    spdlog::info("{} finished in {:.1f}s; manifest {}", command_, wall, path.string());
  }

 private:
  std::string command_;
  Globals globals_;
  json config_ = json::object();
  std::uint64_t seed_ = 0;
  std::vector<fs::path> inputs_, outputs_;
  std::chrono::steady_clock::time_point start_;
};

fs::path manifest_for(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

template <typename Cfg>
void apply_globals(Cfg& cfg, const Globals& g) {
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads) cfg.threads = *g.threads;
}

struct CohortArgs {
  fs::path dir, bags, karyo, mut, labels;

  void add_to(CLI::App* cmd, bool need_genetics) {
    cmd->add_option("--cohort-dir", dir, "directory written by `genalign synth`");
    cmd->add_option("--cohort", bags, "cell bags (.gbm)");
    if (need_genetics) {
      cmd->add_option("--karyo", karyo, "karyotype vectors (.gbm)");
      cmd->add_option("--mut", mut, "mutation vectors (.gbm)");
    }
    cmd->add_option("--labels", labels, "labels.tsv");
  }

  void resolve() {
    auto pick = [&](fs::path& p, const char* name) {
      if (p.empty() && !dir.empty()) p = dir / name;
    };
    pick(bags, "bags.gbm");
    pick(karyo, "kvec.gbm");
    pick(mut, "mvec.gbm");
    pick(labels, "labels.tsv");
  }

  CohortPaths paths() {
    resolve();
    if (bags.empty() || karyo.empty() || mut.empty() || labels.empty()) {
      throw UsageError("cohort files required: --cohort-dir, or --cohort --karyo --mut --labels");
    }
    return {bags, karyo, mut, labels};
  }

  void record(Run& run) const {
    for (const auto* p : {&bags, &karyo, &mut, &labels})
      if (!p->empty() && fs::exists(*p)) run.input(*p);
  }
};

std::vector<std::string> gene_names(const fs::path& mut_path, int d_m) {
  const auto header = io::inspect(mut_path).at("header");
  if (header.contains("genes")) return header.at("genes").get<std::vector<std::string>>();
  if (d_m == synth::kGeneCount) return {synth::kGenes.begin(), synth::kGenes.end()};
  return {};
}

// Brings the karyotype matrix to the width a model expects.
void match_karyotype_width(CohortData& data, KaryotypeResolution res) {
  const auto& table = karyo::CytobandTable::builtin();
  const auto band_dim = static_cast<nd::Index>(karyo::kKaryotypeDim);
  const auto arm_dim = static_cast<nd::Index>(3 * table.arms().size());
  if (res == KaryotypeResolution::arm && data.karyo.cols() == band_dim) {
    data.karyo = to_arm_level(data.karyo, table);
  } else if ((res == KaryotypeResolution::arm && data.karyo.cols() != arm_dim) ||
             (res == KaryotypeResolution::band && data.karyo.cols() != band_dim)) {
    throw std::invalid_argument("karyotype matrix has " + std::to_string(data.karyo.cols()) +
                                " columns, which does not match the " + to_string(res) + " resolution");
  }
}

// ---------------------------------------------------------------- synth

int cmd_synth(const fs::path& config_path, const fs::path& out_dir, const Globals& g) {
  Run run("synth", g);
  synth::SynthConfig cfg;
  if (!config_path.empty()) {
    cfg = synth::SynthConfig::from_json(read_json_file(config_path));
    run.input(config_path);
  }
  if (g.seed) cfg.seed = *g.seed;
  run.set_config(cfg.to_json(), cfg.seed);
  const auto cohort = synth::generate(cfg);
  for (const auto& p : synth::write_cohort(out_dir, cohort, cfg)) run.output(p);
  spdlog::info("wrote {} patients to {}", cohort.patients.size(), out_dir.string());
  run.write_manifest(out_dir / "manifest.json");
  return 0;
}

// ---------------------------------------------------------------- encode-karyotype

int cmd_encode(const fs::path& in, const fs::path& out, bool arm_level, bool lenient, const Globals& g) {
  Run run("encode-karyotype", g);
  run.input(in);
  const json config = {{"arm_level", arm_level}, {"lenient", lenient}};
  run.set_config(config, g.seed.value_or(0));
  const auto& table = karyo::CytobandTable::builtin();
  const auto rows = read_two_column_tsv(in);
  if (rows.empty()) throw std::invalid_argument(in.string() + ": no karyotypes");
  std::vector<std::string> ids;
  std::vector<std::uint8_t> bits;
  json skipped = json::object();
  std::size_t width = 0;
  for (const auto& [id, iscn] : rows) {
    std::vector<karyo::KaryotypeEvent> events;
    try {
      auto parsed = karyo::parse_iscn(iscn, table, {lenient});
      events = std::move(parsed.events);
      if (!parsed.skipped.empty()) {
        skipped[id] = parsed.skipped;
        spdlog::warn("{}: skipped {} unsupported token(s)", id, parsed.skipped.size());
      }
    } catch (const std::exception& e) {
      throw std::invalid_argument(id + ": " + e.what());
    }
    const auto v = karyo::encode_karyotype(events, table);
    const auto& b = arm_level ? karyo::rollup_to_arms(v, table).bits : v.bits;
    width = b.size();
    ids.push_back(id);
    bits.insert(bits.end(), b.begin(), b.end());
  }
  io::write_gbm_u8(out,
                   {{"kind", "karyotype"},
                    {"layout", "loss|gain|fusion"},
                    {"level", arm_level ? "arm" : "band"},
                    {"band_table_sha256", table.sha256()},
                    {"config_sha256", run.config_sha256()},
                    {"skipped_tokens", skipped},
                    {"patient_ids", ids}},
                   ids.size(), width, bits);
  run.output(out);
  run.write_manifest(manifest_for(out));
  return 0;
}

// ---------------------------------------------------------------- pretrain

int cmd_pretrain(const fs::path& config_path, CohortArgs cohort, const fs::path& out, const fs::path& metrics_path,
                 const Globals& g) {
  Run run("pretrain", g);
  PretrainConfig cfg;
  if (!config_path.empty()) {
    cfg = PretrainConfig::from_json(read_json_file(config_path));
    run.input(config_path);
  }
  apply_globals(cfg, g);
  cfg.validate();
  run.set_config(cfg.to_json(), cfg.seed);

  cohort.resolve();
  if (cohort.bags.empty()) throw UsageError("pretrain needs --cohort or --cohort-dir");
  auto bags = read_bags(cohort.bags);
  run.input(cohort.bags);
  if (!cohort.labels.empty()) {
    // With labels given, only the train split is used.
    std::set<std::string> train;
    for (const auto& r : read_labels(cohort.labels))
      if (r.split == "train") train.insert(r.patient_id);
    std::erase_if(bags, [&](const CellBag& b) { return !train.count(b.patient_id); });
    run.input(cohort.labels);
  }
  if (bags.empty()) throw std::invalid_argument("pretrain: no bags to train on");
  cap_bags(bags, cfg.aggregator.max_cells, cfg.seed);
  spdlog::info("pretraining on {} bags for {} epochs", bags.size(), cfg.epochs);

  const fs::path metrics = metrics_path.empty() ? fs::path(out.string() + ".metrics.jsonl") : metrics_path;
  std::ostringstream log;
  const auto result = train_pretrain(bags, cfg, [&](const PretrainEpoch& e) {
    log << e.to_json().dump() << '\n';
  });
  auto ck = pretrain_checkpoint(result, cfg);
  ck.manifest["config_sha256"] = run.config_sha256();
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  io::write_checkpoint(out, ck);
  write_text(metrics, log.str());
  run.output(out);
  run.output(metrics);
  run.write_manifest(manifest_for(out));
  return 0;
}

// ---------------------------------------------------------------- align

// The align config file holds {"align": {...}, "aggregator": {...}}; both
// sections are optional. Without --init the aggregator section defines the
// architecture; with --init it must agree with the checkpoint.
int cmd_align(const fs::path& config_path, CohortArgs cohort, const fs::path& init, const fs::path& out,
              const Globals& g) {
  Run run("align", g);
  AlignConfig cfg;
  std::optional<AggregatorConfig> agg_from_config;
  if (!config_path.empty()) {
    const auto j = read_json_file(config_path);
    ConfigReader r(j, "align config");
    if (const auto* a = r.child("align")) cfg = AlignConfig::from_json(*a);
    if (const auto* a = r.child("aggregator")) agg_from_config = AggregatorConfig::from_json(*a);
    r.finish();
    run.input(config_path);
  }
  apply_globals(cfg, g);
  cfg.validate();

  std::optional<LoadedPretrain> pre;
  if (!init.empty()) {
    pre = load_pretrain_checkpoint(io::read_checkpoint(init));
    run.input(init);
  }
  AggregatorConfig agg_cfg;
  if (pre) {
    agg_cfg = pre->config.aggregator;
    if (agg_from_config && !(*agg_from_config == agg_cfg)) {
      throw std::invalid_argument("align: aggregator config (D = " + std::to_string(agg_from_config->embed_dim) +
                                  ") does not match the init checkpoint (D = " + std::to_string(agg_cfg.embed_dim) +
                                  ")");
    }
  } else if (cfg.init == AlignInit::pretrained && cfg.aggregator_mode != AggregatorMode::mean_pool) {
    throw UsageError("align: init=pretrained needs --init <pretrain checkpoint>");
  } else if (cfg.init == AlignInit::pretrained) {
    throw UsageError("align: mean_pool mode projects pretrained cell embeddings; pass --init");
  } else if (agg_from_config) {
    agg_cfg = *agg_from_config;
  }
  run.set_config({{"align", cfg.to_json()}, {"aggregator", agg_cfg.to_json()}}, cfg.seed);

  auto data = load_cohort(cohort.paths(), agg_cfg.max_cells, cfg.seed);
  cohort.record(run);
  match_karyotype_width(data, cfg.karyotype_resolution);
  if (data.bags.front().cells.cols() != agg_cfg.input_dim) {
    throw std::invalid_argument("align: cells have width " + std::to_string(data.bags.front().cells.cols()) +
                                " but the aggregator expects " + std::to_string(agg_cfg.input_dim));
  }
  const auto train = data.subset(data.indices(false));
  spdlog::info("aligning {} training patients for {} epochs", train.size(), cfg.epochs);

  std::ostringstream log;
  const auto result = train_align(train, agg_cfg, pre ? &pre->state.teacher_agg : nullptr, cfg, [&](const AlignEpoch& e) {
    log << e.to_json().dump() << '\n';
  });
  auto ck = align_checkpoint(result, agg_cfg, cfg, static_cast<int>(data.karyo.cols()),
                             static_cast<int>(data.mut.cols()), data.class_names);
  ck.manifest["config_sha256"] = run.config_sha256();
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  io::write_checkpoint(out, ck);
  const fs::path metrics(out.string() + ".metrics.jsonl");
  write_text(metrics, log.str());
  run.output(out);
  run.output(metrics);
  run.write_manifest(manifest_for(out));
  return 0;
}

// ---------------------------------------------------------------- embed

int cmd_embed(const fs::path& aligned, const fs::path& pretrained, CohortArgs cohort, const fs::path& out_dir,
              const Globals& g) {
  Run run("embed", g);
  if (aligned.empty() == pretrained.empty()) throw UsageError("embed: pass exactly one of --aligned or --pretrained");
  const int threads = g.threads.value_or(1);
  std::vector<fs::path> written;
  auto write = [&](const std::string& name, const std::vector<std::string>& ids, const nd::Matrix<float>& m,
                   const json& extra) {
    json header = extra;
    header["patient_ids"] = ids;
    header["config_sha256"] = run.config_sha256();
    io::write_gbm(out_dir / name, header, m);
    run.output(out_dir / name);
    written.push_back(out_dir / name);
  };
  fs::create_directories(out_dir);

  if (!pretrained.empty()) {
    const auto pre = load_pretrain_checkpoint(io::read_checkpoint(pretrained));
    run.input(pretrained);
    run.set_config({{"pretrained", pre.config.to_json()}, {"threads", threads}}, pre.config.seed);
    cohort.resolve();
    if (cohort.bags.empty()) throw UsageError("embed needs --cohort or --cohort-dir");
    auto bags = read_bags(cohort.bags);
    run.input(cohort.bags);
    cap_bags(bags, pre.config.aggregator.max_cells, pre.config.seed);
    std::vector<std::string> ids;
    for (const auto& b : bags) ids.push_back(b.patient_id);
    write("cls.gbm", ids, embed_bags(pre.state.teacher_agg, pre.config.aggregator, bags, threads),
          {{"kind", "cls_embedding"}});
  } else {
    const auto model = load_align_checkpoint(io::read_checkpoint(aligned));
    run.input(aligned);
    run.set_config({{"aligned", model.config.to_json()}, {"threads", threads}}, model.config.seed);
    auto data = load_cohort(cohort.paths(), model.aggregator.max_cells, model.config.seed);
    cohort.record(run);
    match_karyotype_width(data, model.config.karyotype_resolution);
    AlignConfig acfg = model.config;
    acfg.threads = threads;
    const auto t = embed_aligned(model.state, model.aggregator, acfg, data);
    write("slide.gbm", t.ids, t.slide, {{"kind", "slide_embedding"}});
    write("z_s.gbm", t.ids, t.z_s, {{"kind", "aligned"}, {"modality", "slide"}});
    write("z_k.gbm", t.ids, t.z_k, {{"kind", "aligned"}, {"modality", "karyotype"}});
    write("z_m.gbm", t.ids, t.z_m, {{"kind", "aligned"}, {"modality", "mutation"}});
    json index = json::array();
    for (std::size_t i = 0; i < t.ids.size(); ++i) {
      index.push_back({{"patient_id", t.ids[i]},
                       {"label", data.class_names[static_cast<std::size_t>(t.labels[i])]},
                       {"split", t.is_test[i] ? "test" : "train"},
                       {"row", i}});
    }
    write_text(out_dir / "index.json", json{{"patients", index}}.dump(2) + "\n");
    run.output(out_dir / "index.json");
  }
  run.write_manifest(out_dir / "manifest.json");
  return 0;
}

// ---------------------------------------------------------------- retrieve

int cmd_retrieve(const fs::path& index_path, const fs::path& query_path, const std::vector<std::string>& query_ids,
                 int top_k, bool exclude_self, const fs::path& out, const Globals& g) {
  Run run("retrieve", g);
  run.set_config({{"top_k", top_k}, {"exclude_self", exclude_self}, {"query_ids", query_ids}}, g.seed.value_or(0));
  if (top_k < 1) throw UsageError("retrieve: --top-k must be >= 1");
  const auto idx = io::read_gbm(index_path);
  const auto qry = io::read_gbm(query_path);
  run.input(index_path);
  run.input(query_path);
  auto unit = [](const nd::Matrix<float>& m) {
    eval::Mat d = m.cast<double>();
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      const double n = d.row(i).norm();
      if (n == 0.0) throw std::invalid_argument("retrieve: zero embedding row " + std::to_string(i));
      d.row(i) /= n;
    }
    return d;
  };
  const eval::RetrievalIndex index(idx.patient_ids(), unit(idx.as_float()), index_path.stem().string());
  const auto q = unit(qry.as_float());
  const auto q_ids = qry.patient_ids();
  std::set<std::string> wanted(query_ids.begin(), query_ids.end());

  std::ostringstream tsv;
  tsv << "query\trank\tcandidate\tscore\n";
  int emitted = 0;
  for (Eigen::Index r = 0; r < q.rows(); ++r) {
    const auto& id = q_ids[static_cast<std::size_t>(r)];
    if (!wanted.empty() && !wanted.count(id)) continue;
    const auto list = eval::retrieve(id, q.row(r), index, exclude_self);
    for (std::size_t i = 0; i < list.ids.size() && static_cast<int>(i) < top_k; ++i) {
      tsv << id << '\t' << i + 1 << '\t' << list.ids[i] << '\t' << json(list.scores[i]).dump() << '\n';
    }
    ++emitted;
  }
  if (!wanted.empty() && emitted != static_cast<int>(wanted.size())) {
    throw std::invalid_argument("retrieve: some --query ids are not in " + query_path.string());
  }
  if (out.empty()) {
    std::cout << tsv.str();
  } else {
    write_text(out, tsv.str());
    run.output(out);
    run.write_manifest(manifest_for(out));
  }
  return 0;
}

// ---------------------------------------------------------------- evaluate

EvalConfig load_eval_config(const fs::path& path, const std::string& tasks, const Globals& g, Run& run) {
  EvalConfig cfg;
  if (!path.empty()) {
    cfg = EvalConfig::from_json(read_json_file(path));
    run.input(path);
  }
  if (!tasks.empty()) {
    cfg.tasks.clear();
    std::stringstream ss(tasks);
    for (std::string t; std::getline(ss, t, ',');)
      if (!t.empty()) cfg.tasks.push_back(t);
  }
  apply_globals(cfg, g);
  cfg.validate();
  return cfg;
}

int cmd_evaluate(const fs::path& aligned, const fs::path& pretrained, CohortArgs cohort, const fs::path& config_path,
                 const std::string& tasks, const fs::path& out, const Globals& g) {
  Run run("evaluate", g);
  const auto cfg = load_eval_config(config_path, tasks, g, run);
  const auto model = load_align_checkpoint(io::read_checkpoint(aligned));
  run.input(aligned);
  run.set_config({{"eval", cfg.to_json()}, {"aligned_config_sha256", sha256_file(aligned)}}, cfg.seed);

  auto data = load_cohort(cohort.paths(), model.aggregator.max_cells, model.config.seed);
  cohort.record(run);
  match_karyotype_width(data, model.config.karyotype_resolution);

  std::vector<ProbeSet> extra{{"mean_pool_raw", raw_mean_pool(data.bags)}};
  if (!pretrained.empty()) {
    const auto pre = load_pretrain_checkpoint(io::read_checkpoint(pretrained));
    run.input(pretrained);
    extra.push_back({"pretrained", embed_bags(pre.state.teacher_agg, pre.config.aggregator, data.bags, cfg.threads)});
  }
  auto report = evaluate(data, model, extra, cfg, gene_names(cohort.mut, model.d_m));
  report["config_sha256"] = run.config_sha256();
  write_text(out, report.dump(2) + "\n");
  const fs::path tsv = fs::path(out).replace_extension(".tsv");
  write_text(tsv, report_tsv(report));
  run.output(out);
  run.output(tsv);
  run.write_manifest(manifest_for(out));
  return 0;
}

// ---------------------------------------------------------------- ablate

int cmd_ablate(const fs::path& grid_path, CohortArgs cohort, const fs::path& init, const fs::path& out,
               const Globals& g) {
  Run run("ablate", g);
  AblationGrid grid;
  if (!grid_path.empty()) {
    grid = AblationGrid::from_json(read_json_file(grid_path));
    run.input(grid_path);
  }
  apply_globals(grid.align, g);
  apply_globals(grid.eval, g);
  grid.validate();
  if (init.empty()) throw UsageError("ablate needs --init <pretrain checkpoint>");
  const auto pre = load_pretrain_checkpoint(io::read_checkpoint(init));
  run.input(init);
  run.set_config(grid.to_json(), grid.align.seed);

  const auto data = load_cohort(cohort.paths(), pre.config.aggregator.max_cells, grid.align.seed);
  cohort.record(run);
  if (data.karyo.cols() != karyo::kKaryotypeDim) throw std::invalid_argument("ablate: expects band-level karyotypes");
  auto table = run_ablation(data, pre.state.teacher_agg, pre.config.aggregator, grid);
  table["config_sha256"] = run.config_sha256();
  write_text(out, ablation_tsv(table));
  const fs::path js = fs::path(out).replace_extension(".json");
  write_text(js, table.dump(2) + "\n");
  run.output(out);
  run.output(js);
  run.write_manifest(manifest_for(out));
  return 0;
}

// ---------------------------------------------------------------- inspect

int cmd_inspect(const fs::path& file) {
  std::cout << io::inspect(file).dump(2) << '\n';
  return 0;
}

void configure_logging(const std::string& level) {
  auto logger = spdlog::stderr_color_mt("genalign");
  spdlog::set_default_logger(logger);
  const auto lvl = spdlog::level::from_str(level);
  if (lvl == spdlog::level::off && level != "off") throw UsageError("unknown --log-level '" + level + "'");
  spdlog::set_level(lvl);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"genalign: slide, karyotype and mutation alignment for AML cohorts"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  int threads = 1;
  auto* seed_opt = app.add_option("--seed", seed, "override the seed of every config");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off");

  std::function<int()> action;

  fs::path config, out, out_dir, init, aligned, pretrained, in, grid, index, queries, metrics, file;
  std::string tasks;
  bool arm_level = false, lenient = false, exclude_self = false;
  int top_k = 10;
  std::vector<std::string> query_ids;
  CohortArgs cohort;

  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
  synth->add_option("--config", config, "synth config (JSON)");
  synth->add_option("--out-dir", out_dir, "output directory")->required();
  synth->callback([&] { action = [&] { return cmd_synth(config, out_dir, g); }; });

  auto* encode = app.add_subcommand("encode-karyotype", "encode ISCN karyotypes to bit vectors");
  encode->add_option("--in", in, "TSV of patient_id<TAB>iscn")->required();
  encode->add_option("--out", out, "output .gbm")->required();
  encode->add_flag("--arm-level", arm_level, "roll bands up to chromosome arms");
  encode->add_flag("--lenient", lenient, "skip unsupported tokens with a warning");
  encode->callback([&] { action = [&] { return cmd_encode(in, out, arm_level, lenient, g); }; });

  auto* pretrain = app.add_subcommand("pretrain", "stage-1 self-supervised aggregator training");
  pretrain->add_option("--config", config, "pretrain config (JSON)");
  cohort.add_to(pretrain, false);
  pretrain->add_option("--out", out, "output checkpoint (.gbck)")->required();
  pretrain->add_option("--metrics", metrics, "per-epoch JSON lines (default: <out>.metrics.jsonl)");
  pretrain->callback([&] { action = [&] { return cmd_pretrain(config, cohort, out, metrics, g); }; });

  auto* align = app.add_subcommand("align", "stage-2 genetic alignment");
  align->add_option("--config", config, "align config (JSON)");
  cohort.add_to(align, true);
  align->add_option("--init", init, "pretrain checkpoint");
  align->add_option("--out", out, "output checkpoint (.gbck)")->required();
  align->callback([&] { action = [&] { return cmd_align(config, cohort, init, out, g); }; });

  auto* embed = app.add_subcommand("embed", "write embeddings for a cohort");
  embed->add_option("--aligned", aligned, "aligned checkpoint");
  embed->add_option("--pretrained", pretrained, "pretrain checkpoint (CLS embeddings only)");
  cohort.add_to(embed, true);
  embed->add_option("--out-dir", out_dir, "output directory")->required();
  embed->callback([&] { action = [&] { return cmd_embed(aligned, pretrained, cohort, out_dir, g); }; });

  auto* retrieve = app.add_subcommand("retrieve", "rank index rows for each query row by cosine similarity");
  retrieve->add_option("--index", index, "candidate embeddings (.gbm)")->required();
  retrieve->add_option("--queries", queries, "query embeddings (.gbm)")->required();
  retrieve->add_option("--query", query_ids, "restrict to these query ids");
  retrieve->add_option("--top-k", top_k, "hits per query");
  retrieve->add_flag("--exclude-self", exclude_self, "drop the candidate with the query's id");
  retrieve->add_option("--out", out, "output TSV (default: stdout)");
  retrieve->callback(
      [&] { action = [&] { return cmd_retrieve(index, queries, query_ids, top_k, exclude_self, out, g); }; });

  auto* evaluate_cmd = app.add_subcommand("evaluate", "retrieval and probe report");
  evaluate_cmd->add_option("--aligned", aligned, "aligned checkpoint")->required();
  evaluate_cmd->add_option("--pretrained", pretrained, "pretrain checkpoint, adds stage-1 probes");
  cohort.add_to(evaluate_cmd, true);
  evaluate_cmd->add_option("--config", config, "eval config (JSON)");
  evaluate_cmd->add_option("--tasks", tasks, "comma-separated subset of retrieval,knn,logreg");
  evaluate_cmd->add_option("--out", out, "report.json (a .tsv is written alongside)")->required();
  evaluate_cmd->callback(
      [&] { action = [&] { return cmd_evaluate(aligned, pretrained, cohort, config, tasks, out, g); }; });

  auto* ablate = app.add_subcommand("ablate", "train and score the ablation grid");
  ablate->add_option("--grid", grid, "grid config (JSON)");
  cohort.add_to(ablate, true);
  ablate->add_option("--init", init, "pretrain checkpoint")->required();
  ablate->add_option("--out", out, "output TSV (a .json is written alongside)")->required();
  ablate->callback([&] { action = [&] { return cmd_ablate(grid, cohort, init, out, g); }; });

  auto* inspect = app.add_subcommand("inspect", "print the header of a .gbm or .gbck file");
  inspect->add_option("file", file, "file to inspect")->required();
  inspect->callback([&] { action = [&] { return cmd_inspect(file); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  if (*seed_opt) g.seed = seed;
  if (*threads_opt) g.threads = threads;

  auto fail = [](const char* kind, const std::exception& e, int code) {
    std::cerr << json{{"error", kind}, {"message", e.what()}}.dump() << '\n';
    return code;
  };
  try {
    configure_logging(g.log_level);
    return action();
  } catch (const UsageError& e) {
    return fail("usage", e, 2);
  } catch (const ConfigError& e) {
    return fail("config", e, 2);
  } catch (const io::FormatError& e) {
    return fail("format", e, 1);
  } catch (const fs::filesystem_error& e) {
    return fail("io", e, 1);
  } catch (const std::exception& e) {
    return fail("runtime", e, 1);
  }
}
