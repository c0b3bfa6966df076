#include "genalign/align.hpp"

#include "genalign/config.hpp"
#include "genalign/optim.hpp"
#include "genalign/parallel.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <memory>

namespace genalign {

const char* to_string(AlignInit v) { return v == AlignInit::pretrained ? "pretrained" : "random"; }

const char* to_string(AggregatorMode v) {
  switch (v) {
    case AggregatorMode::finetune: return "finetune";
    case AggregatorMode::frozen: return "frozen";
    case AggregatorMode::mean_pool: return "mean_pool";
  }
  return "?";
}

const char* to_string(KaryotypeResolution v) { return v == KaryotypeResolution::band ? "band" : "arm"; }

AlignInit parse_align_init(const std::string& s) {
  if (s == "pretrained") return AlignInit::pretrained;
  if (s == "random") return AlignInit::random;
  throw ConfigError("init must be pretrained or random, got '" + s + "'");
}

AggregatorMode parse_aggregator_mode(const std::string& s) {
  if (s == "finetune") return AggregatorMode::finetune;
  if (s == "frozen") return AggregatorMode::frozen;
  if (s == "mean_pool") return AggregatorMode::mean_pool;
  throw ConfigError("aggregator_mode must be finetune, frozen or mean_pool, got '" + s + "'");
}

KaryotypeResolution parse_karyotype_resolution(const std::string& s) {
  if (s == "band") return KaryotypeResolution::band;
  if (s == "arm") return KaryotypeResolution::arm;
  throw ConfigError("karyotype_resolution must be band or arm, got '" + s + "'");
}

void AlignConfig::validate() const {
  if (!(tau > 0)) throw std::invalid_argument("align: tau must be positive");
  if (lambda_r < 0) throw std::invalid_argument("align: lambda_r must be >= 0");
  if (epochs < 1) throw std::invalid_argument("align: epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("align: batch_size must be >= 2");
  if (!(lr_heads > 0) || lr_aggregator < 0 || weight_decay < 0) throw std::invalid_argument("align: bad optimizer settings");
  if (proj_hidden < 1 || proj_dim < 1 || decoder_hidden < 1) throw std::invalid_argument("align: bad head sizes");
  if (threads < 1) throw std::invalid_argument("align: threads must be >= 1");
}

nlohmann::json AlignConfig::to_json() const {
  return {{"tau", tau},
          {"lambda_r", lambda_r},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr_heads", lr_heads},
          {"lr_aggregator", lr_aggregator},
          {"weight_decay", weight_decay},
          {"init", to_string(init)},
          {"aggregator_mode", to_string(aggregator_mode)},
          {"karyotype_resolution", to_string(karyotype_resolution)},
          {"proj_hidden", proj_hidden},
          {"proj_dim", proj_dim},
          {"decoder_hidden", decoder_hidden},
          {"seed", seed}};
}

AlignConfig AlignConfig::from_json(const nlohmann::json& j) {
  AlignConfig c;
  ConfigReader r(j, "align");
  std::string init = to_string(c.init), mode = to_string(c.aggregator_mode), res = to_string(c.karyotype_resolution);
  r.read("tau", c.tau);
  r.read("lambda_r", c.lambda_r);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("lr_heads", c.lr_heads);
  r.read("lr_aggregator", c.lr_aggregator);
  r.read("weight_decay", c.weight_decay);
  r.read("init", init);
  r.read("aggregator_mode", mode);
  r.read("karyotype_resolution", res);
  r.read("proj_hidden", c.proj_hidden);
  r.read("proj_dim", c.proj_dim);
  r.read("decoder_hidden", c.decoder_hidden);
  r.read("seed", c.seed);
  r.read("threads", c.threads);
  r.finish();
  c.init = parse_align_init(init);
  c.aggregator_mode = parse_aggregator_mode(mode);
  c.karyotype_resolution = parse_karyotype_resolution(res);
  c.validate();
  return c;
}

nlohmann::json AlignEpoch::to_json() const {
  return {{"epoch", epoch},         {"loss", loss}, {"slide_karyo", slide_karyo}, {"slide_mut", slide_mut},
          {"bce", bce},             {"empty_anchors", empty_anchors}};
}

nd::Matrix<float> to_arm_level(const nd::Matrix<float>& band_bits, const karyo::CytobandTable& table) {
  const auto n_bands = static_cast<nd::Index>(table.size());
  if (band_bits.cols() != 3 * n_bands) {
    throw nd::ShapeError("to_arm_level: expected " + std::to_string(3 * n_bands) + " columns, got " +
                         std::to_string(band_bits.cols()));
  }
  const auto n_arms = static_cast<nd::Index>(table.arms().size());
  nd::Matrix<float> out = nd::Matrix<float>::Zero(band_bits.rows(), 3 * n_arms);
  for (nd::Index i = 0; i < band_bits.rows(); ++i) {
    karyo::KaryotypeVector v;
    v.bits.resize(static_cast<std::size_t>(band_bits.cols()));
    for (nd::Index j = 0; j < band_bits.cols(); ++j) v.bits[static_cast<std::size_t>(j)] = band_bits(i, j) != 0.0f;
    const auto arm = karyo::rollup_to_arms(v, table);
    for (nd::Index j = 0; j < out.cols(); ++j) out(i, j) = arm.bits[static_cast<std::size_t>(j)];
  }
  return out;
}

std::vector<std::vector<int>> stratified_batches(std::span<const int> labels, int batch_size, Rng& rng) {
  if (batch_size < 2) throw std::invalid_argument("stratified_batches: batch_size must be >= 2");
  for (int l : labels)
    if (l < 0) throw std::invalid_argument("stratified_batches: negative class label");
  const int n = static_cast<int>(labels.size());
  if (n == 0) return {};
  const int n_batches = std::max(1, (n + batch_size - 1) / batch_size);
  int n_classes = 0;
  for (int l : labels) n_classes = std::max(n_classes, l + 1);
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(n_classes));
  for (int i = 0; i < n; ++i) by_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(i);

  std::vector<std::vector<int>> batches(static_cast<std::size_t>(n_batches));
  for (auto& members : by_class) {
    if (members.empty()) continue;
    rng.shuffle(std::span<int>(members));
    const int offset = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_batches)));
    for (std::size_t j = 0; j < members.size(); ++j) {
      batches[static_cast<std::size_t>((static_cast<int>(j / 2) + offset) % n_batches)].push_back(members[j]);
    }
  }
  // A batch needs two rows for the contrastive loss; fold tiny ones into a neighbour.
  std::vector<std::vector<int>> out;
  for (auto& b : batches) {
    if (b.empty()) continue;
    if (b.size() < 2 && !out.empty()) {
      out.back().insert(out.back().end(), b.begin(), b.end());
    } else {
      out.push_back(std::move(b));
    }
  }
  if (out.size() > 1 && out.front().size() < 2) {
    out[1].insert(out[1].end(), out.front().begin(), out.front().end());
    out.erase(out.begin());
  }
  rng.shuffle(std::span<std::vector<int>>(out));
  return out;
}

namespace {

struct SlideGraph {
  nd::Graph<float> graph;
  BoundParams<float> agg;
  nd::Var<float> slide;
};

void check_inputs(const CohortData& data, const AggregatorConfig& agg_cfg) {
  if (data.size() < 2) throw std::invalid_argument("train_align: need at least two patients");
  if (data.karyo.rows() != static_cast<nd::Index>(data.size()) || data.mut.rows() != static_cast<nd::Index>(data.size()) ||
      data.labels.size() != data.size() || data.bags.size() != data.size()) {
    throw std::invalid_argument("train_align: modality tables disagree in length");
  }
  for (const auto& b : data.bags) {
    if (b.cells.rows() == 0 || b.cells.cols() != agg_cfg.input_dim) {
      throw nd::ShapeError("train_align: bag " + b.patient_id + " has shape " + nd::shape_str(b.cells));
    }
  }
}

nd::Matrix<float> gather_rows(const nd::Matrix<float>& m, const std::vector<int>& idx) {
  nd::Matrix<float> out(static_cast<nd::Index>(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<nd::Index>(r)) = m.row(idx[r]);
  return out;
}

}  // namespace

AlignResult train_align(const CohortData& train, const AggregatorConfig& agg_cfg, const ParamSet<float>* pretrained_agg,
                        const AlignConfig& cfg, const AlignCallback& on_epoch) {
  cfg.validate();
  agg_cfg.validate();
  check_inputs(train, agg_cfg);

  Rng rng(cfg.seed);
  Rng head_rng = rng.fork();
  Rng agg_rng = rng.fork();
  AlignResult result;
  auto& st = result.state;
  if (cfg.init == AlignInit::pretrained) {
    if (!pretrained_agg) throw std::invalid_argument("train_align: pretrained init needs a stage-1 aggregator");
    st.agg = *pretrained_agg;
  } else {
    st.agg = init_aggregator<float>(agg_cfg, agg_rng);
  }
  Rng probe(0);
  if (!st.agg.same_layout(init_aggregator<float>(agg_cfg, probe))) {
    throw std::invalid_argument("train_align: aggregator parameters do not match the aggregator config");
  }
  const auto d_k = static_cast<int>(train.karyo.cols());
  const auto d_m = static_cast<int>(train.mut.cols());
  st.heads = init_align_heads<float>(agg_cfg.embed_dim, d_k, d_m, cfg, head_rng);

  const bool train_agg = cfg.aggregator_mode != AggregatorMode::frozen && cfg.lr_aggregator > 0;
  AdamW opt_heads(st.heads);
  AdamW opt_agg(st.agg);

  // Frozen slides never change, so compute them once.
  nd::Matrix<float> frozen;
  if (cfg.aggregator_mode == AggregatorMode::frozen) frozen = embed_bags(st.agg, agg_cfg, train.bags, cfg.threads);

  const auto tau = static_cast<float>(cfg.tau);
  const auto lambda_r = static_cast<float>(cfg.lambda_r);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = stratified_batches(std::span<const int>(train.labels), cfg.batch_size, rng);
    AlignEpoch log;
    log.epoch = epoch + 1;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];
      const int bsz = static_cast<int>(batch.size());
      std::vector<int> labels;
      for (int i : batch) labels.push_back(train.labels[static_cast<std::size_t>(i)]);

      std::vector<std::unique_ptr<SlideGraph>> slides(static_cast<std::size_t>(bsz));
      nd::Matrix<float> s_values(bsz, agg_cfg.embed_dim);
      if (cfg.aggregator_mode == AggregatorMode::frozen) {
        s_values = gather_rows(frozen, batch);
      } else {
        parallel_for(bsz, cfg.threads, [&](int r) {
          auto sg = std::make_unique<SlideGraph>();
          sg->agg = BoundParams<float>(sg->graph, st.agg, train_agg);
          const auto& bag = train.bags[static_cast<std::size_t>(batch[static_cast<std::size_t>(r)])];
          sg->slide = slide_embedding(sg->agg, agg_cfg, cfg.aggregator_mode, sg->graph.constant(bag.cells));
          s_values.row(r) = sg->slide.value();
          slides[static_cast<std::size_t>(r)] = std::move(sg);
        });
      }

      // The batch loss sees the slide rows as leaves; their gradients are then
      // pushed back through each patient's own graph.
      nd::Graph<float> g;
      BoundParams<float> heads(g, st.heads, true);
      auto s = g.variable(s_values);
      auto loss = gen_loss(heads, s, gather_rows(train.karyo, batch), gather_rows(train.mut, batch),
                           std::span<const int>(labels), tau, lambda_r);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        throw std::runtime_error("align: non-finite loss at epoch " + std::to_string(epoch + 1) + " batch " +
                                 std::to_string(bi));
      }
      g.backward(loss.total);
      opt_heads.step(st.heads, heads.gradients(), cfg.lr_heads, cfg.weight_decay);

      if (train_agg) {
        const nd::Matrix<float> ds = s.grad();
        std::vector<ParamSet<float>> grads(static_cast<std::size_t>(bsz));
        parallel_for(bsz, cfg.threads, [&](int r) {
          auto& sg = *slides[static_cast<std::size_t>(r)];
          sg.graph.backward(sg.slide, ds.row(r));
          grads[static_cast<std::size_t>(r)] = sg.agg.gradients();
        });
        ParamSet<float> g_agg = st.agg.zeros_like();
        for (const auto& gr : grads) g_agg.add_scaled(gr, 1.0f);
        opt_agg.step(st.agg, g_agg, cfg.lr_aggregator, cfg.weight_decay);
      }

      const double w = static_cast<double>(bsz) / static_cast<double>(train.size());
      log.loss += w * total;
      log.slide_karyo += w * loss.slide_karyo.item();
      log.slide_mut += w * loss.slide_mut.item();
      log.bce += w * loss.bce.item();
      log.empty_anchors += loss.empty_anchors;
    }
    spdlog::info("align epoch {}/{}: loss {:.4f} s<->k {:.4f} s<->m {:.4f} bce {:.4f} empty anchors {}", log.epoch,
                 cfg.epochs, log.loss, log.slide_karyo, log.slide_mut, log.bce, log.empty_anchors);
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

AlignedTable embed_aligned(const AlignState& state, const AggregatorConfig& agg_cfg, const AlignConfig& cfg,
                           const CohortData& data) {
  AlignedTable t;
  t.ids = data.ids;
  t.labels = data.labels;
  t.is_test = data.is_test;
  const auto n = static_cast<int>(data.size());
  t.slide.resize(n, agg_cfg.embed_dim);
  parallel_for(n, cfg.threads, [&](int i) {
    nd::Graph<float> g;
    BoundParams<float> agg(g, state.agg, false);
    t.slide.row(i) =
        slide_embedding(agg, agg_cfg, cfg.aggregator_mode, g.constant(data.bags[static_cast<std::size_t>(i)].cells))
            .value();
  });
  nd::Graph<float> g;
  BoundParams<float> heads(g, state.heads, false);
  t.z_s = project(heads, "phi_s", g.constant(t.slide)).value();
  t.z_k = project(heads, "phi_k", g.constant(data.karyo)).value();
  t.z_m = project(heads, "phi_m", g.constant(data.mut)).value();
  return t;
}

io::Checkpoint align_checkpoint(const AlignResult& result, const AggregatorConfig& agg_cfg, const AlignConfig& cfg,
                                int d_k, int d_m, const std::vector<std::string>& class_names) {
  io::Checkpoint ck;
  ck.manifest = {{"kind", "aligned"},
                 {"config", cfg.to_json()},
                 {"aggregator", agg_cfg.to_json()},
                 {"embed_dim", agg_cfg.embed_dim},
                 {"d_k", d_k},
                 {"d_m", d_m},
                 {"class_names", class_names},
                 {"epoch", result.history.size()},
                 {"seed", cfg.seed}};
  ck.tensors.merge("agg.", result.state.agg);
  ck.tensors.merge("heads.", result.state.heads);
  return ck;
}

LoadedAlign load_align_checkpoint(const io::Checkpoint& ck) {
  if (ck.manifest.value("kind", "") != "aligned") throw io::FormatError("checkpoint is not an aligned checkpoint");
  LoadedAlign out;
  out.aggregator = AggregatorConfig::from_json(ck.manifest.at("aggregator"));
  out.config = AlignConfig::from_json(ck.manifest.at("config"));
  out.d_k = ck.manifest.at("d_k").get<int>();
  out.d_m = ck.manifest.at("d_m").get<int>();
  out.class_names = ck.manifest.at("class_names").get<std::vector<std::string>>();
  out.state.agg = ck.tensors.subset("agg.");
  out.state.heads = ck.tensors.subset("heads.");
  return out;
}

}  // namespace genalign
