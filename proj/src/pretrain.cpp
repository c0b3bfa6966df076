#include "genalign/pretrain.hpp"

#include "genalign/config.hpp"
#include "genalign/optim.hpp"
#include "genalign/parallel.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace genalign {

void HeadConfig::validate() const {
  if (hidden_dim < 1 || bottleneck_dim < 1 || prototypes < 1) {
    throw std::invalid_argument("head: dimensions must be positive");
  }
}

nlohmann::json HeadConfig::to_json() const {
  return {{"hidden_dim", hidden_dim}, {"bottleneck_dim", bottleneck_dim}, {"prototypes", prototypes}};
}

HeadConfig HeadConfig::from_json(const nlohmann::json& j) {
  HeadConfig c;
  ConfigReader r(j, "head");
  r.read("hidden_dim", c.hidden_dim);
  r.read("bottleneck_dim", c.bottleneck_dim);
  r.read("prototypes", c.prototypes);
  r.finish();
  c.validate();
  return c;
}

void PretrainConfig::validate() const {
  aggregator.validate();
  head.validate();
  if (!(student_temp > 0 && teacher_temp_start > 0 && teacher_temp_end > 0)) {
    throw std::invalid_argument("pretrain: temperatures must be positive");
  }
  if (!(ema_momentum > 0 && ema_momentum < 1)) throw std::invalid_argument("pretrain: ema_momentum must be in (0, 1)");
  if (!(center_momentum >= 0 && center_momentum < 1)) {
    throw std::invalid_argument("pretrain: center_momentum must be in [0, 1)");
  }
  if (lambda < 0) throw std::invalid_argument("pretrain: lambda must be >= 0");
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("pretrain: epochs and batch_size must be >= 1");
  if (n_global < 1 || n_local < 0) throw std::invalid_argument("pretrain: need n_global >= 1, n_local >= 0");
  if (n_global + n_local < 2) throw std::invalid_argument("pretrain: DINO needs at least two views");
  if (!(mask_ratio >= 0 && mask_ratio < 1)) throw std::invalid_argument("pretrain: mask_ratio must be in [0, 1)");
  if (!(lr > 0) || min_lr < 0 || weight_decay < 0) throw std::invalid_argument("pretrain: bad optimizer settings");
  if (warmup < 0 || warmup > 1 || teacher_temp_warmup < 0 || teacher_temp_warmup > 1) {
    throw std::invalid_argument("pretrain: warmup fractions must be in [0, 1]");
  }
  if (threads < 1) throw std::invalid_argument("pretrain: threads must be >= 1");
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"aggregator", aggregator.to_json()},
          {"head", head.to_json()},
          {"lambda", lambda},
          {"student_temp", student_temp},
          {"teacher_temp_start", teacher_temp_start},
          {"teacher_temp_end", teacher_temp_end},
          {"teacher_temp_warmup", teacher_temp_warmup},
          {"center_momentum", center_momentum},
          {"ema_momentum", ema_momentum},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"n_global", n_global},
          {"n_local", n_local},
          {"mask_ratio", mask_ratio},
          {"lr", lr},
          {"min_lr", min_lr},
          {"warmup", warmup},
          {"weight_decay", weight_decay},
          {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  ConfigReader r(j, "pretrain");
  if (auto* a = r.child("aggregator")) c.aggregator = AggregatorConfig::from_json(*a);
  if (auto* h = r.child("head")) c.head = HeadConfig::from_json(*h);
  r.read("lambda", c.lambda);
  r.read("student_temp", c.student_temp);
  r.read("teacher_temp_start", c.teacher_temp_start);
  r.read("teacher_temp_end", c.teacher_temp_end);
  r.read("teacher_temp_warmup", c.teacher_temp_warmup);
  r.read("center_momentum", c.center_momentum);
  r.read("ema_momentum", c.ema_momentum);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("n_global", c.n_global);
  r.read("n_local", c.n_local);
  r.read("mask_ratio", c.mask_ratio);
  r.read("lr", c.lr);
  r.read("min_lr", c.min_lr);
  r.read("warmup", c.warmup);
  r.read("weight_decay", c.weight_decay);
  r.read("seed", c.seed);
  r.read("threads", c.threads);
  r.finish();
  c.validate();
  return c;
}

double teacher_temperature(const PretrainConfig& cfg, long step, long total_steps) {
  const double warm = std::floor(cfg.teacher_temp_warmup * static_cast<double>(total_steps));
  if (warm <= 0 || static_cast<double>(step) >= warm) return cfg.teacher_temp_end;
  const double t = static_cast<double>(step) / warm;
  return cfg.teacher_temp_start + t * (cfg.teacher_temp_end - cfg.teacher_temp_start);
}

PretrainState init_pretrain_state(const PretrainConfig& cfg, Rng& rng) {
  PretrainState s;
  Rng agg_rng = rng.fork();
  Rng head_rng = rng.fork();
  s.student_agg = init_aggregator<float>(cfg.aggregator, agg_rng);
  s.student_head = init_head<float>(cfg.aggregator.embed_dim, cfg.head, head_rng);
  s.teacher_agg = s.student_agg;
  s.teacher_head = s.student_head;
  s.center_cls = nd::Matrix<float>::Zero(1, cfg.head.prototypes);
  s.center_tokens = nd::Matrix<float>::Zero(1, cfg.head.prototypes);
  return s;
}

nlohmann::json PretrainEpoch::to_json() const {
  return {{"epoch", epoch}, {"dino_loss", dino_loss}, {"ibot_loss", ibot_loss}, {"total", total}, {"cls_std", cls_std}};
}

double cls_std(const ParamSet<float>& agg, const AggregatorConfig& cfg, const std::vector<CellBag>& bags,
               int threads) {
  if (bags.size() < 2) return 0.0;
  Eigen::MatrixXd z = embed_bags(agg, cfg, bags, threads).cast<double>();
  z.rowwise().normalize();
  const Eigen::RowVectorXd mu = z.colwise().mean();
  const Eigen::RowVectorXd var = (z.rowwise() - mu).array().square().colwise().mean();
  return var.array().sqrt().mean();
}

namespace {

struct PatientStep {
  ParamSet<float> grad_agg;
  ParamSet<float> grad_head;
  nd::Matrix<float> teacher_cls;
  nd::Matrix<float> teacher_tokens;
  double dino = 0.0;
  double ibot = 0.0;
  double total = 0.0;
};

PatientStep run_patient(const PretrainState& st, const PretrainConfig& cfg, const CellBag& bag, Rng rng,
                        const ImgLossSettings<float>& settings, float scale) {
  const auto views = sample_views(static_cast<int>(bag.cells.rows()), cfg.n_global, cfg.n_local, cfg.mask_ratio, rng);
  nd::Graph<float> g;
  BoundParams<float> agg(g, st.student_agg, true);
  BoundParams<float> head(g, st.student_head, true);
  auto cells = g.constant(bag.cells);
  auto loss = patient_img_loss(agg, head, st.teacher_agg, st.teacher_head, cfg.aggregator, cells,
                               std::span<const BagView>(views), settings);
  const double total = loss.total.item();
  if (!std::isfinite(total)) throw NonFiniteLoss("non-finite loss for patient " + bag.patient_id);
  g.backward(loss.total, nd::Matrix<float>::Constant(1, 1, scale));
  return {agg.gradients(), head.gradients(), std::move(loss.teacher_cls_logits), std::move(loss.teacher_token_logits),
          loss.dino.item(), loss.ibot.item(), total};
}

nd::Matrix<float> stack_rows(const std::vector<const nd::Matrix<float>*>& parts, int cols) {
  nd::Index rows = 0;
  for (auto* p : parts) rows += p->rows();
  nd::Matrix<float> out(rows, cols);
  nd::Index r = 0;
  for (auto* p : parts) {
    out.middleRows(r, p->rows()) = *p;
    r += p->rows();
  }
  return out;
}

}  // namespace

PretrainResult train_pretrain(const std::vector<CellBag>& bags, const PretrainConfig& cfg,
                              const PretrainCallback& on_epoch) {
  cfg.validate();
  if (bags.empty()) throw std::invalid_argument("train_pretrain: no bags");
  for (const auto& b : bags) {
    if (b.cells.rows() == 0) throw std::invalid_argument("train_pretrain: empty bag for " + b.patient_id);
    if (b.cells.cols() != cfg.aggregator.input_dim) {
      throw nd::ShapeError("train_pretrain: bag " + b.patient_id + " has width " + std::to_string(b.cells.cols()));
    }
    if (!b.cells.allFinite()) throw std::invalid_argument("train_pretrain: non-finite cells in " + b.patient_id);
  }

  Rng rng(cfg.seed);
  PretrainResult result;
  auto& st = result.state;
  st = init_pretrain_state(cfg, rng);

  AdamW opt_agg(st.student_agg);
  AdamW opt_head(st.student_head);
  const int n = static_cast<int>(bags.size());
  const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = static_cast<long>(steps_per_epoch) * cfg.epochs;
  const long warmup_steps = static_cast<long>(std::floor(cfg.warmup * static_cast<double>(total_steps)));
  const int k = cfg.head.prototypes;

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<int>(order));
    double sum_dino = 0.0, sum_ibot = 0.0, sum_total = 0.0;
    for (int b = 0; b < steps_per_epoch; ++b, ++step) {
      const int first = b * cfg.batch_size;
      const int count = std::min(cfg.batch_size, n - first);
      std::vector<Rng> patient_rngs;
      patient_rngs.reserve(static_cast<std::size_t>(count));
      for (int i = 0; i < count; ++i) patient_rngs.push_back(rng.fork());

      ImgLossSettings<float> settings{st.center_cls, st.center_tokens,
                                      static_cast<float>(teacher_temperature(cfg, step, total_steps)),
                                      static_cast<float>(cfg.student_temp), static_cast<float>(cfg.lambda)};
      std::vector<std::unique_ptr<PatientStep>> results(static_cast<std::size_t>(count));
      try {
        parallel_for(count, cfg.threads, [&](int i) {
          const auto& bag = bags[static_cast<std::size_t>(order[static_cast<std::size_t>(first + i)])];
          results[static_cast<std::size_t>(i)] = std::make_unique<PatientStep>(
              run_patient(st, cfg, bag, patient_rngs[static_cast<std::size_t>(i)], settings, 1.0f / count));
        });
      } catch (const std::exception& e) {
        throw NonFiniteLoss("pretrain aborted at epoch " + std::to_string(epoch + 1) + " batch " + std::to_string(b) +
                            ": " + e.what());
      }

      // Fixed-order reduction keeps the update independent of the thread count.
      ParamSet<float> g_agg = st.student_agg.zeros_like();
      ParamSet<float> g_head = st.student_head.zeros_like();
      std::vector<const nd::Matrix<float>*> t_cls, t_tok;
      for (const auto& r : results) {
        g_agg.add_scaled(r->grad_agg, 1.0f);
        g_head.add_scaled(r->grad_head, 1.0f);
        t_cls.push_back(&r->teacher_cls);
        if (r->teacher_tokens.rows() > 0) t_tok.push_back(&r->teacher_tokens);
        sum_dino += r->dino;
        sum_ibot += r->ibot;
        sum_total += r->total;
      }

      const double lr = cosine_schedule(step, total_steps, warmup_steps, cfg.lr, cfg.min_lr);
      opt_agg.step(st.student_agg, g_agg, lr, cfg.weight_decay);
      opt_head.step(st.student_head, g_head, lr, cfg.weight_decay);
      renormalize_prototypes(st.student_head);
      ema_update(st.teacher_agg, st.student_agg, cfg.ema_momentum);
      ema_update(st.teacher_head, st.student_head, cfg.ema_momentum);
      center_update(st.center_cls, stack_rows(t_cls, k), cfg.center_momentum);
      if (!t_tok.empty()) center_update(st.center_tokens, stack_rows(t_tok, k), cfg.center_momentum);
    }

    PretrainEpoch m;
    m.epoch = epoch + 1;
    m.dino_loss = sum_dino / n;
    m.ibot_loss = sum_ibot / n;
    m.total = sum_total / n;
    m.cls_std = cls_std(st.teacher_agg, cfg.aggregator, bags, cfg.threads);
    st.epochs_done = epoch + 1;
    spdlog::info("pretrain epoch {}/{}: dino {:.4f} ibot {:.4f} total {:.4f} cls_std {:.4f}", m.epoch, cfg.epochs,
                 m.dino_loss, m.ibot_loss, m.total, m.cls_std);
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

io::Checkpoint pretrain_checkpoint(const PretrainResult& result, const PretrainConfig& cfg) {
  io::Checkpoint ck;
  const auto& st = result.state;
  ck.manifest = {{"kind", "pretrain"},
                 {"config", cfg.to_json()},
                 {"epoch", st.epochs_done},
                 {"seed", cfg.seed},
                 {"embed_dim", cfg.aggregator.embed_dim}};
  ck.tensors.merge("student.agg.", st.student_agg);
  ck.tensors.merge("student.head.", st.student_head);
  ck.tensors.merge("teacher.agg.", st.teacher_agg);
  ck.tensors.merge("teacher.head.", st.teacher_head);
  ck.tensors.add("center.cls", st.center_cls);
  ck.tensors.add("center.tokens", st.center_tokens);
  return ck;
}

LoadedPretrain load_pretrain_checkpoint(const io::Checkpoint& ck) {
  if (ck.manifest.value("kind", "") != "pretrain") throw io::FormatError("checkpoint is not a pretraining checkpoint");
  LoadedPretrain out;
  out.config = PretrainConfig::from_json(ck.manifest.at("config"));
  auto& st = out.state;
  st.student_agg = ck.tensors.subset("student.agg.");
  st.student_head = ck.tensors.subset("student.head.");
  st.teacher_agg = ck.tensors.subset("teacher.agg.");
  st.teacher_head = ck.tensors.subset("teacher.head.");
  st.center_cls = ck.tensors.at("center.cls");
  st.center_tokens = ck.tensors.at("center.tokens");
  st.epochs_done = ck.manifest.at("epoch").get<int>();
  Rng probe(0);
  const auto layout = init_aggregator<float>(out.config.aggregator, probe);
  if (!layout.same_layout(st.teacher_agg) || !layout.same_layout(st.student_agg)) {
    throw io::FormatError("checkpoint aggregator tensors do not match its config");
  }
  return out;
}

}  // namespace genalign
