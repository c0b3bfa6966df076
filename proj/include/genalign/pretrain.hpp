#pragma once

// Stage-1 self-distillation: DINO alignment of [CLS] outputs across bag views
// plus iBOT prediction of masked cell tokens, with an EMA teacher.

#include "genalign/aggregator.hpp"
#include "genalign/formats.hpp"
#include "genalign/ndiff.hpp"
#include "genalign/params.hpp"
#include "genalign/rng.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace genalign {

struct HeadConfig {
  int hidden_dim = 256;
  int bottleneck_dim = 64;
  int prototypes = 256;

  void validate() const;
  nlohmann::json to_json() const;
  static HeadConfig from_json(const nlohmann::json& j);
  bool operator==(const HeadConfig&) const = default;
};

/// MLP in -> hidden -> hidden -> bottleneck, l2-normalized bottleneck, then a
/// weight-normalized linear map onto the prototypes ("last.v", K x bottleneck).
template <typename Scalar>
ParamSet<Scalar> init_head(int in_dim, const HeadConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet<Scalar> p;
  nn::add_linear(p, "fc1", in_dim, cfg.hidden_dim, rng);
  nn::add_linear(p, "fc2", cfg.hidden_dim, cfg.hidden_dim, rng);
  nn::add_linear(p, "fc3", cfg.hidden_dim, cfg.bottleneck_dim, rng);
  nd::Matrix<Scalar> v(cfg.prototypes, cfg.bottleneck_dim);
  for (int i = 0; i < v.rows(); ++i)
    for (int j = 0; j < v.cols(); ++j) v(i, j) = static_cast<Scalar>(rng.normal());
  v.rowwise().normalize();
  p.add("last.v", std::move(v));
  return p;
}

template <typename Scalar>
nd::Var<Scalar> head_logits(const BoundParams<Scalar>& p, const nd::Var<Scalar>& x) {
  auto h = nd::gelu(nn::linear(p, "fc1", x));
  h = nd::gelu(nn::linear(p, "fc2", h));
  auto b = nd::l2_normalize(nn::linear(p, "fc3", h), 1);
  return nd::matmul(b, nd::transpose(nd::l2_normalize(p["last.v"], 1)));
}

/// Restores unit-norm prototype rows after an optimizer step.
template <typename Scalar>
void renormalize_prototypes(ParamSet<Scalar>& head) {
  head.at("last.v").rowwise().normalize();
}

/// softmax((logits - center) / tau_t), row-wise. Always a constant.
template <typename Scalar>
nd::Matrix<Scalar> teacher_probs(const nd::Matrix<Scalar>& logits, const nd::Matrix<Scalar>& center, Scalar tau_t) {
  if (center.rows() != 1 || center.cols() != logits.cols()) {
    throw nd::ShapeError("teacher_probs: center " + nd::shape_str(center) + " vs logits " + nd::shape_str(logits));
  }
  nd::Matrix<Scalar> z = (logits.rowwise() - center.row(0)) / tau_t;
  return nd::detail::softmax_rows(z);
}

/// Mean over pairs (g, k), g < n_global, k != g, of CE(p_t(g), p_s(k)).
/// Student rows must list the teacher's global views first, in the same order.
template <typename Scalar>
nd::Var<Scalar> dino_loss(const nd::Matrix<Scalar>& teacher_logits, const nd::Var<Scalar>& student_logits,
                          const nd::Matrix<Scalar>& center, Scalar tau_t, Scalar tau_s) {
  const auto n_g = teacher_logits.rows();
  const auto n_v = student_logits.rows();
  if (n_g < 1) throw std::invalid_argument("dino_loss: need at least one teacher global view");
  if (n_v < 2) throw std::invalid_argument("dino_loss: need at least two student views");
  if (n_g > n_v) throw std::invalid_argument("dino_loss: more teacher globals than student views");
  if (teacher_logits.cols() != student_logits.cols()) {
    throw nd::ShapeError("dino_loss: teacher " + nd::shape_str(teacher_logits) + " vs student " +
                         nd::shape_str(student_logits.value()));
  }
  const auto pt = teacher_probs(teacher_logits, center, tau_t);
  // Each student row k is scored against the sum of teacher targets g != k.
  nd::Matrix<Scalar> w = nd::Matrix<Scalar>::Zero(n_v, pt.cols());
  for (nd::Index k = 0; k < n_v; ++k)
    for (nd::Index g = 0; g < n_g; ++g)
      if (g != k) w.row(k) += pt.row(g);
  const auto pairs = static_cast<Scalar>(n_g * n_v - n_g);
  auto& graph = *student_logits.graph();
  auto log_ps = nd::log_softmax(nd::scalar_mul(student_logits, Scalar(1) / tau_s), 1);
  return nd::scalar_mul(nd::sum(nd::cross_entropy(graph.constant(std::move(w)), log_ps)), Scalar(1) / pairs);
}

/// (1/|M|) sum over masked rows i of CE(q_t(i), q_s(i)); zero when M is empty.
template <typename Scalar>
nd::Var<Scalar> ibot_loss(const nd::Matrix<Scalar>& teacher_logits, const nd::Var<Scalar>& student_logits,
                          std::span<const int> masked, const nd::Matrix<Scalar>& center, Scalar tau_t, Scalar tau_s) {
  auto& graph = *student_logits.graph();
  if (teacher_logits.rows() != student_logits.rows() || teacher_logits.cols() != student_logits.cols()) {
    throw nd::ShapeError("ibot_loss: teacher " + nd::shape_str(teacher_logits) + " vs student " +
                         nd::shape_str(student_logits.value()));
  }
  if (masked.empty()) return graph.constant(nd::Matrix<Scalar>::Zero(1, 1));
  nd::Matrix<Scalar> sel(static_cast<nd::Index>(masked.size()), teacher_logits.cols());
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (masked[i] < 0 || masked[i] >= teacher_logits.rows()) {
      throw std::out_of_range("ibot_loss: masked index " + std::to_string(masked[i]) + " out of range");
    }
    sel.row(static_cast<nd::Index>(i)) = teacher_logits.row(masked[i]);
  }
  auto pt = graph.constant(teacher_probs(sel, center, tau_t));
  auto log_ps = nd::log_softmax(nd::scalar_mul(nd::select_rows(student_logits, masked), Scalar(1) / tau_s), 1);
  return nd::scalar_mul(nd::sum(nd::cross_entropy(pt, log_ps)), Scalar(1) / static_cast<Scalar>(masked.size()));
}

/// theta_t <- m theta_t + (1 - m) theta_s.
template <typename Scalar>
void ema_update(ParamSet<Scalar>& teacher, const ParamSet<Scalar>& student, double m) {
  if (!teacher.same_layout(student)) throw nd::ShapeError("ema_update: teacher and student layouts differ");
  const auto a = static_cast<Scalar>(m);
  const auto b = static_cast<Scalar>(1.0 - m);
  for (std::size_t i = 0; i < teacher.size(); ++i) teacher.at(i) = a * teacher.at(i) + b * student.at(i);
}

/// center <- mu center + (1 - mu) mean_rows(batch_logits).
template <typename Scalar>
void center_update(nd::Matrix<Scalar>& center, const nd::Matrix<Scalar>& batch_logits, double mu) {
  if (batch_logits.rows() == 0) throw std::invalid_argument("center_update: empty batch");
  if (center.rows() != 1 || center.cols() != batch_logits.cols()) {
    throw nd::ShapeError("center_update: center " + nd::shape_str(center) + " vs logits " +
                         nd::shape_str(batch_logits));
  }
  center = static_cast<Scalar>(mu) * center + static_cast<Scalar>(1.0 - mu) * batch_logits.colwise().mean();
}

template <typename Scalar>
struct ImgLossSettings {
  nd::Matrix<Scalar> center_cls;     // 1 x K
  nd::Matrix<Scalar> center_tokens;  // 1 x K
  Scalar tau_t = Scalar(0.04);
  Scalar tau_s = Scalar(0.1);
  Scalar lambda = Scalar(1);
};

template <typename Scalar>
struct PatientImgLoss {
  nd::Var<Scalar> total;
  nd::Var<Scalar> dino;
  nd::Var<Scalar> ibot;
  nd::Matrix<Scalar> teacher_cls_logits;    // one row per global view
  nd::Matrix<Scalar> teacher_token_logits;  // one row per masked token, all views
};

/// One patient's L_DINO + lambda L_iBOT. The teacher runs in its own throwaway
/// graph, so none of its parameters can receive gradient. Views must list the
/// globals first.
template <typename Scalar>
PatientImgLoss<Scalar> patient_img_loss(const BoundParams<Scalar>& student_agg, const BoundParams<Scalar>& student_head,
                                        const ParamSet<Scalar>& teacher_agg, const ParamSet<Scalar>& teacher_head,
                                        const AggregatorConfig& cfg, const nd::Var<Scalar>& cells,
                                        std::span<const BagView> views, const ImgLossSettings<Scalar>& s) {
  int n_global = 0;
  while (n_global < static_cast<int>(views.size()) && views[static_cast<std::size_t>(n_global)].kind == ViewKind::global)
    ++n_global;
  for (std::size_t v = static_cast<std::size_t>(n_global); v < views.size(); ++v) {
    if (views[v].kind == ViewKind::global) throw std::invalid_argument("patient_img_loss: globals must come first");
  }

  std::vector<std::vector<int>> mask_pos;
  mask_pos.reserve(views.size());
  for (const auto& v : views) mask_pos.push_back(v.mask_positions());

  PatientImgLoss<Scalar> out;
  {
    nd::Graph<Scalar> tg;
    BoundParams<Scalar> ta(tg, teacher_agg, false);
    BoundParams<Scalar> th(tg, teacher_head, false);
    auto all_cells = tg.constant(cells.value());
    std::vector<nd::Var<Scalar>> cls_rows, token_rows;
    for (std::size_t v = 0; v < views.size(); ++v) {
      const bool want_cls = static_cast<int>(v) < n_global;
      if (!want_cls && mask_pos[v].empty()) continue;
      auto o = aggregate(ta, cfg, nd::select_rows(all_cells, std::span<const int>(views[v].cells)));
      if (want_cls) cls_rows.push_back(o.cls);
      if (!mask_pos[v].empty()) token_rows.push_back(nd::select_rows(o.tokens, std::span<const int>(mask_pos[v])));
    }
    const auto n_cls = static_cast<nd::Index>(cls_rows.size());
    std::vector<nd::Var<Scalar>> rows = cls_rows;
    rows.insert(rows.end(), token_rows.begin(), token_rows.end());
    const nd::Matrix<Scalar> logits = head_logits(th, nd::concat_rows<Scalar>(rows)).value();
    out.teacher_cls_logits = logits.topRows(n_cls);
    out.teacher_token_logits = logits.bottomRows(logits.rows() - n_cls);
  }

  std::vector<nd::Var<Scalar>> rows;
  std::vector<nd::Var<Scalar>> token_rows;
  for (std::size_t v = 0; v < views.size(); ++v) {
    auto o = aggregate(student_agg, cfg, nd::select_rows(cells, std::span<const int>(views[v].cells)),
                       std::span<const int>(mask_pos[v]));
    rows.push_back(o.cls);
    if (!mask_pos[v].empty()) token_rows.push_back(nd::select_rows(o.tokens, std::span<const int>(mask_pos[v])));
  }
  const auto n_views = static_cast<nd::Index>(rows.size());
  const auto n_tokens = out.teacher_token_logits.rows();
  rows.insert(rows.end(), token_rows.begin(), token_rows.end());
  auto logits = head_logits(student_head, nd::concat_rows<Scalar>(rows));

  out.dino = dino_loss(out.teacher_cls_logits, nd::slice_rows(logits, 0, n_views), s.center_cls, s.tau_t, s.tau_s);
  if (n_tokens > 0) {
    std::vector<int> all(static_cast<std::size_t>(n_tokens));
    for (int i = 0; i < static_cast<int>(n_tokens); ++i) all[static_cast<std::size_t>(i)] = i;
    out.ibot = ibot_loss(out.teacher_token_logits, nd::slice_rows(logits, n_views, n_tokens), std::span<const int>(all),
                         s.center_tokens, s.tau_t, s.tau_s);
  } else {
    out.ibot = cells.graph()->constant(nd::Matrix<Scalar>::Zero(1, 1));
  }
  out.total = s.lambda == Scalar(0) ? out.dino : nd::add(out.dino, nd::scalar_mul(out.ibot, s.lambda));
  return out;
}

struct PretrainConfig {
  AggregatorConfig aggregator;
  HeadConfig head;
  double lambda = 1.0;
  double student_temp = 0.1;
  double teacher_temp_start = 0.04;
  double teacher_temp_end = 0.07;
  double teacher_temp_warmup = 0.1;  // fraction of training
  double center_momentum = 0.9;
  double ema_momentum = 0.99;
  int epochs = 30;
  int batch_size = 16;
  int n_global = 2;
  int n_local = 8;
  double mask_ratio = 0.3;
  double lr = 5e-4;
  double min_lr = 1e-6;
  double warmup = 0.05;  // fraction of training
  double weight_decay = 0.04;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

/// Teacher temperature at a given optimizer step.
double teacher_temperature(const PretrainConfig& cfg, long step, long total_steps);

struct PretrainState {
  ParamSet<float> student_agg;
  ParamSet<float> student_head;
  ParamSet<float> teacher_agg;
  ParamSet<float> teacher_head;
  nd::Matrix<float> center_cls;
  nd::Matrix<float> center_tokens;
  int epochs_done = 0;
};

PretrainState init_pretrain_state(const PretrainConfig& cfg, Rng& rng);

struct PretrainEpoch {
  int epoch = 0;
  double dino_loss = 0.0;
  double ibot_loss = 0.0;
  double total = 0.0;
  double cls_std = 0.0;
  nlohmann::json to_json() const;
};

struct PretrainResult {
  PretrainState state;
  std::vector<PretrainEpoch> history;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using PretrainCallback = std::function<void(const PretrainEpoch&)>;

/// Trains on every bag given (already capped to max_cells).
PretrainResult train_pretrain(const std::vector<CellBag>& bags, const PretrainConfig& cfg,
                              const PretrainCallback& on_epoch = {});

/// Mean over dimensions of the across-patient std of l2-normalized CLS embeddings.
double cls_std(const ParamSet<float>& agg, const AggregatorConfig& cfg, const std::vector<CellBag>& bags,
               int threads = 1);

io::Checkpoint pretrain_checkpoint(const PretrainResult& result, const PretrainConfig& cfg);

struct LoadedPretrain {
  PretrainConfig config;
  PretrainState state;
};

LoadedPretrain load_pretrain_checkpoint(const io::Checkpoint& ckpt);

}  // namespace genalign
