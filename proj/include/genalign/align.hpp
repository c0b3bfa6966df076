#pragma once

// Stage-2 genetic alignment. Slide, karyotype and mutation inputs are projected
// onto a shared unit sphere and pulled together by a cross-modal supervised
// contrastive loss, with decoders reconstructing the genetic vectors.

#include "genalign/aggregator.hpp"
#include "genalign/cohort.hpp"
#include "genalign/formats.hpp"
#include "genalign/karyogram.hpp"
#include "genalign/ndiff.hpp"
#include "genalign/params.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace genalign {

enum class AlignInit { pretrained, random };
enum class AggregatorMode { finetune, frozen, mean_pool };
enum class KaryotypeResolution { band, arm };

const char* to_string(AlignInit v);
const char* to_string(AggregatorMode v);
const char* to_string(KaryotypeResolution v);
AlignInit parse_align_init(const std::string& s);
AggregatorMode parse_aggregator_mode(const std::string& s);
KaryotypeResolution parse_karyotype_resolution(const std::string& s);

struct AlignConfig {
  double tau = 0.1;
  double lambda_r = 1.0;
  int epochs = 100;
  int batch_size = 32;
  double lr_heads = 1e-4;
  double lr_aggregator = 1e-5;
  double weight_decay = 1e-4;
  AlignInit init = AlignInit::pretrained;
  AggregatorMode aggregator_mode = AggregatorMode::finetune;
  KaryotypeResolution karyotype_resolution = KaryotypeResolution::band;
  int proj_hidden = 256;
  int proj_dim = 128;
  int decoder_hidden = 256;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static AlignConfig from_json(const nlohmann::json& j);
};

/// phi_{s,k,m}: input -> proj_hidden -> proj_dim; psi_{k,m}: proj_dim -> decoder_hidden -> d.
template <typename Scalar>
ParamSet<Scalar> init_align_heads(int d_s, int d_k, int d_m, const AlignConfig& cfg, Rng& rng) {
  ParamSet<Scalar> p;
  auto mlp = [&](const std::string& name, int in, int hidden, int out) {
    nn::add_linear(p, name + ".fc1", in, hidden, rng);
    nn::add_linear(p, name + ".fc2", hidden, out, rng);
  };
  // Encoder hidden biases start off nonzero so that an all-zero genetic vector
  // (normal karyotype, no mutations) still projects to a non-degenerate point.
  auto encoder = [&](const std::string& name, int in) {
    mlp(name, in, cfg.proj_hidden, cfg.proj_dim);
    auto& b = p.at(name + ".fc1.b");
    for (nd::Index j = 0; j < b.cols(); ++j) b(0, j) = static_cast<Scalar>(0.1 * rng.normal());
  };
  encoder("phi_s", d_s);
  encoder("phi_k", d_k);
  encoder("phi_m", d_m);
  mlp("psi_k", cfg.proj_dim, cfg.decoder_hidden, d_k);
  mlp("psi_m", cfg.proj_dim, cfg.decoder_hidden, d_m);
  return p;
}

template <typename Scalar>
nd::Var<Scalar> two_layer(const BoundParams<Scalar>& p, const std::string& name, const nd::Var<Scalar>& x) {
  return nn::linear(p, name + ".fc2", nd::gelu(nn::linear(p, name + ".fc1", x)));
}

template <typename Scalar>
nd::Var<Scalar> project(const BoundParams<Scalar>& p, const std::string& name, const nd::Var<Scalar>& x) {
  return nd::l2_normalize(two_layer(p, name, x), 1);
}

template <typename Scalar>
void require_unit_rows(const char* op, const nd::Matrix<Scalar>& z) {
  for (nd::Index i = 0; i < z.rows(); ++i) {
    const double dev = std::abs(static_cast<double>(z.row(i).norm()) - 1.0);
    if (dev > 1e-4) {
      throw std::invalid_argument(std::string(op) + ": row " + std::to_string(i) + " is not unit-norm");
    }
  }
}

/// -(1/|A|) sum_{p in A} (1/|P(p)|) sum_{j in P(p)} log softmax_q(z_a(p) . z_b(q) / tau)[j],
/// where P(p) = {j != p : c_j = c_p} and A holds the anchors with non-empty P(p).
/// The anchor's own counterpart stays in the denominator. `empty_anchors`, if
/// given, is incremented once per anchor without positives.
template <typename Scalar>
nd::Var<Scalar> supcon_directional(const nd::Var<Scalar>& za, const nd::Var<Scalar>& zb, std::span<const int> labels,
                                   Scalar tau, int* empty_anchors = nullptr) {
  const auto b = za.rows();
  if (b < 2) throw std::invalid_argument("supcon: batch size must be >= 2");
  if (zb.rows() != b || zb.cols() != za.cols()) {
    throw nd::ShapeError("supcon: anchors " + nd::shape_str(za.value()) + " vs targets " + nd::shape_str(zb.value()));
  }
  if (static_cast<nd::Index>(labels.size()) != b) throw std::invalid_argument("supcon: one label per row required");
  if (!(tau > 0)) throw std::invalid_argument("supcon: tau must be positive");
  require_unit_rows("supcon", za.value());
  require_unit_rows("supcon", zb.value());

  nd::Matrix<Scalar> w = nd::Matrix<Scalar>::Zero(b, b);
  int valid = 0;
  for (nd::Index p = 0; p < b; ++p) {
    int count = 0;
    for (nd::Index j = 0; j < b; ++j)
      if (j != p && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(p)]) ++count;
    if (count == 0) {
      if (empty_anchors) ++*empty_anchors;
      continue;
    }
    ++valid;
    for (nd::Index j = 0; j < b; ++j)
      if (j != p && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(p)])
        w(p, j) = Scalar(1) / static_cast<Scalar>(count);
  }
  auto& g = *za.graph();
  if (valid == 0) return g.constant(nd::Matrix<Scalar>::Zero(1, 1));
  auto logits = nd::scalar_mul(nd::matmul(za, nd::transpose(zb)), Scalar(1) / tau);
  auto per_anchor = nd::cross_entropy(g.constant(std::move(w)), nd::log_softmax(logits, 1));
  return nd::scalar_mul(nd::sum(per_anchor), Scalar(1) / static_cast<Scalar>(valid));
}

template <typename Scalar>
nd::Var<Scalar> supcon_symmetric(const nd::Var<Scalar>& za, const nd::Var<Scalar>& zb, std::span<const int> labels,
                                 Scalar tau, int* empty_anchors = nullptr) {
  return nd::scalar_mul(nd::add(supcon_directional(za, zb, labels, tau, empty_anchors),
                                supcon_directional(zb, za, labels, tau, empty_anchors)),
                        Scalar(0.5));
}

/// Mean over all entries of BCE-with-logits against binary targets.
template <typename Scalar>
nd::Var<Scalar> reconstruction_loss(const nd::Var<Scalar>& logits, const nd::Matrix<Scalar>& targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
    throw nd::ShapeError("reconstruction_loss: logits " + nd::shape_str(logits.value()) + " vs targets " +
                         nd::shape_str(targets));
  }
  if (((targets.array() != Scalar(0)) && (targets.array() != Scalar(1))).any()) {
    throw std::invalid_argument("reconstruction_loss: targets must be 0 or 1");
  }
  return nd::mean(nd::binary_cross_entropy_with_logits(logits, logits.graph()->constant(targets)));
}

template <typename Scalar>
struct GenLoss {
  nd::Var<Scalar> total;
  nd::Var<Scalar> slide_karyo;
  nd::Var<Scalar> slide_mut;
  nd::Var<Scalar> bce;
  nd::Var<Scalar> z_s, z_k, z_m;
  int empty_anchors = 0;
};

/// L_{s<->k} + L_{s<->m} + lambda_r (BCE_k + BCE_m). Decoders read each genetic
/// modality's own normalized projection.
template <typename Scalar>
GenLoss<Scalar> gen_loss(const BoundParams<Scalar>& heads, const nd::Var<Scalar>& slide, const nd::Matrix<Scalar>& yk,
                         const nd::Matrix<Scalar>& ym, std::span<const int> labels, Scalar tau, Scalar lambda_r) {
  auto& g = *slide.graph();
  GenLoss<Scalar> out;
  out.z_s = project(heads, "phi_s", slide);
  out.z_k = project(heads, "phi_k", g.constant(yk));
  out.z_m = project(heads, "phi_m", g.constant(ym));
  out.slide_karyo = supcon_symmetric(out.z_s, out.z_k, labels, tau, &out.empty_anchors);
  out.slide_mut = supcon_symmetric(out.z_s, out.z_m, labels, tau);
  out.bce = nd::add(reconstruction_loss(two_layer(heads, "psi_k", out.z_k), yk),
                    reconstruction_loss(two_layer(heads, "psi_m", out.z_m), ym));
  auto contrastive = nd::add(out.slide_karyo, out.slide_mut);
  out.total = lambda_r == Scalar(0) ? contrastive : nd::add(contrastive, nd::scalar_mul(out.bce, lambda_r));
  return out;
}

/// Slide representation: the [CLS] output, or the mean of the projected cells.
template <typename Scalar>
nd::Var<Scalar> slide_embedding(const BoundParams<Scalar>& agg, const AggregatorConfig& cfg, AggregatorMode mode,
                                const nd::Var<Scalar>& cells) {
  if (mode == AggregatorMode::mean_pool) return nd::mean_rows(embed_cells(agg, cells));
  return aggregate(agg, cfg, cells).cls;
}

/// Band-level [loss|gain|fusion] rows rolled up to arm level.
nd::Matrix<float> to_arm_level(const nd::Matrix<float>& band_bits, const karyo::CytobandTable& table);

/// Class-stratified batches: members of each class are dealt to batches in
/// pairs so that every batch holds at least two of a class whenever the class
/// has at least two members per batch.
std::vector<std::vector<int>> stratified_batches(std::span<const int> labels, int batch_size, Rng& rng);

struct AlignState {
  ParamSet<float> agg;
  ParamSet<float> heads;
};

struct AlignEpoch {
  int epoch = 0;
  double loss = 0.0;
  double slide_karyo = 0.0;
  double slide_mut = 0.0;
  double bce = 0.0;
  int empty_anchors = 0;
  nlohmann::json to_json() const;
};

struct AlignResult {
  AlignState state;
  std::vector<AlignEpoch> history;
};

using AlignCallback = std::function<void(const AlignEpoch&)>;

/// Trains on every patient of `train`. `pretrained_agg` is required when
/// cfg.init is pretrained and ignored otherwise. The karyotype matrix must
/// already be at the configured resolution.
AlignResult train_align(const CohortData& train, const AggregatorConfig& agg_cfg, const ParamSet<float>* pretrained_agg,
                        const AlignConfig& cfg, const AlignCallback& on_epoch = {});

struct AlignedTable {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<bool> is_test;
  nd::Matrix<float> slide;  // N x D, before projection
  nd::Matrix<float> z_s, z_k, z_m;
};

AlignedTable embed_aligned(const AlignState& state, const AggregatorConfig& agg_cfg, const AlignConfig& cfg,
                           const CohortData& data);

io::Checkpoint align_checkpoint(const AlignResult& result, const AggregatorConfig& agg_cfg, const AlignConfig& cfg,
                                int d_k, int d_m, const std::vector<std::string>& class_names);

struct LoadedAlign {
  AggregatorConfig aggregator;
  AlignConfig config;
  AlignState state;
  int d_k = 0;
  int d_m = 0;
  std::vector<std::string> class_names;
};

LoadedAlign load_align_checkpoint(const io::Checkpoint& ckpt);

}  // namespace genalign
