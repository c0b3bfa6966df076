#pragma once

// Permutation-invariant transformer over a bag of cell embeddings. Cells are
// projected by a small MLP, a learned [CLS] token is prepended, and pre-norm
// blocks run without positional encodings, so token order carries no signal.

#include "genalign/ndiff.hpp"
#include "genalign/params.hpp"
#include "genalign/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace genalign {

struct AggregatorConfig {
  int depth = 2;
  int heads = 4;
  int embed_dim = 64;
  int mlp_dim = 256;
  int input_dim = 64;
  int max_cells = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static AggregatorConfig from_json(const nlohmann::json& j);
  bool operator==(const AggregatorConfig&) const = default;
};

struct CellBag {
  std::string patient_id;
  nd::Matrix<float> cells;  // n x input_dim
};

/// Uniform subsample without replacement down to `max_cells`; original order kept.
CellBag cap_bag(const CellBag& bag, int max_cells, Rng& rng);

enum class ViewKind { global, local };

struct BagView {
  ViewKind kind = ViewKind::global;
  std::vector<int> cells;  // indices into the bag
  std::vector<int> mask;   // subset of `cells` (bag indices), student side only

  /// Mask as positions within `cells`, ascending.
  std::vector<int> mask_positions() const;
};

int global_view_size(int n);
int local_view_size(int n);

/// Globals first, then locals; each view draws its cells and mask independently.
std::vector<BagView> sample_views(int n_cells, int n_global, int n_local, double mask_ratio, Rng& rng);

template <typename Scalar>
struct AggregatorOutput {
  nd::Var<Scalar> cls;     // 1 x D
  nd::Var<Scalar> tokens;  // n x D, in input order
};

template <typename Scalar>
ParamSet<Scalar> init_aggregator(const AggregatorConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet<Scalar> p;
  const int d = cfg.embed_dim;
  nn::add_linear(p, "embed.fc1", cfg.input_dim, d, rng);
  nn::add_linear(p, "embed.fc2", d, d, rng);
  auto token = [&](const char* name) {
    nd::Matrix<Scalar> t(1, d);
    for (int j = 0; j < d; ++j) t(0, j) = static_cast<Scalar>(0.02 * rng.normal());
    p.add(name, std::move(t));
  };
  token("cls_token");
  token("mask_token");
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    nn::add_layer_norm(p, b + "ln1", d);
    nn::add_linear(p, b + "qkv", d, 3 * d, rng);
    nn::add_linear(p, b + "proj", d, d, rng);
    nn::add_layer_norm(p, b + "ln2", d);
    nn::add_linear(p, b + "fc1", d, cfg.mlp_dim, rng);
    nn::add_linear(p, b + "fc2", cfg.mlp_dim, d, rng);
  }
  nn::add_layer_norm(p, "final_ln", d);
  return p;
}

/// Per-cell projection input_dim -> D.
template <typename Scalar>
nd::Var<Scalar> embed_cells(const BoundParams<Scalar>& p, const nd::Var<Scalar>& cells) {
  return nn::linear(p, "embed.fc2", nd::gelu(nn::linear(p, "embed.fc1", cells)));
}

template <typename Scalar>
nd::Var<Scalar> self_attention(const BoundParams<Scalar>& p, const std::string& block, const nd::Var<Scalar>& x,
                               int heads) {
  const auto d = x.cols();
  const auto dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  auto qkv = nn::linear(p, block + "qkv", x);
  std::vector<nd::Var<Scalar>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto q = nd::slice_cols(qkv, h * dh, dh);
    auto k = nd::slice_cols(qkv, d + h * dh, dh);
    auto v = nd::slice_cols(qkv, 2 * d + h * dh, dh);
    auto a = nd::softmax(nd::scalar_mul(nd::matmul(q, nd::transpose(k)), scale), 1);
    outs.push_back(nd::matmul(a, v));
  }
  auto merged = heads == 1 ? outs.front() : nd::concat_cols<Scalar>(outs);
  return nn::linear(p, block + "proj", merged);
}

/// `mask` holds positions within `cells` whose projected embedding is replaced
/// by the mask token.
template <typename Scalar>
AggregatorOutput<Scalar> aggregate(const BoundParams<Scalar>& p, const AggregatorConfig& cfg,
                                   const nd::Var<Scalar>& cells, std::span<const int> mask = {}) {
  if (cells.rows() == 0) throw std::invalid_argument("aggregate: empty bag");
  if (cells.cols() != cfg.input_dim) {
    throw nd::ShapeError("aggregate: cells have width " + std::to_string(cells.cols()) + ", expected " +
                         std::to_string(cfg.input_dim));
  }
  const auto n = cells.rows();
  auto x = embed_cells(p, cells);
  if (!mask.empty()) x = nd::replace_rows(x, p["mask_token"], mask);
  x = nd::concat_rows({p["cls_token"], x});
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    x = nd::add(x, self_attention(p, b, nn::layer_norm(p, b + "ln1", x), cfg.heads));
    auto h = nd::gelu(nn::linear(p, b + "fc1", nn::layer_norm(p, b + "ln2", x)));
    x = nd::add(x, nn::linear(p, b + "fc2", h));
  }
  x = nn::layer_norm(p, "final_ln", x);
  return {nd::slice_rows(x, 0, 1), nd::slice_rows(x, 1, n)};
}

/// CLS embedding of a whole bag with no gradient tracking.
template <typename Scalar>
nd::Matrix<Scalar> cls_embedding(const ParamSet<Scalar>& params, const AggregatorConfig& cfg,
                                 const nd::Matrix<Scalar>& cells) {
  nd::Graph<Scalar> g;
  BoundParams<Scalar> p(g, params, false);
  return aggregate(p, cfg, g.constant(cells)).cls.value();
}

/// Unweighted mean of the projected cell embeddings.
template <typename Scalar>
nd::Matrix<Scalar> mean_pool_embedding(const ParamSet<Scalar>& params, const nd::Matrix<Scalar>& cells) {
  nd::Graph<Scalar> g;
  BoundParams<Scalar> p(g, params, false);
  return nd::mean_rows(embed_cells(p, g.constant(cells))).value();
}

/// N x D matrix of CLS embeddings, one row per bag.
nd::Matrix<float> embed_bags(const ParamSet<float>& agg, const AggregatorConfig& cfg,
                             const std::vector<CellBag>& bags, int threads = 1);

}  // namespace genalign
