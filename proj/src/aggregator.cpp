#include "genalign/aggregator.hpp"

#include "genalign/config.hpp"
#include "genalign/parallel.hpp"

#include <algorithm>

namespace genalign {

void AggregatorConfig::validate() const {
  if (depth < 1 || heads < 1 || embed_dim < 1 || mlp_dim < 1 || input_dim < 1) {
    throw std::invalid_argument("aggregator: dimensions must be positive");
  }
  if (embed_dim % heads != 0) throw std::invalid_argument("aggregator: embed_dim must be divisible by heads");
  if (max_cells < 1) throw std::invalid_argument("aggregator: max_cells must be >= 1");
}

nlohmann::json AggregatorConfig::to_json() const {
  return {{"depth", depth},         {"heads", heads},         {"embed_dim", embed_dim},
          {"mlp_dim", mlp_dim},     {"input_dim", input_dim}, {"max_cells", max_cells}};
}

AggregatorConfig AggregatorConfig::from_json(const nlohmann::json& j) {
  AggregatorConfig c;
  ConfigReader r(j, "aggregator");
  r.read("depth", c.depth);
  r.read("heads", c.heads);
  r.read("embed_dim", c.embed_dim);
  bool mlp_given = j.contains("mlp_dim");
  r.read("mlp_dim", c.mlp_dim);
  if (!mlp_given) c.mlp_dim = 4 * c.embed_dim;
  r.read("input_dim", c.input_dim);
  r.read("max_cells", c.max_cells);
  r.finish();
  c.validate();
  return c;
}

CellBag cap_bag(const CellBag& bag, int max_cells, Rng& rng) {
  const auto n = static_cast<int>(bag.cells.rows());
  if (n <= max_cells) return bag;
  auto keep = rng.sample_without_replacement(n, max_cells);
  std::sort(keep.begin(), keep.end());
  CellBag out{bag.patient_id, nd::Matrix<float>(max_cells, bag.cells.cols())};
  for (int i = 0; i < max_cells; ++i) out.cells.row(i) = bag.cells.row(keep[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<int> BagView::mask_positions() const {
  std::vector<int> pos;
  pos.reserve(mask.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (std::find(mask.begin(), mask.end(), cells[i]) != mask.end()) pos.push_back(static_cast<int>(i));
  }
  return pos;
}

// ceil(0.7 n) and ceil(0.2 n) in integer arithmetic, so 0.7 * 10 lands on 7.
int global_view_size(int n) { return std::max(1, (70 * n + 99) / 100); }
int local_view_size(int n) { return std::max(1, (20 * n + 99) / 100); }

std::vector<BagView> sample_views(int n_cells, int n_global, int n_local, double mask_ratio, Rng& rng) {
  if (n_cells < 1) throw std::invalid_argument("sample_views: empty bag");
  if (n_global < 1 || n_local < 0) throw std::invalid_argument("sample_views: need K_g >= 1 and K_l >= 0");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("sample_views: mask_ratio outside [0, 1)");
  std::vector<BagView> views;
  views.reserve(static_cast<std::size_t>(n_global + n_local));
  for (int v = 0; v < n_global + n_local; ++v) {
    BagView view;
    view.kind = v < n_global ? ViewKind::global : ViewKind::local;
    const int size = view.kind == ViewKind::global ? global_view_size(n_cells) : local_view_size(n_cells);
    view.cells = rng.sample_without_replacement(n_cells, size);
    const int n_mask = static_cast<int>(std::floor(mask_ratio * size));
    for (int pos : rng.sample_without_replacement(size, n_mask)) {
      view.mask.push_back(view.cells[static_cast<std::size_t>(pos)]);
    }
    std::sort(view.mask.begin(), view.mask.end());
    views.push_back(std::move(view));
  }
  return views;
}

nd::Matrix<float> embed_bags(const ParamSet<float>& agg, const AggregatorConfig& cfg,
                             const std::vector<CellBag>& bags, int threads) {
  nd::Matrix<float> out(static_cast<nd::Index>(bags.size()), cfg.embed_dim);
  parallel_for(static_cast<int>(bags.size()), threads, [&](int i) {
    out.row(i) = cls_embedding(agg, cfg, bags[static_cast<std::size_t>(i)].cells);
  });
  return out;
}

}  // namespace genalign
