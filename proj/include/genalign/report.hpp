#pragma once

// Assembles evaluation reports (retrieval, probes, per-gene F1) and the
// ablation grid from trained models.

#include "genalign/align.hpp"
#include "genalign/cohort.hpp"
#include "genalign/evalkit.hpp"
#include "genalign/karyogram.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace genalign {

struct EvalConfig {
  std::vector<std::string> tasks{"retrieval", "knn", "logreg"};
  int n_boot = 1000;
  int knn_k = 5;
  double logreg_c = 1.0;
  int map_k = 3;
  int random_draws = 1;  // shuffled rankings averaged per query for the baseline
  int bonferroni_m = 4;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
  bool has_task(const std::string& t) const;
  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

struct StatReport {
  std::string metric;
  double point = 0.0;
  eval::BootstrapResult boot;
  std::optional<double> p_value;
  std::optional<double> p_bonferroni;
  nlohmann::json to_json() const;
};

/// Extra embeddings to probe alongside the aligned ones, e.g. stage-1 CLS
/// outputs or mean-pooled raw cells. Rows follow the cohort order.
struct ProbeSet {
  std::string name;
  nd::Matrix<float> embeddings;
};

/// Evaluates an aligned model on `data`: retrieval over the test split in all
/// four slide/genetics directions, slide-to-slide mAP@k, per-gene F1, and
/// k-NN / logistic-regression probes trained on the train split.
nlohmann::json evaluate(const CohortData& data, const LoadedAlign& model, const std::vector<ProbeSet>& extra,
                        const EvalConfig& cfg, const std::vector<std::string>& genes = {});

/// Tab-separated flattening of every StatReport in a report.
std::string report_tsv(const nlohmann::json& report);

/// Mean of the raw cell embeddings per patient.
nd::Matrix<float> raw_mean_pool(const std::vector<CellBag>& bags);

struct AblationGrid {
  std::vector<std::string> aggregator{"finetune_pretrained", "finetune_random", "mean_pool"};
  std::vector<KaryotypeResolution> karyotype_resolution{KaryotypeResolution::band, KaryotypeResolution::arm};
  std::vector<double> lambda_r{0.0, 0.1, 1.0};
  AlignConfig align;
  EvalConfig eval;

  void validate() const;
  nlohmann::json to_json() const;
  static AblationGrid from_json(const nlohmann::json& j);
};

/// Trains and scores every grid cell with shared seeds. `data` carries
/// band-level karyotypes; arm-level cells roll them up.
nlohmann::json run_ablation(const CohortData& data, const ParamSet<float>& pretrained_agg,
                            const AggregatorConfig& agg_cfg, const AblationGrid& grid,
                            const karyo::CytobandTable& table = karyo::CytobandTable::builtin());

std::string ablation_tsv(const nlohmann::json& table);

}  // namespace genalign
