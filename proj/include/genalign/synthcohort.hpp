#pragma once

// Synthetic cohorts with a known morphology/genetics coupling. Each class has
// a prototype mixture over cell archetypes; a patient's cells are drawn from a
// noisy copy of that mixture, and its karyotype and mutations from the class
// signature.

#include "genalign/cohort.hpp"
#include "genalign/karyogram.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace genalign::synth {

inline constexpr int kGeneCount = 25;
extern const std::array<const char*, kGeneCount> kGenes;

/// Position of `gene` in kGenes; throws std::out_of_range if absent.
int gene_index(const std::string& gene);

struct SynthClass {
  std::string name;
  std::vector<std::string> signature;   // aberration tokens, e.g. "t(15;17)(q24;q21)"
  std::array<double, kGeneCount> mutation_rates{};
};

struct SynthConfig {
  int n_patients = 250;
  int n_test = 50;
  int cells_min = 64;
  int cells_max = 64;
  int input_dim = 64;
  int n_archetypes = 8;
  double archetype_scale = 1.0;    // std of archetype means per dimension
  double prototype_sharpness = 1.5;
  double composition_noise = 0.1;  // sigma_c
  double embedding_noise = 1.0;    // sigma_e
  double label_noise = 0.0;
  double event_dropout = 0.05;
  double extra_event_rate = 0.05;
  std::vector<std::string> extra_event_pool{"+21", "-7", "del(5)(q31)", "-Y", "del(9)(q22)", "+22"};
  std::vector<SynthClass> classes = default_classes();
  std::uint64_t seed = 7;

  static std::vector<SynthClass> default_classes();
  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct SynthPatient {
  std::string patient_id;
  int label = 0;
  int genetics_class = 0;  // differs from label under label noise
  bool test = false;
  std::vector<double> composition;
  CellBag bag;
  std::string karyotype;
  karyo::KaryotypeVector kvec;
  std::vector<std::uint8_t> mvec;
};

struct Cohort {
  std::vector<std::string> class_names;
  nd::Matrix<double> prototypes;   // n_classes x n_archetypes
  nd::Matrix<double> archetypes;   // n_archetypes x input_dim
  std::vector<SynthPatient> patients;
};

Cohort generate(const SynthConfig& cfg, const karyo::CytobandTable& table = karyo::CytobandTable::builtin());

/// Per-class configured vs observed mutation frequencies, per-band event
/// frequencies, and the class signatures.
nlohmann::json oracle_report(const Cohort& cohort, const SynthConfig& cfg,
                             const karyo::CytobandTable& table = karyo::CytobandTable::builtin());

/// In-memory equivalent of loading the written files.
CohortData to_cohort_data(const Cohort& cohort);

/// Writes bags.gbm, karyotypes.tsv, kvec.gbm, mvec.gbm, labels.tsv and oracle.json.
/// Returns the written paths.
std::vector<std::filesystem::path> write_cohort(const std::filesystem::path& dir, const Cohort& cohort,
                                                const SynthConfig& cfg,
                                                const karyo::CytobandTable& table = karyo::CytobandTable::builtin());

}  // namespace genalign::synth
