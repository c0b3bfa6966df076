#pragma once

// Patient tables as consumed by alignment and evaluation, plus their TSV and
// .gbm representations.
//
//   bags.gbm     f32, all cells stacked; header adds row_offsets (N + 1 entries)
//   kvec.gbm     u8,  N x 1104 (or N x 144 at arm level)
//   mvec.gbm     u8,  N x 25
//   labels.tsv   patient_id, label, split (train|test)

#include "genalign/aggregator.hpp"
#include "genalign/ndiff.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace genalign {

void write_bags(const std::filesystem::path& path, const std::vector<CellBag>& bags);
std::vector<CellBag> read_bags(const std::filesystem::path& path);

struct LabelRow {
  std::string patient_id;
  std::string label;
  std::string split;
};

void write_labels(const std::filesystem::path& path, const std::vector<LabelRow>& rows);
std::vector<LabelRow> read_labels(const std::filesystem::path& path);

/// Two-column TSV (id, value); '#' lines and an optional "patient_id" header are skipped.
std::vector<std::pair<std::string, std::string>> read_two_column_tsv(const std::filesystem::path& path);

struct CohortData {
  std::vector<std::string> ids;
  std::vector<CellBag> bags;
  nd::Matrix<float> karyo;  // N x d_k
  nd::Matrix<float> mut;    // N x d_m
  std::vector<int> labels;  // index into class_names
  std::vector<std::string> class_names;
  std::vector<bool> is_test;
  std::vector<std::string> excluded;  // ids dropped for a missing modality

  std::size_t size() const { return ids.size(); }
  std::vector<int> indices(bool test) const;
  /// Rows of this table restricted to `idx`, in that order.
  CohortData subset(const std::vector<int>& idx) const;
};

struct CohortPaths {
  std::filesystem::path bags;
  std::filesystem::path karyo;
  std::filesystem::path mut;
  std::filesystem::path labels;
};

/// Joins the four files on patient id. Patients missing any of them are listed
/// in `excluded` and dropped. Bags larger than max_cells are subsampled with a
/// generator seeded by `seed`.
CohortData load_cohort(const CohortPaths& paths, int max_cells, std::uint64_t seed);

/// Applies cap_bag to every bag with per-patient streams forked in order.
void cap_bags(std::vector<CellBag>& bags, int max_cells, std::uint64_t seed);

}  // namespace genalign
