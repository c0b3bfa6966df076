#include "genalign/cohort.hpp"

#include "genalign/formats.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace genalign {
namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, '\t')) out.push_back(field);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

std::ifstream open_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

void write_bags(const std::filesystem::path& path, const std::vector<CellBag>& bags) {
  if (bags.empty()) throw std::invalid_argument("write_bags: no bags");
  const auto cols = bags.front().cells.cols();
  nd::Index rows = 0;
  std::vector<std::string> ids;
  std::vector<long> offsets{0};
  for (const auto& b : bags) {
    if (b.cells.cols() != cols) throw nd::ShapeError("write_bags: bags differ in width");
    rows += b.cells.rows();
    ids.push_back(b.patient_id);
    offsets.push_back(static_cast<long>(rows));
  }
  nd::Matrix<float> all(rows, cols);
  nd::Index r = 0;
  for (const auto& b : bags) {
    all.middleRows(r, b.cells.rows()) = b.cells;
    r += b.cells.rows();
  }
  io::write_gbm(path, {{"kind", "cell_bags"}, {"patient_ids", ids}, {"row_offsets", offsets}}, all);
}

std::vector<CellBag> read_bags(const std::filesystem::path& path) {
  auto m = io::read_gbm(path);
  if (m.dtype != io::DType::f32) throw io::FormatError(path.string() + ": cell bags must be f32");
  if (!m.header.contains("row_offsets")) throw io::FormatError(path.string() + ": missing row_offsets");
  const auto ids = m.patient_ids();
  const auto offsets = m.header.at("row_offsets").get<std::vector<long>>();
  if (offsets.size() != ids.size() + 1 || offsets.front() != 0 ||
      offsets.back() != static_cast<long>(m.rows)) {
    throw io::FormatError(path.string() + ": row_offsets inconsistent with patient_ids and rows");
  }
  std::vector<CellBag> bags;
  bags.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const long n = offsets[i + 1] - offsets[i];
    if (n <= 0) throw io::FormatError(path.string() + ": empty bag for " + ids[i]);
    bags.push_back({ids[i], m.f32.middleRows(offsets[i], n)});
  }
  return bags;
}

void write_labels(const std::filesystem::path& path, const std::vector<LabelRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "patient_id\tlabel\tsplit\n";
  for (const auto& r : rows) out << r.patient_id << '\t' << r.label << '\t' << r.split << '\n';
}

std::vector<LabelRow> read_labels(const std::filesystem::path& path) {
  auto in = open_text(path);
  std::vector<LabelRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    auto f = split_tabs(line);
    if (f.size() >= 1 && f[0] == "patient_id") continue;
    if (f.size() != 3) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
    if (f[2] != "train" && f[2] != "test") {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": split must be train or test");
    }
    rows.push_back({f[0], f[1], f[2]});
  }
  return rows;
}

std::vector<std::pair<std::string, std::string>> read_two_column_tsv(const std::filesystem::path& path) {
  auto in = open_text(path);
  std::vector<std::pair<std::string, std::string>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    auto f = split_tabs(line);
    if (f.size() != 2) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 2 columns");
    if (f[0] == "patient_id") continue;
    rows.emplace_back(f[0], f[1]);
  }
  return rows;
}

std::vector<int> CohortData::indices(bool test) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (is_test[i] == test) out.push_back(static_cast<int>(i));
  return out;
}

CohortData CohortData::subset(const std::vector<int>& idx) const {
  CohortData out;
  out.class_names = class_names;
  out.karyo.resize(static_cast<nd::Index>(idx.size()), karyo.cols());
  out.mut.resize(static_cast<nd::Index>(idx.size()), mut.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto i = static_cast<std::size_t>(idx[r]);
    out.ids.push_back(ids[i]);
    out.bags.push_back(bags[i]);
    out.karyo.row(static_cast<nd::Index>(r)) = karyo.row(idx[r]);
    out.mut.row(static_cast<nd::Index>(r)) = mut.row(idx[r]);
    out.labels.push_back(labels[i]);
    out.is_test.push_back(is_test[i]);
  }
  return out;
}

void cap_bags(std::vector<CellBag>& bags, int max_cells, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& b : bags) {
    Rng local = rng.fork();
    b = cap_bag(b, max_cells, local);
  }
}

CohortData load_cohort(const CohortPaths& paths, int max_cells, std::uint64_t seed) {
  auto bags = read_bags(paths.bags);
  const auto kv = io::read_gbm(paths.karyo);
  const auto mv = io::read_gbm(paths.mut);
  const auto labels = read_labels(paths.labels);

  auto index_of = [](const std::vector<std::string>& ids) {
    std::map<std::string, nd::Index> m;
    for (std::size_t i = 0; i < ids.size(); ++i) m.emplace(ids[i], static_cast<nd::Index>(i));
    return m;
  };
  const auto k_idx = index_of(kv.patient_ids());
  const auto m_idx = index_of(mv.patient_ids());
  std::map<std::string, const LabelRow*> l_idx;
  std::set<std::string> names;
  for (const auto& l : labels) {
    l_idx.emplace(l.patient_id, &l);
    names.insert(l.label);
  }
  const auto kf = kv.as_float();
  const auto mf = mv.as_float();

  CohortData out;
  out.class_names.assign(names.begin(), names.end());
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const auto& id = bags[i].patient_id;
    if (!k_idx.count(id) || !m_idx.count(id) || !l_idx.count(id)) {
      out.excluded.push_back(id);
      continue;
    }
    keep.push_back(i);
  }
  for (const auto& [id, _] : l_idx) {
    if (std::none_of(bags.begin(), bags.end(), [&](const CellBag& b) { return b.patient_id == id; })) {
      out.excluded.push_back(id);
    }
  }
  for (const auto& id : out.excluded) spdlog::warn("patient {} is missing a modality and is excluded", id);

  out.karyo.resize(static_cast<nd::Index>(keep.size()), kf.cols());
  out.mut.resize(static_cast<nd::Index>(keep.size()), mf.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    auto& bag = bags[keep[r]];
    const auto& id = bag.patient_id;
    const auto* l = l_idx.at(id);
    out.ids.push_back(id);
    out.karyo.row(static_cast<nd::Index>(r)) = kf.row(k_idx.at(id));
    out.mut.row(static_cast<nd::Index>(r)) = mf.row(m_idx.at(id));
    out.labels.push_back(static_cast<int>(std::distance(names.begin(), names.find(l->label))));
    out.is_test.push_back(l->split == "test");
    out.bags.push_back(std::move(bag));
  }
  cap_bags(out.bags, max_cells, seed);
  return out;
}

}  // namespace genalign
