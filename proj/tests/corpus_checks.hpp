#pragma once

// The shipped ISCN corpus and its hand-expanded oracle. Each line holds an
// ISCN string and either "none", a list like "gain:170-185 fusion:282"
// (0-based rows of the band table) or an expected error
// "unsupported:<token>" / "unknown_band:<band>".

#include "genalign/karyogram.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace checks {

namespace karyo = genalign::karyo;

struct CorpusCase {
  std::string iscn;
  std::string expected;
};

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<CorpusCase> read_corpus(const std::string& path) {
  std::vector<CorpusCase> out;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("corpus line without a tab: " + line);
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

inline std::vector<std::uint8_t> oracle_bits(const std::string& expected, int bands = 368) {
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(3 * bands), 0);
  if (expected == "none") return bits;
  std::istringstream in(expected);
  std::string item;
  while (in >> item) {
    const auto colon = item.find(':');
    const std::string kind = item.substr(0, colon);
    const int off = kind == "loss" ? 0 : kind == "gain" ? bands : kind == "fusion" ? 2 * bands : -1;
    if (off < 0) throw std::runtime_error("bad oracle kind " + kind);
    const std::string range = item.substr(colon + 1);
    const auto dash = range.find('-');
    const int a = std::stoi(range.substr(0, dash));
    const int b = dash == std::string::npos ? a : std::stoi(range.substr(dash + 1));
    for (int i = a; i <= b; ++i) bits[static_cast<std::size_t>(off + i)] = 1;
  }
  return bits;
}

struct CorpusOutcome {
  bool ok = false;
  std::string detail;
};

/// Runs one case; errors must carry the expected token or band.
inline CorpusOutcome run_case(const CorpusCase& c, const karyo::CytobandTable& table) {
  const auto colon = c.expected.find(':');
  const std::string head = c.expected.substr(0, colon);
  const std::string what = colon == std::string::npos ? "" : c.expected.substr(colon + 1);
  try {
    const auto events = karyo::parse_iscn(c.iscn, table);
    if (head == "unsupported" || head == "unknown_band") return {false, "parsed, expected " + c.expected};
    const bool same = karyo::encode_karyotype(events, table).bits == oracle_bits(c.expected, static_cast<int>(table.size()));
    return {same, same ? "" : "bits differ from the oracle"};
  } catch (const karyo::UnsupportedNomenclature& e) {
    return {head == "unsupported" && e.token() == what, std::string("unsupported ") + e.token()};
  } catch (const karyo::UnknownBand& e) {
    return {head == "unknown_band" && e.band() == what, std::string("unknown band ") + e.band()};
  }
}

}  // namespace checks
