#include "genalign/karyogram.hpp"

#include "genalign/digest.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>

namespace genalign::karyo {

extern const char* const kBuiltinBandTable;

const char* to_string(EventKind kind) {
  switch (kind) {
    case EventKind::loss:
      return "loss";
    case EventKind::gain:
      return "gain";
    case EventKind::fusion:
      return "fusion";
  }
  return "?";
}

namespace {

char arm_char(Arm a) { return a == Arm::p ? 'p' : 'q'; }

bool valid_chromosome(std::string_view c) {
  if (c == "X" || c == "Y") return true;
  if (c.empty() || c.size() > 2) return false;
  if (!std::all_of(c.begin(), c.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); })) {
    return false;
  }
  if (c[0] == '0') return false;
  const int n = std::stoi(std::string(c));
  return n >= 1 && n <= 22;
}

bool valid_label(std::string_view s) {
  if (s.empty() || !std::isdigit(static_cast<unsigned char>(s.front())) ||
      !std::isdigit(static_cast<unsigned char>(s.back()))) {
    return false;
  }
  int dots = 0;
  for (char ch : s) {
    if (ch == '.') {
      ++dots;
    } else if (!std::isdigit(static_cast<unsigned char>(ch))) {
      return false;
    }
  }
  return dots <= 1;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace

std::string Band::name() const { return chromosome + arm_char(arm) + label; }

std::string ArmKey::name() const { return chromosome + arm_char(arm); }

std::size_t KaryotypeVector::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

CytobandTable CytobandTable::parse(std::string_view text) {
  CytobandTable t;
  std::set<std::string> seen;
  std::vector<std::string> chrom_order;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;

    auto fields = split(line, '\t');
    if (fields.size() != 3) throw ParseError(line_no, "expected 3 tab-separated fields");
    const auto& chrom = fields[0];
    if (!valid_chromosome(chrom)) throw ParseError(line_no, "invalid chromosome '" + chrom + "'");
    if (fields[1] != "p" && fields[1] != "q") throw ParseError(line_no, "invalid arm '" + fields[1] + "'");
    if (!valid_label(fields[2])) throw ParseError(line_no, "invalid band label '" + fields[2] + "'");

    Band b{chrom, fields[1] == "p" ? Arm::p : Arm::q, fields[2], static_cast<int>(t.bands_.size())};
    if (!seen.insert(b.name()).second) throw ValidationError("duplicate band " + b.name());

    if (chrom_order.empty() || chrom_order.back() != chrom) {
      if (std::find(chrom_order.begin(), chrom_order.end(), chrom) != chrom_order.end()) {
        throw ValidationError("bands of chromosome " + chrom + " are not contiguous");
      }
      chrom_order.push_back(chrom);
    }
    const ArmKey key{chrom, b.arm};
    if (t.arms_.empty() || !(t.arms_.back() == key)) {
      if (std::find(t.arms_.begin(), t.arms_.end(), key) != t.arms_.end()) {
        throw ValidationError("bands of arm " + key.name() + " are not contiguous");
      }
      if (b.arm == Arm::p && !t.arms_.empty() && t.arms_.back().chromosome == chrom) {
        throw ValidationError("p-arm bands of chromosome " + chrom + " follow its q arm");
      }
      t.arms_.push_back(key);
      t.arm_spans_.push_back({b.index, b.index});
    } else {
      t.arm_spans_.back().last = b.index;
    }
    t.band_arm_.push_back(static_cast<int>(t.arms_.size()) - 1);
    t.bands_.push_back(std::move(b));
  }
  if (t.bands_.empty()) throw ValidationError("cytoband table has zero bands");
  if (t.bands_.size() != static_cast<std::size_t>(kBandCount)) {
    throw ValidationError("cytoband table has " + std::to_string(t.bands_.size()) + " bands, expected " +
                          std::to_string(kBandCount));
  }
  t.sha256_ = sha256_hex(text);
  return t;
}

const CytobandTable& CytobandTable::builtin() {
  static const CytobandTable table = parse(kBuiltinBandTable);
  return table;
}

BandRange CytobandTable::arm_span(const ArmKey& arm) const {
  for (std::size_t i = 0; i < arms_.size(); ++i) {
    if (arms_[i] == arm) return arm_spans_[i];
  }
  throw UnknownBand(arm.name());
}

bool CytobandTable::has_chromosome(const std::string& chromosome) const {
  return std::any_of(arms_.begin(), arms_.end(), [&](const ArmKey& a) { return a.chromosome == chromosome; });
}

BandRange CytobandTable::chromosome_span(const std::string& chromosome) const {
  BandRange r{-1, -1};
  for (std::size_t i = 0; i < arms_.size(); ++i) {
    if (arms_[i].chromosome != chromosome) continue;
    if (r.first < 0) r.first = arm_spans_[i].first;
    r.last = arm_spans_[i].last;
  }
  if (r.first < 0) throw UnknownBand(chromosome);
  return r;
}

BandRange CytobandTable::resolve(const std::string& chromosome, Arm arm, const std::string& label) const {
  const std::string full = chromosome + arm_char(arm) + label;
  const ArmKey key{chromosome, arm};
  const auto it = std::find(arms_.begin(), arms_.end(), key);
  if (it == arms_.end()) throw UnknownBand(full);
  const BandRange span = arm_spans_[static_cast<std::size_t>(it - arms_.begin())];

  std::string query = label;
  while (!query.empty()) {
    BandRange hit{-1, -1};
    for (int i = span.first; i <= span.last; ++i) {
      const auto& l = bands_[static_cast<std::size_t>(i)].label;
      const bool exact = l == query;
      const bool sub = l.size() > query.size() && l.compare(0, query.size(), query) == 0 &&
                       (query.find('.') == std::string::npos ? l[query.size()] == '.' : true);
      if (exact || sub) {
        if (hit.first < 0) hit.first = i;
        hit.last = i;
      }
    }
    if (hit.first >= 0) return hit;
    // finer than the table: drop the last sub-band digit and retry
    if (query.find('.') == std::string::npos) break;
    query.pop_back();
    if (!query.empty() && query.back() == '.') query.pop_back();
  }
  throw UnknownBand(full);
}

namespace {

struct BandRef {
  Arm arm;
  std::string label;
};

std::vector<BandRef> parse_refs(const std::string& s, const std::string& token) {
  std::vector<BandRef> refs;
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == ';') {
      ++i;
      continue;
    }
    if (s[i] != 'p' && s[i] != 'q') throw UnsupportedNomenclature(token);
    BandRef r{s[i] == 'p' ? Arm::p : Arm::q, {}};
    ++i;
    while (i < s.size() && (std::isdigit(static_cast<unsigned char>(s[i])) || s[i] == '.')) r.label.push_back(s[i++]);
    if (!valid_label(r.label)) throw UnsupportedNomenclature(token);
    refs.push_back(std::move(r));
  }
  return refs;
}

std::vector<int> range_indices(int first, int last) {
  std::vector<int> out;
  for (int i = first; i <= last; ++i) out.push_back(i);
  return out;
}

/// Splits "name(a)(b)" into name and the parenthesised groups.
bool split_groups(const std::string& token, std::string& name, std::vector<std::string>& groups) {
  const auto open = token.find('(');
  if (open == std::string::npos) return false;
  name = token.substr(0, open);
  std::size_t i = open;
  while (i < token.size()) {
    if (token[i] != '(') return false;
    const auto close = token.find(')', i);
    if (close == std::string::npos) return false;
    groups.push_back(token.substr(i + 1, close - i - 1));
    i = close + 1;
  }
  return true;
}

void parse_aberration(const std::string& token, const CytobandTable& table, std::vector<KaryotypeEvent>& out) {
  if (token.size() >= 2 && (token[0] == '+' || token[0] == '-') && valid_chromosome(token.substr(1))) {
    const auto span = table.chromosome_span(token.substr(1));
    out.push_back({token[0] == '+' ? EventKind::gain : EventKind::loss, range_indices(span.first, span.last)});
    return;
  }

  std::string name;
  std::vector<std::string> groups;
  if (!split_groups(token, name, groups) || groups.size() != 2) throw UnsupportedNomenclature(token);
  const auto chroms = split(groups[0], ';');
  for (const auto& c : chroms) {
    if (!valid_chromosome(c)) throw UnsupportedNomenclature(token);
  }
  const auto refs = parse_refs(groups[1], token);

  if (name == "del") {
    if (chroms.size() != 1 || refs.empty() || refs.size() > 2 || groups[1].find(';') != std::string::npos) {
      throw UnsupportedNomenclature(token);
    }
    const auto& c = chroms[0];
    const auto a = table.resolve(c, refs[0].arm, refs[0].label);
    int first, last;
    if (refs.size() == 1) {
      const auto arm = table.arm_span(ArmKey{c, refs[0].arm});
      if (refs[0].arm == Arm::q) {
        first = a.first;
        last = arm.last;
      } else {
        first = arm.first;
        last = a.last;
      }
    } else {
      const auto b = table.resolve(c, refs[1].arm, refs[1].label);
      first = std::min(a.first, b.first);
      last = std::max(a.last, b.last);
    }
    out.push_back({EventKind::loss, range_indices(first, last)});
    return;
  }

  if (name == "t") {
    if (chroms.size() < 2 || refs.size() != chroms.size()) throw UnsupportedNomenclature(token);
    for (std::size_t i = 0; i < chroms.size(); ++i) {
      const auto r = table.resolve(chroms[i], refs[i].arm, refs[i].label);
      out.push_back({EventKind::fusion, range_indices(r.first, r.last)});
    }
    return;
  }

  if (name == "inv") {
    if (chroms.size() != 1 || refs.size() != 2 || groups[1].find(';') != std::string::npos) {
      throw UnsupportedNomenclature(token);
    }
    for (const auto& ref : refs) {
      const auto r = table.resolve(chroms[0], ref.arm, ref.label);
      out.push_back({EventKind::fusion, range_indices(r.first, r.last)});
    }
    return;
  }

  throw UnsupportedNomenclature(token);
}

bool is_modal(const std::string& s) {
  if (s.empty()) return false;
  const auto parts = split(s, '~');
  if (parts.size() > 2) return false;
  for (const auto& p : parts) {
    if (p.empty() || !std::all_of(p.begin(), p.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      return false;
    }
  }
  return true;
}

bool is_sex(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c == 'X' || c == 'Y'; });
}

}  // namespace

ParseResult parse_iscn(std::string_view karyotype, const CytobandTable& table, ParseOptions options) {
  ParseResult result;
  // called from inside a catch block; rethrows unless lenient
  auto reject = [&](const std::string& token) {
    if (!options.lenient) throw;
    result.skipped.push_back(token);
  };

  const std::string text = trim(karyotype);
  if (text.empty()) throw UnsupportedNomenclature("");

  for (const auto& raw_clone : split(text, '/')) {
    std::string clone = trim(raw_clone);
    // trailing cell count, e.g. "[20]"
    if (!clone.empty() && clone.back() == ']') {
      const auto open = clone.rfind('[');
      const std::string count = open == std::string::npos ? "" : clone.substr(open + 1, clone.size() - open - 2);
      if (open == std::string::npos || count.empty() ||
          !std::all_of(count.begin(), count.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        throw UnsupportedNomenclature(clone);
      }
      clone = trim(clone.substr(0, open));
    }
    auto tokens = split(clone, ',');
    for (auto& t : tokens) t = trim(t);
    if (tokens.size() < 2 || !is_modal(tokens[0]) || !is_sex(tokens[1])) {
      // the clone header is not optional, even in lenient mode
      throw UnsupportedNomenclature(clone);
    }
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      try {
        parse_aberration(tokens[i], table, result.events);
      } catch (const UnsupportedNomenclature&) {
        reject(tokens[i]);
      } catch (const UnknownBand&) {
        reject(tokens[i]);
      }
    }
  }

  // union across clones: keep the first occurrence of each identical event
  std::vector<KaryotypeEvent> unique;
  for (auto& e : result.events) {
    if (std::find(unique.begin(), unique.end(), e) == unique.end()) unique.push_back(std::move(e));
  }
  result.events = std::move(unique);
  return result;
}

std::vector<KaryotypeEvent> parse_iscn(std::string_view karyotype, const CytobandTable& table) {
  return parse_iscn(karyotype, table, ParseOptions{}).events;
}

KaryotypeVector encode_karyotype(std::span<const KaryotypeEvent> events, const CytobandTable& table) {
  const auto n = table.size();
  KaryotypeVector v{std::vector<std::uint8_t>(3 * n, 0)};
  for (const auto& e : events) {
    const auto offset = static_cast<std::size_t>(e.kind) * n;
    for (int b : e.region) {
      if (b < 0 || static_cast<std::size_t>(b) >= n) {
        throw std::out_of_range("karyotype event band index " + std::to_string(b) + " outside the table");
      }
      v.bits[offset + static_cast<std::size_t>(b)] = 1;
    }
  }
  return v;
}

ArmLevelVector rollup_to_arms(const KaryotypeVector& v, const CytobandTable& table) {
  const auto n = table.size();
  const auto arms = table.arms().size();
  if (v.bits.size() != 3 * n) {
    throw std::invalid_argument("karyotype vector has " + std::to_string(v.bits.size()) + " bits, expected " +
                                std::to_string(3 * n));
  }
  ArmLevelVector out{std::vector<std::uint8_t>(3 * arms, 0)};
  for (std::size_t kind = 0; kind < 3; ++kind) {
    for (std::size_t b = 0; b < n; ++b) {
      if (v.bits[kind * n + b]) out.bits[kind * arms + static_cast<std::size_t>(table.arm_of(static_cast<int>(b)))] = 1;
    }
  }
  return out;
}

}  // namespace genalign::karyo
