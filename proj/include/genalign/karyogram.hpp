#pragma once

// Cytoband table, ISCN karyotype parsing for a documented subset of the
// nomenclature, and per-band loss/gain/fusion encoding.
//
// Supported grammar (one clone; clones are joined with '/'):
//
//   clone    := modal ',' sex (',' aberration)* cells?
//   modal    := digits | digits '~' digits
//   sex      := [XY]+
//   aberration := ('+' | '-') chrom
//              | 'del(' chrom ')(' ref ref? ')'
//              | 't(' chrom (';' chrom)+ ')(' ref (';' ref)+ ')'
//              | 'inv(' chrom ')(' ref ref ')'
//   ref      := ('p' | 'q') digits ('.' digits)?
//   cells    := '[' digits ']'
//
// A band reference coarser than the table (e.g. 21q22 against 21q22.1-3)
// covers all of its sub-bands; a finer one (e.g. 8q22.1 against 8q22) maps
// to the containing band.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace genalign::karyo {

inline constexpr int kBandCount = 368;
inline constexpr int kKaryotypeDim = 3 * kBandCount;

enum class Arm : std::uint8_t { p, q };
enum class EventKind : std::uint8_t { loss = 0, gain = 1, fusion = 2 };

const char* to_string(EventKind kind);

struct Band {
  std::string chromosome;
  Arm arm;
  std::string label;
  int index;

  /// e.g. "8q22" or "16p13.1"
  std::string name() const;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedNomenclature : public std::runtime_error {
 public:
  explicit UnsupportedNomenclature(std::string token)
      : std::runtime_error("unsupported ISCN token '" + token + "'"), token_(std::move(token)) {}
  const std::string& token() const { return token_; }

 private:
  std::string token_;
};

class UnknownBand : public std::runtime_error {
 public:
  explicit UnknownBand(std::string band)
      : std::runtime_error("band '" + band + "' is not in the cytoband table"), band_(std::move(band)) {}
  const std::string& band() const { return band_; }

 private:
  std::string band_;
};

struct ArmKey {
  std::string chromosome;
  Arm arm;
  bool operator==(const ArmKey&) const = default;
  std::string name() const;
};

/// Inclusive index range [first, last].
struct BandRange {
  int first;
  int last;
  bool operator==(const BandRange&) const = default;
};

class CytobandTable {
 public:
  /// Parses `chromosome<TAB>arm<TAB>band_label` lines and validates the result.
  static CytobandTable parse(std::string_view text);

  /// The versioned table compiled into the library.
  static const CytobandTable& builtin();

  std::size_t size() const { return bands_.size(); }
  const Band& band(int index) const { return bands_.at(static_cast<std::size_t>(index)); }
  std::span<const Band> bands() const { return bands_; }

  /// Chromosome arms in table order.
  const std::vector<ArmKey>& arms() const { return arms_; }
  BandRange arm_span(const ArmKey& arm) const;
  BandRange arm_span(std::size_t arm_index) const { return arm_spans_.at(arm_index); }
  /// Position of the arm containing `band_index` within arms().
  int arm_of(int band_index) const { return band_arm_.at(static_cast<std::size_t>(band_index)); }
  BandRange chromosome_span(const std::string& chromosome) const;
  bool has_chromosome(const std::string& chromosome) const;

  /// Resolves a band reference such as ("15", q, "24") to the table bands it denotes.
  BandRange resolve(const std::string& chromosome, Arm arm, const std::string& label) const;

  /// SHA-256 of the resource text the table was parsed from.
  const std::string& sha256() const { return sha256_; }

 private:
  std::vector<Band> bands_;
  std::vector<ArmKey> arms_;
  std::vector<BandRange> arm_spans_;
  std::vector<int> band_arm_;
  std::string sha256_;
};

struct KaryotypeEvent {
  EventKind kind;
  std::vector<int> region;  // sorted, unique band indices
  bool operator==(const KaryotypeEvent&) const = default;
};

struct ParseOptions {
  bool lenient = false;
};

struct ParseResult {
  std::vector<KaryotypeEvent> events;
  std::vector<std::string> skipped;  // tokens dropped in lenient mode
};

/// Strict parse: unsupported tokens and unknown bands throw.
std::vector<KaryotypeEvent> parse_iscn(std::string_view karyotype, const CytobandTable& table);
ParseResult parse_iscn(std::string_view karyotype, const CytobandTable& table, ParseOptions options);

/// Bits laid out as [loss | gain | fusion], one block of table.size() each.
struct KaryotypeVector {
  std::vector<std::uint8_t> bits;
  bool operator==(const KaryotypeVector&) const = default;
  std::size_t count() const;
};

/// Bits laid out as [loss | gain | fusion], one block of arms().size() each.
struct ArmLevelVector {
  std::vector<std::uint8_t> bits;
  bool operator==(const ArmLevelVector&) const = default;
};

KaryotypeVector encode_karyotype(std::span<const KaryotypeEvent> events, const CytobandTable& table);
ArmLevelVector rollup_to_arms(const KaryotypeVector& v, const CytobandTable& table);

}  // namespace genalign::karyo
