#include "genalign/formats.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace genalign::io {
namespace {

constexpr std::array<char, 4> kGbmMagic{'G', 'B', 'M', '1'};
constexpr std::array<char, 4> kGbckMagic{'G', 'B', 'C', 'K'};

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

void write_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t read_u32(std::istream& in, const std::filesystem::path& path) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw FormatError(path.string() + ": truncated header length");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_preamble(std::ostream& out, const std::array<char, 4>& magic, const json& header) {
  const std::string text = header.dump();
  out.write(magic.data(), 4);
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::pair<std::array<char, 4>, json> read_preamble(std::istream& in, const std::filesystem::path& path) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in) throw FormatError(path.string() + ": missing magic");
  const auto len = read_u32(in, path);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw FormatError(path.string() + ": truncated JSON header");
  try {
    return {magic, json::parse(text)};
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": header is not valid JSON: " + e.what());
  }
}

void check_header(json& header) {
  if (!header.contains("patient_ids") || !header["patient_ids"].is_array()) {
    throw std::invalid_argument("gbm header requires a patient_ids array");
  }
  if (!header.contains("band_table_sha256")) header["band_table_sha256"] = nullptr;
}

}  // namespace

std::vector<std::string> GbmMatrix::patient_ids() const {
  return header.at("patient_ids").get<std::vector<std::string>>();
}

nd::Matrix<float> GbmMatrix::as_float() const {
  if (dtype == DType::f32) return f32;
  nd::Matrix<float> out(static_cast<nd::Index>(rows), static_cast<nd::Index>(cols));
  for (std::size_t i = 0; i < u8.size(); ++i) out.data()[i] = static_cast<float>(u8[i]);
  return out;
}

void write_gbm(const std::filesystem::path& path, json header, const nd::Matrix<float>& data) {
  check_header(header);
  header["rows"] = data.rows();
  header["cols"] = data.cols();
  header["dtype"] = "f32";
  auto out = open_out(path);
  write_preamble(out, kGbmMagic, header);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_gbm_u8(const std::filesystem::path& path, json header, std::size_t rows, std::size_t cols,
                  std::span<const std::uint8_t> data) {
  if (data.size() != rows * cols) throw std::invalid_argument("gbm payload size does not match rows x cols");
  check_header(header);
  header["rows"] = rows;
  header["cols"] = cols;
  header["dtype"] = "u8";
  auto out = open_out(path);
  write_preamble(out, kGbmMagic, header);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

GbmMatrix read_gbm(const std::filesystem::path& path) {
  auto in = open_in(path);
  auto [magic, header] = read_preamble(in, path);
  if (magic != kGbmMagic) throw FormatError(path.string() + ": not a GBM1 file");
  GbmMatrix m;
  m.header = header;
  try {
    m.rows = header.at("rows").get<std::size_t>();
    m.cols = header.at("cols").get<std::size_t>();
    const auto dtype = header.at("dtype").get<std::string>();
    if (dtype == "u8") {
      m.dtype = DType::u8;
    } else if (dtype == "f32") {
      m.dtype = DType::f32;
    } else {
      throw FormatError(path.string() + ": unknown dtype '" + dtype + "'");
    }
    header.at("patient_ids");
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": incomplete header: " + e.what());
  }
  const std::size_t n = m.rows * m.cols;
  if (m.dtype == DType::u8) {
    m.u8.resize(n);
    in.read(reinterpret_cast<char*>(m.u8.data()), static_cast<std::streamsize>(n));
  } else {
    m.f32.resize(static_cast<nd::Index>(m.rows), static_cast<nd::Index>(m.cols));
    in.read(reinterpret_cast<char*>(m.f32.data()), static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!in) throw FormatError(path.string() + ": truncated payload");
  return m;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json manifest = ckpt.manifest;
  json dir = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    const auto& t = ckpt.tensors.at(i);
    dir.push_back({{"name", ckpt.tensors.names()[i]}, {"shape", {t.rows(), t.cols()}}, {"offset", offset}});
    offset += static_cast<std::size_t>(t.size()) * sizeof(float);
  }
  manifest["tensors"] = dir;
  auto out = open_out(path);
  write_preamble(out, kGbckMagic, manifest);
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    const auto& t = ckpt.tensors.at(i);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  auto in = open_in(path);
  auto [magic, manifest] = read_preamble(in, path);
  if (magic != kGbckMagic) throw FormatError(path.string() + ": not a GBCK file");
  Checkpoint ckpt;
  const auto base = in.tellg();
  try {
    for (const auto& entry : manifest.at("tensors")) {
      const auto rows = entry.at("shape").at(0).get<nd::Index>();
      const auto cols = entry.at("shape").at(1).get<nd::Index>();
      const auto offset = entry.at("offset").get<std::size_t>();
      nd::Matrix<float> t(rows, cols);
      in.seekg(base + static_cast<std::streamoff>(offset));
      in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
      if (!in) throw FormatError(path.string() + ": truncated tensor " + entry.at("name").get<std::string>());
      ckpt.tensors.add(entry.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad tensor directory: " + e.what());
  }
  manifest.erase("tensors");
  ckpt.manifest = std::move(manifest);
  return ckpt;
}

json inspect(const std::filesystem::path& path) {
  auto in = open_in(path);
  auto [magic, header] = read_preamble(in, path);
  const std::string m(magic.begin(), magic.end());
  if (magic != kGbmMagic && magic != kGbckMagic) throw FormatError(path.string() + ": unknown magic '" + m + "'");
  return {{"magic", m}, {"header", header}};
}

}  // namespace genalign::io
