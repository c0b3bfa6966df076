#pragma once

// Binary containers.
//
//   .gbm   "GBM1" | u32 LE header length | UTF-8 JSON header | row-major LE payload
//          header: {rows, cols, dtype: "u8"|"f32", band_table_sha256, patient_ids, ...}
//   .gbck  "GBCK" | u32 LE manifest length | UTF-8 JSON manifest | f32 LE blobs
//          manifest: {..., tensors: [{name, shape: [r, c], offset}]}, offsets in
//          bytes from the start of the blob section.

#include "genalign/ndiff.hpp"
#include "genalign/params.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace genalign::io {

using nlohmann::json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { u8, f32 };

struct GbmMatrix {
  json header;
  DType dtype = DType::f32;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> u8;  // filled when dtype == u8
  nd::Matrix<float> f32;         // filled when dtype == f32

  std::vector<std::string> patient_ids() const;
  /// u8 payload widened to float.
  nd::Matrix<float> as_float() const;
};

/// `header` must carry patient_ids; rows/cols/dtype are filled in here and
/// band_table_sha256 defaults to null.
void write_gbm(const std::filesystem::path& path, json header, const nd::Matrix<float>& data);
void write_gbm_u8(const std::filesystem::path& path, json header, std::size_t rows, std::size_t cols,
                  std::span<const std::uint8_t> data);
GbmMatrix read_gbm(const std::filesystem::path& path);

struct Checkpoint {
  json manifest;  // free-form fields; "tensors" is managed by the writer
  ParamSet<float> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Magic plus parsed JSON header of any .gbm/.gbck file.
json inspect(const std::filesystem::path& path);

}  // namespace genalign::io
