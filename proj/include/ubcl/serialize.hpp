#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "ubcl/model.hpp"
#include "ubcl/quantization.hpp"

namespace ubcl {

/// Unreadable, truncated, mismatched or wrong-version model files.
class ModelFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kModelFormatVersion = 1;

enum class PayloadKind : std::uint8_t { kFloat32 = 0, kInt8 = 1 };

// Container layout (all integers little-endian):
//   "UBCL" | u32 version | u8 payload kind
//   config: i32 channels, window, classes, filters, kernel, hidden | f64 dropout | u8 variant
//   u32 tensor count, then per tensor:
//     u32 name length | name | u8 dtype (0 f32, 1 i8) | u32 rank | u32 dims[rank] | values
//     int8 tensors append f64 scale | i32 zero point | u8 scheme
//   int8 payloads end with u32 activation count and (name, f64, i32, u8) records.

std::string encode_model(const ModelConfig& config, const WeightsF& weights);
std::string encode_quantized(const QuantizedModel& model);

/// Writes the binary container plus a `<path>.json` sidecar holding the config.
void save_model(const std::filesystem::path& path, const ModelConfig& config,
                const WeightsF& weights);
void save_quantized(const std::filesystem::path& path, const QuantizedModel& model);

struct LoadedModel {
  ModelConfig config;
  WeightsF weights;
};

LoadedModel decode_model(const std::string& bytes);
QuantizedModel decode_quantized(const std::string& bytes);
LoadedModel load_model(const std::filesystem::path& path);
QuantizedModel load_quantized(const std::filesystem::path& path);

/// Reads the payload kind without decoding the tensors.
PayloadKind peek_payload_kind(const std::filesystem::path& path);

}  // namespace ubcl
