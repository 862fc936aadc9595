#pragma once

// "BEVIS1" parameter container: the magic string followed by records of
//   u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 values[prod(dims)]
// all little-endian, until end of file.

#include <filesystem>
#include <span>
#include <vector>

#include "bevis/binary_io.hpp"
#include "bevis/layers.hpp"

namespace bevis {

inline constexpr std::string_view kCheckpointMagic = "BEVIS1";

std::vector<unsigned char> encode_checkpoint(std::span<const NamedTensor> records);
std::vector<NamedTensor> decode_checkpoint(std::span<const unsigned char> bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> records);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Copies records into the registry's live tensors by name. Every param and
/// buffer must be present with a matching shape.
void assign_records(const ParameterRegistry& reg, std::span<const NamedTensor> records);

/// Returns the record with this name or throws.
const Tensor& find_record(std::span<const NamedTensor> records, std::string_view name);

}  // namespace bevis
