#ifndef DOAMO_CHECKPOINT_HPP_
#define DOAMO_CHECKPOINT_HPP_

#include <filesystem>
#include <map>
#include <string>

#include "doamo/tensor.hpp"

namespace doamo {

// Array archive used for every checkpoint.
//
// Layout (all integers little-endian):
//   magic "DOAMARC1" (8 bytes), u32 array count, then per array in name order:
//   u32 name length, name bytes (UTF-8), u32 rank, rank x u32 dims,
//   numel x float64 values (IEEE-754, little-endian).
//
// Entries are written in lexicographic name order, so the same state always
// serialises to the same bytes.
using ArrayArchive = std::map<std::string, Tensor>;

std::string serialize_archive(const ArrayArchive& archive);
ArrayArchive deserialize_archive(const std::string& bytes);

void save_archive(const std::filesystem::path& path, const ArrayArchive& archive);
ArrayArchive load_archive(const std::filesystem::path& path);

}  // namespace doamo

#endif  // DOAMO_CHECKPOINT_HPP_
