#pragma once

#include <string>

#include "coview/scene.hpp"
#include "coview/tensor.hpp"

namespace coview {

// Flat binary BEV export with a 16-byte header:
//   bytes 0-3   magic "BEV0"
//   bytes 4-7   u32 height (little endian)
//   bytes 8-11  u32 width
//   bytes 12-13 u16 channels
//   bytes 14-15 u16 dtype code (0 = u8 occupancy, 1 = f64)
void write_bev_file(const BevGrid& grid, const std::string& path);
BevGrid read_bev_file(const std::string& path);

// CSV matrix, one row per grid row, %.17g values
void write_csv_matrix(const Tensor& t, const std::string& path);

// atomic write: stage to <path>.tmp then rename
void write_text_file_atomic(const std::string& path, const std::string& content);

} // namespace coview
