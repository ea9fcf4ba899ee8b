#pragma once

#include <filesystem>
#include <vector>

#include "id2face/types.hpp"

namespace id2face::image_io {

/// 8-bit RGB PNG; values in [-1, 1] map to [0, 255] with clamping and rounding.
void write_png(const std::filesystem::path& path, const ImageTensor& image);
/// (3, H, W) float32 in [-1, 1]. Grey and alpha channels are converted to RGB.
ImageTensor read_png(const std::filesystem::path& path);

/// Tiles equally sized (3, H, W) images left to right.
ImageTensor hstack(const std::vector<ImageTensor>& images);

}  // namespace id2face::image_io
