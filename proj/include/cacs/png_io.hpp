#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cacs {

// Minimal PNG encoder: 8-bit RGB, zlib stream with stored (uncompressed)
// deflate blocks. Enough for heatmap overlays without an image library.
void write_png_rgb(const std::string& path, int width, int height,
                   const std::vector<uint8_t>& rgb);

}  // namespace cacs
