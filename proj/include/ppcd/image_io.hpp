#pragma once

#include <string>
#include <vector>

#include "ppcd/tensor.hpp"

namespace ppcd {

// Minimal RGB8 PNG writer (one IDAT chunk, filter 0 scanlines).
void write_png(const std::string& path, int width, int height,
               const std::vector<unsigned char>& rgb);

// Tile a batch of [-1,1]-valued images [n,3,S,S] into a grid PNG.
void write_image_grid(const std::string& path, const Tensor& images, int cols);

}  // namespace ppcd
