#include "ppcd/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

namespace ppcd {
namespace {

void put_u32_be(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

void put_chunk(std::ostream& os, const char type[4], const std::string& payload) {
    std::string buf;
    put_u32_be(buf, static_cast<uint32_t>(payload.size()));
    buf.append(type, 4);
    buf += payload;
    uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(buf.data() + 4), static_cast<uInt>(buf.size() - 4)));
    put_u32_be(buf, crc);
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

}  // namespace

void write_png(const std::string& path, int width, int height,
               const std::vector<unsigned char>& rgb) {
    if (width <= 0 || height <= 0) fail("png needs positive dimensions");
    if (rgb.size() != static_cast<size_t>(width) * height * 3)
        fail("png payload size does not match " + std::to_string(width) + "x" +
             std::to_string(height));

    std::string raw;
    raw.reserve(static_cast<size_t>(height) * (1 + 3 * width));
    for (int y = 0; y < height; ++y) {
        raw.push_back('\0');  // filter type 0
        raw.append(reinterpret_cast<const char*>(&rgb[static_cast<size_t>(y) * width * 3]),
                   static_cast<size_t>(width) * 3);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string compressed(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  Z_BEST_SPEED) != Z_OK)
        fail("png compression failed for " + path);
    compressed.resize(bound);

    std::ofstream os(path, std::ios::binary);
    if (!os) fail("cannot open " + path + " for writing");
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    os.write(reinterpret_cast<const char*>(sig), 8);
    std::string ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(width));
    put_u32_be(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8);     // bit depth
    ihdr.push_back(2);     // color type: RGB
    ihdr.push_back(0);     // compression
    ihdr.push_back(0);     // filter
    ihdr.push_back(0);     // interlace
    put_chunk(os, "IHDR", ihdr);
    put_chunk(os, "IDAT", compressed);
    put_chunk(os, "IEND", "");
    if (!os) fail("failed while writing " + path);
}

void write_image_grid(const std::string& path, const Tensor& images, int cols) {
    if (images.rank() != 4 || images.dim(1) != 3)
        fail("image grid expects (n,3,S,S), got " + shape_str(images.shape()));
    if (cols < 1) fail("image grid needs cols >= 1");
    int n = images.dim(0), S = images.dim(2);
    if (images.dim(3) != S) fail("image grid expects square images");
    int rows = (n + cols - 1) / cols;
    int W = cols * S, H = rows * S;
    std::vector<unsigned char> rgb(static_cast<size_t>(W) * H * 3, 0);
    int64_t plane = static_cast<int64_t>(S) * S;
    for (int i = 0; i < n; ++i) {
        int gx = (i % cols) * S, gy = (i / cols) * S;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    float v = images[(static_cast<int64_t>(i) * 3 + c) * plane + y * S + x];
                    v = std::clamp((v + 1.0f) * 127.5f, 0.0f, 255.0f);
                    rgb[(static_cast<size_t>(gy + y) * W + gx + x) * 3 + c] =
                        static_cast<unsigned char>(std::lround(v));
                }
    }
    write_png(path, W, H, rgb);
}

}  // namespace ppcd
