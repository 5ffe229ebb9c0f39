#pragma once

#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace sibow {

// Grayscale raster with intensities in [0, 1], row-major.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;

    double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }

    // Clamp-to-edge sampling.
    double at_clamped(int x, int y) const {
        if (x < 0) x = 0;
        if (x >= width) x = width - 1;
        if (y < 0) y = 0;
        if (y >= height) y = height - 1;
        return at(x, y);
    }
};

// Parses P2 (ASCII) or P5 (binary) PGM, maxval up to 65535. Intensities are
// scaled by 1/maxval on read. Parse failures throw DataError naming the byte
// offset.
GrayImage read_pgm(std::istream& in);
GrayImage read_pgm_file(const std::string& path);

// Debug facility: binary P5 output. Round-trips exactly for maxval 255
// inputs.
void write_pgm(const GrayImage& img, std::ostream& out, int maxval = 255);
void write_pgm_file(const GrayImage& img, const std::string& path, int maxval = 255);

// Bilinear resampling with clamp-to-edge; identical output when the target
// equals the source size.
GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h);

}  // namespace sibow
