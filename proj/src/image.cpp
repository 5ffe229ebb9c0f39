#include "sibow/image.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sibow/errors.hpp"

namespace sibow {

namespace {

// Cursor over a fully buffered stream so parse errors can report exact byte
// offsets.
struct ByteCursor {
    std::string data;
    std::size_t pos = 0;

    bool eof() const { return pos >= data.size(); }
    int peek() const { return eof() ? -1 : static_cast<unsigned char>(data[pos]); }
    int get() { return eof() ? -1 : static_cast<unsigned char>(data[pos++]); }

    [[noreturn]] void fail(const std::string& what) const {
        throw DataError("pgm parse error at byte " + std::to_string(pos) + ": " + what);
    }

    // Skips whitespace and '#' comment lines between header tokens.
    void skip_separators() {
        for (;;) {
            while (!eof() && std::isspace(peek())) ++pos;
            if (!eof() && peek() == '#') {
                while (!eof() && peek() != '\n') ++pos;
            } else {
                return;
            }
        }
    }

    long next_int(const char* what) {
        skip_separators();
        if (eof()) fail(std::string("expected ") + what + ", found end of stream");
        if (!std::isdigit(peek())) fail(std::string("expected ") + what);
        long v = 0;
        while (!eof() && std::isdigit(peek())) {
            v = v * 10 + (get() - '0');
            if (v > 1'000'000'000L) fail(std::string(what) + " out of range");
        }
        return v;
    }
};

}  // namespace

GrayImage read_pgm(std::istream& in) {
    ByteCursor cur;
    {
        std::ostringstream buf;
        buf << in.rdbuf();
        cur.data = buf.str();
    }
    if (cur.data.size() < 2) cur.fail("missing magic number");
    const char m0 = cur.data[0];
    const char m1 = cur.data[1];
    if (m0 != 'P' || (m1 != '2' && m1 != '5'))
        throw DataError("pgm parse error at byte 0: unsupported magic number '" +
                        cur.data.substr(0, 2) + "' (want P2 or P5)");
    const bool binary = m1 == '5';
    cur.pos = 2;

    const long width = cur.next_int("width");
    const long height = cur.next_int("height");
    const long maxval = cur.next_int("maxval");
    if (width < 1 || height < 1) cur.fail("non-positive dimensions");
    if (maxval < 1 || maxval > 65535) cur.fail("maxval out of range [1, 65535]");

    GrayImage img;
    img.width = static_cast<int>(width);
    img.height = static_cast<int>(height);
    const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    img.pixels.resize(count);
    const double scale = 1.0 / static_cast<double>(maxval);

    if (binary) {
        // Exactly one whitespace byte separates the header from raster data.
        if (cur.eof() || !std::isspace(cur.peek())) cur.fail("expected whitespace before raster data");
        cur.get();
        const int bytes_per_sample = maxval > 255 ? 2 : 1;
        const std::size_t need = count * static_cast<std::size_t>(bytes_per_sample);
        if (cur.data.size() - cur.pos < need) {
            cur.pos = cur.data.size();
            cur.fail("truncated raster data, need " + std::to_string(need) + " bytes");
        }
        for (std::size_t i = 0; i < count; ++i) {
            long v = cur.get();
            if (bytes_per_sample == 2) v = (v << 8) | cur.get();  // big-endian per Netpbm
            if (v > maxval) cur.fail("sample exceeds maxval");
            img.pixels[i] = static_cast<double>(v) * scale;
        }
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            const long v = cur.next_int("pixel value");
            if (v > maxval) cur.fail("sample exceeds maxval");
            img.pixels[i] = static_cast<double>(v) * scale;
        }
    }
    return img;
}

GrayImage read_pgm_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image: " + path);
    try {
        return read_pgm(in);
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

void write_pgm(const GrayImage& img, std::ostream& out, int maxval) {
    if (maxval < 1 || maxval > 65535) throw ConfigError("pgm maxval out of range");
    out << "P5\n" << img.width << " " << img.height << "\n" << maxval << "\n";
    for (double p : img.pixels) {
        long v = std::lround(p * maxval);
        if (v < 0) v = 0;
        if (v > maxval) v = maxval;
        if (maxval > 255) out.put(static_cast<char>((v >> 8) & 0xff));
        out.put(static_cast<char>(v & 0xff));
    }
}

void write_pgm_file(const GrayImage& img, const std::string& path, int maxval) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    write_pgm(img, out, maxval);
}

GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1) throw ConfigError("resize target must be positive");
    if (img.width < 1 || img.height < 1) throw DataError("resize of empty image");

    GrayImage out;
    out.width = out_w;
    out.height = out_h;
    out.pixels.resize(static_cast<std::size_t>(out_w) * static_cast<std::size_t>(out_h));

    const double sx = static_cast<double>(img.width) / out_w;
    const double sy = static_cast<double>(img.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        // Pixel centers are aligned between the two grids.
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            const double v00 = img.at_clamped(x0, y0);
            const double v10 = img.at_clamped(x0 + 1, y0);
            const double v01 = img.at_clamped(x0, y0 + 1);
            const double v11 = img.at_clamped(x0 + 1, y0 + 1);
            const double top = v00 + (v10 - v00) * wx;
            const double bot = v01 + (v11 - v01) * wx;
            out.at(x, y) = top + (bot - top) * wy;
        }
    }
    return out;
}

}  // namespace sibow
