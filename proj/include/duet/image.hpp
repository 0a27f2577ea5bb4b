#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "duet/error.hpp"
#include "duet/tensor.hpp"

namespace duet {

/// Half-open pixel rectangle [y0,y1) x [x0,x1).
struct PixelBox {
    std::int64_t y0, x0, y1, x1;
};

/// Raster with values in [0,1], channel-interleaved row-major storage.
/// channels is 1 (gray) or 3 (rgb).
struct Image {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t channels = 1;
    std::vector<double> pixels;
    std::string modality_label;

    Image() = default;
    Image(std::int64_t h, std::int64_t w, std::int64_t c, double fill = 0.0,
          std::string label = "")
        : height(h), width(w), channels(c),
          pixels(static_cast<std::size_t>(h * w * c), fill),
          modality_label(std::move(label)) {
        if (h <= 0 || w <= 0 || (c != 1 && c != 3))
            throw ParamError("Image: bad dimensions " + std::to_string(h) + "x" +
                             std::to_string(w) + "x" + std::to_string(c));
    }

    double& at(std::int64_t y, std::int64_t x, std::int64_t c = 0) {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    double at(std::int64_t y, std::int64_t x, std::int64_t c = 0) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }

    std::int64_t min_side() const { return std::min(height, width); }

    void validate_range() const {
        for (double p : pixels)
            if (!(p >= 0.0 && p <= 1.0))
                throw ContractError("Image: pixel value " + std::to_string(p) + " outside [0,1]");
    }
};

/// Snap every pixel onto the 8-bit grid k/255. Images on this grid survive
/// PGM/PPM round-trips bit-exactly.
inline Image quantize8(Image img) {
    for (auto& p : img.pixels) {
        double k = std::floor(p * 255.0 + 0.5);
        if (k < 0.0) k = 0.0;
        if (k > 255.0) k = 255.0;
        p = k / 255.0;
    }
    return img;
}

/// Mean over non-overlapping f x f blocks; height and width must divide by f.
inline Image box_downsample(const Image& img, std::int64_t f) {
    if (f <= 0 || img.height % f != 0 || img.width % f != 0)
        throw ParamError("box_downsample: factor " + std::to_string(f) + " must divide " +
                         std::to_string(img.height) + "x" + std::to_string(img.width));
    Image out(img.height / f, img.width / f, img.channels, 0.0, img.modality_label);
    const double inv = 1.0 / static_cast<double>(f * f);
    for (std::int64_t y = 0; y < out.height; ++y)
        for (std::int64_t x = 0; x < out.width; ++x)
            for (std::int64_t c = 0; c < img.channels; ++c) {
                double s = 0.0;
                for (std::int64_t dy = 0; dy < f; ++dy)
                    for (std::int64_t dx = 0; dx < f; ++dx) s += img.at(y * f + dy, x * f + dx, c);
                out.at(y, x, c) = s * inv;
            }
    return out;
}

/// Writes binary PGM (P5, 1 channel) or PPM (P6, 3 channels), 8-bit.
inline void write_pnm(const std::string& path, const Image& img) {
    img.validate_range();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_pnm: cannot open " + path);
    os << (img.channels == 1 ? "P5" : "P6") << "\n"
       << img.width << " " << img.height << "\n255\n";
    for (double p : img.pixels) {
        double k = std::floor(p * 255.0 + 0.5);
        if (k < 0.0) k = 0.0;
        if (k > 255.0) k = 255.0;
        os.put(static_cast<char>(static_cast<unsigned char>(k)));
    }
    if (!os) throw IoError("write_pnm: write failed for " + path);
}

namespace detail {

inline int pnm_token(std::istream& is) {
    // skips whitespace and '#' comments, returns next integer
    int c = is.get();
    while (is) {
        if (c == '#') {
            while (is && c != '\n') c = is.get();
        } else if (std::isspace(c)) {
            c = is.get();
        } else {
            break;
        }
    }
    if (!is) throw IoError("read_pnm: truncated header");
    int v = 0;
    bool any = false;
    while (is && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        any = true;
        c = is.get();
    }
    if (!any) throw IoError("read_pnm: malformed header");
    return v;
}

}  // namespace detail

inline Image read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_pnm: cannot open " + path);
    char m0 = static_cast<char>(is.get());
    char m1 = static_cast<char>(is.get());
    std::int64_t channels;
    if (m0 == 'P' && m1 == '5') channels = 1;
    else if (m0 == 'P' && m1 == '6') channels = 3;
    else throw IoError("read_pnm: " + path + " is not binary PGM/PPM");
    const int w = detail::pnm_token(is);
    const int h = detail::pnm_token(is);
    const int maxval = detail::pnm_token(is);
    if (maxval != 255) throw IoError("read_pnm: only 8-bit images supported");
    // exactly one whitespace byte separates header from payload; pnm_token
    // already consumed it while scanning past the last digit
    Image img(h, w, channels);
    std::vector<unsigned char> raw(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
                                   static_cast<std::size_t>(channels));
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw IoError("read_pnm: truncated pixel data in " + path);
    for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / 255.0;
    return img;
}

/// n_patches x (patch^2 * channels) matrix, patches scanned row-major, pixels
/// within a patch row-major with channels interleaved.
inline Tensor patchify(const Image& img, std::int64_t patch) {
    if (patch <= 0 || img.height % patch != 0 || img.width % patch != 0)
        throw ShapeError("patchify: patch " + std::to_string(patch) + " must divide " +
                         std::to_string(img.height) + "x" + std::to_string(img.width));
    const std::int64_t py = img.height / patch, px = img.width / patch;
    const std::int64_t dim = patch * patch * img.channels;
    Tensor out = Tensor::zeros({py * px, dim});
    std::size_t o = 0;
    for (std::int64_t gy = 0; gy < py; ++gy)
        for (std::int64_t gx = 0; gx < px; ++gx)
            for (std::int64_t dy = 0; dy < patch; ++dy)
                for (std::int64_t dx = 0; dx < patch; ++dx)
                    for (std::int64_t c = 0; c < img.channels; ++c)
                        out.data()[o++] = img.at(gy * patch + dy, gx * patch + dx, c);
    return out;
}

/// Inverse of patchify for a known geometry.
inline Image unpatchify(const Tensor& t, std::int64_t height, std::int64_t width,
                        std::int64_t channels, std::int64_t patch) {
    const std::int64_t py = height / patch, px = width / patch;
    if (height % patch != 0 || width % patch != 0 ||
        t.shape() != Shape{py * px, patch * patch * channels})
        throw ShapeError("unpatchify: tensor " + shape_str(t.shape()) + " does not match " +
                         std::to_string(height) + "x" + std::to_string(width));
    Image img(height, width, channels);
    std::size_t o = 0;
    for (std::int64_t gy = 0; gy < py; ++gy)
        for (std::int64_t gx = 0; gx < px; ++gx)
            for (std::int64_t dy = 0; dy < patch; ++dy)
                for (std::int64_t dx = 0; dx < patch; ++dx)
                    for (std::int64_t c = 0; c < channels; ++c)
                        img.at(gy * patch + dy, gx * patch + dx, c) = t.data()[o++];
    return img;
}

}  // namespace duet
