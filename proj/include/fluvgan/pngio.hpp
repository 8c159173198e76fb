#pragma once

#include <fstream>

#include "tensor.hpp"

namespace fluvgan {

struct Image {
    i64 width = 0, height = 0;
    std::vector<uint8_t> gray;  // row-major, row 0 at the top

    uint8_t at(i64 row, i64 col) const { return gray[size_t(row * width + col)]; }
};

namespace detail {

inline uint32_t crc32_png(const uint8_t* data, size_t n, uint32_t crc = 0xffffffffu) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc;
}

inline uint32_t adler32(const uint8_t* data, size_t n) {
    uint32_t a = 1, b = 0;
    for (size_t i = 0; i < n; ++i) {
        a = (a + data[i]) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

inline void put_be32(std::string& s, uint32_t v) {
    s.push_back(char((v >> 24) & 0xff));
    s.push_back(char((v >> 16) & 0xff));
    s.push_back(char((v >> 8) & 0xff));
    s.push_back(char(v & 0xff));
}

inline void put_chunk(std::string& out, const char type[4], const std::string& data) {
    put_be32(out, uint32_t(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    put_be32(out, crc32_png(reinterpret_cast<const uint8_t*>(body.data()), body.size()) ^
                      0xffffffffu);
}

}  // namespace detail

// 8-bit grayscale PNG. The zlib stream uses stored (uncompressed) deflate
// blocks, so the bytes depend only on the pixels.
inline std::string png_encode(const Image& img) {
    require(img.width >= 1 && img.height >= 1, "png_encode: empty image");
    require(i64(img.gray.size()) == img.width * img.height, "png_encode: pixel buffer size mismatch");
    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    detail::put_be32(ihdr, uint32_t(img.width));
    detail::put_be32(ihdr, uint32_t(img.height));
    ihdr += char(8);  // bit depth
    ihdr += char(0);  // grayscale
    ihdr += char(0);
    ihdr += char(0);
    ihdr += char(0);
    detail::put_chunk(out, "IHDR", ihdr);

    // raw scanlines, filter byte 0 per row
    std::string raw;
    raw.reserve(size_t((img.width + 1) * img.height));
    for (i64 r = 0; r < img.height; ++r) {
        raw += char(0);
        raw.append(reinterpret_cast<const char*>(img.gray.data() + r * img.width),
                   size_t(img.width));
    }
    std::string z;
    z += char(0x78);
    z += char(0x01);
    size_t pos = 0;
    while (pos < raw.size() || raw.empty()) {
        size_t len = std::min<size_t>(65535, raw.size() - pos);
        bool final = pos + len == raw.size();
        z += char(final ? 1 : 0);
        z += char(len & 0xff);
        z += char((len >> 8) & 0xff);
        z += char(~len & 0xff);
        z += char((~len >> 8) & 0xff);
        z.append(raw, pos, len);
        pos += len;
        if (final) break;
    }
    detail::put_be32(z, detail::adler32(reinterpret_cast<const uint8_t*>(raw.data()), raw.size()));
    detail::put_chunk(out, "IDAT", z);
    detail::put_chunk(out, "IEND", "");
    return out;
}

inline void png_write(const Image& img, const std::string& path) {
    std::string bytes = png_encode(img);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os) throw DataError("short write to '" + path + "'");
}

// ---- rasterizers ------------------------------------------------------------------

inline uint8_t gray_of(real v) {
    double g = (double(v) + 1.0) / 2.0 * 255.0;
    return uint8_t(std::lround(std::clamp(g, 0.0, 255.0)));
}

// Horizontal slice at constant z of a [C,X,Y,Z] sample: columns follow x,
// rows follow y. One pixel per cell, -1 maps to black and +1 to white.
inline Image render_slice_z(const Tensor& sample, i64 channel, i64 z) {
    const Shape& s = sample.shape();
    require(s.size() == 4, "render_slice_z: [C,X,Y,Z] tensor required");
    require(channel >= 0 && channel < s[0], "render_slice_z: channel out of range");
    require(z >= 0 && z < s[3], "render_slice_z: z out of range");
    Image img;
    img.width = s[1];
    img.height = s[2];
    img.gray.resize(size_t(img.width * img.height));
    const auto& d = sample.data();
    for (i64 y = 0; y < s[2]; ++y)
        for (i64 x = 0; x < s[1]; ++x)
            img.gray[size_t(y * img.width + x)] =
                gray_of(d[size_t(((channel * s[1] + x) * s[2] + y) * s[3] + z)]);
    return img;
}

// Vertical slice at constant y: columns follow x, rows follow z with the top
// of the stack at the top of the image.
inline Image render_slice_y(const Tensor& sample, i64 channel, i64 y) {
    const Shape& s = sample.shape();
    require(s.size() == 4, "render_slice_y: [C,X,Y,Z] tensor required");
    require(channel >= 0 && channel < s[0], "render_slice_y: channel out of range");
    require(y >= 0 && y < s[2], "render_slice_y: y out of range");
    Image img;
    img.width = s[1];
    img.height = s[3];
    img.gray.resize(size_t(img.width * img.height));
    const auto& d = sample.data();
    for (i64 z = 0; z < s[3]; ++z)
        for (i64 x = 0; x < s[1]; ++x)
            img.gray[size_t((s[3] - 1 - z) * img.width + x)] =
                gray_of(d[size_t(((channel * s[1] + x) * s[2] + y) * s[3] + z)]);
    return img;
}

// Simple line plot of y against x on a white background.
inline Image render_line_plot(const std::vector<double>& xs, const std::vector<double>& ys,
                              i64 width = 480, i64 height = 320) {
    require(xs.size() == ys.size() && !xs.empty(), "render_line_plot: bad series");
    Image img;
    img.width = width;
    img.height = height;
    img.gray.assign(size_t(width * height), 255);
    i64 m = 24;  // margin
    auto put = [&](i64 r, i64 c, uint8_t v) {
        if (r >= 0 && r < height && c >= 0 && c < width) img.gray[size_t(r * width + c)] = v;
    };
    for (i64 c = m; c < width - m; ++c) {
        put(m, c, 160);
        put(height - m, c, 160);
    }
    for (i64 r = m; r < height - m; ++r) {
        put(r, m, 160);
        put(r, width - m, 160);
    }
    double x_lo = xs[0], x_hi = xs[0], y_lo = ys[0], y_hi = ys[0];
    for (size_t i = 0; i < xs.size(); ++i) {
        x_lo = std::min(x_lo, xs[i]);
        x_hi = std::max(x_hi, xs[i]);
        y_lo = std::min(y_lo, ys[i]);
        y_hi = std::max(y_hi, ys[i]);
    }
    if (x_hi <= x_lo) x_hi = x_lo + 1;
    if (y_hi <= y_lo) y_hi = y_lo + 1;
    auto col_of = [&](double x) {
        return i64(std::lround(double(m) + (x - x_lo) / (x_hi - x_lo) * double(width - 2 * m)));
    };
    auto row_of = [&](double y) {
        return i64(std::lround(double(height - m) - (y - y_lo) / (y_hi - y_lo) * double(height - 2 * m)));
    };
    auto line = [&](i64 r0, i64 c0, i64 r1, i64 c1) {
        i64 dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
        i64 sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
        i64 err = (dc > dr ? dc : -dr) / 2;
        for (;;) {
            put(r0, c0, 32);
            if (r0 == r1 && c0 == c1) break;
            i64 e2 = err;
            if (e2 > -dc) {
                err -= dr;
                c0 += sc;
            }
            if (e2 < dr) {
                err += dc;
                r0 += sr;
            }
        }
    };
    for (size_t i = 1; i < xs.size(); ++i)
        line(row_of(ys[i - 1]), col_of(xs[i - 1]), row_of(ys[i]), col_of(xs[i]));
    if (xs.size() == 1) put(row_of(ys[0]), col_of(xs[0]), 32);
    return img;
}

// Stored-deflate PNGs can be decoded without a zlib dependency; used by tests
// and nothing else at runtime.
inline Image png_decode_stored(const std::string& bytes) {
    require(bytes.size() > 8 && bytes.compare(0, 8, "\x89PNG\r\n\x1a\n", 8) == 0,
            "png_decode_stored: bad signature");
    size_t pos = 8;
    Image img;
    std::string idat;
    auto be32 = [&](size_t p) {
        return (uint32_t(uint8_t(bytes[p])) << 24) | (uint32_t(uint8_t(bytes[p + 1])) << 16) |
               (uint32_t(uint8_t(bytes[p + 2])) << 8) | uint32_t(uint8_t(bytes[p + 3]));
    };
    while (pos + 8 <= bytes.size()) {
        uint32_t len = be32(pos);
        std::string type = bytes.substr(pos + 4, 4);
        std::string data = bytes.substr(pos + 8, len);
        uint32_t crc = be32(pos + 8 + len);
        std::string body = type + data;
        require(crc == (detail::crc32_png(reinterpret_cast<const uint8_t*>(body.data()),
                                          body.size()) ^
                        0xffffffffu),
                "png_decode_stored: chunk CRC mismatch");
        if (type == "IHDR") {
            img.width = be32(pos + 8);
            img.height = be32(pos + 12);
            require(uint8_t(data[8]) == 8 && uint8_t(data[9]) == 0,
                    "png_decode_stored: only 8-bit grayscale supported");
        } else if (type == "IDAT") {
            idat += data;
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    require(idat.size() > 6, "png_decode_stored: missing image data");
    std::string raw;
    size_t p = 2;  // skip zlib header
    for (;;) {
        require(p + 5 <= idat.size(), "png_decode_stored: truncated deflate block");
        uint8_t hdr = uint8_t(idat[p]);
        require((hdr & 0x06) == 0, "png_decode_stored: only stored blocks supported");
        uint32_t len = uint32_t(uint8_t(idat[p + 1])) | (uint32_t(uint8_t(idat[p + 2])) << 8);
        raw.append(idat, p + 5, len);
        p += 5 + len;
        if (hdr & 1) break;
    }
    img.gray.resize(size_t(img.width * img.height));
    size_t stride = size_t(img.width) + 1;
    for (i64 r = 0; r < img.height; ++r) {
        require(uint8_t(raw[size_t(r) * stride]) == 0, "png_decode_stored: unexpected filter");
        std::memcpy(img.gray.data() + r * img.width, raw.data() + size_t(r) * stride + 1,
                    size_t(img.width));
    }
    return img;
}

}  // namespace fluvgan
