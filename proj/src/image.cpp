#include "jointseg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace jointseg {

namespace {

bool has_suffix(const std::string& s, const std::string& suf) {
    if (s.size() < suf.size()) return false;
    std::string tail = s.substr(s.size() - suf.size());
    std::transform(tail.begin(), tail.end(), tail.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return tail == suf;
}

unsigned char quantize_u8(double v) {
    double c = std::min(1.0, std::max(0.0, v));
    return static_cast<unsigned char>(std::lround(c * 255.0));
}

}  // namespace

Image to_mask(const Image& img) {
    Image out{img.height, img.width, std::vector<double>(img.pix.size())};
    const double thr = 128.0 / 255.0;
    for (size_t i = 0; i < img.pix.size(); ++i) out.pix[i] = img.pix[i] >= thr ? 1.0 : 0.0;
    return out;
}

bool is_binary(const Image& img) {
    for (double v : img.pix)
        if (v != 0.0 && v != 1.0) return false;
    return true;
}

double mask_area_fraction(const Image& mask) {
    double s = 0.0;
    for (double v : mask.pix) s += v;
    return mask.pix.empty() ? 0.0 : s / static_cast<double>(mask.pix.size());
}

Image flip_horizontal(const Image& img) {
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) out.at(y, x) = img.at(y, img.width - 1 - x);
    return out;
}

// ---- PGM (binary P5) ----
// Byte layout, exactly: "P5\n<width> <height>\n255\n" followed by
// width*height raw bytes, one per pixel, row-major, top-left first.
// The reader also tolerates '#' comments and any whitespace between header
// tokens, per the common format definition.

std::vector<unsigned char> encode_pgm(const Image& img) {
    char header[64];
    int n = std::snprintf(header, sizeof(header), "P5\n%d %d\n255\n", img.width, img.height);
    std::vector<unsigned char> out(header, header + n);
    out.reserve(out.size() + img.pix.size());
    for (double v : img.pix) out.push_back(quantize_u8(v));
    return out;
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
bool next_pgm_token(const std::vector<unsigned char>& b, size_t& pos, std::string& tok) {
    tok.clear();
    while (pos < b.size()) {
        unsigned char c = b[pos];
        if (c == '#') {
            while (pos < b.size() && b[pos] != '\n') ++pos;
        } else if (std::isspace(c)) {
            ++pos;
        } else {
            break;
        }
    }
    while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') tok.push_back(b[pos++]);
    return !tok.empty();
}

}  // namespace

Image decode_pgm(const std::vector<unsigned char>& bytes, const std::string& origin) {
    auto fail = [&origin](const std::string& why) -> Image {
        throw IoError("bad PGM file " + origin + ": " + why);
    };
    size_t pos = 0;
    std::string tok;
    if (!next_pgm_token(bytes, pos, tok) || tok != "P5") return fail("magic is not P5");
    long w = 0, h = 0, maxval = 0;
    try {
        if (!next_pgm_token(bytes, pos, tok)) return fail("missing width");
        w = std::stol(tok);
        if (!next_pgm_token(bytes, pos, tok)) return fail("missing height");
        h = std::stol(tok);
        if (!next_pgm_token(bytes, pos, tok)) return fail("missing maxval");
        maxval = std::stol(tok);
    } catch (const std::exception&) {
        return fail("non-numeric header field");
    }
    if (w <= 0 || h <= 0) return fail("non-positive dimensions");
    if (maxval != 255) return fail("unsupported maxval " + std::to_string(maxval));
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) return fail("missing header terminator");
    ++pos;  // single whitespace byte separates header from raster
    size_t need = static_cast<size_t>(w) * static_cast<size_t>(h);
    if (bytes.size() - pos < need) return fail("truncated raster");
    Image img{static_cast<int>(h), static_cast<int>(w), std::vector<double>(need)};
    for (size_t i = 0; i < need; ++i) img.pix[i] = static_cast<double>(bytes[pos + i]) / 255.0;
    return img;
}

// ---- PNG via libpng's simplified API ----

namespace {

Image decode_png(const std::string& path) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.c_str()))
        throw IoError("cannot read PNG " + path + ": " + pi.message);
    pi.format = PNG_FORMAT_GRAY;  // libpng converts color inputs for us
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = pi.message;
        png_image_free(&pi);
        throw IoError("cannot decode PNG " + path + ": " + msg);
    }
    Image img{static_cast<int>(pi.height), static_cast<int>(pi.width),
              std::vector<double>(buf.size())};
    for (size_t i = 0; i < buf.size(); ++i) img.pix[i] = static_cast<double>(buf[i]) / 255.0;
    return img;
}

std::vector<unsigned char> encode_png(const Image& img) {
    std::vector<unsigned char> gray(img.pix.size());
    for (size_t i = 0; i < img.pix.size(); ++i) gray[i] = quantize_u8(img.pix[i]);
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&pi, nullptr, &size, 0, gray.data(), 0, nullptr))
        throw IoError(std::string("cannot size PNG: ") + pi.message);
    std::vector<unsigned char> out(size);
    if (!png_image_write_to_memory(&pi, out.data(), &size, 0, gray.data(), 0, nullptr))
        throw IoError(std::string("cannot encode PNG: ") + pi.message);
    out.resize(size);
    return out;
}

}  // namespace

Image read_image(const std::string& path) {
    if (has_suffix(path, ".pgm")) return decode_pgm(read_file_bytes(path), path);
    if (has_suffix(path, ".png")) return decode_png(path);
    throw IoError("unsupported image extension (want .pgm or .png): " + path);
}

void write_image_u8(const std::string& path, const Image& img) {
    if (img.height <= 0 || img.width <= 0 ||
        img.pix.size() != static_cast<size_t>(img.height) * img.width)
        throw ContractError("write_image_u8: inconsistent image dimensions");
    std::vector<unsigned char> bytes;
    if (has_suffix(path, ".pgm"))
        bytes = encode_pgm(img);
    else if (has_suffix(path, ".png"))
        bytes = encode_png(img);
    else
        throw IoError("unsupported image extension (want .pgm or .png): " + path);
    atomic_write_file(path, bytes.data(), bytes.size());
}

void atomic_write_file(const std::string& path, const void* data, size_t size) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open for writing: " + tmp);
        os.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!os) throw IoError("short write: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp + " -> " + path + ": " + ec.message());
}

void atomic_write_text(const std::string& path, const std::string& text) {
    atomic_write_file(path, text.data(), text.size());
}

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

Tensor to_tensor(const Image& img) {
    return Tensor::from({img.height, img.width}, img.pix);
}

Image image_from_tensor(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("image tensors are [H,W], got " + shape_str(t.shape()));
    return Image{static_cast<int>(t.shape()[0]), static_cast<int>(t.shape()[1]), t.data()};
}

}  // namespace jointseg
