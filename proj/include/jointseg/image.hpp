#pragma once

#include <string>
#include <vector>

#include "jointseg/errors.hpp"
#include "jointseg/tensor.hpp"

namespace jointseg {

// Grayscale raster, row-major, values in [0,1]. Images loaded from 8-bit
// files hold the exact quantized levels k/255; in-memory prediction maps can
// hold arbitrary doubles in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> pix;

    double& at(int y, int x) { return pix[static_cast<size_t>(y) * width + x]; }
    double at(int y, int x) const { return pix[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return pix.size(); }

    static Image zeros(int h, int w) { return Image{h, w, std::vector<double>(size_t(h) * w, 0.0)}; }
};

// Binarize with the 8-bit convention: byte >= 128 is foreground, i.e.
// v >= 128/255 after the k/255 load mapping.
Image to_mask(const Image& img);
bool is_binary(const Image& img);   // every pixel exactly 0 or 1
double mask_area_fraction(const Image& mask);
Image flip_horizontal(const Image& img);

// Codec dispatch by extension: ".pgm" (binary P5, maxval 255) or ".png"
// (8-bit grayscale; color inputs are converted by the codec). Anything else
// is an IoError. Writers quantize round(v*255) after clamping to [0,1] and
// replace the target atomically (temp file + rename).
Image read_image(const std::string& path);
void write_image_u8(const std::string& path, const Image& img);

// Raw byte-level helpers (used by the codecs and the deterministic-output
// tests).
std::vector<unsigned char> encode_pgm(const Image& img);
Image decode_pgm(const std::vector<unsigned char>& bytes, const std::string& origin);

// Whole-file atomic write: content lands under `path` completely or not at
// all (write to `path.tmp`, then rename).
void atomic_write_file(const std::string& path, const void* data, size_t size);
void atomic_write_text(const std::string& path, const std::string& text);
std::vector<unsigned char> read_file_bytes(const std::string& path);

// Tensor bridge: [H,W] tensors, no gradient tracking on the way in.
Tensor to_tensor(const Image& img);
Image image_from_tensor(const Tensor& t);

}  // namespace jointseg
