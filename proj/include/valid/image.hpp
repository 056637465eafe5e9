#pragma once

#include <string>
#include <vector>

#include "valid/tensor.hpp"

namespace valid {

// RGB image, values in [0,1], row-major channel-last storage.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> values;  // height * width * 3

    Image() = default;
    Image(int h, int w) : height(h), width(w), values(static_cast<size_t>(h) * w * 3, 0.0) {}

    static Image white(int h, int w) {
        Image img(h, w);
        std::fill(img.values.begin(), img.values.end(), 1.0);
        return img;
    }

    double& at(int y, int x, int c) { return values[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return values[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    size_t numel() const { return values.size(); }
};

// [3, H, W] tensor view of an image and back
Tensor image_to_chw(const Image& img);
Image chw_to_image(const Tensor& t, bool clamp01 = false);

// mean over all pixels and channels of the squared difference
double image_mse(const Image& a, const Image& b);

// 8-bit RGB PNG; quantization round(v * 255) at save, /255 at load
void save_png(const Image& img, const std::string& path);
Image load_png(const std::string& path);
// width/height from the header without decoding pixel data
std::pair<int, int> png_dimensions(const std::string& path);

}  // namespace valid
