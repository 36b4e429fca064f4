#pragma once

#include "iwm/tensor.hpp"

namespace iwm {

// Images are CHW f32 tensors with 3 channels and values in [0,1]. Every
// transform clamps its output back into [0,1].
namespace img {

void check_image(const Tensor& t);
int height(const Tensor& t);
int width(const Tensor& t);

double luma(double r, double g, double b);
void rgb_to_hsv(double r, double g, double b, double* h, double* s, double* v);
void hsv_to_rgb(double h, double s, double v, double* r, double* g, double* b);

Tensor to_grayscale(const Tensor& im);
Tensor adjust_brightness(const Tensor& im, double factor);
Tensor adjust_contrast(const Tensor& im, double factor);   // blend with mean luma
Tensor adjust_saturation(const Tensor& im, double factor); // blend with per-pixel gray
Tensor adjust_hue(const Tensor& im, double delta);         // delta in turns, [-0.5, 0.5]
Tensor gaussian_blur(const Tensor& im, double sigma);      // separable, reflect borders
Tensor solarize(const Tensor& im, double threshold = 0.5);
Tensor hflip(const Tensor& im);

// Bilinear resample of the crop rectangle to (out_h, out_w). Half-pixel
// center convention, no antialiasing.
Tensor crop_resize(const Tensor& im, int top, int left, int crop_h, int crop_w, int out_h, int out_w);
Tensor resize(const Tensor& im, int out_h, int out_w);

} // namespace img

} // namespace iwm
