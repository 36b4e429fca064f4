#include "iwm/image.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace iwm {
namespace img {

namespace {

inline float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

inline int reflect(int i, int n) {
    // mirror with edge repeat: -1 -> 0, n -> n-1
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

} // namespace

void check_image(const Tensor& t) {
    if (t.ndim() != 3 || t.shape()[0] != 3) throw TensorError("image must be [3,H,W], got " + shape_str(t.shape()));
    if (t.dtype() != Dtype::F32) throw TensorError("image must be f32");
}

int height(const Tensor& t) { return static_cast<int>(t.shape()[1]); }
int width(const Tensor& t) { return static_cast<int>(t.shape()[2]); }

double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

void rgb_to_hsv(double r, double g, double b, double* h, double* s, double* v) {
    double mx = std::max({r, g, b});
    double mn = std::min({r, g, b});
    double d = mx - mn;
    *v = mx;
    *s = mx <= 0.0 ? 0.0 : d / mx;
    if (d <= 0.0) {
        *h = 0.0;
        return;
    }
    double hh;
    if (mx == r)
        hh = (g - b) / d;
    else if (mx == g)
        hh = (b - r) / d + 2.0;
    else
        hh = (r - g) / d + 4.0;
    hh /= 6.0;
    if (hh < 0.0) hh += 1.0;
    *h = hh;
}

void hsv_to_rgb(double h, double s, double v, double* r, double* g, double* b) {
    h -= std::floor(h);
    double hh = h * 6.0;
    int sector = static_cast<int>(hh);
    if (sector == 6) sector = 5;
    double f = hh - sector;
    double p = v * (1.0 - s);
    double q = v * (1.0 - s * f);
    double t = v * (1.0 - s * (1.0 - f));
    switch (sector) {
    case 0: *r = v; *g = t; *b = p; break;
    case 1: *r = q; *g = v; *b = p; break;
    case 2: *r = p; *g = v; *b = t; break;
    case 3: *r = p; *g = q; *b = v; break;
    case 4: *r = t; *g = p; *b = v; break;
    default: *r = v; *g = p; *b = q; break;
    }
}

Tensor to_grayscale(const Tensor& im) {
    check_image(im);
    const int n = height(im) * width(im);
    Tensor out = Tensor::zeros(im.shape(), Dtype::F32);
    const float* p = im.f32();
    float* o = out.f32();
    for (int i = 0; i < n; ++i) {
        float g = clamp01(static_cast<float>(luma(p[i], p[n + i], p[2 * n + i])));
        o[i] = g;
        o[n + i] = g;
        o[2 * n + i] = g;
    }
    return out;
}

Tensor adjust_brightness(const Tensor& im, double factor) {
    check_image(im);
    Tensor out = Tensor::zeros(im.shape(), Dtype::F32);
    const float* p = im.f32();
    float* o = out.f32();
    const float f = static_cast<float>(factor);
    for (int64_t i = 0; i < im.numel(); ++i) o[i] = clamp01(f * p[i]);
    return out;
}

Tensor adjust_contrast(const Tensor& im, double factor) {
    check_image(im);
    const int n = height(im) * width(im);
    const float* p = im.f32();
    double mu = 0.0;
    for (int i = 0; i < n; ++i) mu += luma(p[i], p[n + i], p[2 * n + i]);
    mu /= n;
    Tensor out = Tensor::zeros(im.shape(), Dtype::F32);
    float* o = out.f32();
    const float f = static_cast<float>(factor);
    const float m = static_cast<float>(mu);
    for (int64_t i = 0; i < im.numel(); ++i) o[i] = clamp01(m + f * (p[i] - m));
    return out;
}

Tensor adjust_saturation(const Tensor& im, double factor) {
    check_image(im);
    const int n = height(im) * width(im);
    Tensor out = Tensor::zeros(im.shape(), Dtype::F32);
    const float* p = im.f32();
    float* o = out.f32();
    const float f = static_cast<float>(factor);
    for (int i = 0; i < n; ++i) {
        float g = static_cast<float>(luma(p[i], p[n + i], p[2 * n + i]));
        o[i] = clamp01(g + f * (p[i] - g));
        o[n + i] = clamp01(g + f * (p[n + i] - g));
        o[2 * n + i] = clamp01(g + f * (p[2 * n + i] - g));
    }
    return out;
}

Tensor adjust_hue(const Tensor& im, double delta) {
    check_image(im);
    const int n = height(im) * width(im);
    Tensor out = Tensor::zeros(im.shape(), Dtype::F32);
    const float* p = im.f32();
    float* o = out.f32();
    for (int i = 0; i < n; ++i) {
        double h, s, v, r, g, b;
        rgb_to_hsv(p[i], p[n + i], p[2 * n + i], &h, &s, &v);
        hsv_to_rgb(h + delta, s, v, &r, &g, &b);
        o[i] = clamp01(static_cast<float>(r));
        o[n + i] = clamp01(static_cast<float>(g));
        o[2 * n + i] = clamp01(static_cast<float>(b));
    }
    return out;
}

Tensor gaussian_blur(const Tensor& im, double sigma) {
    check_image(im);
    if (sigma <= 0.0) throw TensorError("gaussian_blur: sigma must be positive");
    const int h = height(im), w = width(im);
    const int half = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<float> k(static_cast<size_t>(2 * half + 1));
    double sum = 0.0;
    for (int i = -half; i <= half; ++i) {
        double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + half)] = static_cast<float>(v);
        sum += v;
    }
    for (auto& v : k) v = static_cast<float>(v / sum);

    Tensor tmp = Tensor::zeros(im.shape(), Dtype::F32);
    Tensor out = Tensor::zeros(im.shape(), Dtype::F32);
    const float* p = im.f32();
    float* t = tmp.f32();
    float* o = out.f32();
    for (int c = 0; c < 3; ++c) {
        const float* src = p + static_cast<int64_t>(c) * h * w;
        float* mid = t + static_cast<int64_t>(c) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float acc = 0.0f;
                for (int i = -half; i <= half; ++i)
                    acc += k[static_cast<size_t>(i + half)] * src[y * w + reflect(x + i, w)];
                mid[y * w + x] = acc;
            }
        float* dst = o + static_cast<int64_t>(c) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float acc = 0.0f;
                for (int i = -half; i <= half; ++i)
                    acc += k[static_cast<size_t>(i + half)] * mid[reflect(y + i, h) * w + x];
                dst[y * w + x] = clamp01(acc);
            }
    }
    return out;
}

Tensor solarize(const Tensor& im, double threshold) {
    check_image(im);
    Tensor out = Tensor::zeros(im.shape(), Dtype::F32);
    const float* p = im.f32();
    float* o = out.f32();
    const float th = static_cast<float>(threshold);
    for (int64_t i = 0; i < im.numel(); ++i) o[i] = clamp01(p[i] >= th ? 1.0f - p[i] : p[i]);
    return out;
}

Tensor hflip(const Tensor& im) {
    check_image(im);
    const int h = height(im), w = width(im);
    Tensor out = Tensor::zeros(im.shape(), Dtype::F32);
    const float* p = im.f32();
    float* o = out.f32();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                o[(static_cast<int64_t>(c) * h + y) * w + x] =
                    p[(static_cast<int64_t>(c) * h + y) * w + (w - 1 - x)];
    return out;
}

Tensor crop_resize(const Tensor& im, int top, int left, int crop_h, int crop_w, int out_h, int out_w) {
    check_image(im);
    const int h = height(im), w = width(im);
    if (top < 0 || left < 0 || crop_h <= 0 || crop_w <= 0 || top + crop_h > h || left + crop_w > w)
        throw TensorError("crop_resize: crop outside image bounds");
    Tensor out = Tensor::zeros({3, out_h, out_w}, Dtype::F32);
    const float* p = im.f32();
    float* o = out.f32();
    const double sy = static_cast<double>(crop_h) / out_h;
    const double sx = static_cast<double>(crop_w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        if (fy < 0) fy = 0;
        if (fy > crop_h - 1) fy = crop_h - 1;
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, crop_h - 1);
        const float wy = static_cast<float>(fy - y0);
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            if (fx < 0) fx = 0;
            if (fx > crop_w - 1) fx = crop_w - 1;
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, crop_w - 1);
            const float wx = static_cast<float>(fx - x0);
            for (int c = 0; c < 3; ++c) {
                const float* src = p + (static_cast<int64_t>(c) * h + top) * w + left;
                const float v00 = src[y0 * w + x0];
                const float v01 = src[y0 * w + x1];
                const float v10 = src[y1 * w + x0];
                const float v11 = src[y1 * w + x1];
                const float v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
                o[(static_cast<int64_t>(c) * out_h + y) * out_w + x] = clamp01(v);
            }
        }
    }
    return out;
}

Tensor resize(const Tensor& im, int out_h, int out_w) {
    return crop_resize(im, 0, 0, height(im), width(im), out_h, out_w);
}

} // namespace img
} // namespace iwm
