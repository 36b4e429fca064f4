#include "iwm/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "iwm/rng.hpp"

namespace iwm {

uint64_t store_hash(const ParamStore& store) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : store) {
        h = fnv1a64(name.data(), name.size(), h);
        uint64_t th = t.content_hash();
        h = fnv1a64(&th, sizeof(th), h);
    }
    return h;
}

int64_t store_numel(const ParamStore& store) {
    int64_t n = 0;
    for (const auto& [name, t] : store) n += t.numel();
    return n;
}

void ema_update(ParamStore& teacher, const ParamStore& student, double momentum) {
    if (momentum < 0.0 || momentum > 1.0) throw std::invalid_argument("ema momentum outside [0,1]");
    if (teacher.size() != student.size()) throw std::invalid_argument("ema: parameter tree mismatch");
    auto it = teacher.begin();
    auto is = student.begin();
    for (; it != teacher.end(); ++it, ++is) {
        if (it->first != is->first || it->second.shape() != is->second.shape())
            throw std::invalid_argument("ema: parameter tree mismatch at '" + it->first + "'");
        Tensor& t = it->second;
        const Tensor& s = is->second;
        if (t.dtype() == Dtype::F32) {
            float* tp = t.f32();
            const float* sp = s.f32();
            const float mo = static_cast<float>(momentum);
            for (int64_t i = 0; i < t.numel(); ++i) tp[i] = mo * tp[i] + (1.0f - mo) * sp[i];
        } else {
            double* tp = t.f64();
            const double* sp = s.f64();
            for (int64_t i = 0; i < t.numel(); ++i) tp[i] = momentum * tp[i] + (1.0 - momentum) * sp[i];
        }
    }
}

void adamw_step(AdamWState& state, Tensor& param, const Tensor& grad) {
    if (grad.shape() != param.shape()) throw std::invalid_argument("adamw: grad shape mismatch");
    if (!grad.all_finite()) throw std::runtime_error("adamw: non-finite gradient");
    if (!state.m.defined()) state.m = Tensor::zeros(param.shape(), param.dtype());
    if (!state.v.defined()) state.v = Tensor::zeros(param.shape(), param.dtype());
    if (state.m.shape() != param.shape() || state.v.shape() != param.shape())
        throw std::invalid_argument("adamw: moment shape mismatch");

    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));

    if (param.dtype() == Dtype::F32) {
        float* w = param.f32();
        const float* g = grad.f32();
        float* m = state.m.f32();
        float* v = state.v.f32();
        const float b1 = static_cast<float>(state.beta1), b2 = static_cast<float>(state.beta2);
        const float lr = static_cast<float>(state.lr), wd = static_cast<float>(state.weight_decay);
        const float eps = static_cast<float>(state.eps);
        const float ibc1 = static_cast<float>(1.0 / bc1), ibc2 = static_cast<float>(1.0 / bc2);
        for (int64_t i = 0; i < param.numel(); ++i) {
            m[i] = b1 * m[i] + (1.0f - b1) * g[i];
            v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
            const float mh = m[i] * ibc1;
            const float vh = v[i] * ibc2;
            w[i] -= lr * mh / (std::sqrt(vh) + eps) + lr * wd * w[i];
        }
    } else {
        double* w = param.f64();
        const double* g = grad.f64();
        double* m = state.m.f64();
        double* v = state.v.f64();
        for (int64_t i = 0; i < param.numel(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= state.lr * mh / (std::sqrt(vh) + state.eps) + state.lr * state.weight_decay * w[i];
        }
    }
}

double schedule_value(const ScheduleSpec& spec, int64_t step) {
    if (step < 0) step = 0;
    const double horizon = spec.stretch * static_cast<double>(spec.total_steps);
    if (spec.kind == ScheduleKind::Cosine) {
        double tau = horizon > 0 ? static_cast<double>(step) / horizon : 1.0;
        if (tau > 1.0) tau = 1.0;
        return spec.end + (spec.start - spec.end) * 0.5 * (1.0 + std::cos(M_PI * tau));
    }
    if (spec.warmup_steps > 0 && step < spec.warmup_steps)
        return spec.start +
               (spec.peak - spec.start) * static_cast<double>(step) / static_cast<double>(spec.warmup_steps);
    const double denom = horizon - static_cast<double>(spec.warmup_steps);
    double tau = denom > 0 ? static_cast<double>(step - spec.warmup_steps) / denom : 1.0;
    if (tau > 1.0) tau = 1.0;
    return spec.end + (spec.peak - spec.end) * 0.5 * (1.0 + std::cos(M_PI * tau));
}

} // namespace iwm
