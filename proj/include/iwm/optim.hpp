#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "iwm/tensor.hpp"

namespace iwm {

// Named parameter tree. std::map keeps iteration order sorted by name, so
// every walk over a store is deterministic.
using ParamStore = std::map<std::string, Tensor>;

uint64_t store_hash(const ParamStore& store);
int64_t store_numel(const ParamStore& store);

// teacher <- momentum * teacher + (1 - momentum) * student, elementwise
void ema_update(ParamStore& teacher, const ParamStore& student, double momentum);

struct AdamWState {
    Tensor m;
    Tensor v;
    int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr = 0.0;          // current learning rate
    double weight_decay = 0.0; // current decoupled decay coefficient
};

// w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w, with bias-corrected
// moments; t is incremented before the correction.
void adamw_step(AdamWState& state, Tensor& param, const Tensor& grad);

enum class ScheduleKind { WarmupCosine, Cosine };

// The scheduler horizon is stretch * total_steps; training normally stops at
// total_steps, before the schedule reaches its end value.
struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::WarmupCosine;
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
    double stretch = 1.25;
    double start = 0.0;
    double peak = 0.0;
    double end = 0.0;
};

double schedule_value(const ScheduleSpec& spec, int64_t step);

} // namespace iwm
