#pragma once

#include <string>
#include <vector>

namespace medk {

// Analytical roofline model of the eight matmul-bound operators in one
// decoder block, plus the candidate-count speedup simulation built on it.

struct HardwareSpec {
    std::string name;
    double peak_flops;  // FLOP/s
    double bandwidth;   // bytes/s

    void validate() const;
};

// A100 80GB PCIe: 312 TFLOP/s fp16 peak, 1935 GB/s HBM.
// A40 (vendor datasheet): 149.7 TFLOP/s fp16 tensor core (dense), 696 GB/s.
// RTX A6000 (vendor datasheet): 154.8 TFLOP/s fp16 tensor core (dense), 768 GB/s.
HardwareSpec hw_preset(const std::string& name);

enum class Phase { prefill, decode, parallel };

struct PhaseShape {
    double b = 1;     // batch
    double s = 1024;  // committed sequence length
    double q = 1;     // candidate tokens processed per step (1 = plain decoding)
    double h = 4096;  // hidden dim
    double i = 11008; // intermediate dim
    double n = 32;    // attention heads
    double d = 128;   // head dim
    Phase phase = Phase::parallel;
};

// Llama-style shape presets: 7b, 13b, 33b.
PhaseShape model_preset(const std::string& name);

enum class Operator { qkv_linear, attn_matmul_pair, mlp_up, mlp_gate, mlp_down };

struct OpCost {
    double flops;
    double bytes;
};

// Closed-form cost of one operator. Attention intermediates move 4 bytes per
// element, linear-layer tensors 2; the decode phase is q = 1 and prefill
// processes s tokens with an empty cache.
OpCost op_cost(Operator op, const PhaseShape& shape);

struct OperatorProfile {
    Operator op;
    double flops, bytes;
    double oi;              // flops / bytes
    double time;            // max(flops/peak, bytes/bandwidth)
    double achieved_flops;  // min(peak, oi * bandwidth)
};

OperatorProfile roofline(Operator op, const PhaseShape& shape, const HardwareSpec& hw);

// Sum of the roofline times of XW_Q, XW_K, XW_V, QK^T+PV, XW_u, XW_g, XW_d.
double block_latency(const PhaseShape& shape, const HardwareSpec& hw);

struct AccRateModel {
    double c = 0.477;
    double log_base = 2.718281828459045;  // natural log by default
};

// acc_rate = max(1, c * log_base(q)); a decoding step always yields a token.
double acc_rate_model(double q, const AccRateModel& m);

struct SpeedupPoint {
    double acc_rate, overhead, speedup;
};

// overhead = block_latency(q) / block_latency(1); speedup = acc_rate/overhead.
SpeedupPoint predict_speedup(double q, PhaseShape shape, const HardwareSpec& hw,
                             const AccRateModel& m);

struct SweepRow {
    std::string hw;
    double b, s, q;
    double acc_rate, overhead, speedup;
    double oi_attn, oi_mlp;
};

// Cartesian sweep; parallelism capped by the MEDK_THREADS environment
// variable. Row order is deterministic.
std::vector<SweepRow> sweep(const std::vector<PhaseShape>& shapes,
                            const std::vector<HardwareSpec>& hws, const std::vector<double>& qs,
                            const AccRateModel& m);

std::string sweep_to_csv(const std::vector<SweepRow>& rows);
// One row per (cell, metric), gnuplot-friendly.
std::string sweep_to_long_csv(const std::vector<SweepRow>& rows);

// Least-squares fit of c in acc = c * log_base(q) through the origin.
double fit_accrate_constant(const std::vector<std::pair<double, double>>& q_acc, double log_base);

int worker_threads();  // MEDK_THREADS cap, default: hardware concurrency

}  // namespace medk
