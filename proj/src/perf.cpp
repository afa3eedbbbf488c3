#include "medk/perf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace medk {

void HardwareSpec::validate() const {
    if (peak_flops <= 0.0 || bandwidth <= 0.0)
        throw std::invalid_argument("hardware peak and bandwidth must be positive");
}

HardwareSpec hw_preset(const std::string& name) {
    if (name == "a100") return {"a100", 312e12, 1935e9};
    if (name == "a40") return {"a40", 149.7e12, 696e9};
    if (name == "a6000") return {"a6000", 154.8e12, 768e9};
    throw std::invalid_argument("unknown hardware preset: " + name);
}

PhaseShape model_preset(const std::string& name) {
    PhaseShape s;
    if (name == "7b") {
        s.h = 4096; s.i = 11008; s.n = 32; s.d = 128;
    } else if (name == "13b") {
        s.h = 5120; s.i = 13824; s.n = 40; s.d = 128;
    } else if (name == "33b") {
        s.h = 6656; s.i = 17920; s.n = 52; s.d = 128;
    } else {
        throw std::invalid_argument("unknown model preset: " + name);
    }
    return s;
}

OpCost op_cost(Operator op, const PhaseShape& shape) {
    double b = shape.b, s = shape.s, h = shape.h, i = shape.i, n = shape.n, d = shape.d;
    // decode is the q = 1 case; prefill processes s fresh tokens, no cache
    double q = shape.phase == Phase::decode ? 1.0 : (shape.phase == Phase::prefill ? s : shape.q);
    switch (op) {
        case Operator::qkv_linear:
            return {2.0 * b * q * h * h, 2.0 * (2.0 * b * q * h + h * h)};
        case Operator::attn_matmul_pair:
            if (shape.phase == Phase::prefill)
                return {4.0 * b * n * s * s * d, 4.0 * (b * s * s * n + 2.0 * b * s * n * d)};
            return {4.0 * b * n * q * s * d, 4.0 * (b * s * q * n + b * (s + q) * n * d)};
        case Operator::mlp_up:
        case Operator::mlp_gate:
        case Operator::mlp_down:
            return {2.0 * b * q * h * i, 2.0 * (b * q * (h + i) + h * i)};
    }
    throw std::invalid_argument("unknown operator");
}

OperatorProfile roofline(Operator op, const PhaseShape& shape, const HardwareSpec& hw) {
    hw.validate();
    OpCost c = op_cost(op, shape);
    OperatorProfile p;
    p.op = op;
    p.flops = c.flops;
    p.bytes = c.bytes;
    p.oi = c.flops / c.bytes;
    p.time = std::max(c.flops / hw.peak_flops, c.bytes / hw.bandwidth);
    p.achieved_flops = std::min(hw.peak_flops, p.oi * hw.bandwidth);
    return p;
}

double block_latency(const PhaseShape& shape, const HardwareSpec& hw) {
    if (shape.phase == Phase::prefill)
        throw std::invalid_argument("block latency is defined for decode/parallel phases");
    double t = 0.0;
    t += 3.0 * roofline(Operator::qkv_linear, shape, hw).time;  // XW_Q, XW_K, XW_V
    t += roofline(Operator::attn_matmul_pair, shape, hw).time;  // QK^T and PV
    t += roofline(Operator::mlp_up, shape, hw).time;
    t += roofline(Operator::mlp_gate, shape, hw).time;
    t += roofline(Operator::mlp_down, shape, hw).time;
    return t;
}

double acc_rate_model(double q, const AccRateModel& m) {
    if (q < 1.0) throw std::invalid_argument("candidate count must be >= 1");
    if (m.log_base <= 1.0) throw std::invalid_argument("log base must exceed 1");
    return std::max(1.0, m.c * std::log(q) / std::log(m.log_base));
}

SpeedupPoint predict_speedup(double q, PhaseShape shape, const HardwareSpec& hw,
                             const AccRateModel& m) {
    shape.phase = Phase::parallel;
    shape.q = q;
    PhaseShape base = shape;
    base.q = 1.0;
    SpeedupPoint p;
    p.acc_rate = acc_rate_model(q, m);
    p.overhead = block_latency(shape, hw) / block_latency(base, hw);
    p.speedup = p.acc_rate / p.overhead;
    return p;
}

int worker_threads() {
    unsigned hc = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MEDK_THREADS")) {
        try {
            int cap = std::stoi(env);
            if (cap >= 1) return std::min<int>(cap, static_cast<int>(hc));
        } catch (const std::exception&) {
        }
    }
    return static_cast<int>(hc);
}

std::vector<SweepRow> sweep(const std::vector<PhaseShape>& shapes,
                            const std::vector<HardwareSpec>& hws, const std::vector<double>& qs,
                            const AccRateModel& m) {
    if (shapes.empty() || hws.empty() || qs.empty())
        throw std::invalid_argument("sweep grids must be non-empty");
    struct Cell {
        size_t hw, shape, q;
    };
    std::vector<Cell> cells;
    for (size_t a = 0; a < hws.size(); ++a)
        for (size_t b = 0; b < shapes.size(); ++b)
            for (size_t c = 0; c < qs.size(); ++c) cells.push_back({a, b, c});

    std::vector<SweepRow> rows(cells.size());
    auto work = [&](size_t begin, size_t end) {
        for (size_t idx = begin; idx < end; ++idx) {
            const Cell& cell = cells[idx];
            PhaseShape shape = shapes[cell.shape];
            const HardwareSpec& hw = hws[cell.hw];
            double q = qs[cell.q];
            SpeedupPoint p = predict_speedup(q, shape, hw, m);
            shape.phase = Phase::parallel;
            shape.q = q;
            rows[idx] = {hw.name,
                         shape.b,
                         shape.s,
                         q,
                         p.acc_rate,
                         p.overhead,
                         p.speedup,
                         roofline(Operator::attn_matmul_pair, shape, hw).oi,
                         roofline(Operator::mlp_up, shape, hw).oi};
        }
    };
    int threads = std::min<int>(worker_threads(), static_cast<int>(cells.size()));
    if (threads <= 1) {
        work(0, cells.size());
    } else {
        std::vector<std::thread> pool;
        size_t chunk = (cells.size() + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            size_t begin = t * chunk;
            size_t end = std::min(cells.size(), begin + chunk);
            if (begin >= end) break;
            pool.emplace_back(work, begin, end);
        }
        for (auto& th : pool) th.join();
    }
    return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "hw,b,s,q,acc_rate,overhead,speedup,oi_attn,oi_mlp\n";
    out.precision(10);
    for (const auto& r : rows)
        out << r.hw << "," << r.b << "," << r.s << "," << r.q << "," << r.acc_rate << ","
            << r.overhead << "," << r.speedup << "," << r.oi_attn << "," << r.oi_mlp << "\n";
    return out.str();
}

std::string sweep_to_long_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "hw,b,s,q,metric,value\n";
    out.precision(10);
    for (const auto& r : rows) {
        auto emit = [&](const char* metric, double v) {
            out << r.hw << "," << r.b << "," << r.s << "," << r.q << "," << metric << "," << v
                << "\n";
        };
        emit("acc_rate", r.acc_rate);
        emit("overhead", r.overhead);
        emit("speedup", r.speedup);
        emit("oi_attn", r.oi_attn);
        emit("oi_mlp", r.oi_mlp);
    }
    return out.str();
}

double fit_accrate_constant(const std::vector<std::pair<double, double>>& q_acc, double log_base) {
    double num = 0.0, den = 0.0;
    for (const auto& [q, acc] : q_acc) {
        if (q <= 1.0) continue;
        double l = std::log(q) / std::log(log_base);
        num += acc * l;
        den += l * l;
    }
    if (den == 0.0) throw std::invalid_argument("need at least one point with q > 1");
    return num / den;
}

}  // namespace medk
