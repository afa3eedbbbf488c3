// medk: train / calibrate / build-tree / decode / bench / perf for a small
// multi-head parallel-decoding transformer.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "medk/checkpoint.hpp"
#include "medk/decode.hpp"
#include "medk/manifest.hpp"
#include "medk/model.hpp"
#include "medk/perf.hpp"
#include "medk/train.hpp"
#include "medk/tree.hpp"

using namespace medk;

namespace {

std::vector<std::string> read_lines(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    if (lines.empty()) throw DataError("no usable lines in " + path);
    return lines;
}

std::vector<double> parse_list(const std::string& csv) {
    std::vector<double> out;
    std::istringstream in(csv);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    if (out.empty()) throw CLI::ValidationError("empty numeric list: " + csv);
    return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    for (double v : parse_list(csv)) out.push_back(static_cast<int>(v));
    return out;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::istringstream in(read_file(path));
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("expected key=value in " + path + ": " + line);
        out[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return out;
}

struct ManifestScope {
    RunManifest m;
    std::string primary_artifact;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    void input(const std::string& path) { m.input_digests[path] = file_digest(path); }
    void artifact(const std::string& path) { m.artifact_digests[path] = file_digest(path); }
    void finish() {
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                        .count();
        write_file_atomic(primary_artifact + ".manifest.json", m.to_json());
    }
};

// Minimal SVG polyline chart: one series per label, linear axes.
std::string render_svg(const std::string& title,
                       const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
    const int w = 720, h = 420, ml = 60, mr = 20, mt = 40, mb = 45;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& [label, pts] : series)
        for (auto [x, y] : pts) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmax <= xmin) xmax = xmin + 1;
    if (ymax <= ymin) ymax = ymin + 1;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
    auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    std::ostringstream out;
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << w / 2 << "' y='24' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";
    out << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", ymin);
    out << "<text x='8' y='" << h - mb << "' font-size='11'>" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.4g", ymax);
    out << "<text x='8' y='" << mt + 6 << "' font-size='11'>" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.4g", xmin);
    out << "<text x='" << ml << "' y='" << h - mb + 16 << "' font-size='11'>" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.4g", xmax);
    out << "<text x='" << w - mr - 30 << "' y='" << h - mb + 16 << "' font-size='11'>" << buf
        << "</text>\n";
    int ci = 0;
    for (const auto& [label, pts] : series) {
        const char* color = colors[ci % 6];
        out << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
        for (auto [x, y] : pts) out << px(x) << "," << py(y) << " ";
        out << "'/>\n";
        out << "<text x='" << w - mr - 150 << "' y='" << mt + 14 * (ci + 1) << "' font-size='11' fill='"
            << color << "'>" << label << "</text>\n";
        ++ci;
    }
    out << "</svg>\n";
    return out.str();
}

// --- subcommand configs ---

struct TrainArgs {
    std::string corpus, out, mode = "medusa2", init, curve, lambda0_schedule = "constant";
    TrainConfig tc;
    int heads = 5, vocab = 257, dim = 64, layers = 2, attn_heads = 2, ffn = 128, max_seq = 512;
    uint64_t model_seed = 0;
    double distill_temperature = 0.3;
    int distill_tokens = 4096;
};

int run_train(const TrainArgs& a) {
    ManifestScope ms;
    ms.m.command = "train";
    ms.primary_artifact = a.out;
    ms.m.seed = a.tc.rng_seed;
    ms.input(a.corpus);

    Model model = [&] {
        if (!a.init.empty()) {
            ms.input(a.init);
            return load_checkpoint(a.init);
        }
        ModelConfig mc;
        mc.vocab_size = a.vocab;
        mc.hidden_dim = a.dim;
        mc.num_layers = a.layers;
        mc.num_attn_heads = a.attn_heads;
        mc.head_dim = a.dim / std::max(1, a.attn_heads);
        mc.intermediate_dim = a.ffn;
        mc.num_medusa_heads = a.heads;
        mc.max_seq_len = a.max_seq;
        mc.rng_seed = a.model_seed;
        return init_model(mc);
    }();

    TrainConfig tc = a.tc;
    tc.lambda0_schedule = a.lambda0_schedule == "sine" ? Lambda0Schedule::sine_ramp
                                                       : Lambda0Schedule::constant;
    TrainMode mode;
    if (a.mode == "medusa1") {
        mode = TrainMode::medusa1;
    } else if (a.mode == "medusa2") {
        mode = TrainMode::medusa2;
    } else if (a.mode == "selfdistill") {
        mode = TrainMode::selfdistill;
    } else {
        throw CLI::ValidationError("--mode must be medusa1|medusa2|selfdistill");
    }

    std::vector<std::string> lines = read_lines(a.corpus);
    if (mode == TrainMode::selfdistill) {
        lines = generate_self_distill_corpus(model, lines, a.distill_temperature, a.distill_tokens,
                                             tc.rng_seed);
    }
    std::vector<int> stream = corpus_stream(lines);
    std::vector<CurveRow> curve = train(model, stream, tc, mode);

    save_checkpoint(model, a.out);
    std::string curve_path = a.curve.empty() ? a.out + ".curve.csv" : a.curve;
    write_file_atomic(curve_path, curve_to_csv(curve));
    ms.artifact(a.out);
    ms.artifact(curve_path);
    ms.m.config = {{"mode", a.mode},
                   {"heads", std::to_string(model.cfg.num_medusa_heads)},
                   {"lambda_base", std::to_string(tc.lambda_base)},
                   {"lambda0", std::to_string(tc.lambda0)},
                   {"lr", std::to_string(tc.lr_backbone)},
                   {"heads_lr_mult", std::to_string(tc.lr_heads_multiplier)},
                   {"stage1_steps", std::to_string(tc.stage1_steps)},
                   {"stage2_steps", std::to_string(tc.stage2_steps)},
                   {"lambda0_schedule", a.lambda0_schedule},
                   {"checksum", to_hex(weights_checksum(model))}};
    ms.finish();
    std::cerr << "trained " << a.out << " final loss " << (curve.empty() ? 0.0 : curve.back().loss)
              << "\n";
    return 0;
}

struct CalArgs {
    std::string checkpoint, corpus, out;
    int smax = 10;
};

int run_calibrate(const CalArgs& a) {
    ManifestScope ms;
    ms.m.command = "calibrate";
    ms.primary_artifact = a.out;
    ms.input(a.checkpoint);
    ms.input(a.corpus);
    Model model = load_checkpoint(a.checkpoint);
    std::vector<std::vector<int>> seqs;
    for (const auto& line : read_lines(a.corpus)) {
        auto ids = encode_text(line);
        if (static_cast<int>(ids.size()) > model.cfg.max_seq_len)
            ids.resize(model.cfg.max_seq_len);
        seqs.push_back(std::move(ids));
    }
    AccuracyTable acc = calibrate(model, seqs, a.smax);
    write_file_atomic(a.out, accuracy_to_csv(acc));
    ms.artifact(a.out);
    ms.m.config = {{"smax", std::to_string(a.smax)}};
    ms.finish();
    return 0;
}

struct TreeArgs {
    std::string out, dense, accuracy;
    bool sparse = false;
    int budget = 64, depth = 4;
};

int run_build_tree(const TreeArgs& a) {
    ManifestScope ms;
    ms.m.command = "build-tree";
    ms.primary_artifact = a.out;
    TreeSpec tree;
    if (a.sparse) {
        if (a.accuracy.empty()) throw CLI::ValidationError("--sparse requires --accuracy");
        ms.input(a.accuracy);
        AccuracyTable acc = accuracy_from_csv(read_file(a.accuracy));
        if (a.depth < acc.num_heads()) acc.a.conservativeResize(a.depth, acc.max_rank());
        tree = greedy_sparse_tree(acc, a.budget);
        ms.m.config = {{"budget", std::to_string(a.budget)}, {"depth", std::to_string(a.depth)}};
    } else if (!a.dense.empty()) {
        tree = dense_tree(parse_int_list(a.dense));
        ms.m.config = {{"dense", a.dense}};
    } else {
        throw CLI::ValidationError("need --dense s1,s2,... or --sparse");
    }
    write_file_atomic(a.out, tree_to_json(tree) + "\n");
    ms.artifact(a.out);
    ms.finish();
    std::cerr << "tree with " << tree.size() << " nodes, depth " << tree.depth() << "\n";
    return 0;
}

struct DecodeArgs {
    std::string checkpoint, tree, prompt, prompt_file, out, trace, scheme = "greedy";
    DecodeConfig dc;
};

DecodeConfig make_decode_config(const DecodeArgs& a) {
    DecodeConfig dc = a.dc;
    dc.scheme = scheme_from_string(a.scheme);
    dc.tree = tree_from_json(read_file(a.tree));
    dc.collect_trace = !a.trace.empty();
    return dc;
}

int run_decode(const DecodeArgs& a) {
    ManifestScope ms;
    ms.m.command = "decode";
    ms.primary_artifact = a.out.empty() ? (a.tree + ".decode") : a.out;
    ms.input(a.checkpoint);
    ms.input(a.tree);
    Model model = load_checkpoint(a.checkpoint);
    DecodeConfig dc = make_decode_config(a);
    std::string prompt_text = a.prompt;
    if (!a.prompt_file.empty()) prompt_text = read_file(a.prompt_file);
    if (prompt_text.empty()) throw CLI::ValidationError("empty prompt");
    DecodeResult r = decode(model, encode_text(prompt_text), dc);
    std::string text = decode_text(r.tokens);
    std::cout << text << "\n";
    if (!a.out.empty()) {
        write_file_atomic(a.out, text);
        ms.artifact(a.out);
    }
    if (!a.trace.empty()) {
        write_file_atomic(a.trace, trace_to_csv(r.trace));
        ms.artifact(a.trace);
    }
    std::cerr << "steps=" << r.metrics.steps << " tokens=" << r.metrics.tokens_generated
              << " acc_rate=" << r.metrics.acceleration_rate << " overhead=" << r.metrics.overhead
              << " speedup=" << r.metrics.speedup << "\n";
    ms.m.config = {{"scheme", a.scheme},
                   {"temperature", std::to_string(dc.temperature)},
                   {"epsilon", std::to_string(dc.epsilon)},
                   {"delta", std::to_string(dc.delta)},
                   {"max_new", std::to_string(dc.max_new_tokens)}};
    ms.m.seed = dc.rng_seed;
    ms.finish();
    return 0;
}

struct BenchArgs {
    std::string checkpoint, prompts, csv, scheme = "greedy";
    std::vector<std::string> trees;
    bool fit = false;
    DecodeConfig dc;
};

int run_bench(const BenchArgs& a) {
    ManifestScope ms;
    ms.m.command = "bench";
    ms.primary_artifact = a.csv;
    ms.input(a.checkpoint);
    ms.input(a.prompts);
    Model model = load_checkpoint(a.checkpoint);
    std::vector<std::vector<int>> prompts;
    for (const auto& line : read_lines(a.prompts)) prompts.push_back(encode_text(line));

    std::vector<BenchRow> all;
    std::vector<std::pair<double, double>> fit_points;
    for (const auto& tree_path : a.trees) {
        ms.input(tree_path);
        DecodeConfig dc = a.dc;
        dc.scheme = scheme_from_string(a.scheme);
        dc.tree = tree_from_json(read_file(tree_path));
        std::vector<BenchRow> rows = bench(model, prompts, dc);
        double mean_acc = 0;
        for (auto& r : rows) {
            r.tree = tree_path;
            mean_acc += r.acceleration_rate;
            all.push_back(r);
        }
        fit_points.push_back({static_cast<double>(dc.tree.size()), mean_acc / rows.size()});
    }
    write_file_atomic(a.csv, bench_to_csv(all));
    ms.artifact(a.csv);
    ms.m.config = {{"scheme", a.scheme}, {"temperature", std::to_string(a.dc.temperature)}};
    if (a.fit && fit_points.size() >= 2) {
        double c = fit_accrate_constant(fit_points, std::exp(1.0));
        std::cerr << "fitted acc_rate constant c=" << c << " (natural log)\n";
        ms.m.config["fitted_accrate_c"] = std::to_string(c);
    }
    ms.finish();
    return 0;
}

struct PerfArgs {
    std::string hw = "a100", model = "7b", batch = "1", seq = "1024";
    std::string cands = "1,2,4,8,16,32,64,128,256";
    std::string csv, long_csv, svg, hw_config, model_config;
    double accrate_c = 0.477;
    std::string accrate_base = "e";
};

int run_perf(const PerfArgs& a) {
    ManifestScope ms;
    ms.m.command = "perf";
    ms.primary_artifact = a.csv;

    HardwareSpec hw = a.hw_config.empty() ? hw_preset(a.hw) : [&] {
        auto kv = parse_kv_file(a.hw_config);
        HardwareSpec spec{kv.count("name") ? kv.at("name") : "custom",
                          std::stod(kv.at("peak_flops")), std::stod(kv.at("bandwidth"))};
        spec.validate();
        return spec;
    }();
    PhaseShape base = a.model_config.empty() ? model_preset(a.model) : [&] {
        auto kv = parse_kv_file(a.model_config);
        PhaseShape s;
        s.h = std::stod(kv.at("h"));
        s.i = std::stod(kv.at("i"));
        s.n = std::stod(kv.at("n"));
        s.d = std::stod(kv.at("d"));
        return s;
    }();

    AccRateModel arm;
    arm.c = a.accrate_c;
    arm.log_base = a.accrate_base == "e" ? std::exp(1.0) : std::stod(a.accrate_base);

    std::vector<PhaseShape> shapes;
    for (double b : parse_list(a.batch))
        for (double s : parse_list(a.seq)) {
            PhaseShape sh = base;
            sh.b = b;
            sh.s = s;
            shapes.push_back(sh);
        }
    std::vector<SweepRow> rows = sweep(shapes, {hw}, parse_list(a.cands), arm);
    write_file_atomic(a.csv, sweep_to_csv(rows));
    ms.artifact(a.csv);
    if (!a.long_csv.empty()) {
        write_file_atomic(a.long_csv, sweep_to_long_csv(rows));
        ms.artifact(a.long_csv);
    }
    if (!a.svg.empty()) {
        std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
        for (const auto& r : rows) {
            std::string label = r.hw + " b=" + std::to_string(static_cast<long>(r.b)) +
                                " s=" + std::to_string(static_cast<long>(r.s));
            if (series.empty() || series.back().first != label) series.push_back({label, {}});
            series.back().second.push_back({r.q, r.speedup});
        }
        write_file_atomic(a.svg, render_svg("predicted speedup vs candidate tokens", series));
        ms.artifact(a.svg);
    }
    ms.m.config = {{"hw", hw.name},
                   {"model", a.model},
                   {"accrate_c", std::to_string(arm.c)},
                   {"accrate_base", a.accrate_base}};
    ms.finish();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-head parallel decoding sandbox"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a checkpoint");
    train_cmd->add_option("--corpus", ta.corpus, "UTF-8 corpus, one document per line")->required();
    train_cmd->add_option("--out", ta.out, "output checkpoint path")->required();
    train_cmd->add_option("--mode", ta.mode, "medusa1|medusa2|selfdistill");
    train_cmd->add_option("--init", ta.init, "initial checkpoint (default: fresh model)");
    train_cmd->add_option("--curve", ta.curve, "loss curve CSV (default <out>.curve.csv)");
    train_cmd->add_option("--heads", ta.heads, "number of decoding heads");
    train_cmd->add_option("--lambda-base", ta.tc.lambda_base, "per-head loss decay");
    train_cmd->add_option("--lambda0", ta.tc.lambda0, "joint-loss head weight");
    train_cmd->add_option("--lr", ta.tc.lr_backbone, "peak backbone learning rate");
    train_cmd->add_option("--heads-lr-mult", ta.tc.lr_heads_multiplier, "head LR multiplier");
    train_cmd->add_option("--seed", ta.tc.rng_seed, "training seed");
    train_cmd->add_option("--model-seed", ta.model_seed, "fresh-model init seed");
    train_cmd->add_option("--stage1-steps", ta.tc.stage1_steps, "frozen-backbone steps");
    train_cmd->add_option("--stage2-steps", ta.tc.stage2_steps, "joint steps");
    train_cmd->add_option("--warmup", ta.tc.warmup_steps, "LR warmup steps");
    train_cmd->add_option("--batch-size", ta.tc.batch_size, "sequences per step");
    train_cmd->add_option("--seq-len", ta.tc.seq_len, "tokens per sequence");
    train_cmd->add_option("--lambda0-schedule", ta.lambda0_schedule, "constant|sine");
    train_cmd->add_option("--vocab", ta.vocab, "vocab size (fresh model)");
    train_cmd->add_option("--dim", ta.dim, "hidden dim (fresh model)");
    train_cmd->add_option("--layers", ta.layers, "decoder layers (fresh model)");
    train_cmd->add_option("--attn-heads", ta.attn_heads, "attention heads (fresh model)");
    train_cmd->add_option("--ffn", ta.ffn, "MLP intermediate dim (fresh model)");
    train_cmd->add_option("--max-seq", ta.max_seq, "max sequence length (fresh model)");
    train_cmd->add_option("--distill-temperature", ta.distill_temperature,
                          "sampling temperature for the self-distillation corpus");
    train_cmd->add_option("--distill-tokens", ta.distill_tokens,
                          "tokens to sample for the self-distillation corpus");

    CalArgs ca;
    auto* cal_cmd = app.add_subcommand("calibrate", "measure per-head rank accuracies");
    cal_cmd->add_option("--checkpoint", ca.checkpoint)->required();
    cal_cmd->add_option("--corpus", ca.corpus)->required();
    cal_cmd->add_option("--out", ca.out, "accuracy CSV")->required();
    cal_cmd->add_option("--smax", ca.smax, "ranks to calibrate");

    TreeArgs tra;
    auto* tree_cmd = app.add_subcommand("build-tree", "write a candidate tree");
    tree_cmd->add_option("--out", tra.out)->required();
    tree_cmd->add_option("--dense", tra.dense, "branching factors s1,s2,...");
    tree_cmd->add_flag("--sparse", tra.sparse, "accuracy-optimized sparse tree");
    tree_cmd->add_option("--accuracy", tra.accuracy, "accuracy CSV for --sparse");
    tree_cmd->add_option("--budget", tra.budget, "node budget for --sparse");
    tree_cmd->add_option("--depth", tra.depth, "max depth for --sparse");

    DecodeArgs da;
    auto* dec_cmd = app.add_subcommand("decode", "generate from a prompt");
    dec_cmd->add_option("--checkpoint", da.checkpoint)->required();
    dec_cmd->add_option("--tree", da.tree)->required();
    dec_cmd->add_option("--prompt", da.prompt);
    dec_cmd->add_option("--prompt-file", da.prompt_file);
    dec_cmd->add_option("--out", da.out, "write generated text here");
    dec_cmd->add_option("--scheme", da.scheme, "greedy|typical|rejection");
    dec_cmd->add_option("--temperature", da.dc.temperature);
    dec_cmd->add_option("--epsilon", da.dc.epsilon);
    dec_cmd->add_option("--delta", da.dc.delta);
    dec_cmd->add_option("--max-new", da.dc.max_new_tokens);
    dec_cmd->add_option("--seed", da.dc.rng_seed);
    dec_cmd->add_option("--trace", da.trace, "per-step trace CSV");

    BenchArgs ba;
    auto* bench_cmd = app.add_subcommand("bench", "baseline vs parallel decoding");
    bench_cmd->add_option("--checkpoint", ba.checkpoint)->required();
    bench_cmd->add_option("--tree", ba.trees, "tree json (repeatable)")->required();
    bench_cmd->add_option("--prompts", ba.prompts, "prompt file, one per line")->required();
    bench_cmd->add_option("--csv", ba.csv, "output CSV")->required();
    bench_cmd->add_option("--scheme", ba.scheme, "greedy|typical|rejection");
    bench_cmd->add_option("--temperature", ba.dc.temperature);
    bench_cmd->add_option("--epsilon", ba.dc.epsilon);
    bench_cmd->add_option("--delta", ba.dc.delta);
    bench_cmd->add_option("--max-new", ba.dc.max_new_tokens);
    bench_cmd->add_option("--seed", ba.dc.rng_seed);
    bench_cmd->add_flag("--fit-accrate", ba.fit,
                        "fit acc_rate = c*log(nodes) across the given trees");

    PerfArgs pa;
    auto* perf_cmd = app.add_subcommand("perf", "analytical roofline sweep");
    perf_cmd->add_option("--hw", pa.hw, "a100|a40|a6000");
    perf_cmd->add_option("--model", pa.model, "7b|13b|33b");
    perf_cmd->add_option("--batch", pa.batch, "batch sizes, comma separated");
    perf_cmd->add_option("--seq", pa.seq, "sequence lengths, comma separated");
    perf_cmd->add_option("--cands", pa.cands, "candidate token counts, comma separated");
    perf_cmd->add_option("--accrate-c", pa.accrate_c);
    perf_cmd->add_option("--accrate-base", pa.accrate_base, "e or a number");
    perf_cmd->add_option("--csv", pa.csv, "output CSV")->required();
    perf_cmd->add_option("--long-csv", pa.long_csv, "long-format CSV");
    perf_cmd->add_option("--svg", pa.svg, "speedup chart");
    perf_cmd->add_option("--hw-config", pa.hw_config, "key=value file: name, peak_flops, bandwidth");
    perf_cmd->add_option("--model-config", pa.model_config, "key=value file: h, i, n, d");

    try {
        app.parse(argc, argv);
        if (*train_cmd) return run_train(ta);
        if (*cal_cmd) return run_calibrate(ca);
        if (*tree_cmd) return run_build_tree(tra);
        if (*dec_cmd) return run_decode(da);
        if (*bench_cmd) return run_bench(ba);
        if (*perf_cmd) return run_perf(pa);
        return 2;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
