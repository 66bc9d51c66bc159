#include "evseg/config.hpp"
#include "evseg/pipeline.hpp"
#include "evseg/testing/checks.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace evseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

ExperimentConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
    for (const auto& o : overrides) apply_assignment(cfg, o, "--set");
    try {
        validate(cfg);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
    if (!f) throw std::runtime_error("write failed: " + p.string());
}

std::string stem(const char* prefix, std::size_t index) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%s_%04zu", prefix, index);
    return buf;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
    std::vector<T> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        T v{};
        const auto r = std::from_chars(item.data(), item.data() + item.size(), v);
        if (r.ec != std::errc{} || r.ptr != item.data() + item.size()) {
            throw UsageError(std::string(flag) + ": bad list entry '" + item + "'");
        }
        out.push_back(v);
    }
    if (out.empty()) throw UsageError(std::string(flag) + ": empty list");
    return out;
}

// ---- gen ----

struct GenArgs {
    std::string config, out_dir;
    std::vector<std::string> overrides;
    bool force = false;
    std::optional<std::uint64_t> seed;
};

bool is_dataset_file(const fs::path& p) {
    const std::string name = p.filename().string();
    return name == kManifestName || ((name.rfind("img_", 0) == 0 || name.rfind("mask_", 0) == 0) && p.extension() == ".pgm");
}

int run_gen(const GenArgs& a) {
    ExperimentConfig cfg = build_config(a.config, a.overrides);
    if (a.seed) cfg.gen.seed = *a.seed;
    const fs::path out(a.out_dir);
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!a.force) throw UsageError(out.string() + " is not empty (use --force to overwrite)");
        for (const auto& e : fs::directory_iterator(out))
            if (e.is_regular_file() && is_dataset_file(e.path())) fs::remove(e.path());
    }
    const auto data = generate(cfg.gen);
    write_dataset(out, data);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    for (const auto& s : data) {
        const double f = double(count_foreground(s.mask)) / double(s.mask.size());
        lo = std::min(lo, f);
        hi = std::max(hi, f);
        sum += f;
    }
    std::printf("wrote %zu samples (%zux%zu) to %s\n", data.size(), cfg.gen.rows, cfg.gen.cols, out.string().c_str());
    std::printf("foreground fraction: mean %.4f  min %.4f  max %.4f\n", sum / double(data.size()), lo, hi);
    return kExitOk;
}

// ---- train ----

struct TrainArgs {
    std::string config, data, out;
    std::vector<std::string> overrides;
    int stage = 2;
    bool quiet = false;
};

int run_train(const TrainArgs& a) {
    const ExperimentConfig cfg = build_config(a.config, a.overrides);
    const auto data = load_dataset(a.data);
    const fs::path out(a.out);
    fs::create_directories(out / "maps");
    std::ostream* log = a.quiet ? nullptr : &std::cerr;

    TrainState st = train_stage1(data, cfg, log);
    if (a.stage == 2) st = train_stage2(data, std::move(st), cfg, log);

    write_text(out / "weights.bin", export_weights(st.model));
    write_text(out / "run.log", st.record.to_text());
    write_text(out / "config.cfg", dump_config(cfg));
    char meta[128];
    std::snprintf(meta, sizeof meta, "wall_seconds=%.3f\nstages=%d\n", st.record.wall_seconds, a.stage);
    write_text(out / "run.meta", meta);
    for (std::size_t i : st.split.train) {
        write_float_map(out / "maps" / (stem("u", data[i].index) + ".umap"), st.maps[i].uncertainty);
        write_pgm(out / "maps" / (stem("u", data[i].index) + ".pgm"), st.maps[i].uncertainty);
    }
    const auto& last = st.record.epochs.back();
    std::printf("trained %zu epochs on %zu samples (%zu validation); final val dice %.4f hd95 %.2f auroc %.4f\n",
                st.record.epochs.size(), st.split.train.size(), st.split.val.size(), last.val_dice, last.val_hd95,
                last.auroc);
    std::printf("outputs in %s\n", out.string().c_str());
    return kExitOk;
}

// ---- eval ----

struct EvalArgs {
    std::string weights, data, config, sampler = "topk", budgets = "1", iters = "1", out, panels, split = "val";
    std::vector<std::string> overrides;
    std::size_t seeds = 1;
};

FloatMap panel_of(const EvalPanel& p) {
    const std::size_t h = p.image.rows, w = p.image.cols, gap = 2;
    FloatMap out(h, 4 * w + 3 * gap, 1.0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            out(r, c) = p.image(r, c);
            out(r, w + gap + c) = p.truth(r, c) ? 1.0 : 0.0;
            out(r, 2 * (w + gap) + c) = p.prediction(r, c) ? 1.0 : 0.0;
            out(r, 3 * (w + gap) + c) = p.uncertainty(r, c);
        }
    }
    return out;
}

int run_eval(const EvalArgs& a) {
    std::string cfg_path = a.config;
    if (cfg_path.empty() && fs::exists(fs::path(a.weights).parent_path() / "config.cfg")) {
        cfg_path = (fs::path(a.weights).parent_path() / "config.cfg").string();
    }
    const ExperimentConfig cfg = build_config(cfg_path, a.overrides);
    if (!fs::exists(a.weights)) throw std::runtime_error("weights not found: " + a.weights);
    std::ifstream wf(a.weights, std::ios::binary);
    const std::string blob((std::istreambuf_iterator<char>(wf)), std::istreambuf_iterator<char>());
    SegModel model = init(blob_config(blob));
    import_weights(model, blob);

    const auto data = load_dataset(a.data);
    std::vector<Sample> eval_set;
    if (a.split == "val") eval_set = subset(data, split_dataset(data.size(), cfg.train.val_fraction, cfg.train.seed).val);
    else if (a.split == "all") eval_set = data;
    else throw UsageError("--split must be val or all");

    EvalOptions opt;
    try {
        opt.sampler = parse_sampler(a.sampler);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    opt.budgets = parse_list<std::size_t>(a.budgets, "--budgets");
    opt.iterations = parse_list<std::size_t>(a.iters, "--iters");
    if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
    opt.seeds.clear();
    for (std::uint64_t s = 1; s <= a.seeds; ++s) opt.seeds.push_back(s);
    opt.nms_radius = cfg.prompt.nms_radius;
    opt.sigma = cfg.prompt.sigma;
    opt.refresh_in_loop = cfg.prompt.refresh_in_loop;

    std::vector<EvalPanel> panels;
    const auto cells = evaluate(model, eval_set, cfg.evidence, opt, a.panels.empty() ? nullptr : &panels);

    std::string table = "sampler\tbudget\tM\tdice_mean\tdice_std\tjaccard_mean\tjaccard_std\thd95_mean\thd95_std\n";
    std::printf("%-8s %6s %3s  %-17s  %-17s  %-17s\n", "sampler", "budget", "M", "dice", "jaccard", "hd95");
    for (const auto& c : cells) {
        char row[256];
        std::snprintf(row, sizeof row, "%s\t%zu\t%zu\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", to_string(c.sampler).c_str(),
                      c.budget, c.iterations, c.dice_mean, c.dice_std, c.jaccard_mean, c.jaccard_std, c.hd95_mean,
                      c.hd95_std);
        table += row;
        std::printf("%-8s %6zu %3zu  %.4f +- %.4f    %.4f +- %.4f    %6.2f +- %.2f\n", to_string(c.sampler).c_str(),
                    c.budget, c.iterations, c.dice_mean, c.dice_std, c.jaccard_mean, c.jaccard_std, c.hd95_mean,
                    c.hd95_std);
    }
    std::printf("%zu samples, %zu seed(s)\n", eval_set.size(), opt.seeds.size());
    if (!a.out.empty()) write_text(a.out, table);
    if (!a.panels.empty()) {
        fs::create_directories(a.panels);
        for (const auto& p : panels) write_pgm(fs::path(a.panels) / (stem("panel", p.index) + ".pgm"), panel_of(p));
        std::printf("wrote %zu panels to %s\n", panels.size(), a.panels.c_str());
    }
    return kExitOk;
}

// ---- selftest ----

std::optional<ad::Op> op_by_name(const std::string& name) {
    for (int i = 0; i <= static_cast<int>(ad::Op::Select0); ++i) {
        const auto op = static_cast<ad::Op>(i);
        if (ad::op_name(op) == name) return op;
    }
    return std::nullopt;
}

int run_selftest(const std::string& flip) {
    if (!flip.empty()) {
        const auto op = op_by_name(flip);
        if (!op) throw UsageError("unknown op '" + flip + "'");
        ad::fault::sign_flip = *op;
    }
    std::vector<checks::CheckResult> results;
    auto take = [&](std::vector<checks::CheckResult> rs) {
        for (auto& r : rs) {
            std::puts(checks::format(r).c_str());
            results.push_back(std::move(r));
        }
    };
    take(checks::gradient_suite());
    take({checks::model_gradient()});
    take(checks::expected_ce_oracles());
    take(checks::mass_conservation());
    take(checks::kl_checks());
    take(checks::metric_oracles());
    take(checks::sampler_oracles());
    std::vector<std::string> failed;
    for (const auto& r : results)
        if (!r.passed) failed.push_back(r.name);
    if (failed.empty()) {
        std::printf("selftest: all %zu invariants hold\n", results.size());
        return kExitOk;
    }
    std::printf("selftest: %zu of %zu invariants FAILED:\n", failed.size(), results.size());
    for (const auto& f : failed) std::printf("  %s\n", f.c_str());
    return kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"evseg: evidential uncertainty and uncertainty-guided interactive segmentation"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "generate a synthetic speckled dataset");
    g->add_option("--config", gen.config, "config file (key=value lines)");
    g->add_option("--out-dir", gen.out_dir, "output directory")->required();
    g->add_option("--seed", gen.seed, "override gen.seed");
    g->add_option("--set", gen.overrides, "override a config key (key=value), repeatable");
    g->add_flag("--force", gen.force, "overwrite dataset files in a non-empty directory");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "two-stage training");
    t->add_option("--config", train.config, "config file");
    t->add_option("--data", train.data, "dataset directory")->required();
    t->add_option("--out", train.out, "output directory")->required();
    t->add_option("--stage", train.stage, "1 = stage I only, 2 = stage I then stage II")->check(CLI::IsMember({1, 2}));
    t->add_option("--set", train.overrides, "override a config key (key=value), repeatable");
    t->add_flag("--quiet", train.quiet, "no per-epoch progress on stderr");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "click-budget evaluation sweep");
    e->add_option("--weights", ev.weights, "weight blob")->required();
    e->add_option("--data", ev.data, "dataset directory")->required();
    e->add_option("--config", ev.config, "config file (default: config.cfg next to the weights)");
    e->add_option("--sampler", ev.sampler, "topk, random or grid");
    e->add_option("--budgets", ev.budgets, "comma-separated clicks per iteration, e.g. 1,3,5");
    e->add_option("--iters", ev.iters, "comma-separated iteration counts M");
    e->add_option("--seeds", ev.seeds, "number of seeds (1..N)");
    e->add_option("--split", ev.split, "val or all");
    e->add_option("--out", ev.out, "write the table as TSV");
    e->add_option("--emit-panels", ev.panels, "directory for image|truth|prediction|uncertainty panels");
    e->add_option("--set", ev.overrides, "override a config key (key=value), repeatable");

    std::string flip;
    auto* s = app.add_subcommand("selftest", "gradient checks, Monte-Carlo and brute-force oracles");
    s->add_option("--inject-sign-flip", flip)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    try {
        if (*g) return run_gen(gen);
        if (*t) return run_train(train);
        if (*e) return run_eval(ev);
        return run_selftest(flip);
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitRuntime;
    }
}
