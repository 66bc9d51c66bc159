// Acceptance suite: one PASS/FAIL line per criterion. Tolerances and experiment sizes are fixed
// here; nothing is read from the environment except an optional report path.
//
//   acceptance <path-to-evseg-cli> [report-file]

#include "evseg/pipeline.hpp"
#include "evseg/testing/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace evseg;

namespace {

constexpr int kSeeds = 5;
constexpr double kMinAuroc = 0.70;
constexpr double kGradientSeconds = 10.0;
constexpr double kOracleSeconds = 30.0;

struct Verdict {
    int id;
    bool passed;
    std::string summary;
};

std::ostringstream g_report;

void note(const std::string& line) {
    std::cerr << line << "\n";
    g_report << line << "\n";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string join(const std::vector<double>& v, const char* f = "%.4f") {
    std::string out;
    for (double x : v) out += (out.empty() ? "" : " ") + fmt(f, x);
    return out;
}

Verdict from_checks(int id, const std::vector<checks::CheckResult>& rs, double elapsed, double limit) {
    for (const auto& r : rs) note("  " + checks::format(r));
    const bool ok = checks::all_passed(rs) && (limit <= 0.0 || elapsed < limit);
    std::string summary = std::to_string(rs.size()) + " checks, " + fmt("%.2f s", elapsed);
    if (limit > 0.0) summary += fmt(" (limit %.0f s)", limit);
    return {id, ok, summary};
}

template <class F>
Verdict timed_checks(int id, F f, double limit) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto rs = f();
    return from_checks(id, rs, seconds_since(t0), limit);
}

// ---- criteria 7-9: trained models on the default synthetic dataset ----

struct SeedRun {
    std::uint64_t seed;
    bool ceu;
    double auroc;
    SegModel model;
    Split split;
};

SeedRun train_seed(const std::vector<Sample>& data, std::uint64_t seed, bool ceu) {
    ExperimentConfig cfg;
    cfg.train.seed = seed;
    cfg.model.seed = seed;
    cfg.loss.ceu_enabled = ceu;
    const auto t0 = std::chrono::steady_clock::now();
    TrainState st = train_stage1(data, cfg);
    st = train_stage2(data, std::move(st), cfg);
    const auto& last = st.record.epochs.back();
    char line[256];
    std::snprintf(line, sizeof line, "  seed %llu ceu=%s: val dice %.4f hd95 %.2f auroc %.4f (%.0f s)",
                  static_cast<unsigned long long>(seed), ceu ? "on " : "off", last.val_dice, last.val_hd95, last.auroc,
                  seconds_since(t0));
    note(line);
    return {seed, ceu, last.auroc, std::move(st.model), std::move(st.split)};
}

double cell_dice(const std::vector<EvalCell>& cells, std::size_t budget, std::size_t m) {
    for (const auto& c : cells)
        if (c.budget == budget && c.iterations == m) return c.dice_mean;
    throw std::logic_error("missing cell");
}

// ---- criterion 10: two CLI train runs ----

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

int sh(const std::string& cmd) {
    const int rc = std::system(cmd.c_str());
    return rc;
}

Verdict determinism(const std::string& cli) {
    const fs::path dir = fs::temp_directory_path() / "evseg_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream cfg(dir / "small.cfg");
        cfg << "gen.rows=32\ngen.cols=32\ngen.n_samples=20\ntrain.epochs_stage1=3\ntrain.epochs_stage2=3\n";
    }
    const std::string q = "\"" + cli + "\"", d = "\"" + dir.string() + "\"";
    const std::string common = " --config " + d + "/small.cfg --data " + d + "/data --quiet > /dev/null";
    if (sh(q + " gen --config " + d + "/small.cfg --out-dir " + d + "/data > /dev/null") != 0 ||
        sh(q + " train" + common + " --out " + d + "/a") != 0 || sh(q + " train" + common + " --out " + d + "/b") != 0) {
        return {10, false, "CLI invocation failed"};
    }
    const bool weights = slurp(dir / "a" / "weights.bin") == slurp(dir / "b" / "weights.bin");
    const bool log = slurp(dir / "a" / "run.log") == slurp(dir / "b" / "run.log");
    const bool nonempty = !slurp(dir / "a" / "weights.bin").empty() && !slurp(dir / "a" / "run.log").empty();
    return {10, weights && log && nonempty,
            std::string("weight blobs ") + (weights ? "identical" : "DIFFER") + ", run logs " + (log ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: acceptance <evseg-cli> [report-file]\n";
        return 2;
    }
    const std::string cli = argv[1];
    std::vector<Verdict> verdicts;

    note("[1] gradient suite");
    verdicts.push_back(timed_checks(1, [] { return checks::gradient_suite(20); }, kGradientSeconds));
    note("[2] closed-form expected CE");
    verdicts.push_back(timed_checks(2, [] { return checks::expected_ce_oracles(100000); }, kOracleSeconds));
    note("[3] mass conservation");
    verdicts.push_back(timed_checks(3, [] { return checks::mass_conservation(1000000, 10000); }, 0.0));
    note("[4] KL correctness");
    verdicts.push_back(timed_checks(4, [] { return checks::kl_checks(10000); }, 0.0));
    note("[5] metric oracles");
    verdicts.push_back(timed_checks(5, [] { return checks::metric_oracles(); }, 0.0));
    note("[6] sampler oracle");
    verdicts.push_back(timed_checks(6, [] { return checks::sampler_oracles(500); }, 0.0));

    note("[7-9] training 5 seeds x CEU on/off on the default dataset (200 samples, 64x64, 50+50 epochs)");
    const auto t_train = std::chrono::steady_clock::now();
    const auto data = generate(GenConfig{});
    std::vector<SeedRun> on, off;
    for (std::uint64_t s = 1; s <= kSeeds; ++s) {
        on.push_back(train_seed(data, s, true));
        off.push_back(train_seed(data, s, false));
    }
    const double train_minutes = seconds_since(t_train) / 60.0;
    note(fmt("  training wall time %.1f min", train_minutes));

    std::vector<double> au_on, au_off;
    for (const auto& r : on) au_on.push_back(r.auroc);
    for (const auto& r : off) au_off.push_back(r.auroc);
    const double med_on = median(au_on), med_off = median(au_off);
    note("  AUROC ceu on:  " + join(au_on));
    note("  AUROC ceu off: " + join(au_off));
    verdicts.push_back({7, med_on >= med_off && med_on >= kMinAuroc,
                        "median AUROC on " + fmt("%.4f", med_on) + " vs off " + fmt("%.4f", med_off) + " (need on >= off and on >= " +
                            fmt("%.2f", kMinAuroc) + "); training " + fmt("%.1f min", train_minutes)});

    // Sampler comparison and budget sweep on each CEU-enabled model's validation split.
    std::vector<double> top1, rnd1, top5, rnd5;
    std::vector<std::vector<std::vector<double>>> per_budget(3, std::vector<std::vector<double>>(3));
    const std::vector<std::size_t> budgets{1, 3, 5};
    for (const auto& r : on) {
        const auto val = subset(data, r.split.val);
        EvalOptions topk;
        topk.budgets = budgets;
        topk.iterations = {1, 2, 3};
        topk.seeds = {r.seed};
        const auto tc = evaluate(r.model, val, EvidenceActivation::Relu, topk);
        EvalOptions random = topk;
        random.sampler = SamplerKind::RandomError;
        random.budgets = {1, 5};
        random.iterations = {1};
        const auto rc = evaluate(r.model, val, EvidenceActivation::Relu, random);
        top1.push_back(cell_dice(tc, 1, 1));
        top5.push_back(cell_dice(tc, 5, 1));
        rnd1.push_back(cell_dice(rc, 1, 1));
        rnd5.push_back(cell_dice(rc, 5, 1));
        for (std::size_t m = 1; m <= 3; ++m)
            for (std::size_t b = 0; b < budgets.size(); ++b) per_budget[m - 1][b].push_back(cell_dice(tc, budgets[b], m));
    }
    note("  dice top-k  b=1: " + join(top1) + "   b=5: " + join(top5));
    note("  dice random b=1: " + join(rnd1) + "   b=5: " + join(rnd5));
    const double g1 = median(top1) - median(rnd1), g5 = median(top5) - median(rnd5);
    verdicts.push_back({8, g1 >= 0.0 && g5 >= 0.0,
                        "median dice gap top-k minus random: budget 1 " + fmt("%+.4f", g1) + ", budget 5 " + fmt("%+.4f", g5) +
                            " (need both >= 0)"});

    bool monotone = true;
    std::string sweep_text;
    for (std::size_t m = 1; m <= 3; ++m) {
        std::vector<double> med;
        for (std::size_t b = 0; b < budgets.size(); ++b) med.push_back(median(per_budget[m - 1][b]));
        for (std::size_t b = 1; b < med.size(); ++b) monotone &= med[b] >= med[b - 1];
        sweep_text += (sweep_text.empty() ? "" : "; ") + std::string("M=") + std::to_string(m) + ": " + join(med);
        note("  median dice budgets 1,3,5 at M=" + std::to_string(m) + ": " + join(med));
    }
    verdicts.push_back({9, monotone, "median top-k dice over budgets 1,3,5; " + sweep_text});

    note("[10] CLI determinism");
    verdicts.push_back(determinism(cli));

    int failed = 0;
    std::cout << "\n";
    for (const auto& v : verdicts) {
        char line[1024];
        std::snprintf(line, sizeof line, "CRITERION %2d %s  %s", v.id, v.passed ? "PASS" : "FAIL", v.summary.c_str());
        std::cout << line << "\n";
        g_report << line << "\n";
        failed += !v.passed;
    }
    std::cout << (failed ? std::to_string(failed) + " criteria failed\n" : "all criteria passed\n");
    if (argc >= 3) {
        std::ofstream f(argv[2]);
        f << g_report.str();
    }
    return failed ? 1 : 0;
}
