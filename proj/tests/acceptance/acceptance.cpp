// Acceptance suite: runs the full desk-scale pipeline through the CLI and
// checks every headline requirement, printing one PASS/FAIL line per
// criterion. Exit code is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/crosscoder_oracle.hpp"
#include "xct/actstore.hpp"
#include "xct/analysis.hpp"
#include "xct/attribution.hpp"
#include "xct/crosscoder.hpp"
#include "xct/grammar.hpp"
#include "xct/hash.hpp"
#include "xct/lm.hpp"
#include "xct/pipeline.hpp"
#include "xct/serialize.hpp"

using namespace xct;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void pass(const std::string& id, const std::string& what) {
    std::printf("[PASS] %s %s\n", id.c_str(), what.c_str());
    std::fflush(stdout);
}

void fail(const std::string& id, const std::string& what, const std::string& why) {
    std::printf("[FAIL] %s %s: %s\n", id.c_str(), what.c_str(), why.c_str());
    std::fflush(stdout);
    ++g_failures;
}

struct Check {
    bool ok = true;
    std::string why;
    void require(bool cond, const std::string& msg) {
        if (!cond && ok) {
            ok = false;
            why = msg;
        }
    }
};

void report(const std::string& id, const std::string& what, const Check& c) {
    if (c.ok) pass(id, what);
    else fail(id, what, c.why);
}

std::string g_xct;
std::string g_root;
std::string g_run;  // g_root + "/default"

bool run_cli(const std::string& args) {
    const std::string cmd = g_xct + " " + args + " >> " + g_root + "/cli.log 2>&1";
    return std::system(cmd.c_str()) == 0;
}

std::vector<std::vector<std::string>> read_tsv(const std::string& path, bool skip_header = true) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(read_file(path));
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first && skip_header) {
            first = false;
            continue;
        }
        first = false;
        if (trim(line).empty()) continue;
        rows.push_back(split(line, '\t'));
    }
    return rows;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// ---------------------------------------------------------------------------

void c1_math_oracle() {
    Check c;
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g(0.0, 0.7);
    for (int n_sources : {1, 2, 3}) {
        for (int rep = 0; rep < 4; ++rep) {
            const int D = 4 + static_cast<int>(rng() % 13);  // <= 16
            const int d = 2 + static_cast<int>(rng() % 7);   // <= 8
            CrosscoderParams p;
            p.dict_size = D;
            p.d_model = d;
            p.b_enc = VectorXd::Zero(D);
            for (int i = 0; i < D; ++i) p.b_enc(i) = g(rng);
            for (int s = 0; s < n_sources; ++s) {
                p.sources.push_back("s" + std::to_string(s));
                p.norm_scale.push_back(1.0);
                MatrixXd we(D, d), wd(D, d);
                VectorXd bd(d);
                for (int i = 0; i < D; ++i)
                    for (int j = 0; j < d; ++j) {
                        we(i, j) = g(rng);
                        wd(i, j) = g(rng);
                    }
                for (int j = 0; j < d; ++j) bd(j) = g(rng);
                p.w_enc.push_back(we);
                p.w_dec.push_back(wd);
                p.b_dec.push_back(bd);
            }
            std::vector<MatrixXd> xs;
            for (int s = 0; s < n_sources; ++s) {
                MatrixXd x(6, d);
                for (int r = 0; r < 6; ++r)
                    for (int j = 0; j < d; ++j) x(r, j) = g(rng);
                xs.push_back(x);
            }
            const double lambda = 0.8;
            auto oracle = testing::oracle_forward(p, testing::to_nested(xs), lambda);
            MatrixXd f = encode(p, xs);
            for (Eigen::Index r = 0; r < 6; ++r)
                for (int i = 0; i < D; ++i)
                    c.require(std::abs(f(r, i) -
                                       oracle.f[static_cast<size_t>(r)][static_cast<size_t>(i)]) <=
                                  1e-6,
                              "encode disagrees with the arithmetic oracle");
            LossBreakdown loss = crosscoder_loss(p, xs, lambda);
            c.require(std::abs(loss.total - oracle.total) <= 1e-6 * std::max(1.0, oracle.total),
                      "loss disagrees with the arithmetic oracle");
            for (int s = 0; s < n_sources; ++s) {
                MatrixXd xhat = decode(p, f, s);
                for (Eigen::Index r = 0; r < 6; ++r)
                    for (int j = 0; j < d; ++j) {
                        double want = p.b_dec[static_cast<size_t>(s)](j);
                        for (int i = 0; i < D; ++i)
                            want += oracle.f[static_cast<size_t>(r)][static_cast<size_t>(i)] *
                                    p.w_dec[static_cast<size_t>(s)](i, j);
                        c.require(std::abs(xhat(r, j) - want) <= 1e-6,
                                  "decode disagrees with the arithmetic oracle");
                    }
            }
        }
    }

    // SAE reduction at 1e-10: the single-source loss equals an independently
    // coded SAE loss term for term.
    {
        CrosscoderParams p;
        p.sources = {"sae"};
        p.norm_scale = {1.0};
        p.dict_size = 10;
        p.d_model = 5;
        MatrixXd we(10, 5), wd(10, 5);
        VectorXd bd(5), be(10);
        for (int i = 0; i < 10; ++i) {
            be(i) = g(rng);
            for (int j = 0; j < 5; ++j) {
                we(i, j) = g(rng);
                wd(i, j) = g(rng);
            }
        }
        for (int j = 0; j < 5; ++j) bd(j) = g(rng);
        p.w_enc = {we};
        p.w_dec = {wd};
        p.b_dec = {bd};
        p.b_enc = be;
        MatrixXd x(3, 5);
        for (int r = 0; r < 3; ++r)
            for (int j = 0; j < 5; ++j) x(r, j) = g(rng);
        const double lambda = 1.7;
        double sae = 0;
        for (int r = 0; r < 3; ++r) {
            VectorXd xr = x.row(r).transpose();
            VectorXd f = (we * xr + be).cwiseMax(0.0);
            VectorXd xhat = wd.transpose() * f + bd;
            sae += (xr - xhat).squaredNorm();
            for (int i = 0; i < 10; ++i) sae += lambda * f(i) * wd.row(i).norm();
        }
        sae /= 3.0;
        LossBreakdown loss = crosscoder_loss(p, {x}, lambda);
        c.require(std::abs(loss.total - sae) <= 1e-10 * std::max(1.0, std::abs(sae)),
                  "single-source loss differs from the SAE loss beyond 1e-10");
    }
    report("C1", "crosscoder math matches the brute-force oracle (|C| in {1,2,3}, SAE at 1e-10)", c);
}

void c2_gradient_checks() {
    Check c;
    // dictcore gradients, rtol 1e-4, >= 60 coordinates across source counts.
    std::mt19937_64 rng(21);
    std::normal_distribution<double> g(0.0, 0.6);
    int dict_checked = 0;
    for (int n_sources : {1, 2, 3}) {
        const int D = 10, d = 6;
        CrosscoderParams p;
        p.dict_size = D;
        p.d_model = d;
        p.b_enc = VectorXd::Zero(D);
        for (int i = 0; i < D; ++i) p.b_enc(i) = g(rng);
        for (int s = 0; s < n_sources; ++s) {
            p.sources.push_back("s" + std::to_string(s));
            p.norm_scale.push_back(1.0);
            MatrixXd we(D, d), wd(D, d);
            VectorXd bd(d);
            for (int i = 0; i < D; ++i)
                for (int j = 0; j < d; ++j) {
                    we(i, j) = g(rng);
                    wd(i, j) = g(rng);
                }
            for (int j = 0; j < d; ++j) bd(j) = g(rng);
            p.w_enc.push_back(we);
            p.w_dec.push_back(wd);
            p.b_dec.push_back(bd);
        }
        std::vector<MatrixXd> xs;
        for (int s = 0; s < n_sources; ++s) {
            MatrixXd x(5, d);
            for (int r = 0; r < 5; ++r)
                for (int j = 0; j < d; ++j) x(r, j) = g(rng);
            xs.push_back(x);
        }
        const double lambda = 1.1;
        CrosscoderGrads grads;
        crosscoder_loss_grad(p, xs, lambda, grads);
        const double h = 1e-4;
        for (int k = 0; k < 20; ++k) {
            const int which = static_cast<int>(rng() % 4);
            const int s = static_cast<int>(rng() % static_cast<unsigned>(n_sources));
            double* slot;
            double analytic;
            if (which == 0) {
                int i = static_cast<int>(rng() % D), j = static_cast<int>(rng() % d);
                slot = &p.w_enc[static_cast<size_t>(s)](i, j);
                analytic = grads.w_enc[static_cast<size_t>(s)](i, j);
            } else if (which == 1) {
                int i = static_cast<int>(rng() % D), j = static_cast<int>(rng() % d);
                slot = &p.w_dec[static_cast<size_t>(s)](i, j);
                analytic = grads.w_dec[static_cast<size_t>(s)](i, j);
            } else if (which == 2) {
                int j = static_cast<int>(rng() % d);
                slot = &p.b_dec[static_cast<size_t>(s)](j);
                analytic = grads.b_dec[static_cast<size_t>(s)](j);
            } else {
                int i = static_cast<int>(rng() % D);
                slot = &p.b_enc(i);
                analytic = grads.b_enc(i);
            }
            const double keep = *slot;
            *slot = keep + h;
            const double up = crosscoder_loss(p, xs, lambda).total;
            *slot = keep - h;
            const double down = crosscoder_loss(p, xs, lambda).total;
            *slot = keep;
            const double fd = (up - down) / (2 * h);
            const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-7});
            c.require(std::abs(fd - analytic) / denom <= 1e-4,
                      "crosscoder gradient vs finite differences beyond rtol 1e-4");
            ++dict_checked;
        }
    }
    c.require(dict_checked >= 50, "fewer than 50 crosscoder coordinates sampled");

    // toylm metric gradients at rtol 1e-3 for every checkpoint of the run.
    std::vector<std::string> ids;
    for (auto& row : read_tsv(g_run + "/lm/checkpoints.tsv")) ids.push_back(row[3]);
    Vocab vocab = Vocab::from_tsv(read_file(g_run + "/corpus/vocab.tsv"));
    auto pairs = load_minimal_pairs(g_run + "/pairs/eval.tsv");
    int lm_checked = 0;
    std::mt19937_64 rng2(31);
    for (auto& file : ids) {
        Checkpoint ck = load_checkpoint(g_run + "/" + file);
        const MinimalPair& pr = pairs[rng2() % pairs.size()];
        auto toks = pair_sequence(pr, vocab.bos);
        MetricSpec spec = pair_metric(pr);
        MatrixXd acts = capture_midlayer(ck, toks);
        MatrixXd grad = grad_metric_wrt_midlayer(ck, acts, spec);
        CheckpointScorer scorer(ck);
        const double h = 1e-3;
        for (int k = 0; k < 5; ++k) {
            const int r = static_cast<int>(rng2() % static_cast<unsigned>(spec.position + 1));
            const int j = static_cast<int>(rng2() % static_cast<unsigned>(ck.config.d_model));
            MatrixXd plus = acts, minus = acts;
            plus(r, j) += h;
            minus(r, j) -= h;
            const double fd = (scorer.metric(plus, spec) - scorer.metric(minus, spec)) / (2 * h);
            const double denom = std::max({std::abs(fd), std::abs(grad(r, j)), 1e-8});
            c.require(std::abs(fd - grad(r, j)) / denom <= 1e-3,
                      "metric gradient vs finite differences beyond rtol 1e-3 (" + ck.id + ")");
            ++lm_checked;
        }
    }
    c.require(lm_checked >= 50, "fewer than 50 LM coordinates sampled");
    report("C2", "analytic gradients match central finite differences", c);
}

void c3_ig_vs_exact() {
    Check c;
    AttributionTable table = load_table(g_run + "/attr/table_all.tsv");
    c.require(table.has_exact(), "table_all.tsv lacks exact IE columns");
    if (table.has_exact()) {
        for (std::size_t s = 0; s < table.sources.size(); ++s) {
            std::vector<double> ig, exact;
            for (int f : top_k_features(table, static_cast<int>(s), 50)) {
                const double e = table.ie_exact[s](f);
                if (std::isnan(e)) continue;
                ig.push_back(table.ie[s](f));
                exact.push_back(e);
            }
            c.require(ig.size() >= 10, "source " + table.sources[s] +
                                           " has fewer than 10 thresholded features");
            if (ig.size() >= 3) {
                const double rho = spearman(ig, exact);
                c.require(rho >= 0.9, "Spearman(IE_ig, IE_exact) = " + fmt_double(rho, 4) +
                                          " < 0.9 for source " + table.sources[s]);
            }
        }
    }

    // Affine-downstream fixture: IG equals exact IE for any N.
    std::mt19937_64 rng(41);
    std::normal_distribution<double> g(0.0, 0.5);
    CrosscoderParams p;
    p.sources = {"a", "b"};
    p.norm_scale = {1.0, 2.0};
    p.dict_size = 12;
    p.d_model = 6;
    for (int s = 0; s < 2; ++s) {
        MatrixXd we(12, 6), wd(12, 6);
        for (int i = 0; i < 12; ++i)
            for (int j = 0; j < 6; ++j) {
                we(i, j) = g(rng);
                wd(i, j) = g(rng);
            }
        p.w_enc.push_back(we);
        p.w_dec.push_back(wd);
        p.b_dec.push_back(VectorXd::Zero(6));
    }
    p.b_enc = VectorXd::Zero(12);
    PairContext ctx;
    ctx.tokens = {0, 0, 0, 0};
    ctx.spec = MetricSpec{1, 2, 3};
    ctx.positions = {1, 2, 3};
    for (int s = 0; s < 2; ++s) {
        MatrixXd clean(4, 6);
        for (int r = 0; r < 4; ++r)
            for (int j = 0; j < 6; ++j) clean(r, j) = g(rng);
        ctx.clean.push_back(clean);
    }
    std::vector<MatrixXd> xs;
    for (int s = 0; s < 2; ++s) {
        MatrixXd x(3, 6);
        for (int i = 0; i < 3; ++i)
            x.row(i) = ctx.clean[static_cast<size_t>(s)].row(i + 1) /
                       p.norm_scale[static_cast<size_t>(s)];
        xs.push_back(x);
    }
    ctx.f = encode(p, xs);
    MatrixXd w(4, 6);
    for (int r = 0; r < 4; ++r)
        for (int j = 0; j < 6; ++j) w(r, j) = g(rng);
    class Affine : public MidlayerScorer {
    public:
        explicit Affine(MatrixXd w) : w_(std::move(w)) {}
        double metric(const MatrixXd& acts, const MetricSpec&) const override {
            return (w_.array() * acts.array()).sum();
        }
        MatrixXd metric_grad(const MatrixXd&, const MetricSpec&) const override { return w_; }

    private:
        MatrixXd w_;
    } scorer(w);
    for (int n : {1, 2, 10}) {
        IGConfig cfg;
        cfg.n_steps = n;
        cfg.threshold = 0.0;
        for (int s = 0; s < 2; ++s) {
            VectorXd ig = ie_ig_single(scorer, p, s, ctx, cfg);
            for (int i = 0; i < p.dict_size; ++i)
                c.require(std::abs(ig(i) - ie_exact(scorer, p, s, ctx, i)) <= 1e-9,
                          "IG is not exact on the affine fixture (N=" + std::to_string(n) + ")");
        }
    }
    report("C3", "IG attribution: Spearman vs exact-ablation oracle >= 0.9; exact on affine maps", c);
}

void c4_relative_metric_algebra() {
    Check c;
    AttributionTable table = load_table(g_run + "/attr/table_all.tsv");
    CrosscoderParams params;
    {
        // Match the attribute command's crosscoder choice (first seed).
        Config cfg = default_config();
        const std::string seed = cfg.get_list("run", "seeds").front();
        params = load_crosscoder(g_run + "/xc/xc.seed" + seed + ".xccx");
    }
    const auto n = table.sources.size();
    int defined2 = 0, defined3 = 0;
    for (int f = 0; f < table.dict_size(); ++f) {
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a + 1; b < n; ++b) {
                auto r = relie2(table, static_cast<int>(a), static_cast<int>(b), f);
                if (r) {
                    ++defined2;
                    c.require(*r >= 0.0 && *r <= 1.0, "relie2 out of [0,1]");
                }
                auto d1 = reldec(params, static_cast<int>(a), static_cast<int>(b), f);
                auto d2 = reldec(params, static_cast<int>(b), static_cast<int>(a), f);
                if (d1 && d2)
                    c.require(std::abs(*d1 - (1.0 - *d2)) <= 1e-12, "RelDec symmetry violated");
            }
        if (n == 3) {
            auto r3 = relie3(table, f);
            if (r3) {
                ++defined3;
                c.require(std::abs(r3->sum() - 1.0) <= 1e-9, "relie3 does not sum to 1");
                c.require(r3->minCoeff() >= 0.0, "relie3 has a negative component");
            }
        }
    }
    c.require(defined2 > 0, "no defined relie2 values in the default table");
    if (n == 3) c.require(defined3 > 0, "no defined relie3 values in the default table");

    // Positive rescaling of one source's IEs preserves that source's top-k
    // ordering and the others' too.
    AttributionTable scaled = table;
    scaled.ie[0] *= 13.7;
    for (std::size_t s = 0; s < n; ++s)
        c.require(top_k_features(scaled, static_cast<int>(s), 10) ==
                      top_k_features(table, static_cast<int>(s), 10),
                  "rescaling a source changed a top-k ordering");
    report("C4", "RelDec/RelIE algebra: ranges, symmetry, sum-to-one, scale invariance", c);
}

void c5_duplicate_source() {
    Check c;
    Config cfg = default_config();
    auto src_list = cfg.get_list("extract", "sources");
    // Use the final source's shard twice.
    std::string final_id;
    for (auto& row : read_tsv(g_run + "/lm/checkpoints.tsv")) final_id = row[0];
    const std::string shard_path = g_run + "/acts/" + final_id + ".train.xact";
    MappedShard s1(shard_path), s2(shard_path);
    NormStats norm = estimate_norm(s1, 65536);
    std::vector<NormStats> norms = {{"dup-a", norm.scale}, {"dup-b", norm.scale}};

    // At init every decoder row has the same norm, so RelDec is exactly 0.5.
    {
        XcTrainHP hp;
        hp.steps = 1;
        hp.lr = 0.0;
        hp.seed = 124;
        BatchStream stream({&s1, &s2}, norms, 4096, 124);
        auto init = train_crosscoder(hp, stream, {"dup-a", "dup-b"}, {norm.scale, norm.scale}, 256);
        for (int f = 0; f < init.params.dict_size; ++f)
            c.require(*reldec(init.params, 0, 1, f) == 0.5, "RelDec at init is not exactly 0.5");
    }

    XcTrainHP hp;
    hp.steps = 300;
    hp.seed = 124;
    BatchStream stream({&s1, &s2}, norms, 4096, 124);
    auto res = train_crosscoder(hp, stream, {"dup-a", "dup-b"}, {norm.scale, norm.scale}, 256);
    const CrosscoderParams& p = res.params;

    // Live features: fired anywhere on a sample of the shard.
    BatchStream sample({&s1, &s2}, norms, 8192, 777);
    auto batch = sample.next();
    MatrixXd f = encode(p, batch->xs);
    std::vector<double> live_reldec;
    for (int i = 0; i < p.dict_size; ++i) {
        if (f.col(i).maxCoeff() <= 0.0) continue;
        auto r = reldec(p, 0, 1, i);
        if (r) live_reldec.push_back(*r);
    }
    c.require(live_reldec.size() >= 20, "too few live features after duplicate-source training");
    if (!live_reldec.empty()) {
        const double med = median(live_reldec);
        c.require(med >= 0.45 && med <= 0.55,
                  "median live-feature RelDec " + fmt_double(med, 4) + " outside [0.45, 0.55]");
    }

    // RelIE of above-threshold features, against the duplicated checkpoint.
    std::string final_file;
    for (auto& row : read_tsv(g_run + "/lm/checkpoints.tsv"))
        if (row[0] == final_id) final_file = row[3];
    Checkpoint base = load_checkpoint(g_run + "/" + final_file);
    Checkpoint ca = base, cb = base;
    ca.id = "dup-a";
    cb.id = "dup-b";
    auto pairs = load_minimal_pairs(g_run + "/pairs/eval.tsv");
    pairs.resize(std::min<std::size_t>(pairs.size(), 400));
    IGConfig ig;
    AttributionTable t = attribute_pairs({&ca, &cb}, p, pairs, ig, "all");
    std::vector<double> relies;
    for (int i = 0; i < t.dict_size(); ++i) {
        auto r = relie2(t, 0, 1, i);
        if (r) relies.push_back(*r);
    }
    c.require(relies.size() >= 3, "no features above threshold for duplicate-source RelIE; got " +
                                      std::to_string(relies.size()));
    if (relies.size() >= 3) {
        const double med = median(relies);
        c.require(med >= 0.4 && med <= 0.6,
                  "median relie2 " + fmt_double(med, 4) + " outside [0.4, 0.6]");
    }
    report("C5", "duplicate-source sanity: RelDec and RelIE medians sit at the shared point", c);
}

void c6_crosscoder_quality() {
    Check c;
    Config cfg = default_config();
    const double D = static_cast<double>(cfg.get_int("xc", "dict_size", 512));
    bool saw_mean = false;
    for (auto& row : read_tsv(g_run + "/reports/xc_eval.tsv")) {
        if (row[0] != "mean") continue;
        saw_mean = true;
        const double dead = parse_double(row[3], "dead");
        const double dce = parse_double(row[4], "delta_ce");
        const double fve = parse_double(row[5], "fve");
        c.require(dce <= 0.3, "delta CE " + row[4] + " > 0.3 for " + row[1]);
        c.require(fve >= 0.8, "frac variance explained " + row[5] + " < 0.8 for " + row[1]);
        c.require(dead < 0.25 * D, "dead features " + row[3] + " >= 25% of D for " + row[1]);
    }
    c.require(saw_mean, "xc_eval.tsv has no mean rows");

    // Training-loss monotonicity after warmup: the window-100 moving average
    // is non-increasing across >= 95% of adjacent windows.
    const std::string seed = cfg.get_list("run", "seeds").front();
    auto log = read_tsv(g_run + "/xc/xc.seed" + seed + ".log.tsv");
    std::vector<double> total;
    double max_lambda = 0;
    for (auto& row : log) max_lambda = std::max(max_lambda, parse_double(row[1], "lambda"));
    for (auto& row : log)
        if (parse_double(row[1], "lambda") == max_lambda) total.push_back(parse_double(row[2], "total"));
    const std::size_t W = 100;
    if (total.size() > W + 10) {
        std::vector<double> smooth;
        double acc = 0;
        for (std::size_t i = 0; i < total.size(); ++i) {
            acc += total[i];
            if (i >= W) acc -= total[i - W];
            if (i >= W - 1) smooth.push_back(acc / static_cast<double>(W));
        }
        int drops = 0;
        for (std::size_t i = 1; i < smooth.size(); ++i)
            if (smooth[i] <= smooth[i - 1] + 1e-12) ++drops;
        const double frac = static_cast<double>(drops) / static_cast<double>(smooth.size() - 1);
        c.require(frac >= 0.95,
                  "smoothed loss non-increasing in only " + fmt_double(frac, 4) + " of windows");
    }
    report("C6", "crosscoder quality: delta CE <= 0.3, FVE >= 0.8, dead < 25% of D", c);
}

void c7_phase_transition() {
    Check c;
    std::map<std::string, double> acc;
    std::vector<std::string> order;
    for (auto& row : read_tsv(g_run + "/reports/accuracy.tsv")) {
        if (row[2] != "all") continue;
        acc[row[0]] = parse_double(row[3], "accuracy");
        order.push_back(row[0]);
    }
    c.require(order.size() >= 3, "accuracy curve too short");
    const double first = acc[order.front()];
    const double last = acc[order.back()];
    c.require(std::abs(first - 0.5) <= 0.05,
              "step-0 accuracy " + fmt_double(first, 4) + " not within 0.5 +/- 0.05");
    c.require(last > 0.9, "final accuracy " + fmt_double(last, 4) + " not > 0.9");

    std::string jump_id;
    for (auto& id : order)
        if (acc[id] > 0.75) {
            jump_id = id;
            break;
        }
    c.require(!jump_id.empty(), "accuracy never exceeded 0.75");
    bool flagged = false;
    for (auto& row : read_tsv(g_run + "/reports/transitions.tsv"))
        if (row[0] == jump_id) flagged = true;
    c.require(flagged, "suggest_transitions did not flag the jump checkpoint " + jump_id);

    // Late-block structure. "Late" = accuracy above 0.9: the paper's plots
    // show representations keep moving right at the jump, so the block is
    // anchored on the saturated regime.
    std::map<std::pair<std::string, std::string>, double> sim;
    for (auto& row : read_tsv(g_run + "/reports/heatmap.tsv"))
        sim[{row[0], row[1]}] = parse_double(row[2], "cosine");
    std::vector<std::string> late, early;
    for (auto& id : order) (acc[id] > 0.9 ? late : early).push_back(id);
    c.require(late.size() >= 2 && early.size() >= 2, "degenerate early/late split");
    if (late.size() >= 2 && early.size() >= 2) {
        double win = 1.0, cross = -1.0;
        for (auto& a : late)
            for (auto& b : late)
                if (a != b) win = std::min(win, sim[{a, b}]);
        for (auto& a : early)
            for (auto& b : late) cross = std::max(cross, sim[{a, b}]);
        c.require(win > cross, "min within-late " + fmt_double(win, 4) +
                                   " <= max early-vs-late " + fmt_double(cross, 4));
    }
    report("C7", "phase transition: chance to >0.9 accuracy, jump flagged, late block coherent", c);
}

void c8_ablation_validation() {
    Check c;
    double rd = 0, ri = 0;
    bool have_rd = false, have_ri = false;
    for (auto& row : read_tsv(g_run + "/reports/validation_summary.tsv")) {
        if (row[0] == "spearman_reldec") {
            rd = parse_double(row[1], "rho");
            have_rd = true;
        }
        if (row[0] == "spearman_relie") {
            ri = parse_double(row[1], "rho");
            have_ri = true;
        }
    }
    c.require(have_rd && have_ri, "validation summary incomplete");
    c.require(ri >= 0.8, "rho(|dc2|/|dc1|, RelIE) = " + fmt_double(ri, 4) + " < 0.8");
    c.require(ri > rd, "rho(RelIE) = " + fmt_double(ri, 4) + " not greater than rho(RelDec) = " +
                           fmt_double(rd, 4));
    report("C8", "ablation validation: rho(RelIE) >= 0.8 and above rho(RelDec)", c);
}

std::map<std::string, std::string> hash_artifacts() {
    std::map<std::string, std::string> hashes;
    for (auto& e : fs::recursive_directory_iterator(g_run)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), g_run).string();
        if (starts_with(rel, "manifests/")) continue;  // contain wall times
        hashes[rel] = sha256_file(e.path().string());
    }
    return hashes;
}

void c9_determinism(const std::vector<std::string>& commands) {
    Check c;
    auto before = hash_artifacts();
    for (auto& cmd : commands)
        c.require(run_cli(cmd + " --force"), "rerun of '" + cmd + "' failed");
    auto after = hash_artifacts();
    c.require(before.size() == after.size(), "artifact set changed across the rerun");
    for (auto& [rel, hash] : before) {
        auto it = after.find(rel);
        if (it == after.end()) {
            c.require(false, "artifact disappeared on rerun: " + rel);
            break;
        }
        if (it->second != hash) {
            c.require(false, "artifact differs on rerun: " + rel);
            break;
        }
    }
    report("C9", "determinism: forced pipeline rerun is byte-identical (" +
                     std::to_string(before.size()) + " artifacts)", c);
}

void c10_planted_feature() {
    Check c;
    GrammarSpec grammar = GrammarSpec::defaults();
    Vocab vocab = grammar.build_vocab();
    TokenStream corpus = generate_corpus(grammar, 160000, 77);

    LMConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.vocab_size = static_cast<int>(vocab.size());
    cfg.context_len = 32;
    cfg.mid_layer = 1;
    cfg.seed = 3;

    Checkpoint ca;
    ca.id = "plant-a";
    ca.config = cfg;
    ca.params = init_lm_params(cfg);
    for (auto& layer : ca.params.layers) {  // blocks become identities
        layer.wo.setZero();
        layer.bo.setZero();
        layer.w_proj.setZero();
        layer.b_proj.setZero();
    }

    // Indicator direction (zero-mean so layer norm preserves it).
    std::mt19937_64 rng(99);
    std::normal_distribution<double> g(0.0, 1.0);
    VectorXd u(cfg.d_model);
    for (int j = 0; j < cfg.d_model; ++j) u(j) = g(rng);
    u.array() -= u.mean();
    u.normalize();

    // Checkpoint B embeds subject number along u and reads it out to decide
    // agreement; checkpoint A has neither.
    Checkpoint cb = ca;
    cb.id = "plant-b";
    std::set<TokenId> plural_nouns, marked;
    const double sigma = 0.5, gain = 1.0;
    for (auto* list : {&grammar.regular_nouns, &grammar.irregular_nouns})
        for (auto& n : *list) {
            cb.params.embed.row(vocab.id(n.sg)) -= sigma * u.transpose();
            cb.params.embed.row(vocab.id(n.pl)) += sigma * u.transpose();
            marked.insert(vocab.id(n.sg));
            marked.insert(vocab.id(n.pl));
            plural_nouns.insert(vocab.id(n.pl));
        }
    for (auto& vb : grammar.verbs) {
        cb.params.unembed.col(vocab.id(vb.pl)) += gain * u;
        cb.params.unembed.col(vocab.id(vb.sg)) -= gain * u;
    }

    const std::string dir = g_root + "/planted";
    fs::remove_all(dir);
    fs::create_directories(dir);
    ExtractOptions eopts;
    eopts.n_tokens = 80000;
    eopts.terminator = vocab.id(".");
    std::vector<const Checkpoint*> sources = {&ca, &cb};
    ExtractResult ext = extract_shards(sources, corpus, eopts, dir, "train");
    MappedShard s0(ext.shard_paths[0]), s1(ext.shard_paths[1]);
    std::vector<NormStats> norms = {estimate_norm(s0, 8000), estimate_norm(s1, 8000)};

    XcTrainHP hp;
    hp.steps = 300;
    hp.seed = 124;
    hp.lr = 3e-4;
    BatchStream stream({&s0, &s1}, norms, 2048, 124);
    CrosscoderParams p = train_crosscoder(hp, stream, {"plant-a", "plant-b"},
                                          {norms[0].scale, norms[1].scale}, 128)
                             .params;

    auto pairs = generate_minimal_pairs(grammar, 120, "simple-regular", 9);
    IGConfig ig;  // defaults: N=10, threshold 0.1
    AttributionTable table = attribute_pairs(sources, p, pairs, ig, "simple-regular");

    int best = -1;
    double best_mag = 0;
    for (int f = 0; f < table.dict_size(); ++f) {
        auto r = relie2(table, 0, 1, f);
        if (!r || *r < 0.9) continue;
        const double mag = std::abs(table.ie[1](f));
        if (mag > best_mag) {
            best_mag = mag;
            best = f;
        }
    }
    c.require(best >= 0, "no feature with relie2 >= 0.9 above the IE threshold");

    if (best >= 0) {
        auto tops = top_activating_sequences(p, {&s0, &s1}, ext.posmap, ext.sequences, {best}, 10);
        const auto& list = tops.at(best);
        c.require(list.size() == 10, "planted feature has fewer than 10 activating sequences");
        int with_trigger = 0;
        for (auto& sa : list) {
            int argmax_pos = -1;
            double bestv = -1;
            for (auto& [pos, act] : sa.token_acts)
                if (act > bestv) {
                    bestv = act;
                    argmax_pos = pos;
                }
            if (argmax_pos >= 0 &&
                marked.count(ext.sequences[sa.seq].tokens[static_cast<size_t>(argmax_pos)]))
                ++with_trigger;
        }
        c.require(with_trigger >= 9, "only " + std::to_string(with_trigger) +
                                         " of 10 top sequences have the planted trigger at the "
                                         "activation peak");
    }
    fs::remove_all(dir);
    report("C10", "planted-feature recovery: relie2 >= 0.9 and trigger in >= 9/10 top sequences", c);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <path-to-xct-binary>\n");
        return 64;
    }
    g_xct = argv[1];
    const char* keep = std::getenv("XCT_ACCEPTANCE_ROOT");
    g_root = keep && *keep ? keep
                           : (fs::temp_directory_path() / "xct_acceptance").string();
    fs::remove_all(g_root);
    fs::create_directories(g_root);
    ::setenv("XCT_RUN_ROOT", g_root.c_str(), 1);
    g_run = g_root + "/default";

    std::printf("run root: %s\n", g_root.c_str());

    // Pipeline-independent criteria first.
    c1_math_oracle();

    const std::vector<std::string> commands = {
        "gen-corpus", "gen-pairs", "train-lm", "extract",  "train-xc",
        "eval-xc",    "attribute", "validate", "report",
    };
    bool pipeline_ok = true;
    const auto t0 = std::chrono::steady_clock::now();
    for (auto& cmd : commands) {
        const auto s0 = std::chrono::steady_clock::now();
        if (!run_cli(cmd)) {
            pipeline_ok = false;
            fail("PIPE", "pipeline command '" + cmd + "'", "non-zero exit; see cli.log");
            break;
        }
        const auto s1 = std::chrono::steady_clock::now();
        std::printf("  - %s: %.1f s\n", cmd.c_str(), std::chrono::duration<double>(s1 - s0).count());
        std::fflush(stdout);
    }
    const auto t1 = std::chrono::steady_clock::now();
    const double pipeline_s = std::chrono::duration<double>(t1 - t0).count();
    if (pipeline_ok) {
        std::printf("  - full pipeline: %.1f s\n", pipeline_s);
        if (pipeline_s > 1800) {
            fail("PIPE", "pipeline wall time", fmt_double(pipeline_s, 4) + " s exceeds 30 min");
        }
    }

    if (pipeline_ok) {
        c2_gradient_checks();
        c3_ig_vs_exact();
        c4_relative_metric_algebra();
        c5_duplicate_source();
        c6_crosscoder_quality();
        c7_phase_transition();
        c8_ablation_validation();
        c9_determinism(commands);
    } else {
        for (const char* id : {"C2", "C3", "C4", "C5", "C6", "C7", "C8", "C9"})
            fail(id, "(pipeline-dependent criterion)", "pipeline did not complete");
    }
    c10_planted_feature();

    std::printf("%d criterion failure(s)\n", g_failures);
    return g_failures;
}
