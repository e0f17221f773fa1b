#include "xct/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "xct/serialize.hpp"

namespace xct {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

double CheckpointScorer::metric(const MatrixXd& acts, const MetricSpec& spec) const {
    MatrixXd lp = forward_from_midlayer(*ckpt_, acts);
    return metric_m_from_logprobs(lp, spec);
}

MatrixXd CheckpointScorer::metric_grad(const MatrixXd& acts, const MetricSpec& spec) const {
    return grad_metric_wrt_midlayer(*ckpt_, acts, spec);
}

std::vector<TokenId> pair_sequence(const MinimalPair& pair, TokenId bos) {
    std::vector<TokenId> toks;
    toks.reserve(pair.prefix.size() + 1);
    toks.push_back(bos);
    toks.insert(toks.end(), pair.prefix.begin(), pair.prefix.end());
    return toks;
}

MetricSpec pair_metric(const MinimalPair& pair) {
    MetricSpec spec;
    spec.correct = pair.correct;
    spec.wrong = pair.wrong;
    spec.position = static_cast<int>(pair.prefix.size());  // BOS shifts prefix by one
    return spec;
}

double metric_m(const Checkpoint& ckpt, const MinimalPair& pair, TokenId bos) {
    MatrixXd lp = forward_logits(ckpt, pair_sequence(pair, bos));
    return metric_m_from_logprobs(lp, pair_metric(pair));
}

void IGConfig::validate() const {
    if (n_steps < 1) throw ConfigError("integrated gradients needs n_steps >= 1");
    if (threshold < 0) throw ConfigError("IE threshold must be >= 0");
}

PairContext build_pair_context(const CrosscoderParams& p,
                               const std::vector<const Checkpoint*>& ckpts,
                               const MinimalPair& pair, IGConfig::Positions positions,
                               TokenId bos) {
    if (ckpts.size() != p.sources.size())
        throw InputError("attribution: one checkpoint per crosscoder source required");
    for (std::size_t c = 0; c < ckpts.size(); ++c)
        if (ckpts[c]->id != p.sources[c])
            throw InputError("attribution: checkpoint order must match crosscoder sources");

    PairContext ctx;
    ctx.tokens = pair_sequence(pair, bos);
    ctx.spec = pair_metric(pair);
    if (positions == IGConfig::Positions::FinalOnly) {
        ctx.positions = {ctx.spec.position};
    } else {
        for (int pos = 1; pos <= ctx.spec.position; ++pos) ctx.positions.push_back(pos);
    }
    ctx.clean.reserve(ckpts.size());
    for (auto* ckpt : ckpts) ctx.clean.push_back(capture_midlayer(*ckpt, ctx.tokens));

    std::vector<MatrixXd> xs(p.sources.size());
    for (std::size_t c = 0; c < p.sources.size(); ++c) {
        MatrixXd x(static_cast<Eigen::Index>(ctx.positions.size()), p.d_model);
        for (std::size_t i = 0; i < ctx.positions.size(); ++i)
            x.row(static_cast<Eigen::Index>(i)) = ctx.clean[c].row(ctx.positions[i]) / p.norm_scale[c];
        xs[c] = std::move(x);
    }
    ctx.f = encode(p, xs);
    return ctx;
}

namespace {

// Patched activations for source c when the joint feature vector at the
// ablatable positions is scaled by `alpha` (error frozen at its clean value):
//   x_alpha[p] = clean[p] - (1 - alpha) * s_c * f[p] W_dec^c.
MatrixXd patch_scaled(const CrosscoderParams& p, int source, const PairContext& ctx,
                      double alpha) {
    MatrixXd x = ctx.clean[static_cast<size_t>(source)];
    MatrixXd delta = ctx.f * p.w_dec[static_cast<size_t>(source)] *
                     (p.norm_scale[static_cast<size_t>(source)] * (1.0 - alpha));
    for (std::size_t i = 0; i < ctx.positions.size(); ++i)
        x.row(ctx.positions[i]) -= delta.row(static_cast<Eigen::Index>(i));
    return x;
}

}  // namespace

double ie_exact(const MidlayerScorer& scorer, const CrosscoderParams& p, int source,
                const PairContext& ctx, int feature) {
    if (feature < 0 || feature >= p.dict_size) throw InputError("feature id out of range");
    const auto c = static_cast<size_t>(source);
    MatrixXd patched = ctx.clean[c];
    bool touched = false;
    for (std::size_t i = 0; i < ctx.positions.size(); ++i) {
        const double fi = ctx.f(static_cast<Eigen::Index>(i), feature);
        if (fi == 0.0) continue;
        patched.row(ctx.positions[i]) -= (p.norm_scale[c] * fi) * p.w_dec[c].row(feature);
        touched = true;
    }
    if (!touched) return 0.0;  // ablating an inactive feature is a no-op
    return scorer.metric(patched, ctx.spec) - scorer.metric(ctx.clean[c], ctx.spec);
}

VectorXd ie_ig_single(const MidlayerScorer& scorer, const CrosscoderParams& p, int source,
                      const PairContext& ctx, const IGConfig& cfg) {
    cfg.validate();
    const auto c = static_cast<size_t>(source);
    const auto P = static_cast<Eigen::Index>(ctx.positions.size());
    MatrixXd grad_f_sum = MatrixXd::Zero(P, p.dict_size);
    for (int k = 0; k < cfg.n_steps; ++k) {
        const double alpha = static_cast<double>(k) / cfg.n_steps;
        MatrixXd x_alpha = patch_scaled(p, source, ctx, alpha);
        MatrixXd gx = scorer.metric_grad(x_alpha, ctx.spec);
        // Pull the midlayer gradient back to feature space through the
        // decoder: df m = s_c * W_dec^c * dx m at each position.
        MatrixXd gsel(P, p.d_model);
        for (Eigen::Index i = 0; i < P; ++i)
            gsel.row(i) = gx.row(ctx.positions[static_cast<size_t>(i)]);
        grad_f_sum.noalias() += gsel * (p.norm_scale[c] * p.w_dec[c]).transpose();
    }
    MatrixXd contrib = -ctx.f.cwiseProduct(grad_f_sum / static_cast<double>(cfg.n_steps));
    VectorXd per_feature = contrib.colwise().sum().transpose();
    if (cfg.agg == IGConfig::PositionAgg::Mean && P > 0)
        per_feature /= static_cast<double>(P);
    return per_feature;
}

double ie_ig_single_feature_path(const MidlayerScorer& scorer, const CrosscoderParams& p,
                                 int source, const PairContext& ctx, int feature, int n_steps) {
    if (n_steps < 1) throw ConfigError("integrated gradients needs n_steps >= 1");
    if (feature < 0 || feature >= p.dict_size) throw InputError("feature id out of range");
    const auto c = static_cast<size_t>(source);
    double grad_sum = 0.0;
    for (int k = 0; k < n_steps; ++k) {
        const double alpha = static_cast<double>(k) / n_steps;
        MatrixXd x = ctx.clean[c];
        for (std::size_t i = 0; i < ctx.positions.size(); ++i) {
            const double fi = ctx.f(static_cast<Eigen::Index>(i), feature);
            if (fi == 0.0) continue;
            x.row(ctx.positions[i]) -=
                (p.norm_scale[c] * (1.0 - alpha) * fi) * p.w_dec[c].row(feature);
        }
        MatrixXd gx = scorer.metric_grad(x, ctx.spec);
        for (std::size_t i = 0; i < ctx.positions.size(); ++i) {
            const double fi = ctx.f(static_cast<Eigen::Index>(i), feature);
            if (fi == 0.0) continue;
            grad_sum -= fi * p.norm_scale[c] *
                        p.w_dec[c].row(feature).dot(gx.row(ctx.positions[i]));
        }
    }
    return grad_sum / n_steps;
}

bool AttributionTable::no_effect(int feature) const {
    for (auto& col : ie)
        if (col(feature) != 0.0) return false;
    return true;
}

AttributionTable attribute_pairs(const std::vector<const Checkpoint*>& ckpts,
                                 const CrosscoderParams& p,
                                 const std::vector<MinimalPair>& pairs, const IGConfig& cfg,
                                 const std::string& slice_label, TokenId bos) {
    cfg.validate();
    if (pairs.empty()) throw InputError("attribution: empty pair list");
    AttributionTable t;
    t.sources = p.sources;
    t.slice = slice_label;
    t.task = pairs.front().task;
    t.n_examples = static_cast<int>(pairs.size());
    t.threshold = cfg.threshold;
    t.ie.assign(p.sources.size(), VectorXd::Zero(p.dict_size));

    std::vector<CheckpointScorer> scorers;
    scorers.reserve(ckpts.size());
    for (auto* c : ckpts) scorers.emplace_back(*c);

    for (const auto& pair : pairs) {
        PairContext ctx = build_pair_context(p, ckpts, pair, cfg.positions, bos);
        for (std::size_t c = 0; c < p.sources.size(); ++c)
            t.ie[c] += ie_ig_single(scorers[c], p, static_cast<int>(c), ctx, cfg);
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    for (auto& col : t.ie) {
        col *= inv;
        // Batch-averaged magnitudes below the threshold are zeroed.
        for (int i = 0; i < col.size(); ++i)
            if (std::abs(col(i)) < cfg.threshold) col(i) = 0.0;
    }
    return t;
}

void add_exact_columns(AttributionTable& table, const std::vector<const Checkpoint*>& ckpts,
                       const CrosscoderParams& p, const std::vector<MinimalPair>& pairs,
                       const IGConfig& cfg, int per_source_top_k, TokenId bos) {
    std::vector<int> wanted;
    for (std::size_t c = 0; c < table.sources.size(); ++c)
        for (int f : top_k_features(table, static_cast<int>(c), per_source_top_k))
            wanted.push_back(f);
    std::sort(wanted.begin(), wanted.end());
    wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());

    table.ie_exact.assign(table.sources.size(), VectorXd::Constant(p.dict_size, kNaN));
    for (auto& col : table.ie_exact)
        for (int f : wanted) col(f) = 0.0;

    std::vector<CheckpointScorer> scorers;
    scorers.reserve(ckpts.size());
    for (auto* c : ckpts) scorers.emplace_back(*c);

    for (const auto& pair : pairs) {
        PairContext ctx = build_pair_context(p, ckpts, pair, cfg.positions, bos);
        for (std::size_t c = 0; c < table.sources.size(); ++c)
            for (int f : wanted)
                table.ie_exact[c](f) += ie_exact(scorers[c], p, static_cast<int>(c), ctx, f);
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    for (auto& col : table.ie_exact)
        for (int f : wanted) col(f) *= inv;
}

std::optional<double> reldec(const CrosscoderParams& p, int c1, int c2, int feature) {
    if (feature < 0 || feature >= p.dict_size) throw InputError("feature id out of range");
    if (c1 < 0 || c1 >= p.n_sources() || c2 < 0 || c2 >= p.n_sources())
        throw InputError("reldec: source index out of range");
    const double n1 = p.w_dec[static_cast<size_t>(c1)].row(feature).norm();
    const double n2 = p.w_dec[static_cast<size_t>(c2)].row(feature).norm();
    if (n1 + n2 == 0.0) return std::nullopt;
    return n2 / (n1 + n2);
}

std::optional<double> relie2(const AttributionTable& t, int c1, int c2, int feature) {
    const double a = std::abs(t.ie[static_cast<size_t>(c1)](feature));
    const double b = std::abs(t.ie[static_cast<size_t>(c2)](feature));
    if (a + b == 0.0) return std::nullopt;
    return b / (a + b);
}

std::optional<Eigen::Vector3d> relie3(const AttributionTable& t, int feature) {
    if (t.sources.size() != 3)
        throw InputError("relie3 requires a three-source table, got " +
                         std::to_string(t.sources.size()));
    Eigen::Vector3d v;
    for (int c = 0; c < 3; ++c) v(c) = std::abs(t.ie[static_cast<size_t>(c)](feature));
    const double total = v.sum();
    if (total == 0.0) return std::nullopt;
    return Eigen::Vector3d(v / total);
}

std::vector<int> top_k_features(const AttributionTable& t, int source, int k) {
    if (k < 1) throw InputError("top_k_features: k must be >= 1");
    const VectorXd& col = t.ie[static_cast<size_t>(source)];
    std::vector<int> ids;
    for (int i = 0; i < col.size(); ++i)
        if (col(i) != 0.0) ids.push_back(i);
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
        const double ma = std::abs(col(a)), mb = std::abs(col(b));
        if (ma != mb) return ma > mb;
        return a < b;
    });
    if (ids.size() > static_cast<std::size_t>(k)) ids.resize(static_cast<std::size_t>(k));
    return ids;
}

namespace {

std::string cell(double v) {
    return std::isnan(v) ? "na" : fmt_double(v);
}

std::string opt_cell(const std::optional<double>& v) {
    return v ? fmt_double(*v) : "na";
}

}  // namespace

std::string table_to_tsv(const AttributionTable& t, const CrosscoderParams& p) {
    const auto n = t.sources.size();
    std::string out = "# crosscoder=" + t.crosscoder_id + "\ttask=" + t.task + "\tslice=" +
                      t.slice + "\tsources=" + join(t.sources, ",") + "\tn_examples=" +
                      std::to_string(t.n_examples) + "\tthreshold=" + fmt_double(t.threshold) +
                      "\n";
    std::vector<std::string> cols = {"feature_id"};
    for (auto& s : t.sources) cols.push_back("ie_" + s);
    if (t.has_exact())
        for (auto& s : t.sources) cols.push_back("ie_exact_" + s);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) {
            cols.push_back("reldec_" + t.sources[a] + "_" + t.sources[b]);
        }
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) {
            cols.push_back("relie2_" + t.sources[a] + "_" + t.sources[b]);
        }
    if (n == 3) {
        cols.push_back("relie3_r1");
        cols.push_back("relie3_r2");
        cols.push_back("relie3_r3");
    }
    cols.push_back("flags");
    out += join(cols, "\t") + "\n";

    for (int i = 0; i < t.dict_size(); ++i) {
        std::vector<std::string> row = {std::to_string(i)};
        for (std::size_t c = 0; c < n; ++c) row.push_back(cell(t.ie[c](i)));
        if (t.has_exact())
            for (std::size_t c = 0; c < n; ++c) row.push_back(cell(t.ie_exact[c](i)));
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a + 1; b < n; ++b)
                row.push_back(opt_cell(reldec(p, static_cast<int>(a), static_cast<int>(b),
                                              i)));
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a + 1; b < n; ++b)
                row.push_back(opt_cell(relie2(t, static_cast<int>(a), static_cast<int>(b), i)));
        if (n == 3) {
            auto r3 = relie3(t, i);
            for (int k = 0; k < 3; ++k)
                row.push_back(r3 ? fmt_double((*r3)(k)) : "na");
        }
        row.push_back(t.no_effect(i) ? "noeffect" : "ok");
        out += join(row, "\t") + "\n";
    }
    return out;
}

void save_table(const AttributionTable& t, const CrosscoderParams& p, const std::string& path) {
    write_file_atomic(path, table_to_tsv(t, p));
}

AttributionTable load_table(const std::string& path) {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line.empty() || line[0] != '#')
        throw InputError(path + ": missing table header");
    AttributionTable t;
    for (auto& field : split(line.substr(1), '\t')) {
        auto kv = split(trim(field), '=');
        if (kv.size() != 2) continue;
        if (kv[0] == "crosscoder") t.crosscoder_id = kv[1];
        else if (kv[0] == "task") t.task = kv[1];
        else if (kv[0] == "slice") t.slice = kv[1];
        else if (kv[0] == "sources") t.sources = split(kv[1], ',');
        else if (kv[0] == "n_examples") t.n_examples = static_cast<int>(parse_int(kv[1], "n_examples"));
        else if (kv[0] == "threshold") t.threshold = parse_double(kv[1], "threshold");
    }
    if (t.sources.empty()) throw InputError(path + ": header lists no sources");
    if (!std::getline(in, line)) throw InputError(path + ": missing column header");
    auto cols = split(line, '\t');
    std::vector<int> ie_cols(t.sources.size(), -1), exact_cols(t.sources.size(), -1);
    for (std::size_t c = 0; c < t.sources.size(); ++c)
        for (std::size_t j = 0; j < cols.size(); ++j) {
            if (cols[j] == "ie_" + t.sources[c]) ie_cols[c] = static_cast<int>(j);
            if (cols[j] == "ie_exact_" + t.sources[c]) exact_cols[c] = static_cast<int>(j);
        }
    for (std::size_t c = 0; c < t.sources.size(); ++c)
        if (ie_cols[c] < 0)
            throw InputError(path + ": missing column ie_" + t.sources[c]);
    const bool has_exact = exact_cols.front() >= 0;

    std::vector<std::vector<double>> ie(t.sources.size()), exact(t.sources.size());
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto f = split(line, '\t');
        if (f.size() != cols.size()) throw InputError(path + ": ragged table row");
        for (std::size_t c = 0; c < t.sources.size(); ++c) {
            ie[c].push_back(parse_double(f[static_cast<size_t>(ie_cols[c])], "ie"));
            if (has_exact) {
                const std::string& v = f[static_cast<size_t>(exact_cols[c])];
                exact[c].push_back(v == "na" ? kNaN : parse_double(v, "ie_exact"));
            }
        }
    }
    for (std::size_t c = 0; c < t.sources.size(); ++c) {
        t.ie.push_back(Eigen::Map<VectorXd>(ie[c].data(), static_cast<Eigen::Index>(ie[c].size())));
        if (has_exact)
            t.ie_exact.push_back(
                Eigen::Map<VectorXd>(exact[c].data(), static_cast<Eigen::Index>(exact[c].size())));
    }
    return t;
}

}  // namespace xct
