#include "xct/crosscoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "xct/serialize.hpp"

namespace xct {

int CrosscoderParams::source_index(const std::string& id) const {
    for (std::size_t i = 0; i < sources.size(); ++i)
        if (sources[i] == id) return static_cast<int>(i);
    throw InputError("unknown crosscoder source '" + id + "'");
}

void CrosscoderParams::validate() const {
    const auto n = sources.size();
    if (n < 1 || n > 3) throw ConfigError("crosscoder needs 1..3 sources");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (sources[i] == sources[j]) throw ConfigError("duplicate source id " + sources[i]);
    if (w_enc.size() != n || w_dec.size() != n || b_dec.size() != n || norm_scale.size() != n)
        throw ConfigError("crosscoder parameter lists do not match source count");
    for (std::size_t c = 0; c < n; ++c) {
        if (w_enc[c].rows() != dict_size || w_enc[c].cols() != d_model ||
            w_dec[c].rows() != dict_size || w_dec[c].cols() != d_model ||
            b_dec[c].size() != d_model)
            throw ConfigError("crosscoder tensor shapes do not match (D, d)");
        if (norm_scale[c] <= 0) throw ConfigError("norm scale must be positive");
    }
    if (b_enc.size() != dict_size) throw ConfigError("b_enc size mismatch");
}

MatrixXd encode(const CrosscoderParams& p, const std::vector<MatrixXd>& xs) {
    if (xs.size() != p.sources.size())
        throw InputError("encode: expected " + std::to_string(p.sources.size()) +
                         " source blocks, got " + std::to_string(xs.size()));
    const auto rows = xs.front().rows();
    for (auto& x : xs)
        if (x.rows() != rows || x.cols() != p.d_model)
            throw InputError("encode: misaligned source block");
    MatrixXd pre = MatrixXd::Zero(rows, p.dict_size);
    for (std::size_t c = 0; c < xs.size(); ++c) pre.noalias() += xs[c] * p.w_enc[c].transpose();
    pre.array().rowwise() += p.b_enc.transpose().array();
    return pre.cwiseMax(0.0);
}

VectorXd encode_one(const CrosscoderParams& p, const std::vector<VectorXd>& xs) {
    std::vector<MatrixXd> rows;
    rows.reserve(xs.size());
    for (auto& x : xs) rows.push_back(x.transpose());
    return encode(p, rows).row(0).transpose();
}

MatrixXd decode(const CrosscoderParams& p, const MatrixXd& f, int source) {
    if (source < 0 || source >= p.n_sources()) throw InputError("decode: unknown source index");
    if (f.cols() != p.dict_size) throw InputError("decode: feature width mismatch");
    MatrixXd out = f * p.w_dec[static_cast<size_t>(source)];
    out.array().rowwise() += p.b_dec[static_cast<size_t>(source)].transpose().array();
    return out;
}

VectorXd decode_one(const CrosscoderParams& p, const VectorXd& f, int source) {
    return decode(p, MatrixXd(f.transpose()), source).row(0).transpose();
}

namespace {

void check_batch(const CrosscoderParams& p, const std::vector<MatrixXd>& xs) {
    if (xs.empty() || xs.size() != p.sources.size())
        throw InputError("loss: batch does not match source count");
    for (auto& x : xs)
        if (x.rows() != xs.front().rows() || x.cols() != p.d_model)
            throw InputError("loss: misaligned batch");
}

}  // namespace

LossBreakdown crosscoder_loss(const CrosscoderParams& p, const std::vector<MatrixXd>& xs,
                              double lambda) {
    check_batch(p, xs);
    if (lambda < 0) throw InputError("loss: lambda must be >= 0");
    const double invb = 1.0 / static_cast<double>(xs.front().rows());
    MatrixXd f = encode(p, xs);
    LossBreakdown out;
    out.recon.resize(xs.size(), 0.0);
    out.l0 = (f.array() > 0.0).cast<double>().sum() * invb;
    VectorXd colsum = f.colwise().sum();
    for (std::size_t c = 0; c < xs.size(); ++c) {
        MatrixXd r = decode(p, f, static_cast<int>(c)) - xs[c];
        out.recon[c] = r.squaredNorm() * invb;
        VectorXd dec_norms = p.w_dec[c].rowwise().norm();
        out.sparsity += lambda * invb * colsum.dot(dec_norms);
        out.total += out.recon[c];
    }
    out.total += out.sparsity;
    return out;
}

LossBreakdown crosscoder_loss_grad(const CrosscoderParams& p, const std::vector<MatrixXd>& xs,
                                   double lambda, CrosscoderGrads& g) {
    check_batch(p, xs);
    if (lambda < 0) throw InputError("loss: lambda must be >= 0");
    const auto n = xs.size();
    const auto B = xs.front().rows();
    const double invb = 1.0 / static_cast<double>(B);

    MatrixXd pre = MatrixXd::Zero(B, p.dict_size);
    for (std::size_t c = 0; c < n; ++c) pre.noalias() += xs[c] * p.w_enc[c].transpose();
    pre.array().rowwise() += p.b_enc.transpose().array();
    MatrixXd f = pre.cwiseMax(0.0);
    VectorXd colsum = f.colwise().sum();

    g.w_enc.assign(n, MatrixXd());
    g.w_dec.assign(n, MatrixXd());
    g.b_dec.assign(n, VectorXd());
    g.b_enc = VectorXd::Zero(p.dict_size);

    LossBreakdown out;
    out.recon.resize(n, 0.0);

    // Active-coordinate lists. Once the L1 penalty bites, most of f is zero
    // and the decode/gradient work collapses to the active entries; dense
    // GEMMs win only while the dictionary is still saturated.
    std::vector<std::vector<int>> active(static_cast<size_t>(B));
    std::size_t nnz = 0;
    for (Eigen::Index r = 0; r < B; ++r) {
        auto& lst = active[static_cast<size_t>(r)];
        for (int i = 0; i < p.dict_size; ++i)
            if (f(r, i) > 0.0) lst.push_back(i);
        nnz += lst.size();
    }
    out.l0 = static_cast<double>(nnz) * invb;
    const bool dense = nnz * 4 > static_cast<std::size_t>(B) * static_cast<std::size_t>(p.dict_size);

    VectorXd sparsity_row = VectorXd::Zero(p.dict_size);  // sum_c ||W_dec_i^c||
    std::vector<VectorXd> dec_norms(n);
    for (std::size_t c = 0; c < n; ++c) {
        dec_norms[c] = p.w_dec[c].rowwise().norm();
        out.sparsity += lambda * invb * colsum.dot(dec_norms[c]);
        sparsity_row += dec_norms[c];
    }

    if (dense) {
        MatrixXd df = MatrixXd::Zero(B, p.dict_size);
        for (std::size_t c = 0; c < n; ++c) {
            MatrixXd r = decode(p, f, static_cast<int>(c)) - xs[c];
            out.recon[c] = r.squaredNorm() * invb;
            out.total += out.recon[c];
            MatrixXd dxhat = (2.0 * invb) * r;
            g.w_dec[c].noalias() = f.transpose() * dxhat;
            g.b_dec[c] = dxhat.colwise().sum().transpose();
            df.noalias() += dxhat * p.w_dec[c].transpose();
        }
        df.array().rowwise() += (lambda * invb) * sparsity_row.transpose().array();
        // ReLU subgradient at exactly 0 is 0.
        MatrixXd dpre = df.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
        g.b_enc = dpre.colwise().sum().transpose();
        for (std::size_t c = 0; c < n; ++c) g.w_enc[c].noalias() = dpre.transpose() * xs[c];
    } else {
        using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        std::vector<RowMajor> wdec(n), resid(n), g_dec(n);
        std::vector<RowMajor> xrow(n), g_enc(n);
        for (std::size_t c = 0; c < n; ++c) {
            wdec[c] = p.w_dec[c];
            xrow[c] = xs[c];
            g_dec[c] = RowMajor::Zero(p.dict_size, p.d_model);
            g_enc[c] = RowMajor::Zero(p.dict_size, p.d_model);
            resid[c] = RowMajor::Zero(B, p.d_model);
            for (Eigen::Index r = 0; r < B; ++r) {
                auto row = resid[c].row(r);
                row = p.b_dec[c].transpose() - xrow[c].row(r);
                for (int i : active[static_cast<size_t>(r)]) row += f(r, i) * wdec[c].row(i);
            }
            out.recon[c] = resid[c].squaredNorm() * invb;
            out.total += out.recon[c];
            g.b_dec[c] = (2.0 * invb) * resid[c].colwise().sum().transpose();
        }
        for (Eigen::Index r = 0; r < B; ++r) {
            for (int i : active[static_cast<size_t>(r)]) {
                double dfri = lambda * invb * sparsity_row(i);
                for (std::size_t c = 0; c < n; ++c) {
                    const double scale = 2.0 * invb;
                    dfri += scale * resid[c].row(r).dot(wdec[c].row(i));
                    g_dec[c].row(i) += (scale * f(r, i)) * resid[c].row(r);
                }
                g.b_enc(i) += dfri;
                for (std::size_t c = 0; c < n; ++c) g_enc[c].row(i) += dfri * xrow[c].row(r);
            }
        }
        for (std::size_t c = 0; c < n; ++c) {
            g.w_dec[c] = g_dec[c];
            g.w_enc[c] = g_enc[c];
        }
    }

    // The sparsity term's decoder gradient: f_i scales ||W_dec_i||, so each
    // active feature pushes its decoder row along its unit direction.
    for (std::size_t c = 0; c < n; ++c)
        for (int i = 0; i < p.dict_size; ++i) {
            const double ni = dec_norms[c](i);
            if (ni > 0.0 && colsum(i) != 0.0)
                g.w_dec[c].row(i) += (lambda * invb * colsum(i) / ni) * p.w_dec[c].row(i);
        }
    out.total += out.sparsity;
    return out;
}

XcTrainResult train_crosscoder(const XcTrainHP& hp, BatchStream& stream,
                               const std::vector<std::string>& source_ids,
                               const std::vector<double>& norm_scales, int dict_size) {
    if (hp.steps <= 0) throw ConfigError("train_crosscoder: steps must be > 0");
    if (hp.warmup_fraction < 0 || hp.warmup_fraction > 1)
        throw ConfigError("train_crosscoder: warmup_fraction must be in [0,1]");
    if (hp.l1_coeff < 0) throw ConfigError("train_crosscoder: l1_coeff must be >= 0");
    if (hp.dec_init_norm <= 0) throw ConfigError("train_crosscoder: dec_init_norm must be > 0");

    auto first = stream.next();
    if (!first) throw InputError("train_crosscoder: empty batch stream");
    const auto n = first->xs.size();
    if (source_ids.size() != n || norm_scales.size() != n)
        throw ConfigError("train_crosscoder: source metadata does not match stream");
    const int d = static_cast<int>(first->xs.front().cols());

    CrosscoderParams p;
    p.sources = source_ids;
    p.dict_size = dict_size;
    p.d_model = d;
    p.norm_scale = norm_scales;
    p.b_enc = VectorXd::Zero(dict_size);

    std::mt19937_64 rng(hp.seed ^ 0xD6E8FEB86659FD93ull);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t c = 0; c < n; ++c) {
        MatrixXd dec(dict_size, d);
        for (int i = 0; i < dict_size; ++i) {
            VectorXd row(d);
            for (int j = 0; j < d; ++j) row(j) = normal(rng);
            dec.row(i) = row.normalized() * hp.dec_init_norm;
        }
        p.w_dec.push_back(std::move(dec));
        p.b_dec.push_back(VectorXd::Zero(d));
    }

    // Encoder init: decoder transpose, rescaled so pre-activations have unit
    // variance on the calibration batch.
    {
        MatrixXd pre = MatrixXd::Zero(first->xs.front().rows(), dict_size);
        for (std::size_t c = 0; c < n; ++c) pre.noalias() += first->xs[c] * p.w_dec[c].transpose();
        VectorXd mean = pre.colwise().mean();
        double var = 0.0;
        for (int i = 0; i < dict_size; ++i)
            var += (pre.col(i).array() - mean(i)).square().mean();
        var /= static_cast<double>(dict_size);
        const double alpha = var > 0 ? 1.0 / std::sqrt(var) : 1.0;
        for (std::size_t c = 0; c < n; ++c) p.w_enc.push_back(alpha * p.w_dec[c]);
    }

    // Adam state over the flattened parameter list.
    CrosscoderGrads g;
    std::vector<MatrixXd> m_enc(n), v_enc(n), m_dec(n), v_dec(n);
    std::vector<VectorXd> m_bdec(n), v_bdec(n);
    VectorXd m_benc = VectorXd::Zero(dict_size), v_benc = VectorXd::Zero(dict_size);
    for (std::size_t c = 0; c < n; ++c) {
        m_enc[c] = MatrixXd::Zero(dict_size, d);
        v_enc[c] = MatrixXd::Zero(dict_size, d);
        m_dec[c] = MatrixXd::Zero(dict_size, d);
        v_dec[c] = MatrixXd::Zero(dict_size, d);
        m_bdec[c] = VectorXd::Zero(d);
        v_bdec[c] = VectorXd::Zero(d);
    }

    const double warmup_steps = hp.warmup_fraction * static_cast<double>(hp.steps);
    auto lambda_at = [&](long long t) {
        if (hp.l1_coeff == 0) return 0.0;
        if (warmup_steps <= 0) return hp.l1_coeff;
        return hp.l1_coeff * std::min(1.0, static_cast<double>(t) / warmup_steps);
    };

    auto adam_update = [&](MatrixXd& w, MatrixXd& m, MatrixXd& v, const MatrixXd& grad,
                           double bc1, double bc2) {
        m = hp.beta1 * m + (1.0 - hp.beta1) * grad;
        v = hp.beta2 * v + (1.0 - hp.beta2) * grad.array().square().matrix();
        w.array() -= hp.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + hp.adam_eps);
    };
    auto adam_update_v = [&](VectorXd& w, VectorXd& m, VectorXd& v, const VectorXd& grad,
                             double bc1, double bc2) {
        m = hp.beta1 * m + (1.0 - hp.beta1) * grad;
        v = hp.beta2 * v + (1.0 - hp.beta2) * grad.array().square().matrix();
        w.array() -= hp.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + hp.adam_eps);
    };

    XcTrainResult result;
    std::optional<Batch> batch = std::move(first);
    for (long long step = 0; step < hp.steps; ++step) {
        if (!batch) {
            stream.start_epoch();
            batch = stream.next();
            if (!batch) throw InputError("train_crosscoder: stream yielded no batches");
        }
        const double lambda = lambda_at(step);
        LossBreakdown loss = crosscoder_loss_grad(p, batch->xs, lambda, g);

        if (!std::isfinite(loss.total)) {
            std::string comp;
            for (std::size_t c = 0; c < n && comp.empty(); ++c)
                if (!std::isfinite(loss.recon[c])) comp = "recon[" + p.sources[c] + "]";
            if (comp.empty() && !std::isfinite(loss.sparsity)) comp = "sparsity";
            if (comp.empty()) comp = "total";
            throw NumericalError("NaN crosscoder loss at step " + std::to_string(step) +
                                 " (component " + comp + ")");
        }

        const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step + 1));
        const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step + 1));
        for (std::size_t c = 0; c < n; ++c) {
            adam_update(p.w_enc[c], m_enc[c], v_enc[c], g.w_enc[c], bc1, bc2);
            adam_update(p.w_dec[c], m_dec[c], v_dec[c], g.w_dec[c], bc1, bc2);
            adam_update_v(p.b_dec[c], m_bdec[c], v_bdec[c], g.b_dec[c], bc1, bc2);
        }
        adam_update_v(p.b_enc, m_benc, v_benc, g.b_enc, bc1, bc2);

        XcTrainLogEntry e;
        e.step = step;
        e.lambda = lambda;
        e.total = loss.total;
        e.recon = loss.recon;
        e.sparsity = loss.sparsity;
        e.l0 = loss.l0;
        result.log.push_back(std::move(e));

        batch = stream.next();
    }
    result.params = std::move(p);
    result.params.validate();
    return result;
}

CrosscoderEval eval_crosscoder(const CrosscoderParams& p,
                               const std::vector<const MappedShard*>& val_shards,
                               const std::vector<PositionRef>& posmap,
                               const std::vector<PackedSeq>& sequences,
                               const std::vector<const Checkpoint*>& ckpts) {
    p.validate();
    const auto n = p.sources.size();
    if (val_shards.size() != n || ckpts.size() != n)
        throw InputError("eval_crosscoder: need one shard and checkpoint per source");
    const std::uint64_t rows = val_shards.front()->rows();
    for (std::size_t c = 0; c < n; ++c) {
        if (val_shards[c]->rows() != rows ||
            val_shards[c]->alignment_key() != val_shards.front()->alignment_key())
            throw InputError("eval_crosscoder: validation shards not aligned");
        if (ckpts[c]->id != p.sources[c])
            throw InputError("eval_crosscoder: checkpoint order must match crosscoder sources");
    }
    if (posmap.size() != rows) throw InputError("eval_crosscoder: position map size mismatch");

    CrosscoderEval ev;
    ev.delta_ce.resize(n, 0.0);
    ev.frac_variance_explained.resize(n, 0.0);
    ev.ce_clean.resize(n, 0.0);
    ev.ce_patched.resize(n, 0.0);

    // Feature statistics and variance accounting in normalized space.
    VectorXd max_act = VectorXd::Zero(p.dict_size);
    double nnz = 0.0;
    std::vector<double> resid_ss(n, 0.0), raw_ss(n, 0.0);
    std::vector<VectorXd> sum_x(n, VectorXd::Zero(p.d_model));
    const std::uint64_t chunk = 4096;
    for (std::uint64_t start = 0; start < rows; start += chunk) {
        const auto b = static_cast<Eigen::Index>(std::min<std::uint64_t>(chunk, rows - start));
        std::vector<MatrixXd> xs(n);
        for (std::size_t c = 0; c < n; ++c) {
            MatrixXd x(b, p.d_model);
            auto m = val_shards[c]->matrix();
            const double inv = 1.0 / p.norm_scale[c];
            for (Eigen::Index i = 0; i < b; ++i)
                x.row(i) = m.row(static_cast<Eigen::Index>(start + static_cast<std::uint64_t>(i)))
                               .cast<double>() * inv;
            xs[c] = std::move(x);
        }
        MatrixXd f = encode(p, xs);
        nnz += (f.array() > 0.0).cast<double>().sum();
        max_act = max_act.cwiseMax(f.colwise().maxCoeff().transpose());
        for (std::size_t c = 0; c < n; ++c) {
            MatrixXd r = decode(p, f, static_cast<int>(c)) - xs[c];
            resid_ss[c] += r.squaredNorm();
            raw_ss[c] += xs[c].squaredNorm();
            sum_x[c] += xs[c].colwise().sum().transpose();
        }
    }
    ev.l0 = nnz / static_cast<double>(rows);
    ev.dead_count = (max_act.array() <= 0.0).count();
    for (std::size_t c = 0; c < n; ++c) {
        VectorXd mean = sum_x[c] / static_cast<double>(rows);
        const double centered_ss = raw_ss[c] - static_cast<double>(rows) * mean.squaredNorm();
        ev.frac_variance_explained[c] =
            centered_ss > 0 ? 1.0 - resid_ss[c] / centered_ss : (resid_ss[c] == 0 ? 1.0 : 0.0);
    }

    // Token-mean cross entropy, clean vs. reconstruction-patched midlayer.
    // Rows of each sequence are contiguous in the position map.
    std::vector<std::vector<std::pair<std::uint64_t, std::uint32_t>>> rows_of_seq(sequences.size());
    for (std::uint64_t r = 0; r < rows; ++r) {
        if (posmap[r].seq >= sequences.size())
            throw InputError("eval_crosscoder: position map references missing sequence");
        rows_of_seq[posmap[r].seq].emplace_back(r, posmap[r].pos);
    }
    for (std::size_t c = 0; c < n; ++c) {
        double nll_clean = 0.0, nll_patched = 0.0;
        long long count = 0;
        for (std::size_t s = 0; s < sequences.size(); ++s) {
            if (rows_of_seq[s].empty()) continue;
            const PackedSeq& seq = sequences[s];
            MatrixXd clean = capture_midlayer(*ckpts[c], seq.tokens);
            MatrixXd patched = clean;
            // Gather this sequence's rows across all sources, encode jointly.
            const auto b = static_cast<Eigen::Index>(rows_of_seq[s].size());
            std::vector<MatrixXd> xs(n);
            for (std::size_t cc = 0; cc < n; ++cc) {
                MatrixXd x(b, p.d_model);
                auto m = val_shards[cc]->matrix();
                const double inv = 1.0 / p.norm_scale[cc];
                for (Eigen::Index i = 0; i < b; ++i)
                    x.row(i) = m.row(static_cast<Eigen::Index>(rows_of_seq[s][static_cast<size_t>(i)].first))
                                   .cast<double>() * inv;
                xs[cc] = std::move(x);
            }
            MatrixXd f = encode(p, xs);
            MatrixXd xhat = decode(p, f, static_cast<int>(c)) * p.norm_scale[c];
            for (Eigen::Index i = 0; i < b; ++i)
                patched.row(rows_of_seq[s][static_cast<size_t>(i)].second) = xhat.row(i);
            const double w = seq.n_real - 1;
            nll_clean += ce_from_midlayer(*ckpts[c], clean, seq.tokens, seq.n_real) * w;
            nll_patched += ce_from_midlayer(*ckpts[c], patched, seq.tokens, seq.n_real) * w;
            count += seq.n_real - 1;
        }
        ev.ce_clean[c] = count ? nll_clean / static_cast<double>(count) : 0.0;
        ev.ce_patched[c] = count ? nll_patched / static_cast<double>(count) : 0.0;
        ev.delta_ce[c] = ev.ce_patched[c] - ev.ce_clean[c];
    }
    return ev;
}

void save_crosscoder(const CrosscoderParams& p, const std::string& path) {
    p.validate();
    BinWriter w(path);
    w.magic("XCCX");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(p.sources.size()));
    for (std::size_t c = 0; c < p.sources.size(); ++c) {
        w.str(p.sources[c]);
        w.f64(p.norm_scale[c]);
    }
    w.u32(static_cast<std::uint32_t>(p.dict_size));
    w.u32(static_cast<std::uint32_t>(p.d_model));
    for (std::size_t c = 0; c < p.sources.size(); ++c) {
        w.tensor("w_enc." + std::to_string(c), p.w_enc[c]);
        w.tensor("w_dec." + std::to_string(c), p.w_dec[c]);
        w.tensor("b_dec." + std::to_string(c), p.b_dec[c]);
    }
    w.tensor("b_enc", p.b_enc);
    w.close();
}

CrosscoderParams load_crosscoder(const std::string& path) {
    BinReader r(path);
    r.expect_magic("XCCX", "crosscoder");
    std::uint32_t version = r.u32();
    if (version != 1) throw InputError(path + ": unsupported XCCX version");
    CrosscoderParams p;
    std::uint32_t n = r.u32();
    for (std::uint32_t c = 0; c < n; ++c) {
        p.sources.push_back(r.str());
        p.norm_scale.push_back(r.f64());
    }
    p.dict_size = static_cast<int>(r.u32());
    p.d_model = static_cast<int>(r.u32());
    p.w_enc.resize(n);
    p.w_dec.resize(n);
    p.b_dec.resize(n);
    for (std::uint32_t c = 0; c < n; ++c) {
        for (int k = 0; k < 3; ++k) {
            auto [name, t] = r.tensor();
            if (name == "w_enc." + std::to_string(c)) p.w_enc[c] = std::move(t);
            else if (name == "w_dec." + std::to_string(c)) p.w_dec[c] = std::move(t);
            else if (name == "b_dec." + std::to_string(c)) p.b_dec[c] = t.col(0);
            else throw InputError(path + ": unexpected tensor " + name);
        }
    }
    auto [name, t] = r.tensor();
    if (name != "b_enc") throw InputError(path + ": missing b_enc");
    p.b_enc = t.col(0);
    p.validate();
    return p;
}

}  // namespace xct
