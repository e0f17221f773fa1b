#include "xct/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "xct/config.hpp"
#include "xct/serialize.hpp"

namespace xct {

namespace {

constexpr double kLnEps = 1e-5;

double gelu_phi(double u) { return 0.5 * (1.0 + std::erf(u / M_SQRT2)); }
double gelu(double u) { return u * gelu_phi(u); }
double gelu_grad(double u) {
    const double pdf = std::exp(-0.5 * u * u) / std::sqrt(2.0 * M_PI);
    return gelu_phi(u) + u * pdf;
}

struct LnCache {
    VectorXd mu, r;   // per-position mean and inverse std
    MatrixXd xhat;    // normalized input
};

MatrixXd layernorm(const MatrixXd& x, const MatrixXd& g, const MatrixXd& b, LnCache& c) {
    const auto T = x.rows();
    const auto d = x.cols();
    c.mu = x.rowwise().mean();
    MatrixXd centered = x.colwise() - c.mu;
    VectorXd var = centered.array().square().rowwise().mean();
    c.r = (var.array() + kLnEps).rsqrt();
    c.xhat = centered.array().colwise() * c.r.array();
    MatrixXd y = c.xhat.array().rowwise() * g.row(0).array();
    y.array().rowwise() += b.row(0).array();
    (void)T;
    (void)d;
    return y;
}

// dy -> dx; accumulates parameter grads when given.
MatrixXd layernorm_backward(const MatrixXd& dy, const MatrixXd& g, const LnCache& c,
                            MatrixXd* dg, MatrixXd* db) {
    if (dg) dg->row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    if (db) db->row(0) += dy.colwise().sum();
    MatrixXd dxhat = dy.array().rowwise() * g.row(0).array();
    VectorXd m1 = dxhat.rowwise().mean();
    VectorXd m2 = (dxhat.array() * c.xhat.array()).rowwise().mean();
    MatrixXd dx = dxhat;
    dx.colwise() -= m1;
    dx -= (c.xhat.array().colwise() * m2.array()).matrix();
    dx = dx.array().colwise() * c.r.array();
    return dx;
}

struct LayerCache {
    MatrixXd x_attn_in;
    LnCache ln1;
    MatrixXd n1, q, k, v;
    std::vector<MatrixXd> probs;  // per head, T x T, causal rows
    MatrixXd attn_concat;
    MatrixXd x_mlp_in;
    LnCache ln2;
    MatrixXd n2, u, gact;
};

struct HeadCache {
    LnCache lnf;
    MatrixXd nf;
    MatrixXd logits;
    MatrixXd logprobs;
};

MatrixXd log_softmax_rows(const MatrixXd& logits) {
    MatrixXd out = logits;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        double mx = out.row(i).maxCoeff();
        double lse = std::log((out.row(i).array() - mx).exp().sum()) + mx;
        out.row(i).array() -= lse;
    }
    return out;
}

// One transformer block. Mutates x in place.
void block_forward(const LayerParams& lp, const LMConfig& cfg, MatrixXd& x, LayerCache& c) {
    const int T = static_cast<int>(x.rows());
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    c.x_attn_in = x;
    c.n1 = layernorm(x, lp.ln1_g, lp.ln1_b, c.ln1);
    c.q = c.n1 * lp.wq;
    c.q.array().rowwise() += lp.bq.row(0).array();
    c.k = c.n1 * lp.wk;
    c.k.array().rowwise() += lp.bk.row(0).array();
    c.v = c.n1 * lp.wv;
    c.v.array().rowwise() += lp.bv.row(0).array();

    c.probs.assign(H, MatrixXd());
    c.attn_concat.resize(T, d);
    for (int h = 0; h < H; ++h) {
        auto Qh = c.q.middleCols(h * dh, dh);
        auto Kh = c.k.middleCols(h * dh, dh);
        auto Vh = c.v.middleCols(h * dh, dh);
        MatrixXd s = (Qh * Kh.transpose()) * scale;
        MatrixXd p = MatrixXd::Zero(T, T);
        for (int i = 0; i < T; ++i) {
            double mx = s.row(i).head(i + 1).maxCoeff();
            Eigen::ArrayXd e = (s.row(i).head(i + 1).array() - mx).exp();
            p.row(i).head(i + 1) = (e / e.sum()).matrix();
        }
        c.probs[h] = p;
        c.attn_concat.middleCols(h * dh, dh) = p * Vh;
    }
    MatrixXd attn_out = c.attn_concat * lp.wo;
    attn_out.array().rowwise() += lp.bo.row(0).array();
    x += attn_out;

    c.x_mlp_in = x;
    c.n2 = layernorm(x, lp.ln2_g, lp.ln2_b, c.ln2);
    c.u = c.n2 * lp.w_fc;
    c.u.array().rowwise() += lp.b_fc.row(0).array();
    c.gact = c.u.unaryExpr([](double v) { return gelu(v); });
    MatrixXd mlp_out = c.gact * lp.w_proj;
    mlp_out.array().rowwise() += lp.b_proj.row(0).array();
    x += mlp_out;
}

// dx is d(loss)/d(block output); returns d(loss)/d(block input).
MatrixXd block_backward(const LayerParams& lp, const LMConfig& cfg, const LayerCache& c,
                        MatrixXd dx, LayerParams* g) {
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // MLP sublayer
    const MatrixXd& dy = dx;  // grad at mlp output (residual passes dx through)
    if (g) {
        g->w_proj += c.gact.transpose() * dy;
        g->b_proj.row(0) += dy.colwise().sum();
    }
    MatrixXd dg = dy * lp.w_proj.transpose();
    MatrixXd du = dg.array() * c.u.unaryExpr([](double v) { return gelu_grad(v); }).array();
    if (g) {
        g->w_fc += c.n2.transpose() * du;
        g->b_fc.row(0) += du.colwise().sum();
    }
    MatrixXd dn2 = du * lp.w_fc.transpose();
    MatrixXd dx_mlp = dx + layernorm_backward(dn2, lp.ln2_g, c.ln2, g ? &g->ln2_g : nullptr,
                                              g ? &g->ln2_b : nullptr);

    // Attention sublayer
    const MatrixXd& da = dx_mlp;  // grad at attn output
    if (g) {
        g->wo += c.attn_concat.transpose() * da;
        g->bo.row(0) += da.colwise().sum();
    }
    MatrixXd dconcat = da * lp.wo.transpose();
    MatrixXd dq = MatrixXd::Zero(dx.rows(), d), dk = MatrixXd::Zero(dx.rows(), d),
             dv = MatrixXd::Zero(dx.rows(), d);
    for (int h = 0; h < H; ++h) {
        auto Qh = c.q.middleCols(h * dh, dh);
        auto Kh = c.k.middleCols(h * dh, dh);
        auto Vh = c.v.middleCols(h * dh, dh);
        const MatrixXd& p = c.probs[h];
        MatrixXd dOh = dconcat.middleCols(h * dh, dh);
        MatrixXd dP = dOh * Vh.transpose();
        dv.middleCols(h * dh, dh) = p.transpose() * dOh;
        VectorXd rowdot = (dP.array() * p.array()).rowwise().sum();
        MatrixXd ds = p.array() * (dP.colwise() - rowdot).array();
        dq.middleCols(h * dh, dh) = (ds * Kh) * scale;
        dk.middleCols(h * dh, dh) = (ds.transpose() * Qh) * scale;
    }
    if (g) {
        g->wq += c.n1.transpose() * dq;
        g->bq.row(0) += dq.colwise().sum();
        g->wk += c.n1.transpose() * dk;
        g->bk.row(0) += dk.colwise().sum();
        g->wv += c.n1.transpose() * dv;
        g->bv.row(0) += dv.colwise().sum();
    }
    MatrixXd dn1 = dq * lp.wq.transpose() + dk * lp.wk.transpose() + dv * lp.wv.transpose();
    MatrixXd dx_in = dx_mlp + layernorm_backward(dn1, lp.ln1_g, c.ln1, g ? &g->ln1_g : nullptr,
                                                 g ? &g->ln1_b : nullptr);
    return dx_in;
}

struct SeqForward {
    std::vector<LayerCache> layers;  // caches for the blocks that were run
    HeadCache head;
    int first_block = 0;  // 0-based index of the first block run
};

// Runs blocks [first_block, n_layers) on x, then the readout head.
void run_to_logprobs(const LMParams& p, const LMConfig& cfg, MatrixXd& x, int first_block,
                     SeqForward& f) {
    f.first_block = first_block;
    f.layers.assign(static_cast<size_t>(cfg.n_layers - first_block), LayerCache());
    for (int l = first_block; l < cfg.n_layers; ++l)
        block_forward(p.layers[static_cast<size_t>(l)], cfg, x, f.layers[static_cast<size_t>(l - first_block)]);
    f.head.nf = layernorm(x, p.final_ln_g, p.final_ln_b, f.head.lnf);
    f.head.logits = f.head.nf * p.unembed;
    f.head.logits.array().rowwise() += p.unembed_b.row(0).array();
    f.head.logprobs = log_softmax_rows(f.head.logits);
}

// Backward from dlogits to the activations entering block `first_block`.
MatrixXd backprop_to_block_input(const LMParams& p, const LMConfig& cfg, const SeqForward& f,
                                 const MatrixXd& dlogits, LMParams* g) {
    MatrixXd dnf = dlogits * p.unembed.transpose();
    if (g) {
        g->unembed += f.head.nf.transpose() * dlogits;
        g->unembed_b.row(0) += dlogits.colwise().sum();
    }
    MatrixXd dx = layernorm_backward(dnf, p.final_ln_g, f.head.lnf,
                                     g ? &g->final_ln_g : nullptr, g ? &g->final_ln_b : nullptr);
    for (int l = cfg.n_layers - 1; l >= f.first_block; --l)
        dx = block_backward(p.layers[static_cast<size_t>(l)], cfg,
                            f.layers[static_cast<size_t>(l - f.first_block)], dx,
                            g ? &g->layers[static_cast<size_t>(l)] : nullptr);
    return dx;
}

MatrixXd embed_tokens(const LMParams& p, const LMConfig& cfg, const std::vector<TokenId>& toks) {
    if (static_cast<int>(toks.size()) > cfg.context_len)
        throw InputError("sequence length " + std::to_string(toks.size()) + " exceeds context_len " +
                         std::to_string(cfg.context_len));
    MatrixXd x(static_cast<Eigen::Index>(toks.size()), cfg.d_model);
    for (size_t t = 0; t < toks.size(); ++t) {
        if (toks[t] >= static_cast<TokenId>(cfg.vocab_size))
            throw InputError("token id " + std::to_string(toks[t]) + " out of vocab range " +
                             std::to_string(cfg.vocab_size));
        x.row(static_cast<Eigen::Index>(t)) =
            p.embed.row(toks[t]) + p.pos.row(static_cast<Eigen::Index>(t));
    }
    return x;
}

void check_acts_shape(const LMConfig& cfg, const MatrixXd& acts) {
    if (acts.cols() != cfg.d_model)
        throw InputError("activation width " + std::to_string(acts.cols()) +
                         " does not match d_model " + std::to_string(cfg.d_model));
    if (acts.rows() < 1 || acts.rows() > cfg.context_len)
        throw InputError("activation rows " + std::to_string(acts.rows()) + " out of range");
}

double ce_of_logprobs(const MatrixXd& logprobs, const std::vector<TokenId>& tokens, int n_real) {
    double total = 0.0;
    int count = 0;
    for (int pos = 0; pos + 1 < n_real; ++pos) {
        total -= logprobs(pos, static_cast<Eigen::Index>(tokens[static_cast<size_t>(pos + 1)]));
        ++count;
    }
    return count > 0 ? total / count : 0.0;
}

}  // namespace

void LMConfig::validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
        throw ConfigError("d_model must be a positive multiple of n_heads");
    if (vocab_size < 1) throw ConfigError("vocab_size must be set");
    if (context_len < 2) throw ConfigError("context_len must be >= 2");
    if (mid_layer < 1 || mid_layer > n_layers)
        throw ConfigError("mid_layer must be in [1, n_layers]");
}

LMParams init_lm_params(const LMConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    auto randn = [&](Eigen::Index r, Eigen::Index c) {
        MatrixXd m(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) m(i, j) = normal(rng);
        return m;
    };
    const int d = cfg.d_model;
    LMParams p;
    p.embed = randn(cfg.vocab_size, d);
    p.pos = randn(cfg.context_len, d);
    p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& lp : p.layers) {
        lp.ln1_g = MatrixXd::Ones(1, d);
        lp.ln1_b = MatrixXd::Zero(1, d);
        lp.wq = randn(d, d);
        lp.wk = randn(d, d);
        lp.wv = randn(d, d);
        lp.wo = randn(d, d);
        lp.bq = MatrixXd::Zero(1, d);
        lp.bk = MatrixXd::Zero(1, d);
        lp.bv = MatrixXd::Zero(1, d);
        lp.bo = MatrixXd::Zero(1, d);
        lp.ln2_g = MatrixXd::Ones(1, d);
        lp.ln2_b = MatrixXd::Zero(1, d);
        lp.w_fc = randn(d, 4 * d);
        lp.b_fc = MatrixXd::Zero(1, 4 * d);
        lp.w_proj = randn(4 * d, d);
        lp.b_proj = MatrixXd::Zero(1, d);
    }
    p.final_ln_g = MatrixXd::Ones(1, d);
    p.final_ln_b = MatrixXd::Zero(1, d);
    p.unembed = randn(d, cfg.vocab_size);
    p.unembed_b = MatrixXd::Zero(1, cfg.vocab_size);
    return p;
}

void zero_like(const LMParams& shape, LMParams& out) {
    out = shape;
    for_each_tensor(out, [](const std::string&, MatrixXd& m) { m.setZero(); });
}

void for_each_tensor(LMParams& p, const std::function<void(const std::string&, MatrixXd&)>& fn) {
    fn("embed", p.embed);
    fn("pos", p.pos);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        auto& lp = p.layers[l];
        const std::string base = "layers." + std::to_string(l) + ".";
        fn(base + "ln1_g", lp.ln1_g);
        fn(base + "ln1_b", lp.ln1_b);
        fn(base + "wq", lp.wq);
        fn(base + "wk", lp.wk);
        fn(base + "wv", lp.wv);
        fn(base + "wo", lp.wo);
        fn(base + "bq", lp.bq);
        fn(base + "bk", lp.bk);
        fn(base + "bv", lp.bv);
        fn(base + "bo", lp.bo);
        fn(base + "ln2_g", lp.ln2_g);
        fn(base + "ln2_b", lp.ln2_b);
        fn(base + "w_fc", lp.w_fc);
        fn(base + "b_fc", lp.b_fc);
        fn(base + "w_proj", lp.w_proj);
        fn(base + "b_proj", lp.b_proj);
    }
    fn("final_ln_g", p.final_ln_g);
    fn("final_ln_b", p.final_ln_b);
    fn("unembed", p.unembed);
    fn("unembed_b", p.unembed_b);
}

void for_each_tensor(const LMParams& p,
                     const std::function<void(const std::string&, const MatrixXd&)>& fn) {
    for_each_tensor(const_cast<LMParams&>(p),
                    [&](const std::string& n, MatrixXd& m) { fn(n, m); });
}

MatrixXd forward_logits(const Checkpoint& ckpt, const std::vector<TokenId>& tokens) {
    MatrixXd x = embed_tokens(ckpt.params, ckpt.config, tokens);
    SeqForward f;
    run_to_logprobs(ckpt.params, ckpt.config, x, 0, f);
    return f.head.logprobs;
}

MatrixXd capture_midlayer(const Checkpoint& ckpt, const std::vector<TokenId>& tokens) {
    MatrixXd x = embed_tokens(ckpt.params, ckpt.config, tokens);
    LayerCache scratch;
    for (int l = 0; l < ckpt.config.mid_layer; ++l)
        block_forward(ckpt.params.layers[static_cast<size_t>(l)], ckpt.config, x, scratch);
    return x;
}

MatrixXd forward_from_midlayer(const Checkpoint& ckpt, const MatrixXd& acts) {
    check_acts_shape(ckpt.config, acts);
    MatrixXd x = acts;
    SeqForward f;
    run_to_logprobs(ckpt.params, ckpt.config, x, ckpt.config.mid_layer, f);
    return f.head.logprobs;
}

MatrixXd grad_metric_wrt_midlayer(const Checkpoint& ckpt, const MatrixXd& acts,
                                  const MetricSpec& spec) {
    check_acts_shape(ckpt.config, acts);
    if (spec.position < 0 || spec.position >= acts.rows())
        throw InputError("metric position out of range");
    MatrixXd x = acts;
    SeqForward f;
    run_to_logprobs(ckpt.params, ckpt.config, x, ckpt.config.mid_layer, f);
    // m = logp(wrong) - logp(correct) = logit(wrong) - logit(correct):
    // the log-sum-exp terms cancel, so the logit-space gradient is two spikes.
    MatrixXd dlogits = MatrixXd::Zero(acts.rows(), ckpt.config.vocab_size);
    dlogits(spec.position, static_cast<Eigen::Index>(spec.wrong)) += 1.0;
    dlogits(spec.position, static_cast<Eigen::Index>(spec.correct)) -= 1.0;
    return backprop_to_block_input(ckpt.params, ckpt.config, f, dlogits, nullptr);
}

double metric_m_from_logprobs(const MatrixXd& logprobs, const MetricSpec& spec) {
    if (spec.position < 0 || spec.position >= logprobs.rows())
        throw InputError("metric position out of range");
    return logprobs(spec.position, static_cast<Eigen::Index>(spec.wrong)) -
           logprobs(spec.position, static_cast<Eigen::Index>(spec.correct));
}

double ce_from_midlayer(const Checkpoint& ckpt, const MatrixXd& acts,
                        const std::vector<TokenId>& tokens, int n_real) {
    MatrixXd lp = forward_from_midlayer(ckpt, acts);
    return ce_of_logprobs(lp, tokens, n_real);
}

double ce_full(const Checkpoint& ckpt, const std::vector<TokenId>& tokens, int n_real) {
    MatrixXd lp = forward_logits(ckpt, tokens);
    return ce_of_logprobs(lp, tokens, n_real);
}

SentencePacker::SentencePacker(const TokenStream& stream, int context_len, TokenId bos,
                               TokenId pad, TokenId terminator)
    : stream_(stream), context_len_(context_len), bos_(bos), pad_(pad), term_(terminator) {
    if (context_len < 2) throw ConfigError("context_len must be >= 2");
}

std::optional<PackedSeq> SentencePacker::next() {
    if (cursor_ >= stream_.size()) return std::nullopt;
    PackedSeq seq;
    seq.tokens.reserve(static_cast<size_t>(context_len_));
    seq.tokens.push_back(bos_);
    while (cursor_ < stream_.size()) {
        std::size_t end = cursor_;
        while (end < stream_.size() && stream_[end] != term_) ++end;
        if (end == stream_.size()) {
            cursor_ = end;  // drop unterminated tail
            break;
        }
        const std::size_t len = end - cursor_ + 1;
        if (len + 1 > static_cast<std::size_t>(context_len_))
            throw InputError("sentence of " + std::to_string(len) + " tokens does not fit context_len " +
                             std::to_string(context_len_));
        if (seq.tokens.size() + len > static_cast<std::size_t>(context_len_)) break;
        seq.tokens.insert(seq.tokens.end(), stream_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                          stream_.begin() + static_cast<std::ptrdiff_t>(end + 1));
        cursor_ = end + 1;
    }
    if (seq.tokens.size() <= 1) return std::nullopt;
    seq.n_real = static_cast<int>(seq.tokens.size());
    seq.tokens.resize(static_cast<size_t>(context_len_), pad_);
    return seq;
}

LMTrainResult train_lm(const LMConfig& cfg, const TokenStream& corpus,
                       const std::vector<long long>& schedule, const LMTrainOpt& opt) {
    cfg.validate();
    if (schedule.empty()) throw ConfigError("snapshot schedule is empty");
    for (size_t i = 1; i < schedule.size(); ++i)
        if (schedule[i] <= schedule[i - 1])
            throw ConfigError("snapshot schedule must be strictly increasing");
    if (schedule.front() < 0) throw ConfigError("snapshot steps must be >= 0");

    LMParams params = init_lm_params(cfg);
    LMParams grads, m_state, v_state;
    zero_like(params, grads);
    zero_like(params, m_state);
    zero_like(params, v_state);

    std::vector<MatrixXd*> tp, tg, tm, tv;
    for_each_tensor(params, [&](const std::string&, MatrixXd& t) { tp.push_back(&t); });
    for_each_tensor(grads, [&](const std::string&, MatrixXd& t) { tg.push_back(&t); });
    for_each_tensor(m_state, [&](const std::string&, MatrixXd& t) { tm.push_back(&t); });
    for_each_tensor(v_state, [&](const std::string&, MatrixXd& t) { tv.push_back(&t); });

    std::mt19937_64 rng(cfg.seed ^ 0x2545F4914F6CDD1Dull);
    const long long batch_tokens = static_cast<long long>(opt.batch_seqs) * cfg.context_len;

    LMTrainResult result;
    auto snapshot = [&](long long step) {
        Checkpoint c;
        c.step = step;
        c.tokens_seen = step * batch_tokens;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "t%010lld", c.tokens_seen);
        c.id = buf;
        c.config = cfg;
        c.params = params;
        std::ostringstream ss;
        ss << rng;
        c.rng_state = ss.str();
        result.checkpoints.push_back(std::move(c));
    };

    snapshot(0);

    SentencePacker packer(corpus, cfg.context_len, opt.bos, opt.pad, opt.terminator);
    const long long max_step = schedule.back();
    size_t next_snap = 0;
    while (next_snap < schedule.size() && schedule[next_snap] == 0) ++next_snap;

    for (long long step = 1; step <= max_step; ++step) {
        std::vector<PackedSeq> batch;
        batch.reserve(static_cast<size_t>(opt.batch_seqs));
        for (int b = 0; b < opt.batch_seqs; ++b) {
            auto seq = packer.next();
            if (!seq)
                throw InputError("corpus exhausted: completed " + std::to_string(step - 1) + " of " +
                                 std::to_string(max_step) + " steps");
            batch.push_back(std::move(*seq));
        }

        for (auto* t : tg) t->setZero();
        double loss_sum = 0.0;
        long long loss_count = 0;
        for (auto& seq : batch) {
            MatrixXd x = embed_tokens(params, cfg, seq.tokens);
            SeqForward f;
            run_to_logprobs(params, cfg, x, 0, f);
            MatrixXd dlogits = MatrixXd::Zero(cfg.context_len, cfg.vocab_size);
            for (int pos = 0; pos + 1 < seq.n_real; ++pos) {
                const auto target = static_cast<Eigen::Index>(seq.tokens[static_cast<size_t>(pos + 1)]);
                loss_sum -= f.head.logprobs(pos, target);
                ++loss_count;
                dlogits.row(pos) += f.head.logprobs.row(pos).array().exp().matrix();
                dlogits(pos, target) -= 1.0;
            }
            MatrixXd dx = backprop_to_block_input(params, cfg, f, dlogits, &grads);
            for (int pos = 0; pos < cfg.context_len; ++pos) {
                grads.embed.row(seq.tokens[static_cast<size_t>(pos)]) += dx.row(pos);
                grads.pos.row(pos) += dx.row(pos);
            }
        }
        const double inv = 1.0 / static_cast<double>(loss_count);
        for (auto* t : tg) *t *= inv;
        const double ce = loss_sum * inv;
        if (!std::isfinite(ce))
            throw NumericalError("non-finite LM training loss at step " + std::to_string(step));
        result.loss_log.emplace_back(step, ce);

        const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
        for (size_t i = 0; i < tp.size(); ++i) {
            *tm[i] = opt.beta1 * *tm[i] + (1.0 - opt.beta1) * *tg[i];
            *tv[i] = opt.beta2 * tv[i]->array().matrix() +
                     (1.0 - opt.beta2) * tg[i]->array().square().matrix();
            tp[i]->array() -= opt.lr * (tm[i]->array() / bc1) /
                              ((tv[i]->array() / bc2).sqrt() + opt.eps);
        }

        if (next_snap < schedule.size() && schedule[next_snap] == step) {
            snapshot(step);
            ++next_snap;
        }
    }
    return result;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    BinWriter w(path);
    w.magic("XCLM");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(ckpt.config.n_layers));
    w.u32(static_cast<std::uint32_t>(ckpt.config.d_model));
    w.u32(static_cast<std::uint32_t>(ckpt.config.n_heads));
    w.u32(static_cast<std::uint32_t>(ckpt.config.vocab_size));
    w.u32(static_cast<std::uint32_t>(ckpt.config.context_len));
    w.u32(static_cast<std::uint32_t>(ckpt.config.mid_layer));
    w.u64(ckpt.config.seed);
    std::uint32_t count = 0;
    for_each_tensor(ckpt.params, [&](const std::string&, const MatrixXd&) { ++count; });
    w.u32(count);
    for_each_tensor(ckpt.params,
                    [&](const std::string& name, const MatrixXd& t) { w.tensor(name, t); });
    w.close();

    std::string meta = "[checkpoint]\n";
    meta += "id = " + ckpt.id + "\n";
    meta += "step = " + std::to_string(ckpt.step) + "\n";
    meta += "tokens_seen = " + std::to_string(ckpt.tokens_seen) + "\n";
    meta += "seed = " + std::to_string(ckpt.config.seed) + "\n";
    meta += "rng_state = " + ckpt.rng_state + "\n";
    write_file_atomic(path + ".meta", meta);
}

Checkpoint load_checkpoint(const std::string& path) {
    BinReader r(path);
    r.expect_magic("XCLM", "checkpoint");
    std::uint32_t version = r.u32();
    if (version != 1) throw InputError(path + ": unsupported XCLM version");
    Checkpoint c;
    c.config.n_layers = static_cast<int>(r.u32());
    c.config.d_model = static_cast<int>(r.u32());
    c.config.n_heads = static_cast<int>(r.u32());
    c.config.vocab_size = static_cast<int>(r.u32());
    c.config.context_len = static_cast<int>(r.u32());
    c.config.mid_layer = static_cast<int>(r.u32());
    c.config.seed = r.u64();
    c.config.validate();

    c.params.layers.resize(static_cast<size_t>(c.config.n_layers));
    std::map<std::string, MatrixXd> tensors;
    std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, t] = r.tensor();
        tensors.emplace(std::move(name), std::move(t));
    }
    for_each_tensor(c.params, [&](const std::string& name, MatrixXd& t) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw InputError(path + ": missing tensor " + name);
        t = it->second;
    });

    Config meta = Config::load(path + ".meta");
    c.id = meta.require("checkpoint", "id");
    c.step = meta.get_int("checkpoint", "step", 0);
    c.tokens_seen = meta.get_int("checkpoint", "tokens_seen", 0);
    c.rng_state = meta.get("checkpoint", "rng_state", "");
    return c;
}

}  // namespace xct
