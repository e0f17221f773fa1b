#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xct/common.hpp"

namespace xct {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct LMConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int vocab_size = 0;
    int context_len = 64;
    int mid_layer = 2;  // 1-based; capture point is the residual stream after this block
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const LMConfig&) const = default;
};

struct LayerParams {
    MatrixXd ln1_g, ln1_b;        // 1 x d
    MatrixXd wq, wk, wv, wo;      // d x d
    MatrixXd bq, bk, bv, bo;      // 1 x d
    MatrixXd ln2_g, ln2_b;        // 1 x d
    MatrixXd w_fc, b_fc;          // d x 4d, 1 x 4d
    MatrixXd w_proj, b_proj;      // 4d x d, 1 x d
};

struct LMParams {
    MatrixXd embed;               // V x d
    MatrixXd pos;                 // ctx x d
    std::vector<LayerParams> layers;
    MatrixXd final_ln_g, final_ln_b;  // 1 x d
    MatrixXd unembed, unembed_b;      // d x V, 1 x V
};

LMParams init_lm_params(const LMConfig& cfg);
void zero_like(const LMParams& shape, LMParams& out);
// Stable enumeration of every tensor; drives serialization and Adam.
void for_each_tensor(LMParams& p, const std::function<void(const std::string&, MatrixXd&)>& fn);
void for_each_tensor(const LMParams& p,
                     const std::function<void(const std::string&, const MatrixXd&)>& fn);

struct Checkpoint {
    std::string id;
    long long step = 0;
    long long tokens_seen = 0;
    LMConfig config;
    LMParams params;
    std::string rng_state;
};

struct MetricSpec {
    TokenId correct = 0;
    TokenId wrong = 0;
    int position = 0;  // index of the last prefix token in the scored sequence
};

// Inference. All outputs are per-position natural-log probabilities over the
// vocabulary, rows normalized (log-sum-exp 0).
MatrixXd forward_logits(const Checkpoint& ckpt, const std::vector<TokenId>& tokens);
MatrixXd capture_midlayer(const Checkpoint& ckpt, const std::vector<TokenId>& tokens);
MatrixXd forward_from_midlayer(const Checkpoint& ckpt, const MatrixXd& acts);
// d metric / d acts for m = logp(wrong) - logp(correct) at spec.position,
// evaluated with `acts` patched in at the capture point.
MatrixXd grad_metric_wrt_midlayer(const Checkpoint& ckpt, const MatrixXd& acts,
                                  const MetricSpec& spec);

double metric_m_from_logprobs(const MatrixXd& logprobs, const MetricSpec& spec);

// Teacher-forced token-mean cross entropy of a packed sequence, given
// midlayer activations (clean or patched).
double ce_from_midlayer(const Checkpoint& ckpt, const MatrixXd& acts,
                        const std::vector<TokenId>& tokens, int n_real);
double ce_full(const Checkpoint& ckpt, const std::vector<TokenId>& tokens, int n_real);

// --- sequence packing ------------------------------------------------------

struct PackedSeq {
    std::vector<TokenId> tokens;  // context_len entries, BOS first, PAD tail
    int n_real = 0;               // count of non-PAD tokens (including BOS)
};

// Packs whole terminator-delimited sentences into fixed-length sequences.
class SentencePacker {
public:
    SentencePacker(const TokenStream& stream, int context_len, TokenId bos, TokenId pad,
                   TokenId terminator);
    std::optional<PackedSeq> next();
    std::size_t consumed() const { return cursor_; }

private:
    const TokenStream& stream_;
    std::size_t cursor_ = 0;
    int context_len_;
    TokenId bos_, pad_, term_;
};

// --- training ---------------------------------------------------------------

struct LMTrainOpt {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_seqs = 16;
    TokenId bos = 0, pad = 1, terminator = 3;
};

struct LMTrainResult {
    std::vector<Checkpoint> checkpoints;
    std::vector<std::pair<long long, double>> loss_log;  // (step, ce)
};

// One checkpoint per scheduled step plus step 0; deterministic per seed.
LMTrainResult train_lm(const LMConfig& cfg, const TokenStream& corpus,
                       const std::vector<long long>& schedule, const LMTrainOpt& opt);

// --- checkpoint files ("XCLM" + .meta sidecar) ------------------------------

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace xct
