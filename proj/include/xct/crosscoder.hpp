#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "xct/actstore.hpp"
#include "xct/common.hpp"
#include "xct/lm.hpp"

namespace xct {

// Sparse crosscoder over one, two, or three activation sources. A single
// source reduces to a plain sparse autoencoder. Feature activations are
//   f = ReLU(sum_c W_enc^c x_c + b_enc),
// reconstructions x_hat_c = W_dec^c^T rows scaled by f plus b_dec^c, and the
// training loss is the summed squared reconstruction error plus the decoder
// norm weighted L1 penalty, both summed over sources.
struct CrosscoderParams {
    std::vector<std::string> sources;
    int dict_size = 0;  // D
    int d_model = 0;    // d
    std::vector<MatrixXd> w_enc;       // per source, D x d
    VectorXd b_enc;                    // D (shared)
    std::vector<MatrixXd> w_dec;       // per source, D x d; row i = feature i's direction
    std::vector<VectorXd> b_dec;       // per source, d
    std::vector<double> norm_scale;    // per-source activation scale of the training shards

    int n_sources() const { return static_cast<int>(sources.size()); }
    int source_index(const std::string& id) const;  // throws InputError if unknown
    void validate() const;
};

// Batch encode: xs[c] is (B x d) in normalized activation space.
MatrixXd encode(const CrosscoderParams& p, const std::vector<MatrixXd>& xs);
VectorXd encode_one(const CrosscoderParams& p, const std::vector<VectorXd>& xs);
MatrixXd decode(const CrosscoderParams& p, const MatrixXd& f, int source);
VectorXd decode_one(const CrosscoderParams& p, const VectorXd& f, int source);

struct LossBreakdown {
    double total = 0;
    std::vector<double> recon;  // per source
    double sparsity = 0;
    double l0 = 0;  // mean active features per token in this batch
};

// Per-token mean over the batch.
LossBreakdown crosscoder_loss(const CrosscoderParams& p, const std::vector<MatrixXd>& xs,
                              double lambda);

struct CrosscoderGrads {
    std::vector<MatrixXd> w_enc;
    VectorXd b_enc;
    std::vector<MatrixXd> w_dec;
    std::vector<VectorXd> b_dec;
};

LossBreakdown crosscoder_loss_grad(const CrosscoderParams& p, const std::vector<MatrixXd>& xs,
                                   double lambda, CrosscoderGrads& grads);

struct XcTrainHP {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double l1_coeff = 2.0;
    double warmup_fraction = 0.05;
    long long steps = 0;
    double dec_init_norm = 0.08;
    std::uint64_t seed = 0;
};

struct XcTrainLogEntry {
    long long step = 0;
    double lambda = 0;
    double total = 0;
    std::vector<double> recon;
    double sparsity = 0;
    double l0 = 0;
};

struct XcTrainResult {
    CrosscoderParams params;
    std::vector<XcTrainLogEntry> log;
};

// Adam with linear lambda warmup over the first warmup_fraction of steps.
// Decoder rows start at norm dec_init_norm; encoders start as the decoder
// transpose scaled for unit pre-activation variance on a calibration batch.
XcTrainResult train_crosscoder(const XcTrainHP& hp, BatchStream& stream,
                               const std::vector<std::string>& source_ids,
                               const std::vector<double>& norm_scales, int dict_size);

struct CrosscoderEval {
    double l0 = 0;
    long long dead_count = 0;
    std::vector<double> delta_ce;                  // per source
    std::vector<double> frac_variance_explained;   // per source
    std::vector<double> ce_clean, ce_patched;      // per source, token-mean
};

// Quality metrics over a validation extraction. delta_ce[c] patches source
// c's midlayer with the rescaled reconstruction and re-runs the model.
CrosscoderEval eval_crosscoder(const CrosscoderParams& p,
                               const std::vector<const MappedShard*>& val_shards,
                               const std::vector<PositionRef>& posmap,
                               const std::vector<PackedSeq>& sequences,
                               const std::vector<const Checkpoint*>& ckpts);

// "XCCX" container.
void save_crosscoder(const CrosscoderParams& p, const std::string& path);
CrosscoderParams load_crosscoder(const std::string& path);

}  // namespace xct
