#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include "xct/common.hpp"
#include "xct/crosscoder.hpp"
#include "xct/grammar.hpp"
#include "xct/lm.hpp"

namespace xct {

// Downstream-of-midlayer view of one model: the agreement metric
// m = log p(wrong) - log p(correct) and its gradient with respect to the
// midlayer activations. Checkpoints provide the real thing; tests can
// substitute affine fixtures.
class MidlayerScorer {
public:
    virtual ~MidlayerScorer() = default;
    virtual double metric(const MatrixXd& acts, const MetricSpec& spec) const = 0;
    virtual MatrixXd metric_grad(const MatrixXd& acts, const MetricSpec& spec) const = 0;
};

class CheckpointScorer : public MidlayerScorer {
public:
    explicit CheckpointScorer(const Checkpoint& ckpt) : ckpt_(&ckpt) {}
    double metric(const MatrixXd& acts, const MetricSpec& spec) const override;
    MatrixXd metric_grad(const MatrixXd& acts, const MetricSpec& spec) const override;

private:
    const Checkpoint* ckpt_;
};

// BOS-prefixed scoring sequence and metric location for a minimal pair.
std::vector<TokenId> pair_sequence(const MinimalPair& pair, TokenId bos);
MetricSpec pair_metric(const MinimalPair& pair);

// m evaluated on the clean model; negative means the model prefers the
// correct completion.
double metric_m(const Checkpoint& ckpt, const MinimalPair& pair, TokenId bos = 0);

struct IGConfig {
    int n_steps = 10;
    double threshold = 0.1;
    enum class Positions { AllPrefix, FinalOnly };
    Positions positions = Positions::AllPrefix;
    enum class PositionAgg { Sum, Mean };
    PositionAgg agg = PositionAgg::Sum;

    void validate() const;
};

// Everything attribution needs about one example: the clean midlayer capture
// of every source, the joint feature activations at the ablatable positions,
// and the frozen reconstruction errors implied by them.
struct PairContext {
    std::vector<TokenId> tokens;
    MetricSpec spec;
    std::vector<int> positions;   // ablatable positions (BOS excluded)
    std::vector<MatrixXd> clean;  // per source, T x d raw activations
    MatrixXd f;                   // |positions| x D joint feature activations
};

PairContext build_pair_context(const CrosscoderParams& p,
                               const std::vector<const Checkpoint*>& ckpts,
                               const MinimalPair& pair, IGConfig::Positions positions,
                               TokenId bos = 0);

// Exact zero-ablation indirect effect of one feature, error-frozen patching:
// m(x | do(f_i = 0)) - m(x).
double ie_exact(const MidlayerScorer& scorer, const CrosscoderParams& p, int source,
                const PairContext& ctx, int feature);

// Integrated-gradients estimate of every feature's IE from n_steps gradient
// evaluations along the straight path from the fully ablated point to the
// clean activations (alpha in {0, 1/N, ..., (N-1)/N}).
VectorXd ie_ig_single(const MidlayerScorer& scorer, const CrosscoderParams& p, int source,
                      const PairContext& ctx, const IGConfig& cfg);

// Path integral for one feature alone (all other features held clean). By
// the fundamental theorem of calculus this converges to ie_exact as n_steps
// grows; the tests use it to validate the integration machinery.
double ie_ig_single_feature_path(const MidlayerScorer& scorer, const CrosscoderParams& p,
                                 int source, const PairContext& ctx, int feature, int n_steps);

struct AttributionTable {
    std::string crosscoder_id;
    std::string task;
    std::string slice;
    std::vector<std::string> sources;
    int n_examples = 0;
    double threshold = 0.1;
    std::vector<VectorXd> ie;        // per source, length D, post-threshold batch averages
    std::vector<VectorXd> ie_exact;  // optional oracle columns (NaN where not computed)

    int dict_size() const { return ie.empty() ? 0 : static_cast<int>(ie.front().size()); }
    bool has_exact() const { return !ie_exact.empty(); }
    bool no_effect(int feature) const;
};

// Batch-averaged IG attribution for every feature and source, thresholded.
AttributionTable attribute_pairs(const std::vector<const Checkpoint*>& ckpts,
                                 const CrosscoderParams& p,
                                 const std::vector<MinimalPair>& pairs, const IGConfig& cfg,
                                 const std::string& slice_label, TokenId bos = 0);

// Adds exact zero-ablation columns for the union of each source's strongest
// `per_source_top_k` features (by |IE_ig|).
void add_exact_columns(AttributionTable& table, const std::vector<const Checkpoint*>& ckpts,
                       const CrosscoderParams& p, const std::vector<MinimalPair>& pairs,
                       const IGConfig& cfg, int per_source_top_k, TokenId bos = 0);

// Relative decoder norm for one feature between two sources of p; nullopt
// when both norms vanish.
std::optional<double> reldec(const CrosscoderParams& p, int c1, int c2, int feature);

std::optional<double> relie2(const AttributionTable& t, int c1, int c2, int feature);
std::optional<Eigen::Vector3d> relie3(const AttributionTable& t, int feature);

// Features ranked by |IE| for one source, ties broken by ascending id; only
// features above the report threshold appear, so fewer than k may return.
std::vector<int> top_k_features(const AttributionTable& t, int source, int k);

// Tab-separated table export/import (the ie and ie_exact columns; derived
// RelDec/RelIE columns are recomputed on export).
std::string table_to_tsv(const AttributionTable& t, const CrosscoderParams& p);
void save_table(const AttributionTable& t, const CrosscoderParams& p, const std::string& path);
AttributionTable load_table(const std::string& path);

}  // namespace xct
