#pragma once

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xct/attribution.hpp"
#include "xct/common.hpp"
#include "xct/crosscoder.hpp"
#include "xct/grammar.hpp"
#include "xct/lm.hpp"

namespace xct {

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct AccuracyPoint {
    std::string ckpt_id;
    long long tokens_seen = 0;
    std::string tag;  // "all" or a slice label
    double accuracy = 0;
};

// Fraction of pairs where log p(correct) > log p(wrong), per checkpoint,
// reported for every slice label plus an "all" aggregate.
std::vector<AccuracyPoint> accuracy_curve(const std::vector<const Checkpoint*>& ckpts,
                                          const std::vector<MinimalPair>& pairs, TokenId bos = 0);

struct SimilarityOptions {
    enum class Position { FinalPrefix, MeanOverPrefix };
    Position position = Position::FinalPrefix;
    enum class Metric { Cosine, Pearson };
    Metric metric = Metric::Cosine;
};

struct SimilarityResult {
    MatrixXd matrix;             // n_ckpt x n_ckpt, unit diagonal
    long long skipped_examples = 0;  // zero-vector activations
};

SimilarityResult similarity_matrix(const std::vector<const Checkpoint*>& ckpts,
                                   const std::vector<MinimalPair>& pairs,
                                   const SimilarityOptions& opts, TokenId bos = 0);

struct TransitionSuggestion {
    std::string ckpt_id;
    std::string rationale;
};

// Advisory checkpoint suggestions: local maxima of accuracy jumps over a
// window plus the largest adjacent similarity drops. The CLI never acts on
// these without an explicit source list in the config.
std::vector<TransitionSuggestion> suggest_transitions(const std::vector<std::string>& ckpt_ids,
                                                      const std::vector<double>& accuracy,
                                                      const MatrixXd& similarity, int window,
                                                      double jump_threshold);

struct AblationRow {
    int feature = 0;
    double delta_c1 = 0;  // change in mean m after hard ablation, source c1
    double delta_c2 = 0;
    double ratio = 0;     // |delta_c2| / |delta_c1|
    bool usable = false;
};

struct AblationValidation {
    std::vector<AblationRow> rows;
    double spearman_reldec = 0;
    double spearman_relie = 0;
};

// Hard-ablates (error-frozen, one feature at a time) the union of the
// compared pair's top-k features and correlates |dc2|/|dc1| against RelDec
// and RelIE. `sources` supplies one checkpoint per crosscoder source (the
// joint encode needs all of them); i1/i2 pick the compared pair. Throws
// InputError when fewer than 3 usable features remain.
AblationValidation ablation_validation(const std::vector<const Checkpoint*>& sources, int i1,
                                       int i2, const CrosscoderParams& params,
                                       const std::vector<MinimalPair>& pairs,
                                       const AttributionTable& table, int k,
                                       IGConfig::Positions positions =
                                           IGConfig::Positions::AllPrefix,
                                       TokenId bos = 0);

// Scorer-level core of the validation study; lets tests substitute fixture
// metrics for the checkpoints.
AblationValidation ablation_validation_scored(const MidlayerScorer& s1, const MidlayerScorer& s2,
                                              const CrosscoderParams& params,
                                              const std::vector<PairContext>& contexts,
                                              const AttributionTable& table, int i1, int i2,
                                              int k);

// |top-k intersection| for one source across per-slice tables. Symmetric,
// diagonal = number of features above threshold capped at k.
Eigen::MatrixXi overlap_counts(const std::vector<const AttributionTable*>& tables,
                               const std::string& source_id, int k);

struct SeqActivation {
    std::uint32_t seq = 0;
    double max_act = 0;
    std::vector<std::pair<int, double>> token_acts;  // (position, activation), activation > 0
};

using TopActivations = std::map<int, std::vector<SeqActivation>>;

// Exact top-m sequences per feature by max token activation (full scan).
TopActivations top_activating_sequences(const CrosscoderParams& p,
                                        const std::vector<const MappedShard*>& shards,
                                        const std::vector<PositionRef>& posmap,
                                        const std::vector<PackedSeq>& sequences,
                                        const std::vector<int>& features, int m_seqs);

// --- plain-file exports (tab separated, atomic rename) ----------------------

void export_accuracy(const std::vector<AccuracyPoint>& curve, const std::string& path);
void export_heatmap(const std::vector<std::string>& ckpt_ids, const MatrixXd& sim,
                    const std::string& path);
void export_transitions(const std::vector<TransitionSuggestion>& suggestions,
                        const std::string& path);
// Ternary RelIE coordinates; requires a three-source table.
void export_ternary(const AttributionTable& table, int top_k, const std::string& path);
// Per-feature IE across the table's sources (long format).
void export_ie_evolution(const AttributionTable& table, const std::string& path);
void export_overlap(const std::vector<std::string>& slices, const Eigen::MatrixXi& counts,
                    const std::string& source_id, const std::string& path);
// Annotation worksheets: top sequences with per-token activations plus the
// four annotation questions (description, interpretability, complexity,
// languages), one block per feature.
void export_annotation_sheets(const std::vector<int>& features, const TopActivations& tops,
                              const Vocab& vocab, const std::vector<PackedSeq>& sequences,
                              const std::string& path);

}  // namespace xct
