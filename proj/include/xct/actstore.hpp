#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xct/common.hpp"
#include "xct/lm.hpp"

namespace xct {

// Token-aligned midlayer activations for one checkpoint, stored on disk as
// an "XACT" container: header, then rows x d_model row-major f32. Row t of
// every shard from one extraction refers to the same (sequence, position).
struct PositionRef {
    std::uint32_t seq = 0;
    std::uint32_t pos = 0;
};

struct ExtractOptions {
    std::size_t n_tokens = 0;       // minimum number of rows to extract
    std::size_t skip_sequences = 0; // packed sequences to skip (validation offsets)
    TokenId bos = 0, pad = 1, terminator = 3;
};

struct ExtractResult {
    std::vector<std::string> shard_paths;  // one per checkpoint, same order
    std::string posmap_path;
    std::uint64_t rows = 0;
    std::string alignment_key;
    std::vector<PackedSeq> sequences;      // the packed sequences that were read
    std::vector<PositionRef> posmap;
};

// Runs every checkpoint over the same packed corpus slice and writes one
// row-aligned shard per checkpoint. BOS and PAD positions are excluded.
ExtractResult extract_shards(const std::vector<const Checkpoint*>& ckpts,
                             const TokenStream& corpus, const ExtractOptions& opts,
                             const std::string& out_dir, const std::string& tag);

// Read-only memory-mapped shard.
class MappedShard {
public:
    explicit MappedShard(const std::string& path);
    ~MappedShard();
    MappedShard(const MappedShard&) = delete;
    MappedShard& operator=(const MappedShard&) = delete;

    const std::string& source() const { return source_; }
    const std::string& alignment_key() const { return alignment_key_; }
    int dim() const { return d_; }
    std::uint64_t rows() const { return rows_; }
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
    matrix() const;
    Eigen::VectorXd row(std::uint64_t r) const;

private:
    std::string path_, source_, alignment_key_;
    int d_ = 0;
    std::uint64_t rows_ = 0;
    const float* data_ = nullptr;
    void* map_ = nullptr;
    std::size_t map_len_ = 0;
};

std::vector<PositionRef> load_posmap(const std::string& path);

struct NormStats {
    std::string source;
    double scale = 1.0;  // divide activations by this to get mean norm sqrt(d)
};

// scale s such that the mean l2 norm of x/s over the sample is sqrt(d).
NormStats estimate_norm(const MappedShard& shard, std::size_t sample);

struct Batch {
    std::vector<Eigen::MatrixXd> xs;       // one (batch x d) block per source, normalized
    std::vector<std::uint64_t> row_index;  // shared across sources
};

// Streams row-aligned batches in seed-shuffled order. One epoch visits every
// row exactly once; start_epoch() reshuffles deterministically.
class BatchStream {
public:
    BatchStream(std::vector<const MappedShard*> shards, std::vector<NormStats> norms,
                std::size_t batch_tokens, std::uint64_t seed);
    std::optional<Batch> next();
    void start_epoch();
    std::uint64_t rows() const { return rows_; }
    int epoch() const { return epoch_; }

private:
    std::vector<const MappedShard*> shards_;
    std::vector<NormStats> norms_;
    std::size_t batch_tokens_;
    std::uint64_t rows_ = 0;
    std::mt19937_64 rng_;
    std::vector<std::uint64_t> order_;
    std::size_t cursor_ = 0;
    int epoch_ = -1;
};

}  // namespace xct
