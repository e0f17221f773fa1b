#include "xct/actstore.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "xct/hash.hpp"
#include "xct/serialize.hpp"

namespace xct {

ExtractResult extract_shards(const std::vector<const Checkpoint*>& ckpts,
                             const TokenStream& corpus, const ExtractOptions& opts,
                             const std::string& out_dir, const std::string& tag) {
    if (ckpts.empty()) throw ConfigError("extract: no checkpoints given");
    if (opts.n_tokens == 0) throw ConfigError("extract: n_tokens must be > 0");
    const LMConfig& cfg = ckpts.front()->config;
    for (auto* c : ckpts)
        if (!(c->config == cfg))
            throw InputError("extract: checkpoint " + c->id + " has a different LM config");

    std::filesystem::create_directories(out_dir);

    // Pack once so the row <-> (sequence, position) map is shared by every
    // source; BOS/PAD rows are excluded here.
    ExtractResult res;
    SentencePacker packer(corpus, cfg.context_len, opts.bos, opts.pad, opts.terminator);
    for (std::size_t skip = 0; skip < opts.skip_sequences; ++skip)
        if (!packer.next()) throw InputError("extract: corpus too short for skip_sequences");
    std::uint64_t row = 0;
    while (row < opts.n_tokens) {
        auto seq = packer.next();
        if (!seq)
            throw InputError("extract: corpus exhausted after " + std::to_string(row) + " of " +
                             std::to_string(opts.n_tokens) + " rows");
        const auto seq_idx = static_cast<std::uint32_t>(res.sequences.size());
        for (int pos = 1; pos < seq->n_real; ++pos) {  // pos 0 is BOS
            res.posmap.push_back({seq_idx, static_cast<std::uint32_t>(pos)});
            ++row;
        }
        res.sequences.push_back(std::move(*seq));
    }
    res.rows = row;

    const std::uint64_t corpus_hash = fnv1a64(corpus.data(), corpus.size() * sizeof(TokenId));
    {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%016llx-%zu-%d-%llu",
                      static_cast<unsigned long long>(corpus_hash), opts.skip_sequences,
                      cfg.context_len, static_cast<unsigned long long>(res.rows));
        res.alignment_key = buf;
    }

    res.posmap_path = out_dir + "/posmap." + tag + ".tsv";
    {
        std::string text;
        text.reserve(res.posmap.size() * 16);
        for (std::uint64_t r = 0; r < res.rows; ++r)
            text += std::to_string(r) + "\t" + std::to_string(res.posmap[r].seq) + "\t" +
                    std::to_string(res.posmap[r].pos) + "\n";
        write_file_atomic(res.posmap_path, text);
    }

    for (auto* ckpt : ckpts) {
        const std::string path = out_dir + "/" + ckpt->id + "." + tag + ".xact";
        BinWriter w(path);
        w.magic("XACT");
        w.u32(1);
        w.str(ckpt->id);
        w.str(res.alignment_key);
        w.u32(static_cast<std::uint32_t>(cfg.d_model));
        w.u64(res.rows);
        w.u32(1);  // dtype: f32
        std::vector<float> frow(static_cast<size_t>(cfg.d_model));
        std::uint64_t written = 0;
        for (std::size_t s = 0; s < res.sequences.size(); ++s) {
            const PackedSeq& seq = res.sequences[s];
            MatrixXd acts = capture_midlayer(*ckpt, seq.tokens);
            for (int pos = 1; pos < seq.n_real && written < res.rows; ++pos, ++written) {
                for (int j = 0; j < cfg.d_model; ++j)
                    frow[static_cast<size_t>(j)] = static_cast<float>(acts(pos, j));
                w.bytes(frow.data(), frow.size() * sizeof(float));
            }
        }
        w.close();
        res.shard_paths.push_back(path);
    }
    return res;
}

MappedShard::MappedShard(const std::string& path) : path_(path) {
    std::uint64_t data_offset = 0;
    {
        BinReader r(path);
        r.expect_magic("XACT", "activation shard");
        std::uint32_t version = r.u32();
        if (version != 1) throw InputError(path + ": unsupported XACT version");
        source_ = r.str();
        alignment_key_ = r.str();
        d_ = static_cast<int>(r.u32());
        rows_ = r.u64();
        std::uint32_t dtype = r.u32();
        if (dtype != 1) throw InputError(path + ": unsupported shard dtype");
        data_offset = 4 + 4 + 4 + source_.size() + 4 + alignment_key_.size() + 4 + 8 + 4;
    }
    int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) throw MissingInputError("cannot open shard: " + path);
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
        ::close(fd);
        throw InputError("cannot stat shard: " + path);
    }
    map_len_ = static_cast<std::size_t>(st.st_size);
    const std::size_t need = data_offset + rows_ * static_cast<std::size_t>(d_) * sizeof(float);
    if (map_len_ < need) {
        ::close(fd);
        throw InputError(path + ": shard truncated");
    }
    map_ = ::mmap(nullptr, map_len_, PROT_READ, MAP_PRIVATE, fd, 0);
    ::close(fd);
    if (map_ == MAP_FAILED) {
        map_ = nullptr;
        throw InputError("mmap failed for shard: " + path);
    }
    data_ = reinterpret_cast<const float*>(static_cast<const char*>(map_) + data_offset);
}

MappedShard::~MappedShard() {
    if (map_) ::munmap(map_, map_len_);
}

Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
MappedShard::matrix() const {
    return {data_, static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(d_)};
}

Eigen::VectorXd MappedShard::row(std::uint64_t r) const {
    if (r >= rows_) throw InputError("shard row out of range");
    Eigen::VectorXd out(d_);
    const float* p = data_ + r * static_cast<std::uint64_t>(d_);
    for (int j = 0; j < d_; ++j) out(j) = static_cast<double>(p[j]);
    return out;
}

std::vector<PositionRef> load_posmap(const std::string& path) {
    std::vector<PositionRef> out;
    std::istringstream in(read_file(path));
    std::string line;
    std::uint64_t expect = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto f = split(line, '\t');
        if (f.size() != 3) throw InputError(path + ": malformed position map line");
        if (static_cast<std::uint64_t>(parse_int(f[0], "row")) != expect)
            throw InputError(path + ": non-dense row indices");
        out.push_back({static_cast<std::uint32_t>(parse_int(f[1], "sequence")),
                       static_cast<std::uint32_t>(parse_int(f[2], "position"))});
        ++expect;
    }
    return out;
}

NormStats estimate_norm(const MappedShard& shard, std::size_t sample) {
    if (sample == 0 || sample > shard.rows())
        throw ConfigError("estimate_norm: sample must be in [1, rows]");
    const std::uint64_t stride = std::max<std::uint64_t>(1, shard.rows() / sample);
    double total = 0.0;
    std::size_t count = 0;
    for (std::uint64_t r = 0; r < shard.rows() && count < sample; r += stride, ++count)
        total += shard.row(r).norm();
    const double mean_norm = total / static_cast<double>(count);
    if (mean_norm <= 0.0)
        throw InputError("estimate_norm: shard for " + shard.source() +
                         " is all zeros (degenerate source)");
    NormStats s;
    s.source = shard.source();
    s.scale = mean_norm / std::sqrt(static_cast<double>(shard.dim()));
    return s;
}

BatchStream::BatchStream(std::vector<const MappedShard*> shards, std::vector<NormStats> norms,
                         std::size_t batch_tokens, std::uint64_t seed)
    : shards_(std::move(shards)), norms_(std::move(norms)), batch_tokens_(batch_tokens),
      rng_(seed ^ 0x9E3779B97F4A7C15ull) {
    if (shards_.empty()) throw ConfigError("BatchStream: no shards");
    if (norms_.size() != shards_.size())
        throw ConfigError("BatchStream: one NormStats per shard required");
    rows_ = shards_.front()->rows();
    for (std::size_t i = 0; i < shards_.size(); ++i) {
        if (shards_[i]->rows() != rows_ ||
            shards_[i]->alignment_key() != shards_.front()->alignment_key())
            throw InputError("BatchStream: shards are not row-aligned (" + shards_[i]->source() +
                             ")");
        if (norms_[i].scale <= 0) throw InputError("BatchStream: non-positive norm scale");
    }
    if (batch_tokens_ == 0 || batch_tokens_ > rows_)
        throw ConfigError("BatchStream: batch_tokens must be in [1, rows]");
    order_.resize(rows_);
    std::iota(order_.begin(), order_.end(), 0);
    start_epoch();
}

void BatchStream::start_epoch() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
    ++epoch_;
}

std::optional<Batch> BatchStream::next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t n = std::min(batch_tokens_, order_.size() - cursor_);
    Batch b;
    b.row_index.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                       order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + n));
    b.xs.reserve(shards_.size());
    for (std::size_t c = 0; c < shards_.size(); ++c) {
        Eigen::MatrixXd x(n, shards_[c]->dim());
        auto m = shards_[c]->matrix();
        const double inv = 1.0 / norms_[c].scale;
        for (std::size_t i = 0; i < n; ++i)
            x.row(static_cast<Eigen::Index>(i)) =
                m.row(static_cast<Eigen::Index>(b.row_index[i])).cast<double>() * inv;
        b.xs.push_back(std::move(x));
    }
    cursor_ += n;
    return b;
}

}  // namespace xct
