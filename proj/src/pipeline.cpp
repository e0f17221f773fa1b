#include "xct/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "xct/analysis.hpp"
#include "xct/attribution.hpp"
#include "xct/crosscoder.hpp"
#include "xct/grammar.hpp"
#include "xct/hash.hpp"
#include "xct/lm.hpp"
#include "xct/manifest.hpp"
#include "xct/serialize.hpp"

namespace fs = std::filesystem;

namespace xct {

Config default_config() {
    Config c;
    c.set("run", "id", "default");
    c.set("run", "out_root", "runs");
    c.set("run", "seeds", "124,153,6582");

    c.set("grammar", "seed", "11");
    c.set("grammar", "holdout", "false");
    c.set("grammar", "holdout_fraction", "0.25");

    c.set("corpus", "train_tokens", "2600000");
    c.set("corpus", "seed", "1");

    c.set("pairs", "n_per_subtask", "200");
    c.set("pairs", "seed", "7");
    c.set("pairs", "subtasks",
          "simple-regular,simple-irregular,distractor-relational,distractor-relative");

    c.set("lm", "n_layers", "4");
    c.set("lm", "d_model", "64");
    c.set("lm", "n_heads", "4");
    c.set("lm", "context_len", "64");
    c.set("lm", "mid_layer", "2");
    c.set("lm", "seed", "5");

    c.set("lm_train", "lr", "0.001");
    c.set("lm_train", "batch_seqs", "16");
    c.set("lm_train", "schedule", "0,1,2,4,8,16,32,64,128,256,512,1024,1536,2048");

    c.set("extract", "sources", "step:32,step:256,step:2048");
    c.set("extract", "train_tokens", "1000000");
    c.set("extract", "val_tokens", "65536");
    c.set("extract", "norm_sample", "65536");

    c.set("xc", "dict_size", "512");
    c.set("xc", "lr", "5e-5");
    c.set("xc", "l1_coeff", "2");
    c.set("xc", "warmup_fraction", "0.05");
    c.set("xc", "batch_tokens", "4096");
    c.set("xc", "steps", "488");
    c.set("xc", "dec_init_norm", "0.08");
    c.set("xc", "beta1", "0.9");
    c.set("xc", "beta2", "0.999");

    c.set("attr", "n_steps", "10");
    c.set("attr", "threshold", "0.1");
    c.set("attr", "positions", "all-prefix");
    c.set("attr", "position_agg", "sum");
    c.set("attr", "exact_top_k", "50");
    c.set("attr", "use_seed", "");  // empty: first of [run] seeds

    c.set("validate", "k", "10");
    c.set("validate", "pair", "");  // empty: first two extract sources

    c.set("report", "stage", "all");
    c.set("report", "window", "2");
    c.set("report", "jump_threshold", "0.1");
    c.set("report", "sim_position", "final-prefix");
    c.set("report", "sim_metric", "cosine");
    c.set("report", "top_k", "10");
    c.set("report", "top_m_seqs", "10");
    return c;
}

std::string resolve_out_root(const Config& cfg) {
    if (const char* env = std::getenv("XCT_RUN_ROOT"); env && *env) return env;
    return cfg.get("run", "out_root", "runs");
}

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names = {
        "gen-corpus", "gen-pairs", "train-lm", "extract", "train-xc",
        "eval-xc",    "attribute", "validate", "report"};
    return names;
}

namespace {

struct CommandIO {
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::vector<std::string> config_sections;
    std::string seed;
};

struct Ctx {
    Config cfg;
    RunDir run;
    bool force = false;
};

GrammarSpec grammar_from(const Config& cfg) {
    GrammarSpec g = GrammarSpec::from_config(cfg);
    return g;
}

Vocab load_run_vocab(const Ctx& ctx) {
    return Vocab::from_tsv(read_file(ctx.run.abs("corpus/vocab.tsv")));
}

struct CkptEntry {
    std::string id;
    long long step = 0;
    long long tokens_seen = 0;
    std::string file;  // relative path
};

std::vector<CkptEntry> load_ckpt_index(const Ctx& ctx) {
    std::vector<CkptEntry> out;
    std::istringstream in(read_file(ctx.run.abs("lm/checkpoints.tsv")));
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            continue;
        }
        if (trim(line).empty()) continue;
        auto f = split(line, '\t');
        if (f.size() != 4) throw InputError("lm/checkpoints.tsv: malformed row");
        out.push_back({f[0], parse_int(f[1], "step"), parse_int(f[2], "tokens_seen"), f[3]});
    }
    return out;
}

const CkptEntry& resolve_source(const std::vector<CkptEntry>& index, const std::string& ref) {
    if (index.empty()) throw InputError("checkpoint index is empty");
    if (ref == "last") {
        const CkptEntry* best = &index.front();
        for (auto& e : index)
            if (e.step > best->step) best = &e;
        return *best;
    }
    if (starts_with(ref, "step:")) {
        const long long step = parse_int(ref.substr(5), "source step");
        for (auto& e : index)
            if (e.step == step) return e;
        throw InputError("no checkpoint at step " + std::to_string(step));
    }
    for (auto& e : index)
        if (e.id == ref) return e;
    throw InputError("unknown checkpoint reference '" + ref + "'");
}

std::vector<std::string> source_refs(const Config& cfg) {
    auto refs = cfg.get_list("extract", "sources");
    if (refs.empty())
        throw ConfigError("[extract] sources is empty; run `xct report --stage checkpoints` for "
                          "suggestions and set the sources explicitly");
    if (refs.size() > 3) throw ConfigError("[extract] sources supports at most 3 checkpoints");
    return refs;
}

std::vector<std::uint64_t> run_seeds(const Config& cfg) {
    auto seeds = cfg.get_int_list("run", "seeds");
    if (seeds.empty()) throw ConfigError("[run] seeds must not be empty");
    std::vector<std::uint64_t> out;
    for (auto s : seeds) out.push_back(static_cast<std::uint64_t>(s));
    return out;
}

std::uint64_t attribution_seed(const Config& cfg) {
    const std::string s = cfg.get("attr", "use_seed", "");
    if (!s.empty()) return static_cast<std::uint64_t>(parse_int(s, "[attr] use_seed"));
    return run_seeds(cfg).front();
}

IGConfig ig_from(const Config& cfg) {
    IGConfig ig;
    ig.n_steps = static_cast<int>(cfg.get_int("attr", "n_steps", 10));
    ig.threshold = cfg.get_double("attr", "threshold", 0.1);
    const std::string pos = cfg.get("attr", "positions", "all-prefix");
    if (pos == "all-prefix") ig.positions = IGConfig::Positions::AllPrefix;
    else if (pos == "final-only") ig.positions = IGConfig::Positions::FinalOnly;
    else throw ConfigError("[attr] positions must be all-prefix or final-only");
    const std::string agg = cfg.get("attr", "position_agg", "sum");
    if (agg == "sum") ig.agg = IGConfig::PositionAgg::Sum;
    else if (agg == "mean") ig.agg = IGConfig::PositionAgg::Mean;
    else throw ConfigError("[attr] position_agg must be sum or mean");
    ig.validate();
    return ig;
}

std::string xc_artifact(std::uint64_t seed) {
    return "xc/xc.seed" + std::to_string(seed) + ".xccx";
}

std::string slug(const std::string& s) {
    std::string out;
    for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) ? c : '-');
    return out;
}

// Shared runner: missing-input checks, provenance verification, up-to-date
// detection, manifest writing.
CommandResult execute(Ctx& ctx, const std::string& name, const CommandIO& io,
                      const std::function<void()>& body) {
    std::vector<std::string> missing;
    for (auto& rel : io.inputs)
        if (!fs::exists(ctx.run.abs(rel))) missing.push_back(rel);
    if (!missing.empty())
        throw MissingInputError(name + ": missing inputs: " + join(missing, ", "));

    std::map<std::string, std::string> in_hashes;
    for (auto& rel : io.inputs) in_hashes[rel] = sha256_file(ctx.run.abs(rel));

    const auto index = ctx.run.artifact_index();
    for (auto& [rel, hash] : in_hashes) {
        auto it = index.find(rel);
        if (it != index.end() && it->second != hash)
            throw ProvenanceError(name + ": input " + rel +
                                  " does not match the hash recorded by the command that "
                                  "produced it; regenerate it or remove the stale manifest");
    }

    Manifest fresh;
    fresh.command = name;
    fresh.seed = io.seed;
    fresh.inputs = in_hashes;
    fresh.config_snapshot = ctx.cfg.dump_sections(io.config_sections);

    if (!ctx.force && ctx.run.has_manifest(name)) {
        Manifest old = ctx.run.load_manifest(name);
        bool same = old.command == fresh.command && old.seed == fresh.seed &&
                    old.inputs == fresh.inputs && old.config_snapshot == fresh.config_snapshot;
        if (same) {
            for (auto& [rel, hash] : old.outputs) {
                if (!fs::exists(ctx.run.abs(rel)) || sha256_file(ctx.run.abs(rel)) != hash) {
                    same = false;
                    break;
                }
            }
        }
        if (same) {
            CommandResult r;
            r.up_to_date = true;
            for (auto& [rel, hash] : old.outputs) r.outputs.push_back(rel);
            return r;
        }
    }

    const auto t0 = std::chrono::steady_clock::now();
    body();
    const auto t1 = std::chrono::steady_clock::now();
    fresh.wall_time_s = std::chrono::duration<double>(t1 - t0).count();

    CommandResult r;
    for (auto& rel : io.outputs) {
        if (!fs::exists(ctx.run.abs(rel)))
            throw InputError(name + ": expected output " + rel + " was not produced");
        fresh.outputs[rel] = sha256_file(ctx.run.abs(rel));
        r.outputs.push_back(rel);
    }
    ctx.run.write_manifest(fresh);
    return r;
}

// --- command bodies ---------------------------------------------------------

CommandResult cmd_gen_corpus(Ctx& ctx) {
    CommandIO io;
    io.outputs = {"corpus/train.xtok", "corpus/vocab.tsv"};
    io.config_sections = {"grammar", "corpus"};
    io.seed = ctx.cfg.get("corpus", "seed", "0");
    return execute(ctx, "gen-corpus", io, [&] {
        GrammarSpec g = grammar_from(ctx.cfg);
        Vocab vocab = g.build_vocab();
        const auto n = static_cast<std::size_t>(ctx.cfg.get_int("corpus", "train_tokens", 0));
        const auto seed = static_cast<std::uint64_t>(ctx.cfg.get_int("corpus", "seed", 0));
        TokenStream stream = generate_corpus(g, n, seed);
        save_token_stream(ctx.run.abs("corpus/train.xtok"), stream,
                          static_cast<std::uint32_t>(vocab.size()));
        write_file_atomic(ctx.run.abs("corpus/vocab.tsv"), vocab.to_tsv());
    });
}

CommandResult cmd_gen_pairs(Ctx& ctx) {
    CommandIO io;
    io.inputs = {"corpus/vocab.tsv"};
    io.outputs = {"pairs/eval.tsv"};
    io.config_sections = {"grammar", "pairs"};
    io.seed = ctx.cfg.get("pairs", "seed", "0");
    return execute(ctx, "gen-pairs", io, [&] {
        GrammarSpec g = grammar_from(ctx.cfg);
        const auto n = static_cast<std::size_t>(ctx.cfg.get_int("pairs", "n_per_subtask", 200));
        const auto seed = static_cast<std::uint64_t>(ctx.cfg.get_int("pairs", "seed", 0));
        std::vector<MinimalPair> all;
        auto subtasks = ctx.cfg.get_list("pairs", "subtasks");
        for (std::size_t i = 0; i < subtasks.size(); ++i) {
            auto part = generate_minimal_pairs(g, n, subtasks[i], seed + i);
            all.insert(all.end(), part.begin(), part.end());
        }
        write_file_atomic(ctx.run.abs("pairs/eval.tsv"), pairs_to_tsv(all));
    });
}

LMConfig lm_config_from(const Ctx& ctx, int vocab_size) {
    LMConfig c;
    c.n_layers = static_cast<int>(ctx.cfg.get_int("lm", "n_layers", 4));
    c.d_model = static_cast<int>(ctx.cfg.get_int("lm", "d_model", 64));
    c.n_heads = static_cast<int>(ctx.cfg.get_int("lm", "n_heads", 4));
    c.context_len = static_cast<int>(ctx.cfg.get_int("lm", "context_len", 64));
    c.mid_layer = static_cast<int>(ctx.cfg.get_int("lm", "mid_layer", 2));
    c.seed = static_cast<std::uint64_t>(ctx.cfg.get_int("lm", "seed", 0));
    c.vocab_size = vocab_size;
    c.validate();
    return c;
}

CommandResult cmd_train_lm(Ctx& ctx) {
    auto schedule = ctx.cfg.get_int_list("lm_train", "schedule");
    const long long batch_seqs = ctx.cfg.get_int("lm_train", "batch_seqs", 16);
    const long long ctx_len = ctx.cfg.get_int("lm", "context_len", 64);
    CommandIO io;
    io.inputs = {"corpus/train.xtok", "corpus/vocab.tsv"};
    io.config_sections = {"grammar", "lm", "lm_train"};
    io.seed = ctx.cfg.get("lm", "seed", "0");
    std::vector<long long> snap_steps = schedule;
    if (snap_steps.empty() || snap_steps.front() != 0)
        snap_steps.insert(snap_steps.begin(), 0);
    for (long long s : snap_steps) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "t%010lld", s * batch_seqs * ctx_len);
        io.outputs.push_back(std::string("lm/") + buf + ".xclm");
        io.outputs.push_back(std::string("lm/") + buf + ".xclm.meta");
    }
    io.outputs.push_back("lm/checkpoints.tsv");
    io.outputs.push_back("lm/train_log.tsv");
    return execute(ctx, "train-lm", io, [&] {
        Vocab vocab = load_run_vocab(ctx);
        TokenStream stream = load_token_stream(ctx.run.abs("corpus/train.xtok"));
        LMConfig cfg = lm_config_from(ctx, static_cast<int>(vocab.size()));
        LMTrainOpt opt;
        opt.lr = ctx.cfg.get_double("lm_train", "lr", 1e-3);
        opt.batch_seqs = static_cast<int>(batch_seqs);
        opt.bos = vocab.bos;
        opt.pad = vocab.pad;
        opt.terminator = vocab.id(".");
        LMTrainResult res = train_lm(cfg, stream, schedule, opt);
        std::string idx = "id\tstep\ttokens_seen\tfile\n";
        for (auto& ck : res.checkpoints) {
            const std::string rel = "lm/" + ck.id + ".xclm";
            save_checkpoint(ck, ctx.run.abs(rel));
            idx += ck.id + "\t" + std::to_string(ck.step) + "\t" +
                   std::to_string(ck.tokens_seen) + "\t" + rel + "\n";
        }
        write_file_atomic(ctx.run.abs("lm/checkpoints.tsv"), idx);
        std::string log = "step\tce\n";
        for (auto& [s, ce] : res.loss_log) log += std::to_string(s) + "\t" + fmt_double(ce) + "\n";
        write_file_atomic(ctx.run.abs("lm/train_log.tsv"), log);
    });
}

CommandResult cmd_extract(Ctx& ctx) {
    auto refs = source_refs(ctx.cfg);
    auto index = fs::exists(ctx.run.abs("lm/checkpoints.tsv"))
                     ? load_ckpt_index(ctx)
                     : std::vector<CkptEntry>{};
    CommandIO io;
    io.inputs = {"corpus/train.xtok", "corpus/vocab.tsv", "lm/checkpoints.tsv"};
    std::vector<CkptEntry> sources;
    if (!index.empty())
        for (auto& ref : refs) {
            const CkptEntry& e = resolve_source(index, ref);
            sources.push_back(e);
            io.inputs.push_back(e.file);
            io.inputs.push_back(e.file + ".meta");
        }
    io.config_sections = {"grammar", "extract"};
    for (auto& e : sources) {
        io.outputs.push_back("acts/" + e.id + ".train.xact");
        io.outputs.push_back("acts/" + e.id + ".val.xact");
    }
    io.outputs.push_back("acts/posmap.train.tsv");
    io.outputs.push_back("acts/posmap.val.tsv");
    io.outputs.push_back("acts/norms.tsv");
    io.outputs.push_back("acts/extract_meta.tsv");
    return execute(ctx, "extract", io, [&] {
        Vocab vocab = load_run_vocab(ctx);
        TokenStream stream = load_token_stream(ctx.run.abs("corpus/train.xtok"));
        std::vector<Checkpoint> ckpts;
        std::vector<const Checkpoint*> refs_p;
        ckpts.reserve(sources.size());
        for (auto& e : sources) ckpts.push_back(load_checkpoint(ctx.run.abs(e.file)));
        for (auto& c : ckpts) refs_p.push_back(&c);

        ExtractOptions opts;
        opts.bos = vocab.bos;
        opts.pad = vocab.pad;
        opts.terminator = vocab.id(".");
        opts.n_tokens = static_cast<std::size_t>(ctx.cfg.get_int("extract", "train_tokens", 0));
        ExtractResult train = extract_shards(refs_p, stream, opts, ctx.run.abs("acts"), "train");

        ExtractOptions vopts = opts;
        vopts.n_tokens = static_cast<std::size_t>(ctx.cfg.get_int("extract", "val_tokens", 0));
        vopts.skip_sequences = train.sequences.size();
        ExtractResult val = extract_shards(refs_p, stream, vopts, ctx.run.abs("acts"), "val");

        const auto sample = static_cast<std::size_t>(
            std::min<long long>(ctx.cfg.get_int("extract", "norm_sample", 65536),
                                static_cast<long long>(train.rows)));
        std::string norms = "source\tscale\n";
        for (auto& path : train.shard_paths) {
            MappedShard shard(path);
            NormStats s = estimate_norm(shard, sample);
            norms += s.source + "\t" + fmt_double(s.scale, 17) + "\n";
        }
        write_file_atomic(ctx.run.abs("acts/norms.tsv"), norms);
        std::string meta = "tag\tskip_sequences\tn_sequences\trows\n";
        meta += "train\t0\t" + std::to_string(train.sequences.size()) + "\t" +
                std::to_string(train.rows) + "\n";
        meta += "val\t" + std::to_string(vopts.skip_sequences) + "\t" +
                std::to_string(val.sequences.size()) + "\t" + std::to_string(val.rows) + "\n";
        write_file_atomic(ctx.run.abs("acts/extract_meta.tsv"), meta);
    });
}

std::map<std::string, double> load_norms(const Ctx& ctx) {
    std::map<std::string, double> out;
    std::istringstream in(read_file(ctx.run.abs("acts/norms.tsv")));
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            continue;
        }
        if (trim(line).empty()) continue;
        auto f = split(line, '\t');
        if (f.size() != 2) throw InputError("acts/norms.tsv: malformed row");
        out[f[0]] = parse_double(f[1], "norm scale");
    }
    return out;
}

struct ExtractMeta {
    std::size_t skip = 0, count = 0;
    std::uint64_t rows = 0;
};

ExtractMeta load_extract_meta(const Ctx& ctx, const std::string& tag) {
    std::istringstream in(read_file(ctx.run.abs("acts/extract_meta.tsv")));
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            continue;
        }
        auto f = split(line, '\t');
        if (f.size() != 4 || f[0] != tag) continue;
        return {static_cast<std::size_t>(parse_int(f[1], "skip")),
                static_cast<std::size_t>(parse_int(f[2], "count")),
                static_cast<std::uint64_t>(parse_int(f[3], "rows"))};
    }
    throw InputError("acts/extract_meta.tsv: no entry for tag " + tag);
}

// Rebuilds the packed sequences a shard extraction saw.
std::vector<PackedSeq> rebuild_sequences(const Ctx& ctx, const Vocab& vocab,
                                         const TokenStream& stream, const ExtractMeta& meta) {
    SentencePacker packer(stream, static_cast<int>(ctx.cfg.get_int("lm", "context_len", 64)),
                          vocab.bos, vocab.pad, vocab.id("."));
    for (std::size_t i = 0; i < meta.skip; ++i)
        if (!packer.next()) throw InputError("corpus too short to rebuild extraction sequences");
    std::vector<PackedSeq> seqs;
    for (std::size_t i = 0; i < meta.count; ++i) {
        auto s = packer.next();
        if (!s) throw InputError("corpus too short to rebuild extraction sequences");
        seqs.push_back(std::move(*s));
    }
    return seqs;
}

CommandResult cmd_train_xc(Ctx& ctx) {
    auto refs = source_refs(ctx.cfg);
    auto index = fs::exists(ctx.run.abs("lm/checkpoints.tsv")) ? load_ckpt_index(ctx)
                                                               : std::vector<CkptEntry>{};
    std::vector<std::string> source_ids;
    CommandIO io;
    io.inputs = {"acts/norms.tsv"};
    if (!index.empty())
        for (auto& ref : refs) {
            const CkptEntry& e = resolve_source(index, ref);
            source_ids.push_back(e.id);
            io.inputs.push_back("acts/" + e.id + ".train.xact");
        }
    io.config_sections = {"extract", "xc", "run"};
    auto seeds = run_seeds(ctx.cfg);
    {
        std::vector<std::string> ss;
        for (auto s : seeds) ss.push_back(std::to_string(s));
        io.seed = join(ss, ",");
    }
    for (auto s : seeds) {
        io.outputs.push_back(xc_artifact(s));
        io.outputs.push_back("xc/xc.seed" + std::to_string(s) + ".log.tsv");
    }
    return execute(ctx, "train-xc", io, [&] {
        auto norms = load_norms(ctx);
        std::vector<std::unique_ptr<MappedShard>> shards;
        std::vector<const MappedShard*> shard_ptrs;
        std::vector<NormStats> stats;
        std::vector<double> scales;
        for (auto& id : source_ids) {
            shards.push_back(std::make_unique<MappedShard>(ctx.run.abs("acts/" + id + ".train.xact")));
            shard_ptrs.push_back(shards.back().get());
            auto it = norms.find(id);
            if (it == norms.end()) throw InputError("acts/norms.tsv: no scale for " + id);
            stats.push_back({id, it->second});
            scales.push_back(it->second);
        }
        XcTrainHP hp;
        hp.lr = ctx.cfg.get_double("xc", "lr", 5e-5);
        hp.beta1 = ctx.cfg.get_double("xc", "beta1", 0.9);
        hp.beta2 = ctx.cfg.get_double("xc", "beta2", 0.999);
        hp.l1_coeff = ctx.cfg.get_double("xc", "l1_coeff", 2.0);
        hp.warmup_fraction = ctx.cfg.get_double("xc", "warmup_fraction", 0.05);
        hp.steps = ctx.cfg.get_int("xc", "steps", 0);
        hp.dec_init_norm = ctx.cfg.get_double("xc", "dec_init_norm", 0.08);
        const auto batch_tokens =
            static_cast<std::size_t>(ctx.cfg.get_int("xc", "batch_tokens", 4096));
        const int dict = static_cast<int>(ctx.cfg.get_int("xc", "dict_size", 512));
        for (auto seed : seeds) {
            hp.seed = seed;
            BatchStream stream(shard_ptrs, stats, batch_tokens, seed);
            XcTrainResult res = train_crosscoder(hp, stream, source_ids, scales, dict);
            save_crosscoder(res.params, ctx.run.abs(xc_artifact(seed)));
            std::string log = "step\tlambda\ttotal\tsparsity\tl0";
            for (auto& id : source_ids) log += "\trecon_" + id;
            log += "\n";
            for (auto& e : res.log) {
                log += std::to_string(e.step) + "\t" + fmt_double(e.lambda) + "\t" +
                       fmt_double(e.total) + "\t" + fmt_double(e.sparsity) + "\t" +
                       fmt_double(e.l0);
                for (double r : e.recon) log += "\t" + fmt_double(r);
                log += "\n";
            }
            write_file_atomic(ctx.run.abs("xc/xc.seed" + std::to_string(seed) + ".log.tsv"), log);
        }
    });
}

CommandResult cmd_eval_xc(Ctx& ctx) {
    auto refs = source_refs(ctx.cfg);
    auto index = fs::exists(ctx.run.abs("lm/checkpoints.tsv")) ? load_ckpt_index(ctx)
                                                               : std::vector<CkptEntry>{};
    std::vector<CkptEntry> sources;
    CommandIO io;
    io.inputs = {"corpus/train.xtok", "corpus/vocab.tsv", "acts/extract_meta.tsv",
                 "acts/posmap.val.tsv"};
    if (!index.empty())
        for (auto& ref : refs) {
            const CkptEntry& e = resolve_source(index, ref);
            sources.push_back(e);
            io.inputs.push_back(e.file);
            io.inputs.push_back(e.file + ".meta");
            io.inputs.push_back("acts/" + e.id + ".val.xact");
        }
    auto seeds = run_seeds(ctx.cfg);
    for (auto s : seeds) io.inputs.push_back(xc_artifact(s));
    io.config_sections = {"extract", "xc", "run"};
    io.outputs = {"reports/xc_eval.tsv"};
    return execute(ctx, "eval-xc", io, [&] {
        Vocab vocab = load_run_vocab(ctx);
        TokenStream stream = load_token_stream(ctx.run.abs("corpus/train.xtok"));
        auto meta = load_extract_meta(ctx, "val");
        auto sequences = rebuild_sequences(ctx, vocab, stream, meta);
        auto posmap = load_posmap(ctx.run.abs("acts/posmap.val.tsv"));

        std::vector<Checkpoint> ckpts;
        for (auto& e : sources) ckpts.push_back(load_checkpoint(ctx.run.abs(e.file)));
        std::vector<const Checkpoint*> ckpt_ptrs;
        for (auto& c : ckpts) ckpt_ptrs.push_back(&c);
        std::vector<std::unique_ptr<MappedShard>> shards;
        std::vector<const MappedShard*> shard_ptrs;
        for (auto& e : sources) {
            shards.push_back(std::make_unique<MappedShard>(ctx.run.abs("acts/" + e.id + ".val.xact")));
            shard_ptrs.push_back(shards.back().get());
        }

        std::string out =
            "seed\tsource\tl0\tdead_count\tdelta_ce\tfrac_variance_explained\tce_clean\tce_"
            "patched\n";
        std::vector<std::vector<double>> agg;  // per source: sums of the four headline metrics
        agg.assign(sources.size(), std::vector<double>(4, 0.0));
        for (auto seed : seeds) {
            CrosscoderParams p = load_crosscoder(ctx.run.abs(xc_artifact(seed)));
            CrosscoderEval ev = eval_crosscoder(p, shard_ptrs, posmap, sequences, ckpt_ptrs);
            for (std::size_t c = 0; c < sources.size(); ++c) {
                out += std::to_string(seed) + "\t" + sources[c].id + "\t" + fmt_double(ev.l0) +
                       "\t" + std::to_string(ev.dead_count) + "\t" + fmt_double(ev.delta_ce[c]) +
                       "\t" + fmt_double(ev.frac_variance_explained[c]) + "\t" +
                       fmt_double(ev.ce_clean[c]) + "\t" + fmt_double(ev.ce_patched[c]) + "\n";
                agg[c][0] += ev.l0;
                agg[c][1] += static_cast<double>(ev.dead_count);
                agg[c][2] += ev.delta_ce[c];
                agg[c][3] += ev.frac_variance_explained[c];
            }
        }
        const double inv = 1.0 / static_cast<double>(seeds.size());
        for (std::size_t c = 0; c < sources.size(); ++c)
            out += "mean\t" + sources[c].id + "\t" + fmt_double(agg[c][0] * inv) + "\t" +
                   fmt_double(agg[c][1] * inv) + "\t" + fmt_double(agg[c][2] * inv) + "\t" +
                   fmt_double(agg[c][3] * inv) + "\t-\t-\n";
        write_file_atomic(ctx.run.abs("reports/xc_eval.tsv"), out);
    });
}

std::vector<std::string> slices_of(const std::vector<MinimalPair>& pairs) {
    std::vector<std::string> slices;
    for (auto& p : pairs)
        if (std::find(slices.begin(), slices.end(), p.slice) == slices.end())
            slices.push_back(p.slice);
    return slices;
}

CommandResult cmd_attribute(Ctx& ctx) {
    auto refs = source_refs(ctx.cfg);
    auto index = fs::exists(ctx.run.abs("lm/checkpoints.tsv")) ? load_ckpt_index(ctx)
                                                               : std::vector<CkptEntry>{};
    const std::uint64_t seed = attribution_seed(ctx.cfg);
    std::vector<CkptEntry> sources;
    CommandIO io;
    io.inputs = {"pairs/eval.tsv", xc_artifact(seed)};
    if (!index.empty())
        for (auto& ref : refs) {
            const CkptEntry& e = resolve_source(index, ref);
            sources.push_back(e);
            io.inputs.push_back(e.file);
            io.inputs.push_back(e.file + ".meta");
        }
    io.config_sections = {"extract", "attr"};
    io.seed = std::to_string(seed);
    std::vector<MinimalPair> pairs;
    std::vector<std::string> slices;
    if (fs::exists(ctx.run.abs("pairs/eval.tsv"))) {
        pairs = load_minimal_pairs(ctx.run.abs("pairs/eval.tsv"));
        slices = slices_of(pairs);
    }
    io.outputs.push_back("attr/table_all.tsv");
    for (auto& s : slices) io.outputs.push_back("attr/table_" + slug(s) + ".tsv");
    return execute(ctx, "attribute", io, [&] {
        CrosscoderParams params = load_crosscoder(ctx.run.abs(xc_artifact(seed)));
        std::vector<Checkpoint> ckpts;
        for (auto& id : params.sources) {
            bool found = false;
            for (auto& e : sources)
                if (e.id == id) {
                    ckpts.push_back(load_checkpoint(ctx.run.abs(e.file)));
                    found = true;
                }
            if (!found)
                throw InputError("attribute: crosscoder source " + id +
                                 " is not among [extract] sources");
        }
        std::vector<const Checkpoint*> ckpt_ptrs;
        for (auto& c : ckpts) ckpt_ptrs.push_back(&c);
        IGConfig ig = ig_from(ctx.cfg);
        const int exact_k = static_cast<int>(ctx.cfg.get_int("attr", "exact_top_k", 50));
        const std::string xc_id = "xc.seed" + std::to_string(seed);

        AttributionTable all = attribute_pairs(ckpt_ptrs, params, pairs, ig, "all");
        all.crosscoder_id = xc_id;
        if (exact_k > 0) add_exact_columns(all, ckpt_ptrs, params, pairs, ig, exact_k);
        save_table(all, params, ctx.run.abs("attr/table_all.tsv"));

        for (auto& s : slices) {
            std::vector<MinimalPair> sub;
            for (auto& p : pairs)
                if (p.slice == s) sub.push_back(p);
            AttributionTable t = attribute_pairs(ckpt_ptrs, params, sub, ig, s);
            t.crosscoder_id = xc_id;
            save_table(t, params, ctx.run.abs("attr/table_" + slug(s) + ".tsv"));
        }
    });
}

CommandResult cmd_validate(Ctx& ctx) {
    auto refs = source_refs(ctx.cfg);
    auto index = fs::exists(ctx.run.abs("lm/checkpoints.tsv")) ? load_ckpt_index(ctx)
                                                               : std::vector<CkptEntry>{};
    const std::uint64_t seed = attribution_seed(ctx.cfg);
    auto pair_refs = ctx.cfg.get_list("validate", "pair");
    if (pair_refs.empty()) {
        if (refs.size() < 2) throw ConfigError("[validate] pair needs two checkpoints");
        pair_refs = {refs[0], refs[1]};
    }
    if (pair_refs.size() != 2) throw ConfigError("[validate] pair must list exactly 2 checkpoints");

    std::vector<CkptEntry> sources;
    CommandIO io;
    io.inputs = {"pairs/eval.tsv", "attr/table_all.tsv", xc_artifact(seed)};
    if (!index.empty())
        for (auto& ref : refs) {
            const CkptEntry& e = resolve_source(index, ref);
            sources.push_back(e);
            io.inputs.push_back(e.file);
            io.inputs.push_back(e.file + ".meta");
        }
    io.config_sections = {"extract", "attr", "validate"};
    io.seed = std::to_string(seed);
    io.outputs = {"reports/validation.tsv", "reports/validation_summary.tsv"};
    return execute(ctx, "validate", io, [&] {
        CrosscoderParams params = load_crosscoder(ctx.run.abs(xc_artifact(seed)));
        AttributionTable table = load_table(ctx.run.abs("attr/table_all.tsv"));
        auto pairs = load_minimal_pairs(ctx.run.abs("pairs/eval.tsv"));
        // All source checkpoints, ordered to match the crosscoder.
        std::vector<Checkpoint> ckpts;
        for (auto& id : params.sources) {
            bool found = false;
            for (auto& e : sources)
                if (e.id == id) {
                    ckpts.push_back(load_checkpoint(ctx.run.abs(e.file)));
                    found = true;
                }
            if (!found)
                throw InputError("validate: crosscoder source " + id +
                                 " is not among [extract] sources");
        }
        std::vector<const Checkpoint*> ckpt_ptrs;
        for (auto& c : ckpts) ckpt_ptrs.push_back(&c);
        const int i1 = params.source_index(resolve_source(index, pair_refs[0]).id);
        const int i2 = params.source_index(resolve_source(index, pair_refs[1]).id);
        const int k = static_cast<int>(ctx.cfg.get_int("validate", "k", 10));
        IGConfig ig = ig_from(ctx.cfg);
        AblationValidation v =
            ablation_validation(ckpt_ptrs, i1, i2, params, pairs, table, k, ig.positions);
        std::string rows = "feature\tdelta_c1\tdelta_c2\tratio\treldec\trelie2\tusable\n";
        for (auto& r : v.rows) {
            auto d = reldec(params, i1, i2, r.feature);
            auto e = relie2(table, i1, i2, r.feature);
            rows += std::to_string(r.feature) + "\t" + fmt_double(r.delta_c1) + "\t" +
                    fmt_double(r.delta_c2) + "\t" + fmt_double(r.ratio) + "\t" +
                    (d ? fmt_double(*d) : "na") + "\t" + (e ? fmt_double(*e) : "na") + "\t" +
                    (r.usable ? "yes" : "no") + "\n";
        }
        write_file_atomic(ctx.run.abs("reports/validation.tsv"), rows);
        std::string summary = "metric\tvalue\n";
        summary += "spearman_reldec\t" + fmt_double(v.spearman_reldec) + "\n";
        summary += "spearman_relie\t" + fmt_double(v.spearman_relie) + "\n";
        summary += "n_features\t" + std::to_string(v.rows.size()) + "\n";
        summary += "pair\t" + params.sources[static_cast<size_t>(i1)] + "," +
                   params.sources[static_cast<size_t>(i2)] + "\n";
        write_file_atomic(ctx.run.abs("reports/validation_summary.tsv"), summary);
    });
}

CommandResult cmd_report(Ctx& ctx) {
    const std::string stage = ctx.cfg.get("report", "stage", "all");
    if (stage != "checkpoints" && stage != "features" && stage != "all")
        throw ConfigError("[report] stage must be checkpoints, features, or all");
    const bool do_ckpts = stage == "checkpoints" || stage == "all";
    const bool do_feats = stage == "features" || stage == "all";

    auto index = fs::exists(ctx.run.abs("lm/checkpoints.tsv")) ? load_ckpt_index(ctx)
                                                               : std::vector<CkptEntry>{};
    const std::uint64_t seed = attribution_seed(ctx.cfg);

    CommandIO io;
    io.config_sections = {"extract", "attr", "report", "run"};
    io.inputs = {"pairs/eval.tsv"};
    std::vector<std::string> slices;
    if (do_ckpts) {
        io.inputs.push_back("lm/checkpoints.tsv");
        for (auto& e : index) {
            io.inputs.push_back(e.file);
            io.inputs.push_back(e.file + ".meta");
        }
        io.outputs.push_back("reports/accuracy.tsv");
        io.outputs.push_back("reports/heatmap.tsv");
        io.outputs.push_back("reports/transitions.tsv");
    }
    std::vector<CkptEntry> sources;
    if (do_feats) {
        io.inputs.push_back("attr/table_all.tsv");
        io.inputs.push_back(xc_artifact(seed));
        io.inputs.push_back("corpus/train.xtok");
        io.inputs.push_back("corpus/vocab.tsv");
        io.inputs.push_back("acts/extract_meta.tsv");
        io.inputs.push_back("acts/posmap.train.tsv");
        auto refs = source_refs(ctx.cfg);
        if (!index.empty())
            for (auto& ref : refs) {
                const CkptEntry& e = resolve_source(index, ref);
                sources.push_back(e);
                io.inputs.push_back("acts/" + e.id + ".train.xact");
            }
        if (fs::exists(ctx.run.abs("pairs/eval.tsv")))
            slices = slices_of(load_minimal_pairs(ctx.run.abs("pairs/eval.tsv")));
        for (auto& s : slices) io.inputs.push_back("attr/table_" + slug(s) + ".tsv");
        if (sources.size() == 3) io.outputs.push_back("reports/ternary.tsv");
        io.outputs.push_back("reports/ie_evolution.tsv");
        for (auto& e : sources) io.outputs.push_back("reports/overlap_" + e.id + ".tsv");
        io.outputs.push_back("reports/annotations.txt");
    }
    io.seed = std::to_string(seed);

    return execute(ctx, "report", io, [&] {
        auto pairs = load_minimal_pairs(ctx.run.abs("pairs/eval.tsv"));
        if (do_ckpts) {
            std::vector<Checkpoint> ckpts;
            for (auto& e : index) ckpts.push_back(load_checkpoint(ctx.run.abs(e.file)));
            std::vector<const Checkpoint*> ptrs;
            for (auto& c : ckpts) ptrs.push_back(&c);
            auto curve = accuracy_curve(ptrs, pairs);
            export_accuracy(curve, ctx.run.abs("reports/accuracy.tsv"));

            SimilarityOptions sopts;
            const std::string sp = ctx.cfg.get("report", "sim_position", "final-prefix");
            sopts.position = sp == "mean-over-prefix" ? SimilarityOptions::Position::MeanOverPrefix
                                                      : SimilarityOptions::Position::FinalPrefix;
            const std::string sm = ctx.cfg.get("report", "sim_metric", "cosine");
            sopts.metric = sm == "pearson" ? SimilarityOptions::Metric::Pearson
                                           : SimilarityOptions::Metric::Cosine;
            SimilarityResult sim = similarity_matrix(ptrs, pairs, sopts);
            std::vector<std::string> ids;
            for (auto& e : index) ids.push_back(e.id);
            export_heatmap(ids, sim.matrix, ctx.run.abs("reports/heatmap.tsv"));

            std::vector<double> acc_all;
            for (auto& e : index)
                for (auto& pt : curve)
                    if (pt.ckpt_id == e.id && pt.tag == "all") acc_all.push_back(pt.accuracy);
            auto suggestions = suggest_transitions(
                ids, acc_all, sim.matrix, static_cast<int>(ctx.cfg.get_int("report", "window", 2)),
                ctx.cfg.get_double("report", "jump_threshold", 0.1));
            export_transitions(suggestions, ctx.run.abs("reports/transitions.tsv"));
        }
        if (do_feats) {
            const int top_k = static_cast<int>(ctx.cfg.get_int("report", "top_k", 10));
            AttributionTable all = load_table(ctx.run.abs("attr/table_all.tsv"));
            if (all.sources.size() == 3)
                export_ternary(all, top_k, ctx.run.abs("reports/ternary.tsv"));
            export_ie_evolution(all, ctx.run.abs("reports/ie_evolution.tsv"));

            std::vector<AttributionTable> slice_tables;
            for (auto& s : slices)
                slice_tables.push_back(load_table(ctx.run.abs("attr/table_" + slug(s) + ".tsv")));
            std::vector<const AttributionTable*> tbl_ptrs;
            for (auto& t : slice_tables) tbl_ptrs.push_back(&t);
            for (auto& e : sources) {
                Eigen::MatrixXi counts = overlap_counts(tbl_ptrs, e.id, top_k);
                export_overlap(slices, counts, e.id, ctx.run.abs("reports/overlap_" + e.id + ".tsv"));
            }

            // Annotation sheets for the union of each source's top features.
            Vocab vocab = load_run_vocab(ctx);
            TokenStream stream = load_token_stream(ctx.run.abs("corpus/train.xtok"));
            auto meta = load_extract_meta(ctx, "train");
            auto sequences = rebuild_sequences(ctx, vocab, stream, meta);
            auto posmap = load_posmap(ctx.run.abs("acts/posmap.train.tsv"));
            CrosscoderParams params = load_crosscoder(ctx.run.abs(xc_artifact(seed)));
            std::vector<std::unique_ptr<MappedShard>> shards;
            std::vector<const MappedShard*> shard_ptrs;
            for (auto& e : sources) {
                shards.push_back(
                    std::make_unique<MappedShard>(ctx.run.abs("acts/" + e.id + ".train.xact")));
                shard_ptrs.push_back(shards.back().get());
            }
            std::set<int> feat_set;
            for (std::size_t c = 0; c < all.sources.size(); ++c)
                for (int f : top_k_features(all, static_cast<int>(c), top_k)) feat_set.insert(f);
            std::vector<int> feats(feat_set.begin(), feat_set.end());
            auto tops = top_activating_sequences(
                params, shard_ptrs, posmap, sequences, feats,
                static_cast<int>(ctx.cfg.get_int("report", "top_m_seqs", 10)));
            export_annotation_sheets(feats, tops, vocab, sequences,
                                     ctx.run.abs("reports/annotations.txt"));
        }
    });
}

}  // namespace

CommandResult run_command(const std::string& command, const Config& cfg, bool force) {
    Ctx ctx{cfg, RunDir(resolve_out_root(cfg), cfg.get("run", "id", "default")), force};
    ctx.run.ensure_dirs();
    if (command == "gen-corpus") return cmd_gen_corpus(ctx);
    if (command == "gen-pairs") return cmd_gen_pairs(ctx);
    if (command == "train-lm") return cmd_train_lm(ctx);
    if (command == "extract") return cmd_extract(ctx);
    if (command == "train-xc") return cmd_train_xc(ctx);
    if (command == "eval-xc") return cmd_eval_xc(ctx);
    if (command == "attribute") return cmd_attribute(ctx);
    if (command == "validate") return cmd_validate(ctx);
    if (command == "report") return cmd_report(ctx);
    throw ConfigError("unknown command: " + command);
}

}  // namespace xct
