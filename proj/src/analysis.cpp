#include "xct/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "xct/serialize.hpp"

namespace xct {

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const auto n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx <= 0 || syy <= 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw InputError("spearman: length mismatch");
    if (x.size() < 3) throw InputError("spearman: need at least 3 points");
    return pearson(average_ranks(x), average_ranks(y));
}

std::vector<AccuracyPoint> accuracy_curve(const std::vector<const Checkpoint*>& ckpts,
                                          const std::vector<MinimalPair>& pairs, TokenId bos) {
    if (pairs.empty()) throw InputError("accuracy_curve: empty pair list");
    std::vector<std::string> tags = {"all"};
    for (auto& p : pairs)
        if (std::find(tags.begin(), tags.end(), p.slice) == tags.end()) tags.push_back(p.slice);

    std::vector<AccuracyPoint> out;
    for (auto* ckpt : ckpts) {
        std::map<std::string, std::pair<long long, long long>> hits;  // tag -> (correct, total)
        for (auto& pair : pairs) {
            const bool correct = metric_m(*ckpt, pair, bos) < 0.0;
            for (const std::string* tag : {static_cast<const std::string*>(nullptr), &pair.slice}) {
                const std::string key = tag ? *tag : "all";
                auto& h = hits[key];
                h.first += correct ? 1 : 0;
                h.second += 1;
            }
        }
        for (auto& tag : tags) {
            auto& h = hits[tag];
            if (h.second == 0) continue;
            out.push_back({ckpt->id, ckpt->tokens_seen, tag,
                           static_cast<double>(h.first) / static_cast<double>(h.second)});
        }
    }
    return out;
}

SimilarityResult similarity_matrix(const std::vector<const Checkpoint*>& ckpts,
                                   const std::vector<MinimalPair>& pairs,
                                   const SimilarityOptions& opts, TokenId bos) {
    if (ckpts.size() < 2) throw InputError("similarity_matrix: need at least 2 checkpoints");
    if (pairs.empty()) throw InputError("similarity_matrix: empty pair list");
    const auto n = ckpts.size();
    MatrixXd acc = MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    long long used = 0, skipped = 0;

    std::vector<MatrixXd> reps(n);
    for (auto& pair : pairs) {
        const auto tokens = pair_sequence(pair, bos);
        const int last = static_cast<int>(pair.prefix.size());
        bool ok = true;
        std::vector<VectorXd> vecs(n);
        for (std::size_t c = 0; c < n; ++c) {
            MatrixXd m = capture_midlayer(*ckpts[c], tokens);
            VectorXd v;
            if (opts.position == SimilarityOptions::Position::FinalPrefix) {
                v = m.row(last).transpose();
            } else {
                v = m.middleRows(1, last).colwise().mean().transpose();
            }
            if (opts.metric == SimilarityOptions::Metric::Pearson) v.array() -= v.mean();
            const double norm = v.norm();
            if (norm == 0.0) {
                ok = false;
                break;
            }
            vecs[c] = v / norm;
        }
        if (!ok) {
            ++skipped;
            continue;
        }
        ++used;
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a; b < n; ++b) {
                const double cosab = vecs[a].dot(vecs[b]);
                acc(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += cosab;
                if (a != b) acc(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) += cosab;
            }
    }
    if (used == 0) throw InputError("similarity_matrix: every example had a zero activation");
    SimilarityResult res;
    res.matrix = acc / static_cast<double>(used);
    res.skipped_examples = skipped;
    return res;
}

std::vector<TransitionSuggestion> suggest_transitions(const std::vector<std::string>& ckpt_ids,
                                                      const std::vector<double>& accuracy,
                                                      const MatrixXd& similarity, int window,
                                                      double jump_threshold) {
    const std::size_t n = ckpt_ids.size();
    if (accuracy.size() != n || similarity.rows() != static_cast<Eigen::Index>(n))
        throw InputError("suggest_transitions: input lengths disagree");
    if (n < 3) throw InputError("suggest_transitions: need at least 3 checkpoints");
    if (window < 1) window = 1;

    std::vector<std::pair<std::size_t, std::string>> picks;

    // Accuracy jumps: first differences that are local maxima over the window.
    std::vector<double> delta(n, 0.0);
    for (std::size_t j = 1; j < n; ++j) delta[j] = accuracy[j] - accuracy[j - 1];
    for (std::size_t j = 1; j < n; ++j) {
        if (delta[j] < jump_threshold) continue;
        bool is_max = true;
        const std::size_t lo = j > static_cast<std::size_t>(window) ? j - window : 1;
        const std::size_t hi = std::min(n - 1, j + static_cast<std::size_t>(window));
        for (std::size_t k = lo; k <= hi && is_max; ++k)
            if (delta[k] > delta[j]) is_max = false;
        if (is_max)
            picks.emplace_back(j, "accuracy jump +" + fmt_double(delta[j], 3) + " at " + ckpt_ids[j]);
    }

    // Similarity block boundary: the largest drop between adjacent checkpoints.
    std::vector<double> adj(n, 1.0);
    double max_adj = -1.0;
    for (std::size_t j = 1; j < n; ++j) {
        adj[j] = similarity(static_cast<Eigen::Index>(j - 1), static_cast<Eigen::Index>(j));
        max_adj = std::max(max_adj, adj[j]);
    }
    for (std::size_t j = 1; j < n; ++j) {
        const double drop = max_adj - adj[j];
        if (drop < jump_threshold) continue;
        bool is_min = true;
        const std::size_t lo = j > static_cast<std::size_t>(window) ? j - window : 1;
        const std::size_t hi = std::min(n - 1, j + static_cast<std::size_t>(window));
        for (std::size_t k = lo; k <= hi && is_min; ++k)
            if (adj[k] < adj[j]) is_min = false;
        if (is_min)
            picks.emplace_back(j, "similarity drop " + fmt_double(drop, 3) + " entering " + ckpt_ids[j]);
    }

    std::sort(picks.begin(), picks.end());
    std::vector<TransitionSuggestion> out;
    for (auto& [idx, why] : picks) {
        if (!out.empty() && out.back().ckpt_id == ckpt_ids[idx]) {
            out.back().rationale += "; " + why;
        } else {
            out.push_back({ckpt_ids[idx], why});
        }
    }
    return out;
}

AblationValidation ablation_validation_scored(const MidlayerScorer& s1, const MidlayerScorer& s2,
                                              const CrosscoderParams& params,
                                              const std::vector<PairContext>& contexts,
                                              const AttributionTable& table, int i1, int i2,
                                              int k) {
    if (contexts.empty()) throw InputError("ablation_validation: empty example list");
    std::set<int> feat_set;
    for (int f : top_k_features(table, i1, k)) feat_set.insert(f);
    for (int f : top_k_features(table, i2, k)) feat_set.insert(f);
    std::vector<int> feats(feat_set.begin(), feat_set.end());

    AblationValidation out;
    const double invn = 1.0 / static_cast<double>(contexts.size());
    for (int f : feats) {
        AblationRow row;
        row.feature = f;
        for (auto& ctx : contexts) {
            row.delta_c1 += ie_exact(s1, params, i1, ctx, f);
            row.delta_c2 += ie_exact(s2, params, i2, ctx, f);
        }
        row.delta_c1 *= invn;
        row.delta_c2 *= invn;
        const double a1 = std::abs(row.delta_c1), a2 = std::abs(row.delta_c2);
        if (a1 == 0.0 && a2 == 0.0) {
            row.usable = false;
            row.ratio = std::numeric_limits<double>::quiet_NaN();
        } else {
            row.usable = true;
            row.ratio = a1 == 0.0 ? std::numeric_limits<double>::infinity() : a2 / a1;
        }
        out.rows.push_back(row);
    }

    std::vector<double> ratios, rd, ri;
    for (auto& row : out.rows) {
        if (!row.usable) continue;
        auto d = reldec(params, i1, i2, row.feature);
        auto e = relie2(table, i1, i2, row.feature);
        if (!d || !e) continue;
        ratios.push_back(row.ratio);
        rd.push_back(*d);
        ri.push_back(*e);
    }
    if (ratios.size() < 3)
        throw InputError("ablation_validation: fewer than 3 usable features (got " +
                         std::to_string(ratios.size()) + ")");
    out.spearman_reldec = spearman(ratios, rd);
    out.spearman_relie = spearman(ratios, ri);
    return out;
}

AblationValidation ablation_validation(const std::vector<const Checkpoint*>& sources, int i1,
                                       int i2, const CrosscoderParams& params,
                                       const std::vector<MinimalPair>& pairs,
                                       const AttributionTable& table, int k,
                                       IGConfig::Positions positions, TokenId bos) {
    if (pairs.empty()) throw InputError("ablation_validation: empty pair list");
    if (sources.size() != params.sources.size())
        throw InputError("ablation_validation: one checkpoint per crosscoder source required");
    if (i1 < 0 || i2 < 0 || i1 >= params.n_sources() || i2 >= params.n_sources() || i1 == i2)
        throw InputError("ablation_validation: bad source pair");

    CheckpointScorer s1(*sources[static_cast<size_t>(i1)]), s2(*sources[static_cast<size_t>(i2)]);
    std::vector<PairContext> ctxs;
    ctxs.reserve(pairs.size());
    for (auto& pair : pairs)
        ctxs.push_back(build_pair_context(params, sources, pair, positions, bos));
    return ablation_validation_scored(s1, s2, params, ctxs, table, i1, i2, k);
}

Eigen::MatrixXi overlap_counts(const std::vector<const AttributionTable*>& tables,
                               const std::string& source_id, int k) {
    if (tables.empty()) throw InputError("overlap_counts: no tables");
    for (auto* t : tables)
        if (t->crosscoder_id != tables.front()->crosscoder_id)
            throw InputError("overlap_counts: tables come from different crosscoders");
    const auto n = tables.size();
    std::vector<std::set<int>> tops(n);
    for (std::size_t i = 0; i < n; ++i) {
        int src = -1;
        for (std::size_t c = 0; c < tables[i]->sources.size(); ++c)
            if (tables[i]->sources[c] == source_id) src = static_cast<int>(c);
        if (src < 0) throw InputError("overlap_counts: source " + source_id + " not in table");
        for (int f : top_k_features(*tables[i], src, k)) tops[i].insert(f);
    }
    Eigen::MatrixXi m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) {
            int count = 0;
            for (int f : tops[a])
                if (tops[b].count(f)) ++count;
            m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = count;
        }
    return m;
}

TopActivations top_activating_sequences(const CrosscoderParams& p,
                                        const std::vector<const MappedShard*>& shards,
                                        const std::vector<PositionRef>& posmap,
                                        const std::vector<PackedSeq>& sequences,
                                        const std::vector<int>& features, int m_seqs) {
    if (shards.size() != p.sources.size())
        throw InputError("top_activating_sequences: one shard per source required");
    if (sequences.empty()) throw InputError("top_activating_sequences: empty corpus");
    if (m_seqs < 1) throw InputError("top_activating_sequences: m_seqs must be >= 1");
    const std::uint64_t rows = shards.front()->rows();
    if (posmap.size() != rows) throw InputError("top_activating_sequences: posmap mismatch");

    std::vector<std::vector<std::pair<std::uint64_t, std::uint32_t>>> rows_of_seq(sequences.size());
    for (std::uint64_t r = 0; r < rows; ++r)
        rows_of_seq[posmap[r].seq].emplace_back(r, posmap[r].pos);

    TopActivations out;
    for (int f : features) out[f] = {};

    for (std::size_t s = 0; s < sequences.size(); ++s) {
        if (rows_of_seq[s].empty()) continue;
        const auto b = static_cast<Eigen::Index>(rows_of_seq[s].size());
        std::vector<MatrixXd> xs(p.sources.size());
        for (std::size_t c = 0; c < p.sources.size(); ++c) {
            MatrixXd x(b, p.d_model);
            auto m = shards[c]->matrix();
            const double inv = 1.0 / p.norm_scale[c];
            for (Eigen::Index i = 0; i < b; ++i)
                x.row(i) =
                    m.row(static_cast<Eigen::Index>(rows_of_seq[s][static_cast<size_t>(i)].first))
                        .cast<double>() * inv;
            xs[c] = std::move(x);
        }
        MatrixXd fmat = encode(p, xs);
        for (int f : features) {
            double mx = 0.0;
            for (Eigen::Index i = 0; i < b; ++i) mx = std::max(mx, fmat(i, f));
            if (mx <= 0.0) continue;
            auto& heap = out[f];
            if (heap.size() == static_cast<std::size_t>(m_seqs) && heap.back().max_act >= mx)
                continue;
            SeqActivation sa;
            sa.seq = static_cast<std::uint32_t>(s);
            sa.max_act = mx;
            for (Eigen::Index i = 0; i < b; ++i)
                if (fmat(i, f) > 0.0)
                    sa.token_acts.emplace_back(
                        static_cast<int>(rows_of_seq[s][static_cast<size_t>(i)].second),
                        fmat(i, f));
            heap.push_back(std::move(sa));
            // Sorted insert, descending by max activation; ties keep the
            // earlier sequence first.
            std::stable_sort(heap.begin(), heap.end(), [](const SeqActivation& a,
                                                          const SeqActivation& b) {
                if (a.max_act != b.max_act) return a.max_act > b.max_act;
                return a.seq < b.seq;
            });
            if (heap.size() > static_cast<std::size_t>(m_seqs)) heap.pop_back();
        }
    }
    return out;
}

void export_accuracy(const std::vector<AccuracyPoint>& curve, const std::string& path) {
    std::string out = "checkpoint\ttokens_seen\ttag\taccuracy\n";
    for (auto& p : curve)
        out += p.ckpt_id + "\t" + std::to_string(p.tokens_seen) + "\t" + p.tag + "\t" +
               fmt_double(p.accuracy) + "\n";
    write_file_atomic(path, out);
}

void export_heatmap(const std::vector<std::string>& ckpt_ids, const MatrixXd& sim,
                    const std::string& path) {
    if (sim.rows() != static_cast<Eigen::Index>(ckpt_ids.size()) || sim.rows() != sim.cols())
        throw InputError("export_heatmap: matrix/id mismatch");
    std::string out = "ckpt_a\tckpt_b\tcosine\n";
    for (std::size_t a = 0; a < ckpt_ids.size(); ++a)
        for (std::size_t b = 0; b < ckpt_ids.size(); ++b)
            out += ckpt_ids[a] + "\t" + ckpt_ids[b] + "\t" +
                   fmt_double(sim(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b))) +
                   "\n";
    write_file_atomic(path, out);
}

void export_transitions(const std::vector<TransitionSuggestion>& suggestions,
                        const std::string& path) {
    std::string out = "checkpoint\trationale\n";
    for (auto& s : suggestions) out += s.ckpt_id + "\t" + s.rationale + "\n";
    write_file_atomic(path, out);
}

void export_ternary(const AttributionTable& table, int top_k, const std::string& path) {
    if (table.sources.size() != 3)
        throw InputError("export_ternary: missing column relie3 (table has " +
                         std::to_string(table.sources.size()) + " sources, needs 3)");
    std::vector<std::set<int>> tops(3);
    for (int c = 0; c < 3; ++c) {
        auto v = top_k_features(table, c, top_k);
        tops[static_cast<size_t>(c)] = std::set<int>(v.begin(), v.end());
    }
    std::string out = "feature_id\tr1\tr2\tr3\ttopk_flags\n";
    for (int f = 0; f < table.dict_size(); ++f) {
        auto r3 = relie3(table, f);
        if (!r3) continue;
        std::vector<std::string> flags;
        for (int c = 0; c < 3; ++c)
            if (tops[static_cast<size_t>(c)].count(f)) flags.push_back(table.sources[static_cast<size_t>(c)]);
        out += std::to_string(f) + "\t" + fmt_double((*r3)(0)) + "\t" + fmt_double((*r3)(1)) +
               "\t" + fmt_double((*r3)(2)) + "\t" + (flags.empty() ? "-" : join(flags, "|")) +
               "\n";
    }
    write_file_atomic(path, out);
}

void export_ie_evolution(const AttributionTable& table, const std::string& path) {
    if (table.ie.empty()) throw InputError("export_ie_evolution: missing column ie");
    std::string out = "feature_id\tcheckpoint\tie\n";
    for (int f = 0; f < table.dict_size(); ++f) {
        if (table.no_effect(f)) continue;
        for (std::size_t c = 0; c < table.sources.size(); ++c)
            out += std::to_string(f) + "\t" + table.sources[c] + "\t" + fmt_double(table.ie[c](f)) +
                   "\n";
    }
    write_file_atomic(path, out);
}

void export_overlap(const std::vector<std::string>& slices, const Eigen::MatrixXi& counts,
                    const std::string& source_id, const std::string& path) {
    if (counts.rows() != static_cast<Eigen::Index>(slices.size()))
        throw InputError("export_overlap: matrix/slice mismatch");
    std::string out = "source\tslice_a\tslice_b\tcount\n";
    for (std::size_t a = 0; a < slices.size(); ++a)
        for (std::size_t b = 0; b < slices.size(); ++b)
            out += source_id + "\t" + slices[a] + "\t" + slices[b] + "\t" +
                   std::to_string(counts(static_cast<Eigen::Index>(a),
                                         static_cast<Eigen::Index>(b))) +
                   "\n";
    write_file_atomic(path, out);
}

void export_annotation_sheets(const std::vector<int>& features, const TopActivations& tops,
                              const Vocab& vocab, const std::vector<PackedSeq>& sequences,
                              const std::string& path) {
    std::string out;
    for (int f : features) {
        out += "feature\t" + std::to_string(f) + "\n";
        auto it = tops.find(f);
        int rank = 0;
        if (it != tops.end()) {
            for (auto& sa : it->second) {
                ++rank;
                const PackedSeq& seq = sequences.at(sa.seq);
                std::map<int, double> act_at;
                for (auto& [pos, act] : sa.token_acts) act_at[pos] = act;
                std::vector<std::string> rendered;
                for (int pos = 1; pos < seq.n_real; ++pos) {
                    const std::string& tok = vocab.token(seq.tokens[static_cast<size_t>(pos)]);
                    auto a = act_at.find(pos);
                    rendered.push_back(a == act_at.end() ? tok
                                                         : tok + "|" + fmt_double(a->second, 4));
                }
                out += "top_sequence\t" + std::to_string(rank) + "\t" +
                       fmt_double(sa.max_act, 6) + "\t" + join(rendered, " ") + "\n";
            }
        }
        out += "question\tdescription\tDescribe, as precisely as you can, what pattern of "
               "tokens or contexts this feature activates on.\n";
        out += "question\tinterpretability\tRate from 0.0 to 1.0 how consistent the sequences "
               "above are with your description.\n";
        out += "question\tcomplexity\tRate from 0.0 to 1.0 how broad or abstract the activating "
               "pattern is.\n";
        out += "question\tlanguages\tList the languages present in the activating sequences, "
               "if any beyond the default.\n";
        for (const char* q : {"description", "interpretability", "complexity", "languages"})
            out += std::string("answer\t") + q + "\t\n";
        out += "\n";
    }
    write_file_atomic(path, out);
}

}  // namespace xct
