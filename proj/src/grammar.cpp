#include "xct/grammar.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "xct/serialize.hpp"

namespace xct {

TokenId Vocab::add(const std::string& tok) {
    auto it = index.find(tok);
    if (it != index.end()) return it->second;
    TokenId id = static_cast<TokenId>(tokens.size());
    tokens.push_back(tok);
    index.emplace(tok, id);
    return id;
}

TokenId Vocab::id(const std::string& tok) const {
    auto it = index.find(tok);
    if (it == index.end()) throw InputError("unknown token: '" + tok + "'");
    return it->second;
}

const std::string& Vocab::token(TokenId id) const {
    if (id >= tokens.size()) throw InputError("token id out of range: " + std::to_string(id));
    return tokens[id];
}

std::string Vocab::to_tsv() const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const char* kind = is_special(static_cast<TokenId>(i)) ? "special" : "word";
        out += std::to_string(i) + "\t" + tokens[i] + "\t" + kind + "\n";
    }
    return out;
}

Vocab Vocab::from_tsv(const std::string& text) {
    Vocab v;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto fields = split(line, '\t');
        if (fields.size() != 3)
            throw InputError("vocab line " + std::to_string(lineno) + ": expected 3 fields");
        TokenId id = static_cast<TokenId>(parse_int(fields[0], "vocab id"));
        if (id != v.tokens.size())
            throw InputError("vocab line " + std::to_string(lineno) + ": ids must be dense and ordered");
        v.add(fields[1]);
    }
    if (v.tokens.size() < 3) throw InputError("vocab too small, specials missing");
    return v;
}

const char* template_name(Template t) {
    switch (t) {
        case Template::SimpleRegular: return "simple-regular";
        case Template::SimpleIrregular: return "simple-irregular";
        case Template::DistractorRelational: return "distractor-relational";
        case Template::DistractorRelative: return "distractor-relative";
    }
    return "?";
}

std::optional<Template> template_from_name(const std::string& name) {
    for (Template t : {Template::SimpleRegular, Template::SimpleIrregular,
                       Template::DistractorRelational, Template::DistractorRelative})
        if (name == template_name(t)) return t;
    return std::nullopt;
}

std::vector<std::string> all_template_names() {
    return {template_name(Template::SimpleRegular), template_name(Template::SimpleIrregular),
            template_name(Template::DistractorRelational), template_name(Template::DistractorRelative)};
}

GrammarSpec GrammarSpec::defaults() {
    GrammarSpec g;
    g.regular_nouns = {
        {"cat", "cats"},   {"dog", "dogs"},   {"key", "keys"},   {"map", "maps"},
        {"bird", "birds"}, {"car", "cars"},   {"tree", "trees"}, {"book", "books"},
        {"lamp", "lamps"}, {"door", "doors"}, {"rock", "rocks"}, {"star", "stars"},
        {"boat", "boats"}, {"cup", "cups"},   {"pen", "pens"},   {"hat", "hats"},
    };
    g.irregular_nouns = {
        {"man", "men"},     {"woman", "women"}, {"child", "children"}, {"foot", "feet"},
        {"tooth", "teeth"}, {"mouse", "mice"},  {"goose", "geese"},    {"person", "people"},
    };
    g.verbs = {
        {"sleeps", "sleep"}, {"runs", "run"},   {"jumps", "jump"}, {"sings", "sing"},
        {"falls", "fall"},   {"waits", "wait"}, {"eats", "eat"},   {"plays", "play"},
        {"swims", "swim"},   {"reads", "read"},
    };
    g.weights = {
        {Template::SimpleRegular, 0.35},
        {Template::SimpleIrregular, 0.15},
        {Template::DistractorRelational, 0.30},
        {Template::DistractorRelative, 0.20},
    };
    return g;
}

GrammarSpec GrammarSpec::from_config(const Config& cfg) {
    GrammarSpec g = defaults();
    auto parse_lexemes = [&](const std::string& key) {
        std::vector<Lexeme> out;
        for (auto& item : cfg.get_list("grammar", key)) {
            auto parts = split(item, ':');
            if (parts.size() != 2)
                throw ConfigError("[grammar] " + key + ": expected sg:pl entries, got '" + item + "'");
            out.push_back({trim(parts[0]), trim(parts[1])});
        }
        return out;
    };
    if (cfg.has("grammar", "regular_nouns")) g.regular_nouns = parse_lexemes("regular_nouns");
    if (cfg.has("grammar", "irregular_nouns")) g.irregular_nouns = parse_lexemes("irregular_nouns");
    if (cfg.has("grammar", "verbs")) g.verbs = parse_lexemes("verbs");
    if (cfg.has("grammar", "preps")) g.preps = cfg.get_list("grammar", "preps");
    if (cfg.has("grammar", "weights")) {
        std::map<Template, double> w;
        for (auto& item : cfg.get_list("grammar", "weights")) {
            auto parts = split(item, ':');
            if (parts.size() != 2)
                throw ConfigError("[grammar] weights: expected name:value entries, got '" + item + "'");
            auto t = template_from_name(trim(parts[0]));
            if (!t)
                throw ConfigError("[grammar] weights: unknown template '" + trim(parts[0]) +
                                  "', valid: " + join(all_template_names(), ", "));
            w[*t] = parse_double(parts[1], "[grammar] weights." + trim(parts[0]));
        }
        g.weights = w;
    }
    g.seed = static_cast<std::uint64_t>(cfg.get_int("grammar", "seed", 0));
    g.holdout = cfg.get_bool("grammar", "holdout", false);
    g.holdout_fraction = cfg.get_double("grammar", "holdout_fraction", g.holdout_fraction);
    g.validate();
    return g;
}

void GrammarSpec::validate() const {
    auto check_lexemes = [](const std::vector<Lexeme>& l, const std::string& what, bool forms_distinct) {
        for (auto& e : l) {
            if (e.sg.empty() || e.pl.empty())
                throw ConfigError(what + ": empty surface form");
            if (forms_distinct && e.sg == e.pl)
                throw ConfigError(what + ": singular and plural forms must differ ('" + e.sg + "')");
            for (const std::string* s : {&e.sg, &e.pl})
                if (s->find_first_of(" \t\n") != std::string::npos)
                    throw ConfigError(what + ": lexemes must be single tokens, got '" + *s + "'");
        }
    };
    check_lexemes(regular_nouns, "regular_nouns", false);
    check_lexemes(irregular_nouns, "irregular_nouns", false);
    check_lexemes(verbs, "verbs", true);
    if (verbs.empty()) throw ConfigError("verb lexicon is empty");
    if (preps.empty()) throw ConfigError("preposition list is empty");

    double total = 0.0;
    for (auto& [t, w] : weights) {
        if (w < 0) throw ConfigError(std::string("negative weight for template ") + template_name(t));
        total += w;
        if (w > 0) {
            if (t == Template::SimpleRegular && regular_nouns.empty())
                throw ConfigError("template simple-regular has weight > 0 but regular_nouns is empty");
            if (t == Template::SimpleIrregular && irregular_nouns.empty())
                throw ConfigError("template simple-irregular has weight > 0 but irregular_nouns is empty");
            if ((t == Template::DistractorRelational || t == Template::DistractorRelative) &&
                regular_nouns.empty() && irregular_nouns.empty())
                throw ConfigError("distractor templates need a non-empty noun lexicon");
        }
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("template weights must sum to 1, got " + fmt_double(total));
    if (holdout) {
        if (holdout_fraction <= 0.0 || holdout_fraction >= 1.0)
            throw ConfigError("holdout_fraction must be in (0,1)");
    }
}

Vocab GrammarSpec::build_vocab() const {
    Vocab v;
    v.add("<bos>");
    v.add("<pad>");
    v.add("<unk>");
    v.add(".");
    v.add("the");
    v.add("every");
    v.add("that");
    for (auto& p : preps) v.add(p);
    for (auto* list : {&regular_nouns, &irregular_nouns})
        for (auto& n : *list) {
            v.add(n.sg);
            v.add(n.pl);
        }
    for (auto& vb : verbs) {
        v.add(vb.sg);
        v.add(vb.pl);
    }
    return v;
}

bool GrammarSpec::is_held_out(bool irregular, std::size_t lexeme_idx) const {
    if (!holdout) return false;
    const auto& list = irregular ? irregular_nouns : regular_nouns;
    if (list.empty()) return false;
    std::size_t reserved = std::max<std::size_t>(1, static_cast<std::size_t>(
        std::floor(holdout_fraction * static_cast<double>(list.size()))));
    return lexeme_idx >= list.size() - reserved;
}

namespace {

struct NounRef {
    bool irregular;
    std::size_t idx;
};

struct GrammarSampler {
    const GrammarSpec& spec;
    const Vocab& vocab;
    std::mt19937_64 rng;
    std::vector<Template> templates;
    std::vector<double> cumweights;
    std::vector<NounRef> subject_pool;      // holdout nouns excluded when spec.holdout
    std::vector<NounRef> intervener_pool;   // everything
    std::vector<NounRef> eval_regular, eval_irregular, eval_all;

    GrammarSampler(const GrammarSpec& s, const Vocab& v, std::uint64_t seed)
        : spec(s), vocab(v), rng(s.seed * 0x9E3779B97F4A7C15ull ^ (seed + 0x6A09E667F3BCC909ull)) {
        double acc = 0.0;
        for (auto& [t, w] : s.weights) {
            if (w <= 0) continue;
            templates.push_back(t);
            acc += w;
            cumweights.push_back(acc);
        }
        for (bool irr : {false, true}) {
            const auto& list = irr ? s.irregular_nouns : s.regular_nouns;
            for (std::size_t i = 0; i < list.size(); ++i) {
                NounRef ref{irr, i};
                intervener_pool.push_back(ref);
                if (s.is_held_out(irr, i)) {
                    (irr ? eval_irregular : eval_regular).push_back(ref);
                    eval_all.push_back(ref);
                } else {
                    subject_pool.push_back(ref);
                }
            }
        }
        if (!s.holdout) {
            eval_regular.clear();
            eval_irregular.clear();
            eval_all.clear();
            for (auto& ref : intervener_pool) {
                (ref.irregular ? eval_irregular : eval_regular).push_back(ref);
                eval_all.push_back(ref);
            }
        }
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

    std::size_t pick_index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }

    Template pick_template() {
        double u = uniform() * cumweights.back();
        for (std::size_t i = 0; i < cumweights.size(); ++i)
            if (u <= cumweights[i]) return templates[i];
        return templates.back();
    }

    const Lexeme& noun(const NounRef& r) const {
        return r.irregular ? spec.irregular_nouns[r.idx] : spec.regular_nouns[r.idx];
    }

    NounRef pick(const std::vector<NounRef>& pool, const char* what) {
        if (pool.empty()) throw ConfigError(std::string("noun pool is empty for ") + what);
        return pool[pick_index(pool.size())];
    }

    NounRef pick_subject(Template t) {
        switch (t) {
            case Template::SimpleRegular: {
                std::vector<NounRef> regs;
                for (auto& r : subject_pool)
                    if (!r.irregular) regs.push_back(r);
                if (regs.empty()) throw ConfigError("no regular nouns available as subjects");
                return regs[pick_index(regs.size())];
            }
            case Template::SimpleIrregular: {
                std::vector<NounRef> irrs;
                for (auto& r : subject_pool)
                    if (r.irregular) irrs.push_back(r);
                if (irrs.empty()) throw ConfigError("no irregular nouns available as subjects");
                return irrs[pick_index(irrs.size())];
            }
            default:
                return pick(subject_pool, "distractor subject");
        }
    }

    NounRef pick_intervener(const NounRef& subject) {
        for (int tries = 0; tries < 16; ++tries) {
            NounRef r = pick(intervener_pool, "intervener");
            if (r.irregular != subject.irregular || r.idx != subject.idx) return r;
        }
        return pick(intervener_pool, "intervener");
    }

    // Appends one sentence's tokens. Returns the subject's number (plural?).
    bool emit_sentence(Template t, TokenStream& out) {
        bool plural = pick_index(2) == 1;
        NounRef subj = pick_subject(t);
        const Lexeme& vb = spec.verbs[pick_index(spec.verbs.size())];
        const std::string& subj_form = plural ? noun(subj).pl : noun(subj).sg;
        const std::string& verb_form = plural ? vb.pl : vb.sg;
        out.push_back(vocab.id("the"));
        out.push_back(vocab.id(subj_form));
        if (t == Template::DistractorRelational) {
            NounRef mid = pick_intervener(subj);
            const std::string& mid_form = plural ? noun(mid).sg : noun(mid).pl;  // opposite number
            out.push_back(vocab.id(spec.preps[pick_index(spec.preps.size())]));
            out.push_back(vocab.id("every"));
            out.push_back(vocab.id(mid_form));
        } else if (t == Template::DistractorRelative) {
            NounRef mid = pick_intervener(subj);
            const Lexeme& inner = spec.verbs[pick_index(spec.verbs.size())];
            const std::string& mid_form = plural ? noun(mid).sg : noun(mid).pl;
            const std::string& inner_form = plural ? inner.sg : inner.pl;  // agrees with intervener
            out.push_back(vocab.id("that"));
            out.push_back(vocab.id("every"));
            out.push_back(vocab.id(mid_form));
            out.push_back(vocab.id(inner_form));
        }
        out.push_back(vocab.id(verb_form));
        out.push_back(vocab.id("."));
        return plural;
    }
};

}  // namespace

TokenStream generate_corpus(const GrammarSpec& spec, std::size_t n_tokens, std::uint64_t seed) {
    if (n_tokens == 0) throw ConfigError("n_tokens must be > 0");
    spec.validate();
    Vocab vocab = spec.build_vocab();
    GrammarSampler sampler(spec, vocab, seed);
    TokenStream out;
    out.reserve(n_tokens + 16);
    while (out.size() < n_tokens) sampler.emit_sentence(sampler.pick_template(), out);
    return out;
}

std::vector<MinimalPair> generate_minimal_pairs(const GrammarSpec& spec, std::size_t n,
                                                const std::string& subtask, std::uint64_t seed) {
    spec.validate();
    auto t = template_from_name(subtask);
    if (!t)
        throw InputError("unknown subtask '" + subtask + "', valid: " + join(all_template_names(), ", "));
    Vocab vocab = spec.build_vocab();
    GrammarSampler sampler(spec, vocab, seed ^ 0x517cc1b727220a95ull);

    const std::vector<NounRef>* pool = nullptr;
    switch (*t) {
        case Template::SimpleRegular: pool = &sampler.eval_regular; break;
        case Template::SimpleIrregular: pool = &sampler.eval_irregular; break;
        default: pool = &sampler.eval_all; break;
    }
    if (pool->empty())
        throw ConfigError("no nouns available for subtask " + subtask);

    std::vector<MinimalPair> out;
    out.reserve(n);
    while (out.size() < n) {
        NounRef subj = (*pool)[sampler.pick_index(pool->size())];
        const Lexeme& vb = spec.verbs[sampler.pick_index(spec.verbs.size())];
        NounRef mid = sampler.pick_intervener(subj);
        std::size_t prep_idx = sampler.pick_index(spec.preps.size());
        const Lexeme& inner = spec.verbs[sampler.pick_index(spec.verbs.size())];
        for (bool plural : {false, true}) {
            if (out.size() >= n) break;
            MinimalPair p;
            const Lexeme& noun = subj.irregular ? spec.irregular_nouns[subj.idx]
                                                : spec.regular_nouns[subj.idx];
            p.prefix.push_back(vocab.id("the"));
            p.prefix.push_back(vocab.id(plural ? noun.pl : noun.sg));
            if (*t == Template::DistractorRelational) {
                const Lexeme& m = mid.irregular ? spec.irregular_nouns[mid.idx]
                                                : spec.regular_nouns[mid.idx];
                p.prefix.push_back(vocab.id(spec.preps[prep_idx]));
                p.prefix.push_back(vocab.id("every"));
                p.prefix.push_back(vocab.id(plural ? m.sg : m.pl));
            } else if (*t == Template::DistractorRelative) {
                const Lexeme& m = mid.irregular ? spec.irregular_nouns[mid.idx]
                                                : spec.regular_nouns[mid.idx];
                p.prefix.push_back(vocab.id("that"));
                p.prefix.push_back(vocab.id("every"));
                p.prefix.push_back(vocab.id(plural ? m.sg : m.pl));
                p.prefix.push_back(vocab.id(plural ? inner.sg : inner.pl));
            }
            p.correct = vocab.id(plural ? vb.pl : vb.sg);
            p.wrong = vocab.id(plural ? vb.sg : vb.pl);
            p.task = "agreement";
            p.subtask = subtask;
            p.slice = subtask;
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::string pairs_to_tsv(const std::vector<MinimalPair>& pairs) {
    std::string out;
    for (auto& p : pairs) {
        std::vector<std::string> ids;
        ids.reserve(p.prefix.size());
        for (TokenId t : p.prefix) ids.push_back(std::to_string(t));
        out += join(ids, " ") + "\t" + std::to_string(p.correct) + "\t" + std::to_string(p.wrong) +
               "\t" + p.task + "\t" + p.subtask + "\t" + p.slice + "\n";
    }
    return out;
}

std::vector<MinimalPair> parse_minimal_pairs(const std::string& text, const std::string& origin) {
    std::vector<MinimalPair> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) {
        throw InputError(origin + ":" + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto fields = split(line, '\t');
        if (fields.size() != 6) fail("expected 6 tab-separated fields, got " + std::to_string(fields.size()));
        MinimalPair p;
        for (auto& tok : split(trim(fields[0]), ' ')) {
            if (tok.empty()) continue;
            p.prefix.push_back(static_cast<TokenId>(parse_int(tok, "prefix id")));
        }
        if (p.prefix.empty()) fail("empty prefix");
        if (trim(fields[1]).find(' ') != std::string::npos)
            fail("multi-token correct completion: '" + fields[1] + "'");
        if (trim(fields[2]).find(' ') != std::string::npos)
            fail("multi-token wrong completion: '" + fields[2] + "'");
        p.correct = static_cast<TokenId>(parse_int(fields[1], "correct id"));
        p.wrong = static_cast<TokenId>(parse_int(fields[2], "wrong id"));
        if (p.correct == p.wrong) fail("correct and wrong completions are identical");
        p.task = trim(fields[3]);
        p.subtask = trim(fields[4]);
        p.slice = trim(fields[5]);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<MinimalPair> load_minimal_pairs(const std::string& path) {
    return parse_minimal_pairs(read_file(path), path);
}

void save_token_stream(const std::string& path, const TokenStream& stream, std::uint32_t vocab_size) {
    BinWriter w(path);
    w.magic("XTOK");
    w.u32(1);
    w.u32(vocab_size);
    w.u64(stream.size());
    w.bytes(stream.data(), stream.size() * sizeof(TokenId));
    w.close();
}

TokenStream load_token_stream(const std::string& path, std::uint32_t* vocab_size_out) {
    BinReader r(path);
    r.expect_magic("XTOK", "token stream");
    std::uint32_t version = r.u32();
    if (version != 1) throw InputError(path + ": unsupported XTOK version");
    std::uint32_t vocab_size = r.u32();
    std::uint64_t n = r.u64();
    TokenStream s(n);
    r.bytes(s.data(), n * sizeof(TokenId));
    if (vocab_size_out) *vocab_size_out = vocab_size;
    return s;
}

}  // namespace xct
