#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xct/common.hpp"
#include "xct/config.hpp"

namespace xct {

// Token vocabulary with dense ids. Specials come first so they have stable,
// well-known ids; every grammar lexeme is a single token.
struct Vocab {
    std::vector<std::string> tokens;
    std::map<std::string, TokenId> index;
    TokenId bos = 0, pad = 1, unk = 2;

    TokenId add(const std::string& tok);
    TokenId id(const std::string& tok) const;      // throws InputError if unknown
    const std::string& token(TokenId id) const;    // throws InputError if out of range
    std::size_t size() const { return tokens.size(); }
    bool is_special(TokenId id) const { return id == bos || id == pad || id == unk; }

    std::string to_tsv() const;
    static Vocab from_tsv(const std::string& text);
};

// One noun or verb lexeme: a singular and a plural surface form.
struct Lexeme {
    std::string sg;
    std::string pl;
};

enum class Template {
    SimpleRegular = 0,
    SimpleIrregular = 1,
    DistractorRelational = 2,
    DistractorRelative = 3,
};

const char* template_name(Template t);
std::optional<Template> template_from_name(const std::string& name);
std::vector<std::string> all_template_names();

// A tiny agreement language. Sentences:
//   simple:      the NOUN VERB .
//   relational:  the NOUN PREP every NOUN' VERB .
//   relative:    the NOUN that every NOUN' VERB' VERB .
// The main verb always agrees with the first noun; in the relative template
// the inner verb agrees with the intervening noun. Interveners always have
// the opposite number from the subject. "every" is number-neutral by
// construction so held-out nouns can still teach their number from
// intervener positions.
struct GrammarSpec {
    std::vector<Lexeme> regular_nouns;
    std::vector<Lexeme> irregular_nouns;
    std::vector<Lexeme> verbs;  // sg = agreeing with singular subject
    std::vector<std::string> preps = {"near", "of"};
    std::map<Template, double> weights;
    std::uint64_t seed = 0;
    // When true, a deterministic subset of noun lexemes is reserved for
    // evaluation: they never appear in main-subject position in the
    // generated stream, only as interveners.
    bool holdout = false;
    double holdout_fraction = 0.25;

    static GrammarSpec defaults();
    static GrammarSpec from_config(const Config& cfg);

    void validate() const;  // throws ConfigError
    Vocab build_vocab() const;

    bool is_held_out(bool irregular, std::size_t lexeme_idx) const;
};

struct MinimalPair {
    std::vector<TokenId> prefix;
    TokenId correct = 0;
    TokenId wrong = 0;
    std::string task;
    std::string subtask;
    std::string slice;
};

// Streams whole sentences until at least n_tokens tokens have been emitted.
// Deterministic in (spec, seed).
TokenStream generate_corpus(const GrammarSpec& spec, std::size_t n_tokens, std::uint64_t seed);

// Balanced minimal pairs for one subtask: bases are sampled and emitted in
// singular/plural mirrored pairs, so for even n exactly n/2 of each subject
// number are produced.
std::vector<MinimalPair> generate_minimal_pairs(const GrammarSpec& spec, std::size_t n,
                                                const std::string& subtask, std::uint64_t seed);

// Tab-separated pair records:
//   prefix_ids (space-separated) \t correct \t wrong \t task \t subtask \t slice
std::string pairs_to_tsv(const std::vector<MinimalPair>& pairs);
std::vector<MinimalPair> load_minimal_pairs(const std::string& path);
std::vector<MinimalPair> parse_minimal_pairs(const std::string& text, const std::string& origin);

// Token stream container ("XTOK").
void save_token_stream(const std::string& path, const TokenStream& stream, std::uint32_t vocab_size);
TokenStream load_token_stream(const std::string& path, std::uint32_t* vocab_size_out = nullptr);

}  // namespace xct
