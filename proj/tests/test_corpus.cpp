#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "xct/grammar.hpp"
#include "xct/serialize.hpp"

using namespace xct;

namespace {

// Rule-based oracle: parses one sentence (tokens between terminators) and
// reports whether it is grammatical under the spec, independently of the
// generator's internals.
struct GrammarOracle {
    const GrammarSpec& spec;
    const Vocab& vocab;
    std::map<std::string, int> noun_number;  // surface -> 0 sg / 1 pl
    std::map<std::string, int> verb_number;
    std::set<std::string> preps;

    GrammarOracle(const GrammarSpec& s, const Vocab& v) : spec(s), vocab(v) {
        for (auto* list : {&s.regular_nouns, &s.irregular_nouns})
            for (auto& n : *list) {
                noun_number[n.sg] = 0;
                noun_number[n.pl] = 1;
            }
        for (auto& vb : s.verbs) {
            verb_number[vb.sg] = 0;
            verb_number[vb.pl] = 1;
        }
        for (auto& p : s.preps) preps.insert(p);
    }

    bool is_noun(const std::string& t) const { return noun_number.count(t) > 0; }
    bool is_verb(const std::string& t) const { return verb_number.count(t) > 0; }

    bool grammatical(const std::vector<std::string>& s) const {
        // the N V . | the N P every N' V . | the N that every N' V' V .
        if (s.size() < 4 || s.front() != "the" || s.back() != ".") return false;
        if (!is_noun(s[1])) return false;
        const int subj = noun_number.at(s[1]);
        if (s.size() == 4)
            return is_verb(s[2]) && verb_number.at(s[2]) == subj;
        if (s.size() == 7 && preps.count(s[2])) {
            if (s[3] != "every" || !is_noun(s[4]) || !is_verb(s[5])) return false;
            if (noun_number.at(s[4]) == subj) return false;  // intervener has opposite number
            return verb_number.at(s[5]) == subj;
        }
        if (s.size() == 8 && s[2] == "that") {
            if (s[3] != "every" || !is_noun(s[4]) || !is_verb(s[5]) || !is_verb(s[6])) return false;
            const int mid = noun_number.at(s[4]);
            if (mid == subj) return false;
            if (verb_number.at(s[5]) != mid) return false;  // inner verb agrees with intervener
            return verb_number.at(s[6]) == subj;
        }
        return false;
    }
};

std::vector<std::vector<std::string>> sentences_of(const TokenStream& stream, const Vocab& v) {
    std::vector<std::vector<std::string>> out;
    std::vector<std::string> cur;
    for (TokenId t : stream) {
        cur.push_back(v.token(t));
        if (v.token(t) == ".") {
            out.push_back(cur);
            cur.clear();
        }
    }
    return out;
}

}  // namespace

TEST_CASE("single-template grammar forces a periodic grammatical pattern") {
    GrammarSpec g = GrammarSpec::defaults();
    g.weights = {{Template::SimpleRegular, 1.0}};
    Vocab v = g.build_vocab();
    GrammarOracle oracle(g, v);
    TokenStream s = generate_corpus(g, 64, 0);
    CHECK(s.size() >= 64);
    CHECK(s.size() % 4 == 0);  // every sentence is "the N V ."
    auto sents = sentences_of(s, v);
    for (auto& sent : sents) {
        CHECK(sent.size() == 4);
        CHECK(oracle.grammatical(sent));
    }
}

TEST_CASE("corpus generation is deterministic") {
    GrammarSpec g = GrammarSpec::defaults();
    TokenStream a = generate_corpus(g, 5000, 3);
    TokenStream b = generate_corpus(g, 5000, 3);
    CHECK(a == b);
    TokenStream c = generate_corpus(g, 5000, 4);
    CHECK(a != c);
}

TEST_CASE("every generated sentence is grammatical under the oracle") {
    GrammarSpec g = GrammarSpec::defaults();
    Vocab v = g.build_vocab();
    GrammarOracle oracle(g, v);
    TokenStream s = generate_corpus(g, 20000, 12);
    auto sents = sentences_of(s, v);
    CHECK(sents.size() > 2000);
    for (auto& sent : sents) CHECK(oracle.grammatical(sent));
}

TEST_CASE("template mix and subject number match the configured weights") {
    GrammarSpec g = GrammarSpec::defaults();
    Vocab v = g.build_vocab();
    TokenStream s = generate_corpus(g, 100000, 1);
    auto sents = sentences_of(s, v);
    std::map<size_t, long long> by_len;  // 4 simple, 7 relational, 8 relative
    long long plural = 0;
    GrammarOracle oracle(g, v);
    for (auto& sent : sents) {
        by_len[sent.size()]++;
        plural += oracle.noun_number.at(sent[1]);
    }
    const double n = static_cast<double>(sents.size());
    const double simple = g.weights.at(Template::SimpleRegular) + g.weights.at(Template::SimpleIrregular);
    CHECK(by_len[4] / n == doctest::Approx(simple).epsilon(0.05));
    CHECK(by_len[7] / n ==
          doctest::Approx(g.weights.at(Template::DistractorRelational)).epsilon(0.05));
    CHECK(by_len[8] / n ==
          doctest::Approx(g.weights.at(Template::DistractorRelative)).epsilon(0.05));
    CHECK(plural / n == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("empty lexicon category raises a configuration error") {
    GrammarSpec g = GrammarSpec::defaults();
    g.irregular_nouns.clear();
    CHECK_THROWS_AS(generate_corpus(g, 100, 0), ConfigError);
    g = GrammarSpec::defaults();
    g.verbs.clear();
    CHECK_THROWS_AS(generate_corpus(g, 100, 0), ConfigError);
}

TEST_CASE("minimal pairs: balance, agreement, and the documented examples") {
    GrammarSpec g = GrammarSpec::defaults();
    Vocab v = g.build_vocab();
    auto pairs = generate_minimal_pairs(g, 200, "simple-regular", 7);
    REQUIRE(pairs.size() == 200);
    GrammarOracle oracle(g, v);
    int plural_subjects = 0;
    for (auto& p : pairs) {
        CHECK(p.correct != p.wrong);
        REQUIRE(p.prefix.size() == 2);
        CHECK(v.token(p.prefix[0]) == "the");
        const std::string noun = v.token(p.prefix[1]);
        const std::string corr = v.token(p.correct);
        const std::string wrong = v.token(p.wrong);
        // Substituting the correct completion is grammatical, the wrong one is not.
        std::vector<std::string> sent = {"the", noun, corr, "."};
        CHECK(oracle.grammatical(sent));
        sent[2] = wrong;
        CHECK_FALSE(oracle.grammatical(sent));
        plural_subjects += oracle.noun_number.at(noun);
    }
    CHECK(plural_subjects == 100);
}

TEST_CASE("distractor pairs put one opposite-number noun between subject and verb") {
    GrammarSpec g = GrammarSpec::defaults();
    Vocab v = g.build_vocab();
    GrammarOracle oracle(g, v);
    for (const char* subtask : {"distractor-relational", "distractor-relative"}) {
        auto pairs = generate_minimal_pairs(g, 50, subtask, 9);
        for (auto& p : pairs) {
            std::vector<std::string> sent;
            for (TokenId t : p.prefix) sent.push_back(v.token(t));
            sent.push_back(v.token(p.correct));
            sent.push_back(".");
            CHECK(oracle.grammatical(sent));
            sent[sent.size() - 2] = v.token(p.wrong);
            CHECK_FALSE(oracle.grammatical(sent));
            // Head noun governs: subject number decides the correct form.
            const int subj = oracle.noun_number.at(sent[1]);
            CHECK(oracle.verb_number.at(v.token(p.correct)) == subj);
            CHECK(oracle.noun_number.at(sent[4]) == 1 - subj);
        }
    }
}

TEST_CASE("irregular subtask uses only irregular noun lexemes") {
    GrammarSpec g = GrammarSpec::defaults();
    Vocab v = g.build_vocab();
    std::set<std::string> irregular_forms;
    for (auto& n : g.irregular_nouns) {
        irregular_forms.insert(n.sg);
        irregular_forms.insert(n.pl);
    }
    for (auto& p : generate_minimal_pairs(g, 40, "simple-irregular", 3))
        CHECK(irregular_forms.count(v.token(p.prefix[1])) == 1);
}

TEST_CASE("unknown subtask errors and lists the valid names") {
    GrammarSpec g = GrammarSpec::defaults();
    try {
        generate_minimal_pairs(g, 10, "nope", 0);
        FAIL("expected InputError");
    } catch (const InputError& e) {
        const std::string msg = e.what();
        for (auto& name : all_template_names()) CHECK(msg.find(name) != std::string::npos);
    }
}

TEST_CASE("pair file round trip and validation errors") {
    GrammarSpec g = GrammarSpec::defaults();
    auto pairs = generate_minimal_pairs(g, 30, "distractor-relational", 5);
    const std::string text = pairs_to_tsv(pairs);
    auto again = parse_minimal_pairs(text, "<mem>");
    REQUIRE(again.size() == pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
        CHECK(again[i].prefix == pairs[i].prefix);
        CHECK(again[i].correct == pairs[i].correct);
        CHECK(again[i].wrong == pairs[i].wrong);
        CHECK(again[i].subtask == pairs[i].subtask);
    }

    CHECK(parse_minimal_pairs("1 2\t3\t4\tt\ts\tl\n5 6\t7\t8\tt\ts\tl\n", "<mem>").size() == 2);

    // correct == wrong, with the offending line number in the message
    try {
        parse_minimal_pairs("1 2\t3\t4\tt\ts\tl\n1 2\t3\t3\tt\ts\tl\n", "<mem>");
        FAIL("expected InputError");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }

    // multi-token completion field
    CHECK_THROWS_AS(parse_minimal_pairs("1\t2 9\t3\tt\ts\tl\n", "<mem>"), InputError);
    // empty prefix
    CHECK_THROWS_AS(parse_minimal_pairs("\t2\t3\tt\ts\tl\n", "<mem>"), InputError);
}

TEST_CASE("held-out pair prefixes never occur in the training stream") {
    GrammarSpec g = GrammarSpec::defaults();
    g.holdout = true;
    Vocab v = g.build_vocab();
    TokenStream stream = generate_corpus(g, 60000, 21);

    std::vector<MinimalPair> pairs;
    for (auto& name : all_template_names()) {
        auto part = generate_minimal_pairs(g, 40, name, 13);
        pairs.insert(pairs.end(), part.begin(), part.end());
    }
    for (auto& p : pairs) {
        bool found = false;
        if (p.prefix.size() <= stream.size()) {
            for (size_t i = 0; i + p.prefix.size() <= stream.size() && !found; ++i) {
                bool match = true;
                for (size_t j = 0; j < p.prefix.size() && match; ++j)
                    if (stream[i + j] != p.prefix[j]) match = false;
                found = match;
            }
        }
        CHECK_FALSE(found);
    }

    // Held-out nouns still appear in the stream (as interveners), so their
    // number stays learnable.
    std::set<TokenId> seen(stream.begin(), stream.end());
    std::set<TokenId> holdout_tokens;
    for (auto& p : pairs) holdout_tokens.insert(p.prefix[1]);
    int present = 0;
    for (TokenId t : holdout_tokens) present += seen.count(t) ? 1 : 0;
    CHECK(present == static_cast<int>(holdout_tokens.size()));
}

TEST_CASE("token stream container round trips") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "xct_test_stream.xtok").string();
    GrammarSpec g = GrammarSpec::defaults();
    TokenStream s = generate_corpus(g, 1000, 2);
    save_token_stream(path, s, static_cast<std::uint32_t>(g.build_vocab().size()));
    std::uint32_t vs = 0;
    TokenStream t = load_token_stream(path, &vs);
    CHECK(t == s);
    CHECK(vs == g.build_vocab().size());
    fs::remove(path);
}

TEST_CASE("vocab ids are dense, specials distinct, lexemes single-token") {
    GrammarSpec g = GrammarSpec::defaults();
    Vocab v = g.build_vocab();
    CHECK(v.bos == 0);
    CHECK(v.pad == 1);
    CHECK(v.unk == 2);
    CHECK(v.id("the") < v.size());
    CHECK(v.token(v.id("cats")) == "cats");
    Vocab w = Vocab::from_tsv(v.to_tsv());
    CHECK(w.tokens == v.tokens);
    CHECK_THROWS_AS(v.id("nonexistent-token"), InputError);
}
