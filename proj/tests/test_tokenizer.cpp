#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "relgen/fixture.hpp"
#include "relgen/tokenizer.hpp"

using namespace relgen;
using tokenizer::tokenize;

namespace {
std::string join(const std::vector<std::string>& ts) {
    std::string out;
    for (size_t i = 0; i < ts.size(); ++i) out += (i ? " " : "") + ts[i];
    return out;
}
}  // namespace

TEST_CASE("queryset chain splits at dots and punctuation") {
    const std::vector<std::string> want = {"Entry", ".", "objects", ".", "filter", "(", ")",
                                           "[",     ":", "1",       "]", ".",      "get", "(",
                                           ")"};
    // pre-tokenized (space-separated) and raw forms agree
    CHECK(tokenize("Entry . objects . filter ( ) [ : 1 ] . get ( )") == want);
    CHECK(tokenize("Entry.objects.filter()[:1].get()") == want);
}

TEST_CASE("regex string literal survives as a single token") {
    const std::vector<std::string> want = {"re",     ".", "split", "(",
                                           R"('[ ](?=[A-Z]+\\b)')", ",", "input", ")"};
    CHECK(tokenize(R"(re.split('[ ](?=[A-Z]+\\b)', input))") == want);
}

TEST_CASE("tokenize edge cases") {
    CHECK(tokenize("").empty());
    CHECK(tokenize("   \t ").empty());
    CHECK(tokenize("x = 'hello world'") == std::vector<std::string>{"x", "=", "'hello world'"});
    CHECK(tokenize(R"(s = "The '%s' function")") ==
          std::vector<std::string>{"s", "=", R"("The '%s' function")"});
    CHECK(tokenize("x = 3.14 + 2") == std::vector<std::string>{"x", "=", "3.14", "+", "2"});
    CHECK(tokenize("model ` Entry ` ?") == std::vector<std::string>{"model", "`", "Entry", "`", "?"});
    CHECK(tokenize("a`b?c") == std::vector<std::string>{"a", "`", "b", "?", "c"});

    tokenizer::TokenizeStats stats;
    const auto toks = tokenize("x = 'oops", &stats);
    CHECK(stats.unterminated_literal);
    REQUIRE(toks.size() == 3);
    CHECK(toks[2] == "'oops");
}

TEST_CASE("tokenization is a fixed point under re-joining") {
    const auto pairs = fixture::make_pairs(80, 21);
    for (const auto& p : pairs) {
        const auto t = tokenize(p.code);
        CHECK(tokenize(join(t)) == t);
        const auto d = tokenize(p.description);
        CHECK(tokenize(join(d)) == d);
    }
}

TEST_CASE("vocabulary keeps the most frequent tokens with stable ties") {
    // w0..w19 with strictly decreasing frequencies; a cap of 12 keeps w0..w11
    std::string desc, code;
    for (int i = 0; i < 20; ++i)
        for (int r = 0; r < 20 - i; ++r)
            ((i + r) % 2 ? code : desc) += "w" + std::to_string(i) + " ";
    std::vector<corpus::RawPair> train{{0, desc, code}};
    const auto v = tokenizer::build_vocabulary(train, 12, 4);
    CHECK(v.n_ordinary == 12);
    for (int i = 0; i < 20; ++i)
        CHECK(v.token_to_id.count("w" + std::to_string(i)) == (i < 12 ? 1u : 0u));

    // t1..t14 all tie at count one -> first occurrence order decides
    std::string tie_desc;
    for (int i = 0; i < 15; ++i) tie_desc += "t" + std::to_string(i) + " ";
    std::vector<corpus::RawPair> tied{{0, tie_desc, "t0"}};
    const auto vt = tokenizer::build_vocabulary(tied, 10, 4);
    CHECK(vt.n_ordinary == 10);
    for (int i = 0; i < 15; ++i)
        CHECK(vt.token_to_id.count("t" + std::to_string(i)) == (i < 10 ? 1u : 0u));

    // the cap floor is part of the contract
    CHECK_THROWS(tokenizer::build_vocabulary(train, 9, 4));
}

TEST_CASE("vocabulary is unified over descriptions and codes") {
    std::vector<corpus::RawPair> train{{0, "a b", "a c"}};
    const auto v = tokenizer::build_vocabulary(train, 10, 4);
    for (const char* t : {"a", "b", "c"}) CHECK(v.token_to_id.count(t) == 1);
    CHECK(v.n_ordinary == 3);  // "a" has exactly one id
    CHECK(v.size() == 3 + 4 + 4);
    CHECK_THROWS(tokenizer::build_vocabulary({}, 10, 4));
}

TEST_CASE("shared OOV token gets one positional slot on both sides") {
    const auto v = testutil::make_vocab({"split", "(", ")"}, 4);
    const auto enc = tokenizer::encode_pair({0, "split XYZ", "( XYZ )"}, v);
    REQUIRE(enc.src_ids.size() == 2);
    CHECK(enc.src_ids[0] == v.token_to_id.at("split"));
    CHECK(enc.src_ids[1] == v.oov_id(0));
    const std::vector<int> want_tgt = {v.sos_id, v.token_to_id.at("("), v.oov_id(0),
                                       v.token_to_id.at(")"), v.eos_id};
    CHECK(enc.tgt_ids == want_tgt);
    REQUIRE(enc.oov_map.size() == 1);
    CHECK(enc.oov_map.at(0) == "XYZ");
    CHECK(!enc.oov_overflow);
}

TEST_CASE("regex literal absent from vocab copies through one slot") {
    const auto v = testutil::make_vocab({"split", "string", "input", "re", ".", "(", ")", ","}, 4);
    const auto enc = tokenizer::encode_pair(
        {0, R"(split string input with '[ ](?=[A-Z]+\\b)')",
         R"(re.split('[ ](?=[A-Z]+\\b)', input))"},
        v);
    // the literal is OOV slot 1 ("with" took slot 0) and reused on the target side
    const int lit_src = enc.src_ids.back();
    CHECK(v.is_oov_id(lit_src));
    int lit_tgt = -1;
    for (int id : enc.tgt_ids)
        if (v.is_oov_id(id)) lit_tgt = id;
    CHECK(lit_tgt == lit_src);
    CHECK(enc.oov_map.at(lit_src - v.oov_base) == R"('[ ](?=[A-Z]+\\b)')");
}

TEST_CASE("pair without OOV tokens uses plain ids") {
    const auto v = testutil::make_vocab({"a", "b", "c"}, 4);
    const auto enc = tokenizer::encode_pair({0, "a b", "b c"}, v);
    CHECK(enc.oov_map.empty());
    for (int id : enc.src_ids) CHECK(!v.is_oov_id(id));
    for (int id : enc.tgt_ids) CHECK(!v.is_oov_id(id));
}

TEST_CASE("slot overflow maps extra OOVs to unk with a flag") {
    const auto v = testutil::make_vocab({"a"}, 1);
    const auto enc = tokenizer::encode_pair({0, "uno dos a", "uno dos"}, v);
    CHECK(enc.oov_overflow);
    CHECK(enc.src_ids[0] == v.oov_id(0));
    CHECK(enc.src_ids[1] == v.unk_id);  // second distinct OOV has no slot
    CHECK(enc.tgt_ids[1] == v.oov_id(0));
    CHECK(enc.tgt_ids[2] == v.unk_id);
}

TEST_CASE("target OOV token absent from the source becomes unk") {
    const auto v = testutil::make_vocab({"a"}, 4);
    const auto enc = tokenizer::encode_pair({0, "a", "a mystery"}, v);
    CHECK(enc.tgt_ids[2] == v.unk_id);
    CHECK(enc.oov_map.empty());
}

TEST_CASE("decode_ids drops frame tokens and resolves OOV slots") {
    const auto v = testutil::make_vocab({"re", ".", "split"}, 4);
    const std::vector<int> ids = {v.sos_id, v.token_to_id.at("re"), v.token_to_id.at("."),
                                  v.token_to_id.at("split"), v.eos_id};
    CHECK(tokenizer::decode_ids(ids, v, {}) == "re . split");
    CHECK(tokenizer::decode_ids({v.oov_id(0)}, v, {{0, "XYZ"}}) == "XYZ");
    CHECK(tokenizer::decode_ids({v.oov_id(2)}, v, {}) == "<oov_2>");
    CHECK(tokenizer::decode_ids({v.pad_id}, v, {}) == "");
}

TEST_CASE("round trip holds over the fixture corpus") {
    const auto pairs = fixture::make_pairs(300, 11);
    const auto v = tokenizer::build_vocabulary(pairs, 999, 50);
    for (const auto& p : pairs) {
        const auto enc = tokenizer::encode_pair(p, v);
        REQUIRE(!enc.oov_overflow);
        CHECK(tokenizer::decode_ids(enc.tgt_ids, v, enc.oov_map) == join(tokenize(p.code)));
        CHECK(tokenizer::decode_ids(enc.src_ids, v, enc.oov_map) == join(tokenize(p.description)));
    }
}

TEST_CASE("round trip holds under a tight vocabulary when OOVs are shared") {
    const auto pairs = fixture::make_pairs(300, 11);
    const auto v = tokenizer::build_vocabulary(pairs, 60, 50);
    int covered = 0;
    for (const auto& p : pairs) {
        const auto enc = tokenizer::encode_pair(p, v);
        if (enc.oov_overflow) continue;
        // the guarantee applies when every OOV code token also occurs in the description
        const auto src_tokens = tokenize(p.description);
        const std::set<std::string> src_set(src_tokens.begin(), src_tokens.end());
        bool shared = true;
        for (const auto& t : tokenize(p.code))
            if (!v.token_to_id.count(t) && !src_set.count(t)) shared = false;
        if (!shared) continue;
        ++covered;
        CHECK(tokenizer::decode_ids(enc.tgt_ids, v, enc.oov_map) == join(tokenize(p.code)));
    }
    CHECK(covered > 150);  // the property is exercised on most of the corpus
}

TEST_CASE("encode_source feeds injected special ids through unchanged") {
    const auto v = testutil::make_vocab({"a", "b"}, 4);
    const auto src = tokenizer::encode_source({"a", tokenizer::kEos, "b"}, v);
    const std::vector<int> want = {v.token_to_id.at("a"), v.eos_id, v.token_to_id.at("b")};
    CHECK(src.ids == want);
    CHECK(src.oov_map.empty());
}

TEST_CASE("vocabulary file round trip preserves ids and hash") {
    const auto dir = testutil::scratch_dir("tok_vocab");
    const auto pairs = fixture::make_pairs(40, 2);
    const auto v = tokenizer::build_vocabulary(pairs, 200, 20);
    tokenizer::save_vocabulary(v, dir + "/v.txt");
    const auto w = tokenizer::load_vocabulary(dir + "/v.txt");
    CHECK(w.id_to_token == v.id_to_token);
    CHECK(w.n_ordinary == v.n_ordinary);
    CHECK(w.pad_id == v.pad_id);
    CHECK(w.oov_base == v.oov_base);
    CHECK(w.oov_slots == v.oov_slots);
    CHECK(w.hash() == v.hash());

    // a cap below the distinct-token count produces a genuinely different
    // vocabulary, and the hash must notice
    const auto v2 = tokenizer::build_vocabulary(pairs, 50, 20);
    CHECK(v2.n_ordinary < v.n_ordinary);
    CHECK(v2.hash() != v.hash());
}
