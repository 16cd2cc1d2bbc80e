#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "relgen/evaluation.hpp"
#include "relgen/fixture.hpp"
#include "relgen/retrieval.hpp"
#include "relgen/tokenizer.hpp"

using namespace relgen;

namespace {

// five-document hand corpus; all oracle constants below were computed
// independently from the BM25 closed form (Lucene idf, k1=1.2, b=0.75)
std::vector<corpus::RawPair> hand_corpus() {
    return {{0, "filter objects by id", "c0"},
            {1, "sort the list", "c1"},
            {2, "filter the queryset by name filter", "c2"},
            {3, "return first object", "c3"},
            {4, "delete all objects", "c4"}};
}

std::vector<retrieval::ScoredDoc> brute_top_k(const retrieval::RetrievalIndex& index,
                                              const std::vector<std::string>& query, int k,
                                              int exclude = -1) {
    std::vector<retrieval::ScoredDoc> all;
    for (int d = 0; d < index.doc_count; ++d) {
        if (d == exclude) continue;
        const double s = retrieval::bm25_score(index, query, d);
        if (s > 0.0) all.push_back({d, s, index.doc_codes[d]});
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.doc_id < b.doc_id;
    });
    if (static_cast<int>(all.size()) > k) all.resize(static_cast<size_t>(k));
    return all;
}

}  // namespace

TEST_CASE("index statistics are hand-countable") {
    std::vector<corpus::RawPair> train{{0, "a b a", "x"}};
    const auto idx = retrieval::build_index(train);
    CHECK(idx.doc_count == 1);
    CHECK(idx.doc_lengths == std::vector<int>{3});
    CHECK(idx.avg_doc_length == doctest::Approx(3.0).epsilon(1e-12));
    REQUIRE(idx.postings.count("a") == 1);
    REQUIRE(idx.postings.count("b") == 1);
    CHECK(idx.postings.at("a").size() == 1);
    CHECK(idx.postings.at("a")[0].doc_id == 0);
    CHECK(idx.postings.at("a")[0].tf == 2);
    CHECK(idx.postings.at("b")[0].tf == 1);
    CHECK(idx.doc_codes[0] == std::vector<std::string>{"x"});
    CHECK_THROWS(retrieval::build_index({}));
}

TEST_CASE("identical descriptions share posting lists") {
    std::vector<corpus::RawPair> train{{0, "same text", "a"}, {1, "same text", "b"}};
    const auto idx = retrieval::build_index(train);
    REQUIRE(idx.postings.at("same").size() == 2);
    CHECK(idx.postings.at("same")[0].doc_id == 0);
    CHECK(idx.postings.at("same")[1].doc_id == 1);
}

TEST_CASE("average document length matches a brute-force recount") {
    const auto pairs = fixture::make_pairs(50, 13);
    const auto idx = retrieval::build_index(pairs);
    double total = 0.0;
    for (const auto& p : pairs) total += tokenizer::tokenize(p.description).size();
    CHECK(idx.avg_doc_length == doctest::Approx(total / 50.0).epsilon(1e-12));
    CHECK(idx.doc_count == 50);
}

TEST_CASE("bm25 matches the closed form on the hand corpus") {
    const auto idx = retrieval::build_index(hand_corpus());
    CHECK(idx.avg_doc_length == doctest::Approx(3.8).epsilon(1e-12));

    const std::vector<std::string> q1 = {"filter", "objects", "filter"};
    const double want_q1[5] = {1.7140324693860898, 0.0, 1.0352077290351631, 0.0,
                               0.9579736445390842};
    const std::vector<std::string> q2 = {"the", "filter"};
    const double want_q2[5] = {0.8570162346930449, 0.9579736445390842, 1.7430335166829969, 0.0,
                               0.0};
    for (int d = 0; d < 5; ++d) {
        CHECK(retrieval::bm25_score(idx, q1, d) == doctest::Approx(want_q1[d]).epsilon(1e-12));
        CHECK(retrieval::bm25_score(idx, q2, d) == doctest::Approx(want_q2[d]).epsilon(1e-12));
    }
}

TEST_CASE("duplicate query tokens contribute once") {
    const auto idx = retrieval::build_index(hand_corpus());
    const std::vector<std::string> dup = {"filter", "objects", "filter"};
    const std::vector<std::string> dedup = {"filter", "objects"};
    for (int d = 0; d < 5; ++d)
        CHECK(retrieval::bm25_score(idx, dup, d) == retrieval::bm25_score(idx, dedup, d));
}

TEST_CASE("single-doc self query matches the hand value; misses score zero") {
    std::vector<corpus::RawPair> train{{0, "a b a", "x"}};
    const auto idx = retrieval::build_index(train);
    CHECK(retrieval::bm25_score(idx, {"a", "b", "a"}, 0) ==
          doctest::Approx(0.6832449220729795).epsilon(1e-12));
    CHECK(retrieval::bm25_score(idx, {"zebra"}, 0) == 0.0);
    CHECK_THROWS(retrieval::bm25_score(idx, {"a"}, 1));
    CHECK_THROWS(retrieval::bm25_score(idx, {"a"}, -1));
}

TEST_CASE("score grows with term frequency, all else fixed") {
    std::vector<corpus::RawPair> lo{{0, "q f f", "x"}, {1, "p p p", "y"}};
    std::vector<corpus::RawPair> hi{{0, "q q f", "x"}, {1, "p p p", "y"}};
    const double s_lo = retrieval::bm25_score(retrieval::build_index(lo), {"q"}, 0);
    const double s_hi = retrieval::bm25_score(retrieval::build_index(hi), {"q"}, 0);
    CHECK(s_hi > s_lo);
}

TEST_CASE("top-k agrees with the exhaustive oracle on the fixture") {
    const auto pairs = fixture::make_pairs(50, 17);
    const auto idx = retrieval::build_index(pairs);
    for (int probe = 0; probe < 8; ++probe) {
        const auto query = tokenizer::tokenize(pairs[static_cast<size_t>(probe * 6)].description);
        const auto got = retrieval::retrieve_top_k(idx, query, 3);
        const auto want = brute_top_k(idx, query, 3);
        REQUIRE(got.size() == want.size());
        for (size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].doc_id == want[i].doc_id);
            CHECK(got[i].score == want[i].score);
            CHECK(got[i].code_tokens == want[i].code_tokens);
        }
    }
}

TEST_CASE("top-k basics: duplicates dominate, misses vanish, ties order by id") {
    std::vector<corpus::RawPair> train{{0, "alpha beta", "a"},
                                       {1, "find the target description", "b"},
                                       {2, "gamma delta", "c"},
                                       {3, "gamma delta", "d"}};
    const auto idx = retrieval::build_index(train);
    const auto hit = retrieval::retrieve_top_k(idx, {"find", "the", "target", "description"}, 1);
    REQUIRE(hit.size() == 1);
    CHECK(hit[0].doc_id == 1);

    CHECK(retrieval::retrieve_top_k(idx, {"zebra"}, 3).empty());

    const auto ties = retrieval::retrieve_top_k(idx, {"gamma"}, 2);
    REQUIRE(ties.size() == 2);
    CHECK(ties[0].doc_id == 2);
    CHECK(ties[1].doc_id == 3);
    CHECK(ties[0].score == ties[1].score);

    const auto excl = retrieval::retrieve_top_k(idx, {"gamma"}, 2, 2);
    REQUIRE(excl.size() == 1);
    CHECK(excl[0].doc_id == 3);
}

TEST_CASE("parallel scoring equals the serial reference bitwise") {
    const auto pairs = fixture::make_pairs(60, 19);
    const auto idx = retrieval::build_index(pairs);
    for (int probe = 0; probe < 5; ++probe) {
        const auto query = tokenizer::tokenize(pairs[static_cast<size_t>(probe * 11)].description);
        const auto a = retrieval::score_all(idx, query);
        const auto b = retrieval::score_all_serial(idx, query);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }
}

TEST_CASE("recode similarity is a normalized token edit distance") {
    using retrieval::recode_similarity;
    const std::vector<std::string> x = {"x", "=", "1"};
    CHECK(recode_similarity(x, x) == 1.0);
    CHECK(recode_similarity({"a", "b"}, {"c", "d"}) == 0.0);
    CHECK(recode_similarity(x, {"x", "=", "2"}) == doctest::Approx(1.0 - 1.0 / 3.0).epsilon(1e-12));
    CHECK(recode_similarity({}, {}) == 1.0);
    CHECK(recode_similarity({}, x) == 0.0);
    const auto pairs = fixture::make_pairs(20, 23);
    for (size_t i = 0; i + 1 < pairs.size(); i += 2) {
        const auto a = tokenizer::tokenize(pairs[i].code);
        const auto b = tokenizer::tokenize(pairs[i + 1].code);
        CHECK(recode_similarity(a, b) == recode_similarity(b, a));
        CHECK(recode_similarity(a, a) == 1.0);
        CHECK(recode_similarity(a, b) >= 0.0);
        CHECK(recode_similarity(a, b) <= 1.0);
    }
}

TEST_CASE("oracle retrieval maximizes BLEU against the reference") {
    const auto pairs = fixture::make_pairs(20, 29);
    corpus::RawPair probe = pairs[7];
    probe.id = 999;
    const auto hit = retrieval::oracle_retrieve(probe, pairs, evaluation::sentence_bleu);
    CHECK(hit.doc_id == 7);  // exact code present in train
    CHECK(hit.score == doctest::Approx(1.0).epsilon(1e-12));

    const std::vector<corpus::RawPair> one{pairs[3]};
    CHECK(retrieval::oracle_retrieve(probe, one, evaluation::sentence_bleu).doc_id == 0);

    // exhaustive argmax oracle
    for (int t = 0; t < 4; ++t) {
        const auto& test_pair = pairs[static_cast<size_t>(t * 5)];
        const auto got = retrieval::oracle_retrieve(test_pair, pairs, evaluation::sentence_bleu);
        const auto ref = tokenizer::tokenize(test_pair.code);
        int best = -1;
        double best_score = -1.0;
        for (size_t d = 0; d < pairs.size(); ++d) {
            const double s = evaluation::sentence_bleu(tokenizer::tokenize(pairs[d].code), ref);
            if (s > best_score) {
                best_score = s;
                best = static_cast<int>(d);
            }
        }
        CHECK(got.doc_id == best);
        CHECK(got.score == doctest::Approx(best_score).epsilon(1e-12));
    }
}

TEST_CASE("index file round trip preserves every score bitwise") {
    const auto dir = testutil::scratch_dir("retrieval_io");
    const auto pairs = fixture::make_pairs(50, 31);
    const auto idx = retrieval::build_index(pairs, 1.4, 0.6);
    retrieval::save_index(idx, dir + "/index.json");
    const auto back = retrieval::load_index(dir + "/index.json");
    CHECK(back.doc_count == idx.doc_count);
    CHECK(back.avg_doc_length == idx.avg_doc_length);
    CHECK(back.k1 == idx.k1);
    CHECK(back.b == idx.b);
    for (int probe = 0; probe < 10; ++probe) {
        const auto query = tokenizer::tokenize(pairs[static_cast<size_t>(probe * 5)].description);
        const auto a = retrieval::score_all_serial(idx, query);
        const auto b = retrieval::score_all_serial(back, query);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }
}
