#pragma once

#include <cstdint>
#include <vector>

#include "relgen/corpus.hpp"

namespace relgen::fixture {

// Deterministic synthetic corpus of Django/Python one-liner pairs. Each pair
// instantiates a template family with fillers from a small shared pool plus
// pair-unique rare identifiers that appear in both the description and the
// code, so copying and retrieval feedback both carry real signal. With a
// vocabulary capped near the shared-pool size the rare identifiers become
// positional OOV tokens.
std::vector<corpus::RawPair> make_pairs(int n, uint64_t seed);

corpus::Corpus make_corpus(int n, uint64_t seed, double train_frac = 0.8, double dev_frac = 0.1,
                           double test_frac = 0.1);

}  // namespace relgen::fixture
