#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace relgen {

// FNV-1a, used for the vocabulary hash embedded in checkpoints.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 14695981039346656037ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Rank tokens by frequency, ties broken by first occurrence. Shared by the
// vocabulary builder and the stopword builder so both use the same ordering.
struct TokenCounter {
    std::unordered_map<std::string, size_t> index;
    std::vector<std::string> tokens;       // in first-occurrence order
    std::vector<int64_t> counts;

    void add(const std::string& tok) {
        auto it = index.find(tok);
        if (it == index.end()) {
            index.emplace(tok, tokens.size());
            tokens.push_back(tok);
            counts.push_back(1);
        } else {
            counts[it->second] += 1;
        }
    }

    // Indices into tokens/counts, sorted by (count desc, first occurrence asc).
    std::vector<size_t> ranked() const;
};

std::string read_text_file(const std::string& path);
std::vector<std::string> read_lines(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// Deterministic Fisher-Yates (does not depend on libstdc++'s shuffle).
template <typename T, typename Rng>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace relgen
