#include "relgen/corpus.hpp"

#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "relgen/util.hpp"

namespace relgen {

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << content;
}

std::vector<size_t> TokenCounter::ranked() const {
    std::vector<size_t> order(tokens.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (counts[a] != counts[b]) return counts[a] > counts[b];
        return a < b;  // first occurrence wins
    });
    return order;
}

}  // namespace relgen

namespace relgen::corpus {

static bool is_blank(const std::string& s) {
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) return false;
    return true;
}

std::vector<RawPair> load_pairs(const std::string& desc_path, const std::string& code_path) {
    auto descs = read_lines(desc_path);
    auto codes = read_lines(code_path);
    if (descs.size() != codes.size()) {
        throw std::runtime_error("alignment error: " + std::to_string(descs.size()) + " vs " +
                                 std::to_string(codes.size()) + " lines (" + desc_path + ", " +
                                 code_path + ")");
    }
    std::vector<RawPair> pairs;
    pairs.reserve(descs.size());
    for (size_t i = 0; i < descs.size(); ++i) {
        if (is_blank(descs[i]) || is_blank(codes[i])) {
            throw std::runtime_error("empty description or code at line " + std::to_string(i) +
                                     " (" + desc_path + ")");
        }
        pairs.push_back(RawPair{static_cast<int>(i), descs[i], codes[i]});
    }
    return pairs;
}

std::vector<RawPair> load_pairs_jsonl(const std::string& path) {
    auto lines = read_lines(path);
    std::vector<RawPair> pairs;
    pairs.reserve(lines.size());
    int id = 0;
    for (size_t i = 0; i < lines.size(); ++i) {
        if (is_blank(lines[i])) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(lines[i]);
        } catch (const std::exception& e) {
            throw std::runtime_error("bad JSON at " + path + ":" + std::to_string(i + 1) + ": " +
                                     e.what());
        }
        if (!obj.contains("intent") || !obj.contains("snippet")) {
            throw std::runtime_error("missing intent/snippet at " + path + ":" +
                                     std::to_string(i + 1));
        }
        std::string intent = obj["intent"].get<std::string>();
        std::string snippet = obj["snippet"].get<std::string>();
        if (is_blank(intent) || is_blank(snippet)) {
            throw std::runtime_error("empty intent or snippet at " + path + ":" +
                                     std::to_string(i + 1));
        }
        pairs.push_back(RawPair{id++, intent, snippet});
    }
    return pairs;
}

std::vector<RawPair> load_split(const std::string& prefix) {
    if (prefix.size() > 6 && prefix.substr(prefix.size() - 6) == ".jsonl")
        return load_pairs_jsonl(prefix);
    return load_pairs(prefix + ".desc", prefix + ".code");
}

Corpus split_corpus(const std::vector<RawPair>& pairs, double train_frac, double dev_frac,
                    double test_frac, uint64_t seed) {
    if (train_frac <= 0 || dev_frac <= 0 || test_frac <= 0)
        throw std::invalid_argument("split fractions must be positive");
    if (std::abs(train_frac + dev_frac + test_frac - 1.0) > 1e-9)
        throw std::invalid_argument("split fractions must sum to 1");
    if (pairs.size() < 3) throw std::runtime_error("insufficient data: need at least 3 pairs");

    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    deterministic_shuffle(order, rng);

    size_t n = pairs.size();
    size_t n_train = static_cast<size_t>(train_frac * n + 0.5);
    size_t n_dev = static_cast<size_t>(dev_frac * n + 0.5);
    if (n_train + n_dev >= n) n_train = n - n_dev - 1;
    size_t n_test = n - n_train - n_dev;
    // keep every split non-empty (n >= 3 guarantees this is possible)
    while (n_train == 0) { n_train++; (n_test > 1 ? n_test : n_dev)--; }
    while (n_dev == 0) { n_dev++; (n_train > 1 ? n_train : n_test)--; }
    while (n_test == 0) { n_test++; (n_train > 1 ? n_train : n_dev)--; }

    Corpus c;
    for (size_t i = 0; i < n; ++i) {
        const RawPair& p = pairs[order[i]];
        if (i < n_train)
            c.train.push_back(p);
        else if (i < n_train + n_dev)
            c.dev.push_back(p);
        else
            c.test.push_back(p);
    }
    return c;
}

void write_split(const std::vector<RawPair>& pairs, const std::string& prefix) {
    std::string desc, code;
    for (const auto& p : pairs) {
        desc += p.description;
        desc += '\n';
        code += p.code;
        code += '\n';
    }
    write_text_file(prefix + ".desc", desc);
    write_text_file(prefix + ".code", code);
}

}  // namespace relgen::corpus
