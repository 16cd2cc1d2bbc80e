#include "relgen/fixture.hpp"

#include <random>
#include <stdexcept>
#include <string>

namespace relgen::fixture {

namespace {

const char* kModels[] = {"users", "entries", "items", "posts", "books", "orders"};
const char* kFields[] = {"name", "title", "status", "owner", "email", "category"};
const char* kValues[] = {"active", "draft", "pending", "done", "admin", "guest"};
const char* kLists[] = {"results", "records", "rows", "names", "values", "scores"};
const char* kFuncs[] = {"update", "render", "notify", "refresh", "validate", "publish"};
const char* kModules[] = {"os", "sys", "json", "math", "time", "collections"};
const char* kMessages[] = {"oops", "invalid", "failed", "missing"};
const char* kRareStems[] = {"Entry", "Invoice", "Ticket", "Profile", "Session",
                            "Article", "buf", "acc", "vec", "blk"};

std::string base36(int n) {
    static const char* digits = "0123456789abcdefghijklmnopqrstuvwxyz";
    if (n == 0) return "0";
    std::string s;
    while (n > 0) {
        s.insert(s.begin(), digits[n % 36]);
        n /= 36;
    }
    return s;
}

template <size_t N>
const char* pick(const char* (&pool)[N], std::mt19937_64& rng) {
    return pool[rng() % N];
}

struct Filler {
    std::mt19937_64& rng;
    int pair_id;
    int rare_budget;

    // Rare-capable slot: spends the budget on a pair-unique identifier,
    // otherwise falls back to the given common pool.
    template <size_t N>
    std::string rare_or(const char* (&pool)[N]) {
        if (rare_budget > 0) {
            --rare_budget;
            std::string stem = pick(kRareStems, rng);
            return stem + "_" + base36(pair_id);
        }
        return pick(pool, rng);
    }
};

}  // namespace

std::vector<corpus::RawPair> make_pairs(int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("fixture: n must be >= 1");
    std::mt19937_64 rng(seed);
    std::vector<corpus::RawPair> pairs;
    pairs.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int family = static_cast<int>(rng() % 12);
        // roughly half the pairs carry 1-3 pair-unique identifiers
        const int budget = (rng() % 2 == 0) ? 1 + static_cast<int>(rng() % 3) : 0;
        Filler f{rng, i, budget};
        std::string desc, code;
        switch (family) {
            case 0: {
                const std::string model = f.rare_or(kModels);
                const std::string field = pick(kFields, rng);
                const std::string value = pick(kValues, rng);
                desc = "get all " + model + " records where " + field + " equals " + value;
                code = model + ".objects.filter(" + field + "=" + value + ")";
                break;
            }
            case 1: {
                const std::string model = f.rare_or(kModels);
                desc = "get the first " + model + " object from the queryset";
                code = model + ".objects.first()";
                break;
            }
            case 2: {
                const std::string xs = f.rare_or(kLists);
                desc = "count the elements in the list " + xs;
                code = "len(" + xs + ")";
                break;
            }
            case 3: {
                const std::string val = f.rare_or(kValues);
                const std::string xs = f.rare_or(kLists);
                desc = "append " + val + " to the list " + xs;
                code = xs + ".append(" + val + ")";
                break;
            }
            case 4: {
                const std::string mod = f.rare_or(kModules);
                desc = "import the " + mod + " module";
                code = "import " + mod;
                break;
            }
            case 5: {
                const std::string msg = pick(kMessages, rng);
                desc = "raise a ValueError with the message " + msg;
                code = "raise ValueError('" + msg + "')";
                break;
            }
            case 6: {
                const std::string s = f.rare_or(kLists);
                desc = "split the string " + s + " on commas";
                code = s + ".split(',')";
                break;
            }
            case 7: {
                const std::string val = pick(kValues, rng);
                const std::string x = f.rare_or(kLists);
                desc = "assign " + val + " to the variable " + x;
                code = x + " = " + val;
                break;
            }
            case 8: {
                const std::string fn = f.rare_or(kFuncs);
                const std::string arg = pick(kFields, rng);
                desc = "call " + fn + " with the argument " + arg;
                code = fn + "(" + arg + ")";
                break;
            }
            case 9: {
                const std::string xs = f.rare_or(kLists);
                desc = "iterate over the items of " + xs;
                code = "for item in " + xs + ": pass";
                break;
            }
            case 10: {
                const std::string key = pick(kFields, rng);
                const std::string d = f.rare_or(kLists);
                desc = "get the key " + key + " from the dict " + d;
                code = d + ".get('" + key + "')";
                break;
            }
            default: {
                const std::string xs = f.rare_or(kLists);
                desc = "sort the list " + xs + " in reverse order";
                code = "sorted(" + xs + ", reverse=True)";
                break;
            }
        }
        corpus::RawPair p;
        p.id = i;
        p.description = std::move(desc);
        p.code = std::move(code);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

corpus::Corpus make_corpus(int n, uint64_t seed, double train_frac, double dev_frac,
                           double test_frac) {
    corpus::Corpus c = corpus::split_corpus(make_pairs(n, seed), train_frac, dev_frac, test_frac,
                                            seed ^ 0x5deece66dull);
    c.name = "fixture";
    return c;
}

}  // namespace relgen::fixture
