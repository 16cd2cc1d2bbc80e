#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "relgen/corpus.hpp"
#include "relgen/evaluation.hpp"
#include "relgen/fixture.hpp"
#include "relgen/model.hpp"
#include "relgen/prf.hpp"
#include "relgen/retrieval.hpp"
#include "relgen/tokenizer.hpp"
#include "relgen/trainer.hpp"

namespace fs = std::filesystem;
using namespace relgen;

namespace {

// INI reader mapping "[section]\nkey = value" onto the dotted option
// "--section.key". The stock reader resolves sections against subcommands,
// which this tool does not use for grouping.
class IniSectionConfig : public CLI::ConfigBase {
public:
    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r\n");
            const auto b = s.find_last_not_of(" \t\r\n");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::vector<CLI::ConfigItem> items;
        std::string section, line;
        while (std::getline(input, line)) {
            line = trim(line);
            if (line.empty() || line[0] == '#' || line[0] == ';') continue;
            if (line.front() == '[' && line.back() == ']') {
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw CLI::ConversionError("config line is not key = value: " + line);
            const std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
                value = value.substr(1, value.size() - 2);
            CLI::ConfigItem item;
            item.name = section.empty() ? key : section + "." + key;
            item.inputs = {value};
            items.push_back(std::move(item));
        }
        return items;
    }
};

struct RunConfig {
    // paths
    std::string corpus;            // split prefix: {corpus}.train / .dev / .test
    std::string dir = "artifacts";
    std::string vocab_path;        // defaults derived from dir when empty
    std::string index_path;
    std::string checkpoint_path;
    // vocabulary
    int vocab_size = 999;
    int oov_slots = 50;
    // retrieval
    double k1 = 1.2;
    double b = 0.75;
    // model + training
    model::ModelConfig model;
    model::TrainConfig train;
    // decoding
    prf::DecodingConfig decode;
    std::string strategy = "greedy";
    // evaluation
    std::string systems = "bm25,recode,oracle,base,copy,naive,relevance";
    int eval_limit = 0;            // 0 = whole test split
    // run
    std::string mode = "copy";
    std::string trace_path;
    bool resume = false;
    uint64_t seed = 1;

    std::string vocab_file() const { return vocab_path.empty() ? dir + "/vocab.txt" : vocab_path; }
    std::string index_file() const { return index_path.empty() ? dir + "/index.json" : index_path; }
    std::string ckpt_file(const std::string& m) const {
        if (!checkpoint_path.empty()) return checkpoint_path;
        return dir + "/" + (m == "relevance" ? "copy" : m) + ".ckpt";
    }
    std::string latest_file(const std::string& m) const { return dir + "/latest_" + m + ".ckpt"; }
    std::string loss_file(const std::string& m) const { return dir + "/loss_" + m + ".csv"; }
};

std::string config_snapshot(const RunConfig& rc, const std::string& mode, double lambda,
                            bool naive) {
    nlohmann::json j;
    j["tokenizer"] = tokenizer::kTokenizerVersion;
    j["mode"] = mode;
    j["seed"] = rc.seed;
    j["vocab"] = {{"max_ordinary", rc.vocab_size}, {"oov_slots", rc.oov_slots}};
    j["retrieval"] = {{"k1", rc.k1}, {"b", rc.b}};
    j["model"] = {{"layers", rc.model.num_layers}, {"heads", rc.model.num_heads},
                  {"d_model", rc.model.d_model},   {"d_ff", rc.model.d_ff},
                  {"dropout", rc.model.dropout},   {"max_len", rc.model.max_len}};
    j["train"] = {{"lr", rc.train.lr},
                  {"warmup", rc.train.warmup_steps},
                  {"batch_tokens", rc.train.batch_tokens},
                  {"epochs", rc.train.epochs}};
    j["decode"] = {{"lambda", lambda},
                   {"k", rc.decode.k},
                   {"stopword_n", rc.decode.stopword_n},
                   {"max_len", rc.decode.max_len},
                   {"strategy", rc.strategy},
                   {"beam_width", rc.decode.beam_width},
                   {"normalize_rf", rc.decode.normalize_rf},
                   {"naive_top1", naive}};
    return j.dump();
}

corpus::Corpus load_corpus(const RunConfig& rc) {
    if (rc.corpus.empty()) throw std::runtime_error("no corpus prefix configured");
    corpus::Corpus c;
    c.train = corpus::load_split(rc.corpus + ".train");
    c.dev = corpus::load_split(rc.corpus + ".dev");
    c.test = corpus::load_split(rc.corpus + ".test");
    c.name = fs::path(rc.corpus).filename().string();
    return c;
}

// Teacher-forcing pairs; naive mode appends the top-1 retrieved code (self
// excluded for indexed train pairs) behind an <eos> separator.
std::vector<tokenizer::EncodedPair> encode_split(const std::vector<corpus::RawPair>& pairs,
                                                 const tokenizer::Vocabulary& vocab, bool naive,
                                                 const retrieval::RetrievalIndex* index,
                                                 bool in_index) {
    std::vector<tokenizer::EncodedPair> out;
    out.reserve(pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        if (!naive || index == nullptr) {
            out.push_back(tokenizer::encode_pair(p, vocab));
            continue;
        }
        auto src_tokens = tokenizer::tokenize(p.description);
        const int exclude = in_index ? static_cast<int>(i) : -1;
        const auto top = retrieval::retrieve_top_k(*index, src_tokens, 1, exclude);
        if (!top.empty()) {
            src_tokens.push_back(tokenizer::kEos);
            src_tokens.insert(src_tokens.end(), top[0].code_tokens.begin(),
                              top[0].code_tokens.end());
        }
        auto src = tokenizer::encode_source(src_tokens, vocab);
        tokenizer::EncodedPair enc;
        enc.tgt_ids = tokenizer::encode_target(tokenizer::tokenize(p.code), vocab, src);
        enc.src_ids = std::move(src.ids);
        enc.oov_map = std::move(src.oov_map);
        enc.oov_overflow = src.overflow;
        out.push_back(std::move(enc));
    }
    return out;
}

int cmd_prepare(const RunConfig& rc) {
    const corpus::Corpus c = load_corpus(rc);
    fs::create_directories(rc.dir);
    const auto vocab = tokenizer::build_vocabulary(c.train, rc.vocab_size, rc.oov_slots);
    tokenizer::save_vocabulary(vocab, rc.vocab_file());
    const auto index = retrieval::build_index(c.train, rc.k1, rc.b);
    retrieval::save_index(index, rc.index_file());
    std::printf("corpus %s: train %zu dev %zu test %zu pairs\n", c.name.c_str(), c.train.size(),
                c.dev.size(), c.test.size());
    std::printf("vocabulary: %d ordinary + 4 special + %d oov slot ids (tokenizer %s)\n",
                vocab.n_ordinary, vocab.oov_slots, tokenizer::kTokenizerVersion);
    std::printf("index: %d docs, avg description length %.3f (k1=%.2f b=%.2f)\n", index.doc_count,
                index.avg_doc_length, index.k1, index.b);
    std::printf("wrote %s and %s\n", rc.vocab_file().c_str(), rc.index_file().c_str());
    return 0;
}

int cmd_train(RunConfig rc) {
    if (rc.mode == "relevance") {
        std::printf("mode relevance decodes from the copy checkpoint; training a copy model\n");
        rc.mode = "copy";
    }
    const corpus::Corpus c = load_corpus(rc);
    const auto vocab = tokenizer::load_vocabulary(rc.vocab_file());
    std::optional<retrieval::RetrievalIndex> index;
    if (rc.mode == "naive") index = retrieval::load_index(rc.index_file());

    const bool naive = rc.mode == "naive";
    const auto train_enc =
        encode_split(c.train, vocab, naive, index ? &*index : nullptr, /*in_index=*/true);
    const auto dev_enc =
        encode_split(c.dev, vocab, naive, index ? &*index : nullptr, /*in_index=*/false);

    model::ModelConfig mc = rc.model;
    mc.use_copy = rc.mode != "base";
    model::TrainConfig tc = rc.train;
    tc.seed = rc.seed;

    fs::create_directories(rc.dir);
    const std::string best = rc.ckpt_file(rc.mode);
    const std::string latest = rc.latest_file(rc.mode);

    std::optional<model::Transformer> m;
    model::CheckpointExtra extra;
    bool resumed = false;
    if (rc.resume && fs::exists(latest)) {
        m.emplace(model::load_checkpoint(latest, vocab, &extra));
        resumed = extra.has_opt;
        std::printf("resuming from %s at epoch %d\n", latest.c_str(), extra.epoch);
    } else {
        m.emplace(mc, vocab, rc.seed);
    }
    model::Trainer trainer(*m, tc);
    if (resumed) trainer.restore(extra);
    const int start_epoch = trainer.epochs_done();

    const auto result = trainer.fit(train_enc, dev_enc, best, latest, &std::cout);

    std::ofstream csv(rc.loss_file(rc.mode), resumed ? std::ios::app : std::ios::trunc);
    if (!resumed) csv << "epoch,train_loss,dev_loss\n";
    for (size_t i = 0; i < result.train_loss.size(); ++i)
        csv << (start_epoch + static_cast<int>(i) + 1) << "," << result.train_loss[i] << ","
            << result.dev_loss[i] << "\n";
    std::printf("best dev loss %.6f at epoch %d; checkpoint %s; loss curve %s\n", result.best_dev,
                result.best_epoch, best.c_str(), rc.loss_file(rc.mode).c_str());
    return 0;
}

prf::DecodingConfig decode_for_mode(const RunConfig& rc, const std::string& mode,
                                    bool lambda_explicit) {
    prf::DecodingConfig dc = rc.decode;
    dc.strategy = rc.strategy == "beam" ? prf::Strategy::kBeam : prf::Strategy::kGreedy;
    dc.naive_top1 = mode == "naive";
    if (mode != "relevance" && !lambda_explicit) dc.lambda = 1.0;  // feedback off
    return dc;
}

int cmd_generate(const RunConfig& rc, const std::string& query, bool lambda_explicit) {
    const auto vocab = tokenizer::load_vocabulary(rc.vocab_file());
    const auto m = model::load_checkpoint(rc.ckpt_file(rc.mode), vocab, nullptr);
    const prf::DecodingConfig dc = decode_for_mode(rc, rc.mode, lambda_explicit);
    std::optional<retrieval::RetrievalIndex> index;
    if (dc.lambda < 1.0 || dc.naive_top1) index = retrieval::load_index(rc.index_file());
    const auto res = prf::generate(query, m, index ? &*index : nullptr, vocab, dc);
    std::printf("%s\n", res.code.c_str());
    if (res.truncated) std::fprintf(stderr, "warning: output truncated at max_len\n");
    if (!rc.trace_path.empty()) {
        std::ofstream os(rc.trace_path);
        os << prf::trace_to_jsonl(res.trace);
        std::fprintf(stderr, "trace written to %s\n", rc.trace_path.c_str());
    }
    return 0;
}

struct EvalRow {
    std::string name;
    evaluation::EvalReport report;
};

int cmd_eval(const RunConfig& rc) {
    const corpus::Corpus c = load_corpus(rc);
    const auto vocab = tokenizer::load_vocabulary(rc.vocab_file());
    const auto index = retrieval::load_index(rc.index_file());

    std::vector<corpus::RawPair> test = c.test;
    if (rc.eval_limit > 0 && static_cast<int>(test.size()) > rc.eval_limit)
        test.resize(static_cast<size_t>(rc.eval_limit));

    std::vector<std::vector<std::string>> refs;
    std::vector<std::vector<std::string>> queries;
    refs.reserve(test.size());
    for (const auto& p : test) {
        refs.push_back(tokenizer::tokenize(p.code));
        queries.push_back(tokenizer::tokenize(p.description));
    }
    std::vector<std::vector<std::string>> train_descs;
    train_descs.reserve(c.train.size());
    for (const auto& p : c.train) train_descs.push_back(tokenizer::tokenize(p.description));

    std::map<std::string, std::unique_ptr<model::Transformer>> models;
    auto get_model = [&](const std::string& mode) -> model::Transformer* {
        const std::string path = rc.ckpt_file(mode);
        auto it = models.find(path);
        if (it != models.end()) return it->second.get();
        if (!fs::exists(path)) {
            std::fprintf(stderr, "warning: checkpoint %s missing; skipping row\n", path.c_str());
            models.emplace(path, nullptr);
            return nullptr;
        }
        auto m = std::make_unique<model::Transformer>(model::load_checkpoint(path, vocab, nullptr));
        auto* raw = m.get();
        models.emplace(path, std::move(m));
        return raw;
    };

    auto generative_row = [&](const std::string& mode) -> std::optional<EvalRow> {
        model::Transformer* m = get_model(mode);
        if (m == nullptr) return std::nullopt;
        // ablation rows keep their own recipes: lambda shapes the relevance
        // row only, the other model rows always decode feedback-free
        const prf::DecodingConfig dc = decode_for_mode(rc, mode, /*lambda_explicit=*/false);
        const retrieval::RetrievalIndex* idx =
            (dc.lambda < 1.0 || dc.naive_top1) ? &index : nullptr;
        std::vector<std::vector<std::string>> preds(test.size());
        for (size_t i = 0; i < test.size(); ++i)
            preds[i] = prf::generate(test[i].description, *m, idx, vocab, dc).tokens;
        static const std::map<std::string, std::string> row_names = {
            {"base", "transformer"},
            {"copy", "transformer_copy"},
            {"naive", "transformer_copy_naive"},
            {"relevance", "relevance_transformer"}};
        EvalRow row;
        row.name = row_names.at(mode);
        row.report = evaluation::evaluate_system(
            preds, refs, row.name, config_snapshot(rc, mode, dc.lambda, dc.naive_top1));
        return row;
    };

    const std::string want = "," + rc.systems + ",";
    auto wanted = [&](const std::string& s) { return want.find("," + s + ",") != std::string::npos; };

    std::vector<EvalRow> rows;
    if (wanted("bm25")) {
        std::vector<std::vector<std::string>> preds(test.size());
        for (size_t i = 0; i < test.size(); ++i) {
            const auto top = retrieval::retrieve_top_k(index, queries[i], 1);
            if (!top.empty()) preds[i] = top[0].code_tokens;
        }
        rows.push_back({"bm25_top1", evaluation::evaluate_system(
                                         preds, refs, "bm25_top1",
                                         config_snapshot(rc, "bm25", 0.0, false))});
    }
    if (wanted("recode")) {
        std::vector<std::vector<std::string>> preds(test.size());
        for (size_t i = 0; i < test.size(); ++i) {
            int best = -1;
            double best_sim = -1.0;
            for (size_t j = 0; j < train_descs.size(); ++j) {
                const double sim = retrieval::recode_similarity(train_descs[j], queries[i]);
                if (sim > best_sim) {
                    best_sim = sim;
                    best = static_cast<int>(j);
                }
            }
            if (best >= 0) preds[i] = tokenizer::tokenize(c.train[best].code);
        }
        rows.push_back({"recode_top1", evaluation::evaluate_system(
                                           preds, refs, "recode_top1",
                                           config_snapshot(rc, "recode", 0.0, false))});
    }
    if (wanted("oracle")) {
        std::vector<std::vector<std::string>> preds(test.size());
        for (size_t i = 0; i < test.size(); ++i) {
            const auto doc = retrieval::oracle_retrieve(test[i], c.train, evaluation::sentence_bleu);
            preds[i] = doc.code_tokens;
        }
        rows.push_back({"oracle", evaluation::evaluate_system(
                                      preds, refs, "oracle",
                                      config_snapshot(rc, "oracle", 0.0, false))});
    }
    for (const std::string mode : {"base", "copy", "naive", "relevance"}) {
        if (!wanted(mode)) continue;
        if (auto row = generative_row(mode)) rows.push_back(std::move(*row));
    }
    if (rows.empty()) throw std::runtime_error("eval: no systems selected or available");

    fs::create_directories(rc.dir);
    const EvalRow* base_row = nullptr;
    for (const auto& r : rows)
        if (r.name == "transformer") base_row = &r;
    const int num_comparisons =
        base_row != nullptr ? static_cast<int>(rows.size()) - 1 : 0;

    nlohmann::json out;
    out["corpus"] = c.name;
    out["test_pairs"] = test.size();
    out["rows"] = nlohmann::json::array();
    std::printf("%-24s %10s %12s %12s\n", "system", "mean BLEU", "t vs base", "p vs base");
    for (const auto& r : rows) {
        nlohmann::json jr = {{"system", r.name}, {"mean_bleu", r.report.mean_bleu}};
        std::string tcol = "-", pcol = "-";
        if (base_row != nullptr && &r != base_row && num_comparisons > 0) {
            const auto tt = evaluation::paired_ttest(r.report, base_row->report, num_comparisons);
            jr["t_stat"] = tt.t_stat;
            jr["p_value"] = tt.p_value;
            jr["significant_at_95"] = tt.significant_at_95;
            jr["bonferroni_comparisons"] = num_comparisons;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.4f", tt.t_stat);
            tcol = buf;
            std::snprintf(buf, sizeof buf, "%.6f%s", tt.p_value, tt.significant_at_95 ? "*" : "");
            pcol = buf;
        }
        out["rows"].push_back(std::move(jr));
        std::printf("%-24s %10.4f %12s %12s\n", r.name.c_str(), r.report.mean_bleu, tcol.c_str(),
                    pcol.c_str());
        evaluation::save_report(r.report, rc.dir + "/report_" + r.name + ".json");
    }
    if (base_row == nullptr)
        std::fprintf(stderr, "note: transformer row absent; significance tests skipped\n");
    const std::string eval_path = rc.dir + "/eval.json";
    std::ofstream os(eval_path);
    os << out.dump(2) << "\n";
    std::printf("eval table written to %s\n", eval_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"retrieval-augmented code generation toolkit"};
    app.require_subcommand(1);
    RunConfig rc;

    app.set_config("--config", "", "run configuration (INI, sections as [paths]/[model]/...)");
    app.config_formatter(std::make_shared<IniSectionConfig>());
    app.add_option("--paths.corpus", rc.corpus, "split prefix ({prefix}.train/.dev/.test)");
    app.add_option("--paths.dir", rc.dir, "artifact directory");
    app.add_option("--paths.vocab", rc.vocab_path, "vocabulary file override");
    app.add_option("--paths.index", rc.index_path, "index file override");
    app.add_option("--paths.checkpoint", rc.checkpoint_path, "checkpoint file override");
    app.add_option("--vocab.max_ordinary", rc.vocab_size, "ordinary vocabulary cap");
    app.add_option("--vocab.oov_slots", rc.oov_slots, "positional OOV slots");
    app.add_option("--retrieval.k1", rc.k1, "BM25 k1");
    app.add_option("--retrieval.b", rc.b, "BM25 b");
    app.add_option("--model.layers", rc.model.num_layers, "encoder/decoder layers");
    app.add_option("--model.heads", rc.model.num_heads, "attention heads");
    app.add_option("--model.d_model", rc.model.d_model, "model width");
    app.add_option("--model.d_ff", rc.model.d_ff, "feed-forward width");
    app.add_option("--model.dropout", rc.model.dropout, "dropout rate");
    app.add_option("--model.max_len", rc.model.max_len, "position table size");
    app.add_option("--train.lr", rc.train.lr, "peak learning rate");
    app.add_option("--train.warmup", rc.train.warmup_steps, "linear warmup steps");
    app.add_option("--train.batch_tokens", rc.train.batch_tokens, "tokens per optimizer step");
    app.add_option("--train.epochs", rc.train.epochs, "training epochs");
    app.add_option("--decode.lambda", rc.decode.lambda, "interpolation weight");
    app.add_option("--decode.topk", rc.decode.k, "feedback depth");
    app.add_option("--decode.stopwords", rc.decode.stopword_n, "stopword set size");
    app.add_option("--decode.max_len", rc.decode.max_len, "generation length cap");
    app.add_option("--decode.strategy", rc.strategy, "greedy or beam")
        ->check(CLI::IsMember({"greedy", "beam"}));
    app.add_option("--decode.beam", rc.decode.beam_width, "beam width");
    app.add_flag("--decode.normalize_rf", rc.decode.normalize_rf,
                 "normalize rf scores before mixing");
    app.add_option("--eval.systems", rc.systems, "comma list of eval rows");
    app.add_option("--eval.limit", rc.eval_limit, "cap on test pairs (0 = all)");

    // shorthand flags; applied after parse so they beat config-file values
    std::optional<uint64_t> seed_flag;
    std::optional<double> lambda_flag;
    std::optional<int> topk_flag, stopwords_flag;
    app.add_option("--seed", seed_flag, "run seed");
    app.add_option("--lambda", lambda_flag, "interpolation weight override");
    app.add_option("--topk", topk_flag, "feedback depth override");
    app.add_option("--stopwords", stopwords_flag, "stopword set size override");
    app.add_option("--mode", rc.mode, "model/decoding mode")
        ->check(CLI::IsMember({"base", "copy", "naive", "relevance"}));
    app.add_option("--trace", rc.trace_path, "trace JSON-lines output path");

    auto* prepare = app.add_subcommand("prepare", "build vocabulary and retrieval index");
    auto* train = app.add_subcommand("train", "train a model and write checkpoints");
    train->add_flag("--resume", rc.resume, "continue from the latest checkpoint");
    auto* generate = app.add_subcommand("generate", "decode one query");
    std::string query;
    generate->add_option("query", query, "description to generate code for")->required();
    auto* eval = app.add_subcommand("eval", "run the ablation evaluation table");
    for (auto* sub : {prepare, train, generate, eval}) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    if (seed_flag) {
        rc.seed = *seed_flag;
        rc.train.seed = *seed_flag;
    }
    if (lambda_flag) rc.decode.lambda = *lambda_flag;
    if (topk_flag) rc.decode.k = *topk_flag;
    if (stopwords_flag) rc.decode.stopword_n = *stopwords_flag;

    try {
        if (prepare->parsed()) return cmd_prepare(rc);
        if (train->parsed()) return cmd_train(rc);
        if (generate->parsed()) return cmd_generate(rc, query, lambda_flag.has_value());
        if (eval->parsed()) return cmd_eval(rc);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
