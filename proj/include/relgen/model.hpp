#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "relgen/tensor.hpp"
#include "relgen/tokenizer.hpp"

namespace relgen::model {

struct ModelConfig {
    int num_layers = 2;
    int num_heads = 4;
    int d_model = 512;
    int d_ff = 1024;
    double dropout = 0.1;
    int max_len = 512;
    bool use_copy = true;
};

struct Tensor {
    std::string name;
    Mat w;
    Mat g;
};

// One decode step's view for the copy head: the generation distribution T
// over the vocabulary (positional-OOV entries are zero when the copy head is
// active and carry mass only through the attention term), the source
// attention a_t, and the generation gate p_gen.
struct StepOutput {
    std::vector<double> vocab_dist;
    std::vector<double> src_attention;
    double p_gen = 1.0;
};

// M(w) = p_gen * T(w) + (1 - p_gen) * sum_{i: src_ids[i] = w} a_t[i]
std::vector<double> copy_mix(const StepOutput& step, const std::vector<int>& src_ids);

struct Memory {
    Mat memory;                    // S x d_model
    std::vector<uint8_t> src_mask; // 0 at <pad> positions
    std::vector<int> src_ids;
    bool truncated = false;
};

namespace detail {

struct DropMask {
    Mat mask;
    bool active = false;
};

struct AttnCache {
    Mat q, k, v;                 // Tq x d, Tkv x d
    std::vector<Mat> attn;       // per head, Tq x Tkv
    Mat ctx;                     // Tq x d
};

struct LnCache {
    Mat x;                       // layernorm input
    std::vector<double> mean, rstd;
};

struct EncLayerCache {
    Mat x_in;
    AttnCache att;
    DropMask drop1;
    LnCache ln1;
    Mat x1;
    Mat ff_pre, ff_h;
    DropMask drop2;
    LnCache ln2;
    Mat x2;
};

struct DecLayerCache {
    Mat y_in;
    AttnCache self_att;
    DropMask drop1;
    LnCache ln1;
    Mat y1;
    AttnCache cross_att;
    DropMask drop2;
    LnCache ln2;
    Mat y2;
    Mat ff_pre, ff_h;
    DropMask drop3;
    LnCache ln3;
    Mat y3;
};

struct EncCache {
    std::vector<int> src_ids;
    std::vector<uint8_t> src_mask;
    Mat emb;
    DropMask demb;
    std::vector<EncLayerCache> layers;
};

struct DecCache {
    std::vector<int> tgt_in;
    Mat emb;                      // decoder input embeddings (post dropout)
    DropMask demb;
    std::vector<DecLayerCache> layers;
    Mat abar;                     // T x S, head-averaged final cross attention
    Mat ctx;                      // T x d, copy context vectors
    std::vector<double> pg;       // p_gen per position
    Mat logits;                   // T x V
    Mat tdist;                    // T x V
    Mat mdist;                    // T x V, copy-mixed
};

}  // namespace detail

struct AttnParamIdx {
    int wq, bq, wk, bk, wv, bv, wo, bo;
};
struct LnParamIdx {
    int g, b;
};
struct FfParamIdx {
    int w1, b1, w2, b2;
};
struct EncLayerIdx {
    AttnParamIdx att;
    LnParamIdx ln1;
    FfParamIdx ff;
    LnParamIdx ln2;
};
struct DecLayerIdx {
    AttnParamIdx self_att;
    LnParamIdx ln1;
    AttnParamIdx cross;
    LnParamIdx ln2;
    FfParamIdx ff;
    LnParamIdx ln3;
};

// Encoder-decoder Transformer with tied input/output embeddings and an
// optional pointer-generator copy head (post-LN, sinusoidal positions).
class Transformer {
public:
    Transformer(const ModelConfig& cfg, const tokenizer::Vocabulary& vocab, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    uint64_t vocab_hash() const { return vocab_hash_; }
    int vocab_size() const { return vocab_size_; }

    std::vector<Tensor>& params() { return params_; }
    const std::vector<Tensor>& params() const { return params_; }
    void zero_grads();
    size_t param_count() const;

    // Inference entry points. encode truncates overlength input with a warning.
    Memory encode(const std::vector<int>& src_ids) const;
    StepOutput decode_step(const Memory& mem, const std::vector<int>& prefix_ids) const;

    // Teacher-forced negative log likelihood of tgt_ids (with <sos>/<eos>
    // framing) given src_ids; sum over target positions. When accumulate_grads
    // is set, the full backward pass adds into each tensor's .g.
    double sequence_nll(const std::vector<int>& src_ids, const std::vector<int>& tgt_ids,
                        int* token_count, bool accumulate_grads, std::mt19937_64* dropout_rng);

    // Teacher-forced per-position mixed distributions, for the equivalence
    // tests between batched and incremental decoding.
    Mat teacher_forced_mdist(const std::vector<int>& src_ids,
                             const std::vector<int>& tgt_in) const;

    // raw parameter serialization order is the params() order
    friend void save_checkpoint(const std::string& path, const Transformer& model,
                                const struct CheckpointExtra* extra);

private:
    void encode_forward(const std::vector<int>& src_ids, detail::EncCache& cache,
                        std::mt19937_64* dropout_rng) const;
    void decode_forward(const Mat& memory, const std::vector<uint8_t>& src_mask,
                        const std::vector<int>& src_ids, const std::vector<int>& tgt_in,
                        detail::DecCache& cache, std::mt19937_64* dropout_rng) const;
    void backward(const detail::EncCache& enc, const detail::DecCache& dec,
                  const std::vector<int>& tgt_out);

    ModelConfig cfg_;
    int vocab_size_ = 0;
    int pad_id_ = 0, sos_id_ = 0, eos_id_ = 0, unk_id_ = 0;
    int oov_base_ = 0, oov_slots_ = 0;
    uint64_t vocab_hash_ = 0;
    std::vector<uint8_t> gen_mask_;  // ids the generation softmax may produce

    std::vector<Tensor> params_;
    int emb_ = -1;
    std::vector<EncLayerIdx> enc_idx_;
    std::vector<DecLayerIdx> dec_idx_;
    int pg_wc_ = -1, pg_ws_ = -1, pg_we_ = -1, pg_b_ = -1;
    Mat pos_;  // sinusoidal positional table, max_len x d_model

    friend class Trainer;
};

struct CheckpointExtra {
    bool has_opt = false;
    uint64_t adam_step = 0;
    std::vector<Mat> adam_m, adam_v;
    std::string rng_state;
    int epoch = 0;
    double best_dev = std::numeric_limits<double>::infinity();
};

void save_checkpoint(const std::string& path, const Transformer& model,
                     const CheckpointExtra* extra = nullptr);
// Throws on magic/version problems and on vocabulary-hash mismatch.
Transformer load_checkpoint(const std::string& path, const tokenizer::Vocabulary& vocab,
                            CheckpointExtra* extra_out = nullptr);

}  // namespace relgen::model
