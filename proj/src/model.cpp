#include "relgen/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "relgen/kernels.hpp"

namespace relgen::model {

namespace {

using detail::AttnCache;
using detail::DecCache;
using detail::DecLayerCache;
using detail::DropMask;
using detail::EncCache;
using detail::EncLayerCache;
using detail::LnCache;

constexpr double kLnEps = 1e-5;

double unit_uniform(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// out = x * w + b (b broadcast over rows)
void linear_forward(const Mat& x, const Mat& w, const Mat& b, Mat& out) {
    kernels::matmul(x, w, out);
    for (int i = 0; i < out.rows; ++i) {
        double* r = out.row(i);
        const double* br = b.row(0);
        for (int j = 0; j < out.cols; ++j) r[j] += br[j];
    }
}

void add_colsum(Mat& g, const Mat& dout) {
    double* gr = g.row(0);
    for (int i = 0; i < dout.rows; ++i) {
        const double* r = dout.row(i);
        for (int j = 0; j < dout.cols; ++j) gr[j] += r[j];
    }
}

// gw += x^T * dout, gb += colsum(dout), dx += dout * w^T
void linear_backward(const Mat& x, const Mat& w, const Mat& dout, Mat* dx, Mat& gw, Mat& gb) {
    kernels::matmul(x, dout, gw, true, false, true);
    add_colsum(gb, dout);
    if (dx) kernels::matmul(dout, w, *dx, false, true, true);
}

void take_head(const Mat& m, int h, int dk, Mat& out) {
    if (out.rows != m.rows || out.cols != dk) out = Mat(m.rows, dk);
    for (int i = 0; i < m.rows; ++i) {
        const double* src = m.row(i) + static_cast<size_t>(h) * dk;
        double* dst = out.row(i);
        for (int c = 0; c < dk; ++c) dst[c] = src[c];
    }
}

void add_head(Mat& m, int h, int dk, const Mat& part) {
    for (int i = 0; i < m.rows; ++i) {
        double* dst = m.row(i) + static_cast<size_t>(h) * dk;
        const double* src = part.row(i);
        for (int c = 0; c < dk; ++c) dst[c] += src[c];
    }
}

Mat mat_add(const Mat& a, const Mat& b) {
    Mat out = a;
    for (size_t i = 0; i < out.a.size(); ++i) out.a[i] += b.a[i];
    return out;
}

void apply_dropout(Mat& x, DropMask& dm, double p, std::mt19937_64* rng) {
    dm.active = false;
    if (!rng || p <= 0.0) return;
    dm.active = true;
    dm.mask = Mat(x.rows, x.cols);
    const double keep = 1.0 - p;
    const double scl = 1.0 / keep;
    for (size_t i = 0; i < x.a.size(); ++i) {
        const double m = unit_uniform(*rng) < keep ? scl : 0.0;
        dm.mask.a[i] = m;
        x.a[i] *= m;
    }
}

void dropout_backward(Mat& dx, const DropMask& dm) {
    if (!dm.active) return;
    for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] *= dm.mask.a[i];
}

void ln_rows(LnCache& c, const Mat& x, const Mat& gamma, const Mat& beta, Mat& out) {
    c.x = x;
    const int n = x.cols;
    c.mean.resize(x.rows);
    c.rstd.resize(x.rows);
    out = Mat(x.rows, n);
    for (int i = 0; i < x.rows; ++i)
        kernels::layernorm_forward(x.row(i), n, gamma.row(0), beta.row(0), kLnEps, out.row(i),
                                   &c.mean[i], &c.rstd[i]);
}

void ln_backward_rows(const LnCache& c, const Mat& gamma, const Mat& dy, Mat& dx, Mat& ggamma,
                      Mat& gbeta) {
    dx = Mat(c.x.rows, c.x.cols);
    for (int i = 0; i < c.x.rows; ++i)
        kernels::layernorm_backward(c.x.row(i), c.x.cols, gamma.row(0), c.mean[i], c.rstd[i],
                                    dy.row(i), dx.row(i), ggamma.row(0), gbeta.row(0));
}

struct AttnP {
    const Mat &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo;
};
struct AttnG {
    Mat &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo;
};

// Multi-head attention: causal (prefix softmax) or key-masked. `out` is the
// post-projection result before dropout/residual.
void attn_forward(const Mat& xq, const Mat& xkv, const AttnP& p, int heads, bool causal,
                  const std::vector<uint8_t>* kv_mask, AttnCache& c, Mat& out) {
    const int d = xq.cols;
    const int dk = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    linear_forward(xq, p.wq, p.bq, c.q);
    linear_forward(xkv, p.wk, p.bk, c.k);
    linear_forward(xkv, p.wv, p.bv, c.v);
    const int tq = xq.rows;
    const int tk = xkv.rows;
    c.attn.assign(heads, Mat());
    c.ctx = Mat(tq, d);
    Mat qh, kh, vh, s, ch;
    for (int h = 0; h < heads; ++h) {
        take_head(c.q, h, dk, qh);
        take_head(c.k, h, dk, kh);
        take_head(c.v, h, dk, vh);
        kernels::matmul(qh, kh, s, false, true);
        for (double& x : s.a) x *= scale;
        Mat& ah = c.attn[h];
        ah = Mat(tq, tk);
        for (int i = 0; i < tq; ++i) {
            if (causal)
                kernels::softmax_prefix(s.row(i), tk, i + 1, ah.row(i));
            else
                kernels::softmax_masked(s.row(i), kv_mask->data(), tk, ah.row(i));
        }
        kernels::matmul(ah, vh, ch);
        add_head(c.ctx, h, dk, ch);
    }
    linear_forward(c.ctx, p.wo, p.bo, out);
}

// dabar_share, when given, is an extra upstream gradient on the head-averaged
// attention (the copy path); each head receives dabar / heads.
void attn_backward(const Mat& xq, const Mat& xkv, const AttnP& p, AttnG& g, const AttnCache& c,
                   const Mat& dout, const Mat* dabar_share, int heads, Mat& dxq, Mat& dxkv) {
    const int d = xq.cols;
    const int dk = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Mat dctx;
    kernels::matmul(dout, p.wo, dctx, false, true);
    kernels::matmul(c.ctx, dout, g.wo, true, false, true);
    add_colsum(g.bo, dout);
    const int tq = xq.rows;
    const int tk = xkv.rows;
    Mat dq(tq, d), dkm(tk, d), dv(tk, d);
    Mat qh, kh, vh, dch, da, ds, dqh, dkh, dvh;
    for (int h = 0; h < heads; ++h) {
        take_head(c.q, h, dk, qh);
        take_head(c.k, h, dk, kh);
        take_head(c.v, h, dk, vh);
        take_head(dctx, h, dk, dch);
        const Mat& ah = c.attn[h];
        kernels::matmul(dch, vh, da, false, true);
        if (dabar_share) {
            const double inv_h = 1.0 / heads;
            for (size_t i = 0; i < da.a.size(); ++i) da.a[i] += dabar_share->a[i] * inv_h;
        }
        kernels::matmul(ah, dch, dvh, true, false);
        if (ds.rows != tq || ds.cols != tk) ds = Mat(tq, tk);
        for (int i = 0; i < tq; ++i)
            kernels::softmax_backward(ah.row(i), da.row(i), tk, ds.row(i));
        for (double& x : ds.a) x *= scale;
        kernels::matmul(ds, kh, dqh);
        kernels::matmul(ds, qh, dkh, true, false);
        add_head(dq, h, dk, dqh);
        add_head(dkm, h, dk, dkh);
        add_head(dv, h, dk, dvh);
    }
    linear_backward(xq, p.wq, dq, &dxq, g.wq, g.bq);
    linear_backward(xkv, p.wk, dkm, &dxkv, g.wk, g.bk);
    linear_backward(xkv, p.wv, dv, &dxkv, g.wv, g.bv);
}

void relu_forward(const Mat& pre, Mat& out) {
    out = pre;
    for (double& x : out.a)
        if (x < 0.0) x = 0.0;
}

// binary IO helpers for checkpoints
template <typename T>
void put(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}
void put_string(std::ofstream& os, const std::string& s) {
    put<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string get_string(std::ifstream& is) {
    const uint32_t n = get<uint32_t>(is);
    if (n > (1u << 24)) throw std::runtime_error("checkpoint: corrupt string length");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return s;
}
void put_doubles(std::ofstream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}
void get_doubles(std::ifstream& is, std::vector<double>& v) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
}

constexpr char kMagic[8] = {'R', 'G', 'E', 'N', 'C', 'K', 'P', '1'};

}  // namespace

std::vector<double> copy_mix(const StepOutput& step, const std::vector<int>& src_ids) {
    std::vector<double> m(step.vocab_dist.size());
    for (size_t j = 0; j < m.size(); ++j) m[j] = step.p_gen * step.vocab_dist[j];
    const double copy_w = 1.0 - step.p_gen;
    for (size_t i = 0; i < src_ids.size(); ++i) {
        if (i >= step.src_attention.size()) break;
        m[static_cast<size_t>(src_ids[i])] += copy_w * step.src_attention[i];
    }
    return m;
}

Transformer::Transformer(const ModelConfig& cfg, const tokenizer::Vocabulary& vocab,
                         uint64_t init_seed)
    : cfg_(cfg) {
    if (cfg.num_layers < 1) throw std::invalid_argument("model: num_layers must be >= 1");
    if (cfg.num_heads < 1) throw std::invalid_argument("model: num_heads must be >= 1");
    if (cfg.d_model < 1 || cfg.d_model % cfg.num_heads != 0)
        throw std::invalid_argument("model: d_model must be a positive multiple of num_heads");
    if (cfg.d_ff < 1) throw std::invalid_argument("model: d_ff must be >= 1");
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
        throw std::invalid_argument("model: dropout must be in [0, 1)");
    if (cfg.max_len < 2) throw std::invalid_argument("model: max_len must be >= 2");
    if (vocab.size() == 0) throw std::invalid_argument("model: empty vocabulary");

    vocab_size_ = vocab.size();
    pad_id_ = vocab.pad_id;
    sos_id_ = vocab.sos_id;
    eos_id_ = vocab.eos_id;
    unk_id_ = vocab.unk_id;
    oov_base_ = vocab.oov_base;
    oov_slots_ = vocab.oov_slots;
    vocab_hash_ = vocab.hash();

    // With the copy head active the generation softmax covers ordinary and
    // special ids only; positional OOV ids get probability solely through the
    // attention term. Without it they are ordinary softmax outputs.
    gen_mask_.assign(static_cast<size_t>(vocab_size_), 1);
    if (cfg_.use_copy)
        for (int id = oov_base_; id < oov_base_ + oov_slots_; ++id) gen_mask_[id] = 0;

    std::mt19937_64 rng(init_seed);
    const double r = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    enum Kind { kUniform, kZero, kOne };
    auto add_param = [&](const std::string& name, int rows, int cols, Kind kind) {
        Tensor t;
        t.name = name;
        t.w = Mat(rows, cols);
        t.g = Mat(rows, cols);
        if (kind == kUniform)
            for (double& x : t.w.a) x = (2.0 * unit_uniform(rng) - 1.0) * r;
        else if (kind == kOne)
            for (double& x : t.w.a) x = 1.0;
        params_.push_back(std::move(t));
        return static_cast<int>(params_.size()) - 1;
    };
    const int d = cfg_.d_model;
    const int f = cfg_.d_ff;
    emb_ = add_param("emb", vocab_size_, d, kUniform);
    auto add_attn = [&](const std::string& prefix) {
        AttnParamIdx a;
        a.wq = add_param(prefix + ".wq", d, d, kUniform);
        a.bq = add_param(prefix + ".bq", 1, d, kZero);
        a.wk = add_param(prefix + ".wk", d, d, kUniform);
        a.bk = add_param(prefix + ".bk", 1, d, kZero);
        a.wv = add_param(prefix + ".wv", d, d, kUniform);
        a.bv = add_param(prefix + ".bv", 1, d, kZero);
        a.wo = add_param(prefix + ".wo", d, d, kUniform);
        a.bo = add_param(prefix + ".bo", 1, d, kZero);
        return a;
    };
    auto add_ln = [&](const std::string& prefix) {
        LnParamIdx l;
        l.g = add_param(prefix + ".g", 1, d, kOne);
        l.b = add_param(prefix + ".b", 1, d, kZero);
        return l;
    };
    auto add_ff = [&](const std::string& prefix) {
        FfParamIdx p;
        p.w1 = add_param(prefix + ".w1", d, f, kUniform);
        p.b1 = add_param(prefix + ".b1", 1, f, kZero);
        p.w2 = add_param(prefix + ".w2", f, d, kUniform);
        p.b2 = add_param(prefix + ".b2", 1, d, kZero);
        return p;
    };
    for (int l = 0; l < cfg_.num_layers; ++l) {
        const std::string base = "enc" + std::to_string(l);
        EncLayerIdx e;
        e.att = add_attn(base + ".att");
        e.ln1 = add_ln(base + ".ln1");
        e.ff = add_ff(base + ".ff");
        e.ln2 = add_ln(base + ".ln2");
        enc_idx_.push_back(e);
    }
    for (int l = 0; l < cfg_.num_layers; ++l) {
        const std::string base = "dec" + std::to_string(l);
        DecLayerIdx dd;
        dd.self_att = add_attn(base + ".self");
        dd.ln1 = add_ln(base + ".ln1");
        dd.cross = add_attn(base + ".cross");
        dd.ln2 = add_ln(base + ".ln2");
        dd.ff = add_ff(base + ".ff");
        dd.ln3 = add_ln(base + ".ln3");
        dec_idx_.push_back(dd);
    }
    if (cfg_.use_copy) {
        pg_wc_ = add_param("pgen.wc", 1, d, kUniform);
        pg_ws_ = add_param("pgen.ws", 1, d, kUniform);
        pg_we_ = add_param("pgen.we", 1, d, kUniform);
        pg_b_ = add_param("pgen.b", 1, 1, kZero);
    }

    // sinusoidal positional table
    pos_ = Mat(cfg_.max_len, d);
    for (int p = 0; p < cfg_.max_len; ++p) {
        for (int j = 0; j < d; ++j) {
            const int pair_idx = j / 2;
            const double angle =
                p * std::exp(-std::log(10000.0) * (2.0 * pair_idx) / static_cast<double>(d));
            pos_.at(p, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
}

void Transformer::zero_grads() {
    for (Tensor& t : params_) t.g.zero();
}

size_t Transformer::param_count() const {
    size_t n = 0;
    for (const Tensor& t : params_) n += t.w.size();
    return n;
}

void Transformer::encode_forward(const std::vector<int>& src_ids, EncCache& cache,
                                 std::mt19937_64* dropout_rng) const {
    const int s = static_cast<int>(src_ids.size());
    const int d = cfg_.d_model;
    if (s == 0) throw std::invalid_argument("encode: empty source");
    if (s > cfg_.max_len) throw std::invalid_argument("encode: source exceeds max_len");
    cache.src_ids = src_ids;
    cache.src_mask.assign(static_cast<size_t>(s), 1);
    for (int t = 0; t < s; ++t)
        if (src_ids[t] == pad_id_) cache.src_mask[t] = 0;
    const Mat& emb = params_[emb_].w;
    const double sd = std::sqrt(static_cast<double>(d));
    cache.emb = Mat(s, d);
    for (int t = 0; t < s; ++t) {
        const double* er = emb.row(src_ids[t]);
        double* out = cache.emb.row(t);
        const double* pr = pos_.row(t);
        for (int j = 0; j < d; ++j) out[j] = er[j] * sd + pr[j];
    }
    apply_dropout(cache.emb, cache.demb, cfg_.dropout, dropout_rng);
    cache.layers.assign(static_cast<size_t>(cfg_.num_layers), EncLayerCache());
    const Mat* cur = &cache.emb;
    for (int l = 0; l < cfg_.num_layers; ++l) {
        EncLayerCache& c = cache.layers[l];
        const EncLayerIdx& ix = enc_idx_[l];
        AttnP ap{params_[ix.att.wq].w, params_[ix.att.bq].w, params_[ix.att.wk].w,
                 params_[ix.att.bk].w, params_[ix.att.wv].w, params_[ix.att.bv].w,
                 params_[ix.att.wo].w, params_[ix.att.bo].w};
        c.x_in = *cur;
        Mat att_out;
        attn_forward(c.x_in, c.x_in, ap, cfg_.num_heads, false, &cache.src_mask, c.att, att_out);
        apply_dropout(att_out, c.drop1, cfg_.dropout, dropout_rng);
        ln_rows(c.ln1, mat_add(c.x_in, att_out), params_[ix.ln1.g].w, params_[ix.ln1.b].w, c.x1);
        linear_forward(c.x1, params_[ix.ff.w1].w, params_[ix.ff.b1].w, c.ff_pre);
        relu_forward(c.ff_pre, c.ff_h);
        Mat ff_out;
        linear_forward(c.ff_h, params_[ix.ff.w2].w, params_[ix.ff.b2].w, ff_out);
        apply_dropout(ff_out, c.drop2, cfg_.dropout, dropout_rng);
        ln_rows(c.ln2, mat_add(c.x1, ff_out), params_[ix.ln2.g].w, params_[ix.ln2.b].w, c.x2);
        cur = &c.x2;
    }
}

void Transformer::decode_forward(const Mat& memory, const std::vector<uint8_t>& src_mask,
                                 const std::vector<int>& src_ids, const std::vector<int>& tgt_in,
                                 DecCache& cache, std::mt19937_64* dropout_rng) const {
    const int len = static_cast<int>(tgt_in.size());
    const int d = cfg_.d_model;
    if (len == 0) throw std::invalid_argument("decode: empty prefix");
    if (len > cfg_.max_len) throw std::invalid_argument("decode: prefix exceeds max_len");
    cache.tgt_in = tgt_in;
    const Mat& emb = params_[emb_].w;
    const double sd = std::sqrt(static_cast<double>(d));
    cache.emb = Mat(len, d);
    for (int t = 0; t < len; ++t) {
        const double* er = emb.row(tgt_in[t]);
        double* out = cache.emb.row(t);
        const double* pr = pos_.row(t);
        for (int j = 0; j < d; ++j) out[j] = er[j] * sd + pr[j];
    }
    apply_dropout(cache.emb, cache.demb, cfg_.dropout, dropout_rng);
    cache.layers.assign(static_cast<size_t>(cfg_.num_layers), DecLayerCache());
    const Mat* cur = &cache.emb;
    for (int l = 0; l < cfg_.num_layers; ++l) {
        DecLayerCache& c = cache.layers[l];
        const DecLayerIdx& ix = dec_idx_[l];
        AttnP sp{params_[ix.self_att.wq].w, params_[ix.self_att.bq].w, params_[ix.self_att.wk].w,
                 params_[ix.self_att.bk].w, params_[ix.self_att.wv].w, params_[ix.self_att.bv].w,
                 params_[ix.self_att.wo].w, params_[ix.self_att.bo].w};
        AttnP cp{params_[ix.cross.wq].w, params_[ix.cross.bq].w, params_[ix.cross.wk].w,
                 params_[ix.cross.bk].w, params_[ix.cross.wv].w, params_[ix.cross.bv].w,
                 params_[ix.cross.wo].w, params_[ix.cross.bo].w};
        c.y_in = *cur;
        Mat self_out;
        attn_forward(c.y_in, c.y_in, sp, cfg_.num_heads, true, nullptr, c.self_att, self_out);
        apply_dropout(self_out, c.drop1, cfg_.dropout, dropout_rng);
        ln_rows(c.ln1, mat_add(c.y_in, self_out), params_[ix.ln1.g].w, params_[ix.ln1.b].w, c.y1);
        Mat cross_out;
        attn_forward(c.y1, memory, cp, cfg_.num_heads, false, &src_mask, c.cross_att, cross_out);
        apply_dropout(cross_out, c.drop2, cfg_.dropout, dropout_rng);
        ln_rows(c.ln2, mat_add(c.y1, cross_out), params_[ix.ln2.g].w, params_[ix.ln2.b].w, c.y2);
        linear_forward(c.y2, params_[ix.ff.w1].w, params_[ix.ff.b1].w, c.ff_pre);
        relu_forward(c.ff_pre, c.ff_h);
        Mat ff_out;
        linear_forward(c.ff_h, params_[ix.ff.w2].w, params_[ix.ff.b2].w, ff_out);
        apply_dropout(ff_out, c.drop3, cfg_.dropout, dropout_rng);
        ln_rows(c.ln3, mat_add(c.y2, ff_out), params_[ix.ln3.g].w, params_[ix.ln3.b].w, c.y3);
        cur = &c.y3;
    }

    // head-averaged final-layer cross attention
    const int s = memory.rows;
    const DecLayerCache& last = cache.layers.back();
    cache.abar = Mat(len, s);
    const double inv_h = 1.0 / cfg_.num_heads;
    for (int h = 0; h < cfg_.num_heads; ++h)
        for (size_t i = 0; i < cache.abar.a.size(); ++i)
            cache.abar.a[i] += last.cross_att.attn[h].a[i] * inv_h;

    const Mat& y = last.y3;
    kernels::matmul(y, emb, cache.logits, false, true);
    cache.tdist = Mat(len, vocab_size_);
    for (int t = 0; t < len; ++t)
        kernels::softmax_masked(cache.logits.row(t), gen_mask_.data(), vocab_size_,
                                cache.tdist.row(t));
    if (cfg_.use_copy) {
        kernels::matmul(cache.abar, memory, cache.ctx);
        cache.pg.resize(static_cast<size_t>(len));
        const double* wc = params_[pg_wc_].w.row(0);
        const double* ws = params_[pg_ws_].w.row(0);
        const double* we = params_[pg_we_].w.row(0);
        const double b = params_[pg_b_].w.at(0, 0);
        for (int t = 0; t < len; ++t) {
            double lin = b;
            const double* cr = cache.ctx.row(t);
            const double* yr = y.row(t);
            const double* er = cache.emb.row(t);
            for (int j = 0; j < d; ++j) lin += wc[j] * cr[j] + ws[j] * yr[j] + we[j] * er[j];
            cache.pg[t] = 1.0 / (1.0 + std::exp(-lin));
        }
        cache.mdist = Mat(len, vocab_size_);
        for (int t = 0; t < len; ++t) {
            const double pg = cache.pg[t];
            double* mrow = cache.mdist.row(t);
            const double* trow = cache.tdist.row(t);
            for (int j = 0; j < vocab_size_; ++j) mrow[j] = pg * trow[j];
            const double cw = 1.0 - pg;
            for (int i = 0; i < s; ++i) mrow[src_ids[i]] += cw * cache.abar.at(t, i);
        }
    } else {
        cache.pg.assign(static_cast<size_t>(len), 1.0);
        cache.mdist = cache.tdist;
    }
}

void Transformer::backward(const EncCache& enc, const DecCache& dec,
                           const std::vector<int>& tgt_out) {
    const int len = static_cast<int>(dec.tgt_in.size());
    const int s = static_cast<int>(enc.src_ids.size());
    const int d = cfg_.d_model;
    const int v = vocab_size_;
    const Mat& memory = enc.layers.back().x2;
    const Mat& y = dec.layers.back().y3;
    const Mat& emb = params_[emb_].w;

    Mat dz(len, v);
    Mat dy(len, d);
    Mat dmem(s, d);
    Mat dabar, dctx;
    Mat demb_in(len, d);
    if (cfg_.use_copy) {
        dabar = Mat(len, s);
        dctx = Mat(len, d);
    }
    for (int t = 0; t < len; ++t) {
        const int target = tgt_out[t];
        const double m = std::max(dec.mdist.at(t, target), 1e-12);
        const double dm = -1.0 / m;
        double dt_y;
        if (cfg_.use_copy) {
            const double pg = dec.pg[t];
            double copy_y = 0.0;
            for (int i = 0; i < s; ++i)
                if (enc.src_ids[i] == target) copy_y += dec.abar.at(t, i);
            const double dpg = dm * (dec.tdist.at(t, target) - copy_y);
            dt_y = dm * pg;
            const double cw = dm * (1.0 - pg);
            for (int i = 0; i < s; ++i)
                if (enc.src_ids[i] == target) dabar.at(t, i) += cw;
            const double gpl = dpg * pg * (1.0 - pg);
            const double* wc = params_[pg_wc_].w.row(0);
            const double* ws = params_[pg_ws_].w.row(0);
            const double* we = params_[pg_we_].w.row(0);
            double* gwc = params_[pg_wc_].g.row(0);
            double* gws = params_[pg_ws_].g.row(0);
            double* gwe = params_[pg_we_].g.row(0);
            for (int j = 0; j < d; ++j) {
                gwc[j] += gpl * dec.ctx.at(t, j);
                gws[j] += gpl * y.at(t, j);
                gwe[j] += gpl * dec.emb.at(t, j);
                dctx.at(t, j) += gpl * wc[j];
                dy.at(t, j) += gpl * ws[j];
                demb_in.at(t, j) += gpl * we[j];
            }
            params_[pg_b_].g.at(0, 0) += gpl;
        } else {
            dt_y = dm;
        }
        // generation softmax backward with a one-hot upstream gradient
        const double* trow = dec.tdist.row(t);
        const double dot = trow[target] * dt_y;
        double* zrow = dz.row(t);
        for (int j = 0; j < v; ++j) zrow[j] = -trow[j] * dot;
        zrow[target] += trow[target] * dt_y;
    }
    kernels::matmul(dz, emb, dy, false, false, true);
    kernels::matmul(dz, y, params_[emb_].g, true, false, true);
    if (cfg_.use_copy) {
        kernels::matmul(dctx, memory, dabar, false, true, true);
        kernels::matmul(dec.abar, dctx, dmem, true, false, true);
    }

    // decoder stack, reverse
    Mat dcur = dy;
    for (int l = cfg_.num_layers - 1; l >= 0; --l) {
        const DecLayerCache& c = dec.layers[l];
        const DecLayerIdx& ix = dec_idx_[l];
        AttnP sp{params_[ix.self_att.wq].w, params_[ix.self_att.bq].w, params_[ix.self_att.wk].w,
                 params_[ix.self_att.bk].w, params_[ix.self_att.wv].w, params_[ix.self_att.bv].w,
                 params_[ix.self_att.wo].w, params_[ix.self_att.bo].w};
        AttnG sg{params_[ix.self_att.wq].g, params_[ix.self_att.bq].g, params_[ix.self_att.wk].g,
                 params_[ix.self_att.bk].g, params_[ix.self_att.wv].g, params_[ix.self_att.bv].g,
                 params_[ix.self_att.wo].g, params_[ix.self_att.bo].g};
        AttnP cp{params_[ix.cross.wq].w, params_[ix.cross.bq].w, params_[ix.cross.wk].w,
                 params_[ix.cross.bk].w, params_[ix.cross.wv].w, params_[ix.cross.bv].w,
                 params_[ix.cross.wo].w, params_[ix.cross.bo].w};
        AttnG cg{params_[ix.cross.wq].g, params_[ix.cross.bq].g, params_[ix.cross.wk].g,
                 params_[ix.cross.bk].g, params_[ix.cross.wv].g, params_[ix.cross.bv].g,
                 params_[ix.cross.wo].g, params_[ix.cross.bo].g};
        Mat dadd3;
        ln_backward_rows(c.ln3, params_[ix.ln3.g].w, dcur, dadd3, params_[ix.ln3.g].g,
                         params_[ix.ln3.b].g);
        Mat dff = dadd3;
        dropout_backward(dff, c.drop3);
        Mat dy2 = dadd3;
        Mat dffh;
        kernels::matmul(dff, params_[ix.ff.w2].w, dffh, false, true);
        kernels::matmul(c.ff_h, dff, params_[ix.ff.w2].g, true, false, true);
        add_colsum(params_[ix.ff.b2].g, dff);
        for (size_t i = 0; i < dffh.a.size(); ++i)
            if (c.ff_pre.a[i] <= 0.0) dffh.a[i] = 0.0;
        kernels::matmul(dffh, params_[ix.ff.w1].w, dy2, false, true, true);
        kernels::matmul(c.y2, dffh, params_[ix.ff.w1].g, true, false, true);
        add_colsum(params_[ix.ff.b1].g, dffh);
        Mat dadd2;
        ln_backward_rows(c.ln2, params_[ix.ln2.g].w, dy2, dadd2, params_[ix.ln2.g].g,
                         params_[ix.ln2.b].g);
        Mat dcross = dadd2;
        dropout_backward(dcross, c.drop2);
        Mat dy1 = dadd2;
        const Mat* dabar_share =
            (cfg_.use_copy && l == cfg_.num_layers - 1) ? &dabar : nullptr;
        attn_backward(c.y1, memory, cp, cg, c.cross_att, dcross, dabar_share, cfg_.num_heads, dy1,
                      dmem);
        Mat dadd1;
        ln_backward_rows(c.ln1, params_[ix.ln1.g].w, dy1, dadd1, params_[ix.ln1.g].g,
                         params_[ix.ln1.b].g);
        Mat dself = dadd1;
        dropout_backward(dself, c.drop1);
        Mat dy_in = dadd1;
        attn_backward(c.y_in, c.y_in, sp, sg, c.self_att, dself, nullptr, cfg_.num_heads, dy_in,
                      dy_in);
        dcur = std::move(dy_in);
    }
    for (size_t i = 0; i < dcur.a.size(); ++i) dcur.a[i] += demb_in.a[i];
    dropout_backward(dcur, dec.demb);
    Mat& gemb = params_[emb_].g;
    const double sd = std::sqrt(static_cast<double>(d));
    for (int t = 0; t < len; ++t) {
        double* gr = gemb.row(dec.tgt_in[t]);
        const double* dr = dcur.row(t);
        for (int j = 0; j < d; ++j) gr[j] += sd * dr[j];
    }

    // encoder stack, reverse
    Mat denc = std::move(dmem);
    for (int l = cfg_.num_layers - 1; l >= 0; --l) {
        const EncLayerCache& c = enc.layers[l];
        const EncLayerIdx& ix = enc_idx_[l];
        AttnP ap{params_[ix.att.wq].w, params_[ix.att.bq].w, params_[ix.att.wk].w,
                 params_[ix.att.bk].w, params_[ix.att.wv].w, params_[ix.att.bv].w,
                 params_[ix.att.wo].w, params_[ix.att.bo].w};
        AttnG ag{params_[ix.att.wq].g, params_[ix.att.bq].g, params_[ix.att.wk].g,
                 params_[ix.att.bk].g, params_[ix.att.wv].g, params_[ix.att.bv].g,
                 params_[ix.att.wo].g, params_[ix.att.bo].g};
        Mat dadd2;
        ln_backward_rows(c.ln2, params_[ix.ln2.g].w, denc, dadd2, params_[ix.ln2.g].g,
                         params_[ix.ln2.b].g);
        Mat dff = dadd2;
        dropout_backward(dff, c.drop2);
        Mat dx1 = dadd2;
        Mat dffh;
        kernels::matmul(dff, params_[ix.ff.w2].w, dffh, false, true);
        kernels::matmul(c.ff_h, dff, params_[ix.ff.w2].g, true, false, true);
        add_colsum(params_[ix.ff.b2].g, dff);
        for (size_t i = 0; i < dffh.a.size(); ++i)
            if (c.ff_pre.a[i] <= 0.0) dffh.a[i] = 0.0;
        kernels::matmul(dffh, params_[ix.ff.w1].w, dx1, false, true, true);
        kernels::matmul(c.x1, dffh, params_[ix.ff.w1].g, true, false, true);
        add_colsum(params_[ix.ff.b1].g, dffh);
        Mat dadd1;
        ln_backward_rows(c.ln1, params_[ix.ln1.g].w, dx1, dadd1, params_[ix.ln1.g].g,
                         params_[ix.ln1.b].g);
        Mat datt = dadd1;
        dropout_backward(datt, c.drop1);
        Mat dx_in = dadd1;
        attn_backward(c.x_in, c.x_in, ap, ag, c.att, datt, nullptr, cfg_.num_heads, dx_in, dx_in);
        denc = std::move(dx_in);
    }
    dropout_backward(denc, enc.demb);
    for (int t = 0; t < s; ++t) {
        double* gr = gemb.row(enc.src_ids[t]);
        const double* dr = denc.row(t);
        for (int j = 0; j < d; ++j) gr[j] += sd * dr[j];
    }
}

Memory Transformer::encode(const std::vector<int>& src_ids) const {
    Memory m;
    std::vector<int> s = src_ids;
    if (static_cast<int>(s.size()) > cfg_.max_len) {
        std::fprintf(stderr, "warning: source length %zu exceeds max_len %d; truncating\n",
                     s.size(), cfg_.max_len);
        s.resize(static_cast<size_t>(cfg_.max_len));
        m.truncated = true;
    }
    EncCache cache;
    encode_forward(s, cache, nullptr);
    m.memory = cache.layers.back().x2;
    m.src_mask = cache.src_mask;
    m.src_ids = std::move(s);
    return m;
}

StepOutput Transformer::decode_step(const Memory& mem, const std::vector<int>& prefix_ids) const {
    if (prefix_ids.empty()) throw std::invalid_argument("decode_step: empty prefix");
    DecCache cache;
    decode_forward(mem.memory, mem.src_mask, mem.src_ids, prefix_ids, cache, nullptr);
    const int last = static_cast<int>(prefix_ids.size()) - 1;
    StepOutput out;
    out.vocab_dist.assign(cache.tdist.row(last), cache.tdist.row(last) + vocab_size_);
    out.src_attention.assign(cache.abar.row(last), cache.abar.row(last) + mem.memory.rows);
    out.p_gen = cache.pg[last];
    return out;
}

double Transformer::sequence_nll(const std::vector<int>& src_ids, const std::vector<int>& tgt_ids,
                                 int* token_count, bool accumulate_grads,
                                 std::mt19937_64* dropout_rng) {
    std::vector<int> s = src_ids;
    if (static_cast<int>(s.size()) > cfg_.max_len) {
        std::fprintf(stderr, "warning: source length %zu exceeds max_len %d; truncating\n",
                     s.size(), cfg_.max_len);
        s.resize(static_cast<size_t>(cfg_.max_len));
    }
    std::vector<int> t = tgt_ids;
    if (static_cast<int>(t.size()) > cfg_.max_len + 1) {
        std::fprintf(stderr, "warning: target length %zu exceeds max_len %d; truncating\n",
                     t.size(), cfg_.max_len);
        t.resize(static_cast<size_t>(cfg_.max_len) + 1);
    }
    if (t.size() < 2)
        throw std::invalid_argument("sequence_nll: target needs <sos> plus at least one token");
    const std::vector<int> tgt_in(t.begin(), t.end() - 1);
    const std::vector<int> tgt_out(t.begin() + 1, t.end());

    EncCache enc;
    encode_forward(s, enc, dropout_rng);
    DecCache dec;
    decode_forward(enc.layers.back().x2, enc.src_mask, enc.src_ids, tgt_in, dec, dropout_rng);
    double nll = 0.0;
    for (size_t i = 0; i < tgt_out.size(); ++i) {
        const double m = std::max(dec.mdist.at(static_cast<int>(i), tgt_out[i]), 1e-300);
        nll += -std::log(m);
    }
    if (token_count) *token_count = static_cast<int>(tgt_out.size());
    if (accumulate_grads) backward(enc, dec, tgt_out);
    return nll;
}

Mat Transformer::teacher_forced_mdist(const std::vector<int>& src_ids,
                                      const std::vector<int>& tgt_in) const {
    EncCache enc;
    encode_forward(src_ids, enc, nullptr);
    DecCache dec;
    decode_forward(enc.layers.back().x2, enc.src_mask, enc.src_ids, tgt_in, dec, nullptr);
    return dec.mdist;
}

void save_checkpoint(const std::string& path, const Transformer& model,
                     const CheckpointExtra* extra) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, sizeof(kMagic));
    put<uint32_t>(os, 1);
    put<uint64_t>(os, model.vocab_hash_);
    const ModelConfig& c = model.cfg_;
    put<int32_t>(os, c.num_layers);
    put<int32_t>(os, c.num_heads);
    put<int32_t>(os, c.d_model);
    put<int32_t>(os, c.d_ff);
    put<int32_t>(os, c.max_len);
    put<double>(os, c.dropout);
    put<uint8_t>(os, c.use_copy ? 1 : 0);
    put<int32_t>(os, model.vocab_size_);
    put<int32_t>(os, model.oov_base_);
    put<int32_t>(os, model.oov_slots_);
    put<uint32_t>(os, static_cast<uint32_t>(model.params_.size()));
    for (const Tensor& t : model.params_) {
        put_string(os, t.name);
        put<int32_t>(os, t.w.rows);
        put<int32_t>(os, t.w.cols);
        put_doubles(os, t.w.a);
    }
    const bool has_opt = extra != nullptr && extra->has_opt;
    put<uint8_t>(os, has_opt ? 1 : 0);
    if (has_opt) {
        put<uint64_t>(os, extra->adam_step);
        for (const Mat& m : extra->adam_m) put_doubles(os, m.a);
        for (const Mat& m : extra->adam_v) put_doubles(os, m.a);
        put_string(os, extra->rng_state);
        put<int32_t>(os, extra->epoch);
        put<double>(os, extra->best_dev);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Transformer load_checkpoint(const std::string& path, const tokenizer::Vocabulary& vocab,
                            CheckpointExtra* extra_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const uint32_t version = get<uint32_t>(is);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
    const uint64_t vhash = get<uint64_t>(is);
    if (vhash != vocab.hash())
        throw std::runtime_error(
            "checkpoint: vocabulary hash mismatch (checkpoint was trained with a different "
            "vocabulary)");
    ModelConfig cfg;
    cfg.num_layers = get<int32_t>(is);
    cfg.num_heads = get<int32_t>(is);
    cfg.d_model = get<int32_t>(is);
    cfg.d_ff = get<int32_t>(is);
    cfg.max_len = get<int32_t>(is);
    cfg.dropout = get<double>(is);
    cfg.use_copy = get<uint8_t>(is) != 0;
    const int32_t vocab_size = get<int32_t>(is);
    const int32_t oov_base = get<int32_t>(is);
    const int32_t oov_slots = get<int32_t>(is);
    if (vocab_size != vocab.size() || oov_base != vocab.oov_base || oov_slots != vocab.oov_slots)
        throw std::runtime_error("checkpoint: vocabulary layout mismatch");
    Transformer model(cfg, vocab, 0);
    const uint32_t n_tensors = get<uint32_t>(is);
    if (n_tensors != model.params().size())
        throw std::runtime_error("checkpoint: tensor count mismatch");
    for (Tensor& t : model.params()) {
        const std::string name = get_string(is);
        const int32_t rows = get<int32_t>(is);
        const int32_t cols = get<int32_t>(is);
        if (name != t.name || rows != t.w.rows || cols != t.w.cols)
            throw std::runtime_error("checkpoint: tensor layout mismatch at " + t.name);
        get_doubles(is, t.w.a);
    }
    const bool has_opt = get<uint8_t>(is) != 0;
    if (extra_out) {
        extra_out->has_opt = has_opt;
        extra_out->adam_m.clear();
        extra_out->adam_v.clear();
    }
    if (has_opt) {
        const uint64_t step = get<uint64_t>(is);
        std::vector<Mat> ms, vs;
        for (const Tensor& t : model.params()) {
            Mat m(t.w.rows, t.w.cols);
            get_doubles(is, m.a);
            ms.push_back(std::move(m));
        }
        for (const Tensor& t : model.params()) {
            Mat m(t.w.rows, t.w.cols);
            get_doubles(is, m.a);
            vs.push_back(std::move(m));
        }
        const std::string rng_state = get_string(is);
        const int32_t epoch = get<int32_t>(is);
        const double best_dev = get<double>(is);
        if (extra_out) {
            extra_out->adam_step = step;
            extra_out->adam_m = std::move(ms);
            extra_out->adam_v = std::move(vs);
            extra_out->rng_state = rng_state;
            extra_out->epoch = epoch;
            extra_out->best_dev = best_dev;
        }
    }
    return model;
}

}  // namespace relgen::model
