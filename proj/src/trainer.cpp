#include "relgen/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "relgen/util.hpp"

namespace relgen::model {

Trainer::Trainer(Transformer& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), rng_(cfg.seed) {
    if (cfg.lr <= 0.0) throw std::invalid_argument("train: lr must be positive");
    if (cfg.batch_tokens < 1) throw std::invalid_argument("train: batch_tokens must be >= 1");
    if (cfg.epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
    for (const Tensor& t : model.params()) {
        m_.emplace_back(t.w.rows, t.w.cols);
        v_.emplace_back(t.w.rows, t.w.cols);
    }
}

double Trainer::dataset_loss(const std::vector<tokenizer::EncodedPair>& pairs) {
    double nll = 0.0;
    long tokens = 0;
    for (const auto& p : pairs) {
        if (p.tgt_ids.size() < 2) continue;
        int tc = 0;
        nll += model_.sequence_nll(p.src_ids, p.tgt_ids, &tc, false, nullptr);
        tokens += tc;
    }
    return tokens > 0 ? nll / static_cast<double>(tokens) : 0.0;
}

void Trainer::adam_step(double inv_tokens) {
    ++step_;
    const double warm =
        cfg_.warmup_steps > 0
            ? std::min(1.0, static_cast<double>(step_) / static_cast<double>(cfg_.warmup_steps))
            : 1.0;
    const double lr = cfg_.lr * warm;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    auto& params = model_.params();
    for (size_t i = 0; i < params.size(); ++i) {
        Mat& w = params[i].w;
        const Mat& g = params[i].g;
        Mat& m = m_[i];
        Mat& v = v_[i];
        for (size_t k = 0; k < w.a.size(); ++k) {
            const double gk = g.a[k] * inv_tokens;
            m.a[k] = cfg_.beta1 * m.a[k] + (1.0 - cfg_.beta1) * gk;
            v.a[k] = cfg_.beta2 * v.a[k] + (1.0 - cfg_.beta2) * gk * gk;
            const double mhat = m.a[k] / bc1;
            const double vhat = v.a[k] / bc2;
            w.a[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
        }
    }
}

double Trainer::run_epoch(const std::vector<tokenizer::EncodedPair>& pairs) {
    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    deterministic_shuffle(order, rng_);
    model_.zero_grads();
    int acc_tokens = 0;
    double epoch_nll = 0.0;
    long epoch_tokens = 0;
    for (size_t idx : order) {
        const auto& p = pairs[idx];
        if (p.tgt_ids.size() < 2) continue;
        int tc = 0;
        const double nll = model_.sequence_nll(p.src_ids, p.tgt_ids, &tc, true, &rng_);
        if (!std::isfinite(nll)) throw std::runtime_error("training diverged: non-finite loss");
        epoch_nll += nll;
        epoch_tokens += tc;
        acc_tokens += tc;
        if (acc_tokens >= cfg_.batch_tokens) {
            adam_step(1.0 / static_cast<double>(acc_tokens));
            model_.zero_grads();
            acc_tokens = 0;
        }
    }
    if (acc_tokens > 0) {
        adam_step(1.0 / static_cast<double>(acc_tokens));
        model_.zero_grads();
    }
    ++epoch_;
    return epoch_tokens > 0 ? epoch_nll / static_cast<double>(epoch_tokens) : 0.0;
}

TrainResult Trainer::fit(const std::vector<tokenizer::EncodedPair>& train,
                         const std::vector<tokenizer::EncodedPair>& dev,
                         const std::string& best_path, const std::string& latest_path,
                         std::ostream* log) {
    TrainResult res;
    res.best_dev = best_dev_;
    while (epoch_ < cfg_.epochs) {
        const double train_loss = run_epoch(train);
        const double dev_loss = dev.empty() ? train_loss : dataset_loss(dev);
        if (!std::isfinite(dev_loss)) throw std::runtime_error("training diverged: non-finite dev loss");
        res.train_loss.push_back(train_loss);
        res.dev_loss.push_back(dev_loss);
        const bool improved = dev_loss < best_dev_;
        if (improved) {
            best_dev_ = dev_loss;
            res.best_dev = dev_loss;
            res.best_epoch = epoch_;
            if (!best_path.empty()) save_checkpoint(best_path, model_, nullptr);
        }
        if (!latest_path.empty()) {
            CheckpointExtra extra = snapshot();
            save_checkpoint(latest_path, model_, &extra);
        }
        if (log)
            (*log) << "epoch " << epoch_ << " train_loss " << train_loss << " dev_loss "
                   << dev_loss << (improved ? " *" : "") << "\n";
    }
    return res;
}

CheckpointExtra Trainer::snapshot() const {
    CheckpointExtra e;
    e.has_opt = true;
    e.adam_step = step_;
    e.adam_m = m_;
    e.adam_v = v_;
    std::ostringstream os;
    os << rng_;
    e.rng_state = os.str();
    e.epoch = epoch_;
    e.best_dev = best_dev_;
    return e;
}

void Trainer::restore(const CheckpointExtra& extra) {
    if (!extra.has_opt) throw std::invalid_argument("restore: checkpoint has no optimizer state");
    if (extra.adam_m.size() != m_.size() || extra.adam_v.size() != v_.size())
        throw std::invalid_argument("restore: optimizer state shape mismatch");
    m_ = extra.adam_m;
    v_ = extra.adam_v;
    step_ = extra.adam_step;
    epoch_ = extra.epoch;
    best_dev_ = extra.best_dev;
    std::istringstream is(extra.rng_state);
    is >> rng_;
    if (!is) throw std::invalid_argument("restore: bad rng state");
}

}  // namespace relgen::model
