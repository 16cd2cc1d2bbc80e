#pragma once

#include <cstdint>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "relgen/model.hpp"
#include "relgen/tokenizer.hpp"

namespace relgen::model {

struct TrainConfig {
    double lr = 1e-4;
    int warmup_steps = 400;   // linear ramp; 0 disables
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_tokens = 1600;  // gradient-accumulation budget per optimizer step
    int epochs = 10;
    uint64_t seed = 1;
};

struct TrainResult {
    std::vector<double> train_loss;  // mean nll per target token, per epoch run
    std::vector<double> dev_loss;
    int best_epoch = -1;             // 1-based epoch index of the best dev loss
    double best_dev = std::numeric_limits<double>::infinity();
};

// Adam with linear warmup over teacher-forced sequence losses, batching by
// accumulated target-token count. One RNG stream drives both the epoch
// shuffle and dropout, so a fixed seed reproduces losses bit-for-bit.
class Trainer {
public:
    Trainer(Transformer& model, const TrainConfig& cfg);

    // mean teacher-forced nll per target token with dropout off
    double dataset_loss(const std::vector<tokenizer::EncodedPair>& pairs);

    // one pass over `pairs`; returns the epoch's mean train loss per token.
    // Throws on a non-finite loss.
    double run_epoch(const std::vector<tokenizer::EncodedPair>& pairs);

    // Full loop with best-dev checkpointing. best_path gets the weights of
    // the best dev epoch; latest_path (optional) gets a resumable state every
    // epoch. Either may be empty to skip writing.
    TrainResult fit(const std::vector<tokenizer::EncodedPair>& train,
                    const std::vector<tokenizer::EncodedPair>& dev, const std::string& best_path,
                    const std::string& latest_path, std::ostream* log = nullptr);

    CheckpointExtra snapshot() const;
    void restore(const CheckpointExtra& extra);
    int epochs_done() const { return epoch_; }
    uint64_t steps_done() const { return step_; }

private:
    void adam_step(double inv_tokens);

    Transformer& model_;
    TrainConfig cfg_;
    std::vector<Mat> m_, v_;
    uint64_t step_ = 0;
    int epoch_ = 0;
    double best_dev_ = std::numeric_limits<double>::infinity();
    std::mt19937_64 rng_;
};

}  // namespace relgen::model
