#pragma once

#include <string>

#include "hnseg/augment.hpp"
#include "hnseg/losses.hpp"
#include "hnseg/unetr.hpp"

namespace hnseg {

class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training recipe: AdamW at lr 1e-3, batch 8, 800 epochs by default.
struct TrainConfig {
    int64_t batch_size = 8;
    double learning_rate = 1e-3;
    int64_t epochs = 800;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 1e-5;
    int64_t checkpoint_every = 50;
    uint64_t seed = 0;
    AugmentSpec augment;
    LossConfig loss;
    UnetrConfig model;

    void validate() const;
};

// Flat key=value text, '#' comments. Unknown keys are rejected.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);
std::string serialize_train_config(const TrainConfig& cfg);

}  // namespace hnseg
