#pragma once

#include <cstdint>
#include <string>

#include "hnseg/optim.hpp"
#include "hnseg/unetr.hpp"

namespace hnseg {

class CheckpointError : public std::runtime_error {
  public:
    enum class Code { BadMagic, BadVersion, Corrupt, IoFailure, ConfigMismatch };
    CheckpointError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}
    Code code;
};

// Self-describing training snapshot: config header, named float32 tensors in
// registry order, optional optimizer moments, and the scheduling counters a
// bit-exact resume needs.
struct CheckpointRecord {
    UnetrConfig cfg;
    uint64_t epochs_completed = 0;
    uint64_t optimizer_step = 0;
    double best_val_dsc = -1.0;
    int64_t best_epoch = -1;
    UnetrParams<float> params;
    bool has_optimizer = false;
    AdamWState<float> opt;
};

void save_checkpoint(const std::string& path, const CheckpointRecord& rec);
CheckpointRecord load_checkpoint(const std::string& path);

}  // namespace hnseg
