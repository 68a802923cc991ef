#include "hnseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace hnseg {

namespace {

constexpr char kMagic[8] = {'H', 'N', 'S', 'E', 'G', 'C', 'K', '1'};
constexpr uint32_t kVersion = 1;

void put_bytes(std::ofstream& out, const void* p, size_t n) {
    out.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}

template <typename T>
void put(std::ofstream& out, T v) {
    put_bytes(out, &v, sizeof(T));
}

void put_str(std::ofstream& out, const std::string& s) {
    put<uint32_t>(out, uint32_t(s.size()));
    put_bytes(out, s.data(), s.size());
}

struct Reader {
    std::ifstream in;
    explicit Reader(const std::string& path) : in(path, std::ios::binary) {
        if (!in) {
            throw CheckpointError(CheckpointError::Code::IoFailure, "cannot open " + path);
        }
    }
    void bytes(void* p, size_t n) {
        in.read(reinterpret_cast<char*>(p), std::streamsize(n));
        if (!in) {
            throw CheckpointError(CheckpointError::Code::Corrupt, "truncated checkpoint");
        }
    }
    template <typename T>
    T get() {
        T v;
        bytes(&v, sizeof(T));
        return v;
    }
    std::string str() {
        uint32_t n = get<uint32_t>();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
};

void put_config(std::ofstream& out, const UnetrConfig& c) {
    put<int64_t>(out, c.img_size);
    put<int64_t>(out, c.patch_size);
    put<int64_t>(out, c.embed_dim);
    put<int64_t>(out, c.num_layers);
    put<int64_t>(out, c.num_heads);
    put<int64_t>(out, c.mlp_dim);
    put<int64_t>(out, c.in_channels);
    put<int64_t>(out, c.out_channels);
    put<int64_t>(out, c.base_features);
    auto sk = c.skips();
    put<uint32_t>(out, uint32_t(sk.size()));
    for (int64_t s : sk) put<int64_t>(out, s);
    put<double>(out, c.dropout);
    put<uint64_t>(out, c.seed);
}

UnetrConfig get_config(Reader& r) {
    UnetrConfig c;
    c.img_size = r.get<int64_t>();
    c.patch_size = r.get<int64_t>();
    c.embed_dim = r.get<int64_t>();
    c.num_layers = r.get<int64_t>();
    c.num_heads = r.get<int64_t>();
    c.mlp_dim = r.get<int64_t>();
    c.in_channels = r.get<int64_t>();
    c.out_channels = r.get<int64_t>();
    c.base_features = r.get<int64_t>();
    uint32_t nsk = r.get<uint32_t>();
    c.skip_layers.clear();
    for (uint32_t i = 0; i < nsk; ++i) c.skip_layers.push_back(r.get<int64_t>());
    c.dropout = r.get<double>();
    c.seed = r.get<uint64_t>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointRecord& rec) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CheckpointError(CheckpointError::Code::IoFailure, "cannot write " + path);
    }
    put_bytes(out, kMagic, sizeof(kMagic));
    put<uint32_t>(out, kVersion);
    put_config(out, rec.cfg);
    put<uint64_t>(out, rec.epochs_completed);
    put<uint64_t>(out, rec.optimizer_step);
    put<double>(out, rec.best_val_dsc);
    put<int64_t>(out, rec.best_epoch);

    auto entries = rec.params.entries();
    put<uint32_t>(out, uint32_t(entries.size()));
    for (const auto& e : entries) {
        put_str(out, e.name);
        put<uint32_t>(out, uint32_t(e.tensor.shape().size()));
        for (int64_t d : e.tensor.shape()) put<int64_t>(out, d);
        put_bytes(out, e.tensor.data(), size_t(e.tensor.numel()) * sizeof(float));
    }
    put<uint8_t>(out, rec.has_optimizer ? 1 : 0);
    if (rec.has_optimizer) {
        if (rec.opt.m.size() != entries.size() || rec.opt.v.size() != entries.size()) {
            throw CheckpointError(CheckpointError::Code::Corrupt,
                                  "optimizer state does not match parameters");
        }
        for (size_t i = 0; i < entries.size(); ++i) {
            put_bytes(out, rec.opt.m[i].data(), rec.opt.m[i].size() * sizeof(float));
            put_bytes(out, rec.opt.v[i].data(), rec.opt.v[i].size() * sizeof(float));
        }
    }
    if (!out) {
        throw CheckpointError(CheckpointError::Code::IoFailure, "short write to " + path);
    }
}

CheckpointRecord load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[8];
    r.bytes(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError(CheckpointError::Code::BadMagic,
                              path + " is not a checkpoint file");
    }
    if (r.get<uint32_t>() != kVersion) {
        throw CheckpointError(CheckpointError::Code::BadVersion, "unknown checkpoint version");
    }
    CheckpointRecord rec;
    rec.cfg = get_config(r);
    rec.epochs_completed = r.get<uint64_t>();
    rec.optimizer_step = r.get<uint64_t>();
    rec.best_val_dsc = r.get<double>();
    rec.best_epoch = r.get<int64_t>();

    rec.params = init_params<float>(rec.cfg, rec.cfg.seed);
    auto entries = rec.params.entries();
    uint32_t n = r.get<uint32_t>();
    if (n != entries.size()) {
        throw CheckpointError(CheckpointError::Code::ConfigMismatch,
                              "tensor count does not match the config header");
    }
    for (auto& e : entries) {
        std::string name = r.str();
        if (name != e.name) {
            throw CheckpointError(CheckpointError::Code::ConfigMismatch,
                                  "tensor " + name + " where " + e.name + " expected");
        }
        uint32_t rank = r.get<uint32_t>();
        std::vector<int64_t> dims(rank);
        for (auto& d : dims) d = r.get<int64_t>();
        if (dims != e.tensor.shape()) {
            throw CheckpointError(CheckpointError::Code::ConfigMismatch,
                                  "tensor " + name + " has unexpected shape");
        }
        Tensor<float> t = e.tensor;
        r.bytes(t.data(), size_t(t.numel()) * sizeof(float));
    }
    uint8_t has_opt = r.get<uint8_t>();
    rec.has_optimizer = has_opt != 0;
    if (rec.has_optimizer) {
        rec.opt.init(entries);
        rec.opt.step = int64_t(rec.optimizer_step);
        for (size_t i = 0; i < entries.size(); ++i) {
            r.bytes(rec.opt.m[i].data(), rec.opt.m[i].size() * sizeof(float));
            r.bytes(rec.opt.v[i].data(), rec.opt.v[i].size() * sizeof(float));
        }
    }
    return rec;
}

}  // namespace hnseg
