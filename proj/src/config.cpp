#include "hnseg/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace hnseg {

namespace {

int64_t to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("key " + key + ": '" + v + "' is not an integer");
    }
}

uint64_t to_uint(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("key " + key + ": '" + v + "' is not an unsigned integer");
    }
}

double to_real(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("key " + key + ": '" + v + "' is not a number");
    }
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
        throw ConfigError("optimizer betas must lie in [0,1)");
    }
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    try {
        augment.validate();
        loss.validate();
        model.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (key == "batch_size") cfg.batch_size = to_int(key, v);
    else if (key == "learning_rate") cfg.learning_rate = to_real(key, v);
    else if (key == "epochs") cfg.epochs = to_int(key, v);
    else if (key == "beta1") cfg.beta1 = to_real(key, v);
    else if (key == "beta2") cfg.beta2 = to_real(key, v);
    else if (key == "adam_eps") cfg.adam_eps = to_real(key, v);
    else if (key == "weight_decay") cfg.weight_decay = to_real(key, v);
    else if (key == "checkpoint_every") cfg.checkpoint_every = to_int(key, v);
    else if (key == "seed") cfg.seed = to_uint(key, v);
    else if (key == "augment.pipeline") {
        try {
            cfg.augment.enabled = AugmentSpec::parse_pipeline(v);
        } catch (const AugmentError& e) {
            throw ConfigError(e.what());
        }
    } else if (key == "augment.prob") {
        double p = to_real(key, v);
        for (auto& q : cfg.augment.probability) q = p;
    } else if (key == "augment.rotation_min_deg") cfg.augment.rotation_min_deg = to_real(key, v);
    else if (key == "augment.rotation_max_deg") cfg.augment.rotation_max_deg = to_real(key, v);
    else if (key == "augment.zoom_factor") cfg.augment.zoom_factor = to_real(key, v);
    else if (key == "augment.gamma_min") cfg.augment.gamma_min = to_real(key, v);
    else if (key == "augment.gamma_max") cfg.augment.gamma_max = to_real(key, v);
    else if (key == "augment.elastic_grid") cfg.augment.elastic_grid = to_int(key, v);
    else if (key == "augment.elastic_sigma_mm") cfg.augment.elastic_sigma_mm = to_real(key, v);
    else if (key == "loss.dice_eps") cfg.loss.dice_eps = to_real(key, v);
    else if (key == "loss.focal_gamma") cfg.loss.focal_gamma = to_real(key, v);
    else if (key == "loss.focal_alpha") cfg.loss.focal_alpha = to_real(key, v);
    else if (key == "loss.dice_weight") cfg.loss.dice_weight = to_real(key, v);
    else if (key == "loss.focal_weight") cfg.loss.focal_weight = to_real(key, v);
    else if (key == "model.img_size") cfg.model.img_size = to_int(key, v);
    else if (key == "model.patch_size") cfg.model.patch_size = to_int(key, v);
    else if (key == "model.embed_dim") cfg.model.embed_dim = to_int(key, v);
    else if (key == "model.num_layers") cfg.model.num_layers = to_int(key, v);
    else if (key == "model.num_heads") cfg.model.num_heads = to_int(key, v);
    else if (key == "model.mlp_dim") cfg.model.mlp_dim = to_int(key, v);
    else if (key == "model.in_channels") cfg.model.in_channels = to_int(key, v);
    else if (key == "model.out_channels") cfg.model.out_channels = to_int(key, v);
    else if (key == "model.base_features") cfg.model.base_features = to_int(key, v);
    else if (key == "model.dropout") cfg.model.dropout = to_real(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
    // keep the per-module seeds in lockstep with the run seed
    cfg.augment.seed = cfg.seed;
    cfg.model.seed = cfg.seed;
}

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
        }
        apply_override(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

std::string serialize_train_config(const TrainConfig& cfg) {
    std::ostringstream o;
    o << "# training\n";
    o << "batch_size=" << cfg.batch_size << "\n";
    o << "learning_rate=" << cfg.learning_rate << "\n";
    o << "epochs=" << cfg.epochs << "\n";
    o << "beta1=" << cfg.beta1 << "\n";
    o << "beta2=" << cfg.beta2 << "\n";
    o << "adam_eps=" << cfg.adam_eps << "\n";
    o << "weight_decay=" << cfg.weight_decay << "\n";
    o << "checkpoint_every=" << cfg.checkpoint_every << "\n";
    o << "seed=" << cfg.seed << "\n";
    o << "# augmentations: NA or tags from MR,RT,ZM,GC,ED\n";
    o << "augment.pipeline=" << cfg.augment.pipeline_name() << "\n";
    o << "augment.prob=" << cfg.augment.probability[0] << "\n";
    o << "augment.rotation_min_deg=" << cfg.augment.rotation_min_deg << "\n";
    o << "augment.rotation_max_deg=" << cfg.augment.rotation_max_deg << "\n";
    o << "augment.zoom_factor=" << cfg.augment.zoom_factor << "\n";
    o << "augment.gamma_min=" << cfg.augment.gamma_min << "\n";
    o << "augment.gamma_max=" << cfg.augment.gamma_max << "\n";
    o << "augment.elastic_grid=" << cfg.augment.elastic_grid << "\n";
    o << "augment.elastic_sigma_mm=" << cfg.augment.elastic_sigma_mm << "\n";
    o << "# loss\n";
    o << "loss.dice_eps=" << cfg.loss.dice_eps << "\n";
    o << "loss.focal_gamma=" << cfg.loss.focal_gamma << "\n";
    o << "loss.focal_alpha=" << cfg.loss.focal_alpha << "\n";
    o << "loss.dice_weight=" << cfg.loss.dice_weight << "\n";
    o << "loss.focal_weight=" << cfg.loss.focal_weight << "\n";
    o << "# model\n";
    o << "model.img_size=" << cfg.model.img_size << "\n";
    o << "model.patch_size=" << cfg.model.patch_size << "\n";
    o << "model.embed_dim=" << cfg.model.embed_dim << "\n";
    o << "model.num_layers=" << cfg.model.num_layers << "\n";
    o << "model.num_heads=" << cfg.model.num_heads << "\n";
    o << "model.mlp_dim=" << cfg.model.mlp_dim << "\n";
    o << "model.in_channels=" << cfg.model.in_channels << "\n";
    o << "model.out_channels=" << cfg.model.out_channels << "\n";
    o << "model.base_features=" << cfg.model.base_features << "\n";
    o << "model.dropout=" << cfg.model.dropout << "\n";
    return o.str();
}

}  // namespace hnseg
