#include "dml/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace dml {

std::string to_string(PretrainLoss l) {
    switch (l) {
        case PretrainLoss::none: return "none";
        case PretrainLoss::ntxent: return "ntxent";
        case PretrainLoss::batch_all: return "batch_all";
        case PretrainLoss::batch_hard: return "batch_hard";
    }
    throw std::logic_error("unknown pretrain loss");
}

std::string to_string(TrainLoss l) {
    switch (l) {
        case TrainLoss::cross_entropy: return "cross_entropy";
        case TrainLoss::batch_hard: return "batch_hard";
        case TrainLoss::batch_all: return "batch_all";
    }
    throw std::logic_error("unknown train loss");
}

PretrainLoss pretrain_loss_from_string(const std::string& s) {
    if (s == "none") return PretrainLoss::none;
    if (s == "ntxent") return PretrainLoss::ntxent;
    if (s == "batch_all") return PretrainLoss::batch_all;
    if (s == "batch_hard") return PretrainLoss::batch_hard;
    throw std::invalid_argument("unknown pretrain loss '" + s + "' (expected none, ntxent, batch_all or batch_hard)");
}

TrainLoss train_loss_from_string(const std::string& s) {
    if (s == "cross_entropy") return TrainLoss::cross_entropy;
    if (s == "batch_hard") return TrainLoss::batch_hard;
    if (s == "batch_all") return TrainLoss::batch_all;
    throw std::invalid_argument("unknown train loss '" + s + "' (expected cross_entropy, batch_hard or batch_all)");
}

std::string digest_hex(std::uint64_t d) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
    return buf;
}

SyntheticSpec SyntheticSection::resolve(std::uint64_t experiment_seed) const {
    const std::uint64_t s = seed.value_or(experiment_seed);
    SyntheticSpec spec;
    if (preset == "paper-shaped") {
        spec = SyntheticSpec::paper_shaped(scale, shape, s);
    } else if (preset.empty()) {
        spec.class_sizes = class_sizes;
        spec.shape = shape;
        spec.seed = s;
    } else {
        throw std::invalid_argument("unknown dataset preset '" + preset + "'");
    }
    spec.difficulty = difficulty;
    spec.rare_threshold = rare_threshold;
    spec.validate();
    return spec;
}

void ExperimentConfig::validate() const {
    if (dataset.path.empty() == !dataset.synthetic.has_value()) {
        throw std::invalid_argument("config.dataset: give exactly one of 'path' or 'synthetic'");
    }
    if (dataset.synthetic) {
        const auto& s = *dataset.synthetic;
        if (s.preset.empty() && s.class_sizes.empty()) {
            throw std::invalid_argument("config.dataset.synthetic: needs 'preset' or 'class_sizes'");
        }
        if (!s.preset.empty() && !s.class_sizes.empty()) {
            throw std::invalid_argument("config.dataset.synthetic: 'preset' and 'class_sizes' are exclusive");
        }
    }
    if (model.hidden_dim == 0) throw std::invalid_argument("config.model.hidden_dim must be positive");
    if (model.head_mode && *model.head_mode != head_mode()) {
        throw std::invalid_argument("config: train loss " + to_string(train.loss) + " requires head_mode " +
                                    to_string(head_mode()) + ", got " + to_string(*model.head_mode));
    }
    const auto& p = pretrain;
    if (p.epochs < 0) throw std::invalid_argument("config.pretrain.epochs must be >= 0");
    if (p.batch_size < 2) throw std::invalid_argument("config.pretrain.batch_size must be >= 2");
    if (!(p.temperature > 0.0)) throw std::invalid_argument("config.pretrain.temperature must be positive");
    if (!(p.gamma >= 0.0 && p.gamma <= 1.0)) throw std::invalid_argument("config.pretrain.gamma must lie in [0, 1]");
    if (!(p.margin >= 0.0)) throw std::invalid_argument("config.pretrain.margin must be >= 0");
    if (!(p.lr > 0.0) || !(p.momentum >= 0.0 && p.momentum < 1.0)) {
        throw std::invalid_argument("config.pretrain: lr must be positive and momentum in [0, 1)");
    }
    if (p.loss != PretrainLoss::none && p.pool_size == 0 && !p.include_train_split) {
        throw std::invalid_argument("config.pretrain: empty unlabelled pool");
    }
    if (augment.n < 1) throw std::invalid_argument("config.augment.n must be >= 1");
    augment.spec.validate();
    const auto& t = train;
    if (t.epochs < 0) throw std::invalid_argument("config.train.epochs must be >= 0");
    if (t.classes_per_batch < 2 || t.samples_per_class < 2) {
        throw std::invalid_argument("config.train: classes_per_batch and samples_per_class must be >= 2");
    }
    if (!(t.margin >= 0.0)) throw std::invalid_argument("config.train.margin must be >= 0");
    if (t.embed_dim && *t.embed_dim == 0) throw std::invalid_argument("config.train.embed_dim must be positive");
    if (!(t.lr > 0.0) || !(t.momentum >= 0.0 && t.momentum < 1.0)) {
        throw std::invalid_argument("config.train: lr must be positive and momentum in [0, 1)");
    }
    if (t.val_every < 1) throw std::invalid_argument("config.train.val_every must be >= 1");
    if (eval.k < 1) throw std::invalid_argument("config.eval.k must be >= 1");
    for (std::size_t k : eval.rank_ks) {
        if (k < 1 || k > eval.k) {
            throw std::invalid_argument("config.eval.rank_ks: " + std::to_string(k) + " outside [1, K = " +
                                        std::to_string(eval.k) + "]");
        }
    }
}

namespace {

json difficulty_json(const Difficulty& d) {
    return {{"jitter", d.jitter}, {"background_noise", d.background_noise}};
}

Difficulty difficulty_from_json(const json& j) {
    if (j.is_string()) return Difficulty::named(j.get<std::string>());
    require_known_keys(j, {"jitter", "background_noise"}, "config.dataset.synthetic.difficulty");
    Difficulty d;
    d.jitter = j.value("jitter", d.jitter);
    d.background_noise = j.value("background_noise", d.background_noise);
    return d;
}

template <class T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json ExperimentConfig::to_json() const {
    json ds;
    if (!dataset.path.empty()) ds["path"] = dataset.path;
    if (dataset.synthetic) {
        const auto& s = *dataset.synthetic;
        json syn;
        if (!s.preset.empty()) {
            syn["preset"] = s.preset;
            syn["scale"] = s.scale;
        } else {
            syn["class_sizes"] = s.class_sizes;
        }
        syn["shape"] = dml::to_json(s.shape);
        syn["difficulty"] = difficulty_json(s.difficulty);
        syn["seed"] = s.seed ? json(*s.seed) : json(nullptr);
        syn["rare_threshold"] = s.rare_threshold;
        ds["synthetic"] = syn;
    }
    json blocks = json::array();
    for (const auto& b : model.conv_blocks) {
        blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"pool", b.pool}});
    }
    json mdl{{"conv_blocks", blocks}, {"hidden_dim", model.hidden_dim}};
    if (model.head_mode) mdl["head_mode"] = dml::to_string(*model.head_mode);
    const auto& a = augment.spec;
    return {
        {"dataset", ds},
        {"model", mdl},
        {"pretrain",
         {{"loss", dml::to_string(pretrain.loss)},
          {"epochs", pretrain.epochs},
          {"batch_size", pretrain.batch_size},
          {"temperature", pretrain.temperature},
          {"gamma", pretrain.gamma},
          {"margin", pretrain.margin},
          {"lr", pretrain.lr},
          {"momentum", pretrain.momentum},
          {"pool_size", pretrain.pool_size},
          {"include_train_split", pretrain.include_train_split}}},
        {"augment",
         {{"enabled", augment.enabled},
          {"n", augment.n},
          {"rotation_max_degrees", a.rotation_max_degrees},
          {"flip_prob", a.flip_prob},
          {"noise_sigma_max", a.noise_sigma_max},
          {"crop_scale_low", a.crop_scale_low}}},
        {"train",
         {{"loss", dml::to_string(train.loss)},
          {"epochs", train.epochs},
          {"classes_per_batch", train.classes_per_batch},
          {"samples_per_class", train.samples_per_class},
          {"margin", train.margin},
          {"embed_dim", train.embed_dim ? json(*train.embed_dim) : json(nullptr)},
          {"lr", train.lr},
          {"momentum", train.momentum},
          {"val_every", train.val_every}}},
        {"eval", {{"k", eval.k}, {"rank_ks", eval.rank_ks}}},
        {"seed", seed},
    };
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    require_known_keys(j, {"dataset", "model", "pretrain", "augment", "train", "eval", "seed"}, "config");
    ExperimentConfig c;
    read(j, "seed", c.seed);
    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        require_known_keys(d, {"path", "synthetic"}, "config.dataset");
        read(d, "path", c.dataset.path);
        if (d.contains("synthetic")) {
            const json& s = d["synthetic"];
            require_known_keys(s, {"preset", "scale", "class_sizes", "shape", "difficulty", "seed", "rare_threshold"},
                               "config.dataset.synthetic");
            SyntheticSection syn;
            read(s, "preset", syn.preset);
            read(s, "scale", syn.scale);
            read(s, "class_sizes", syn.class_sizes);
            if (s.contains("shape")) syn.shape = shape_from_json(s["shape"]);
            if (s.contains("difficulty")) syn.difficulty = difficulty_from_json(s["difficulty"]);
            if (s.contains("seed") && !s["seed"].is_null()) syn.seed = s["seed"].get<std::uint64_t>();
            read(s, "rare_threshold", syn.rare_threshold);
            c.dataset.synthetic = syn;
        }
    }
    if (j.contains("model")) {
        const json& m = j["model"];
        require_known_keys(m, {"conv_blocks", "hidden_dim", "head_mode"}, "config.model");
        if (m.contains("conv_blocks")) {
            c.model.conv_blocks.clear();
            for (const auto& b : m["conv_blocks"]) {
                require_known_keys(b, {"out_channels", "kernel", "pool"}, "config.model.conv_blocks");
                ConvBlock blk;
                read(b, "out_channels", blk.out_channels);
                read(b, "kernel", blk.kernel);
                read(b, "pool", blk.pool);
                c.model.conv_blocks.push_back(blk);
            }
        }
        read(m, "hidden_dim", c.model.hidden_dim);
        if (m.contains("head_mode")) c.model.head_mode = head_mode_from_string(m["head_mode"].get<std::string>());
    }
    if (j.contains("pretrain")) {
        const json& p = j["pretrain"];
        require_known_keys(p, {"loss", "epochs", "batch_size", "temperature", "gamma", "margin", "lr", "momentum",
                               "pool_size", "include_train_split"},
                           "config.pretrain");
        if (p.contains("loss")) c.pretrain.loss = pretrain_loss_from_string(p["loss"].get<std::string>());
        read(p, "epochs", c.pretrain.epochs);
        read(p, "batch_size", c.pretrain.batch_size);
        read(p, "temperature", c.pretrain.temperature);
        read(p, "gamma", c.pretrain.gamma);
        read(p, "margin", c.pretrain.margin);
        read(p, "lr", c.pretrain.lr);
        read(p, "momentum", c.pretrain.momentum);
        read(p, "pool_size", c.pretrain.pool_size);
        read(p, "include_train_split", c.pretrain.include_train_split);
    }
    if (j.contains("augment")) {
        const json& a = j["augment"];
        require_known_keys(a, {"enabled", "n", "rotation_max_degrees", "flip_prob", "noise_sigma_max",
                               "crop_scale_low"},
                           "config.augment");
        read(a, "enabled", c.augment.enabled);
        read(a, "n", c.augment.n);
        read(a, "rotation_max_degrees", c.augment.spec.rotation_max_degrees);
        read(a, "flip_prob", c.augment.spec.flip_prob);
        read(a, "noise_sigma_max", c.augment.spec.noise_sigma_max);
        read(a, "crop_scale_low", c.augment.spec.crop_scale_low);
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        require_known_keys(t, {"loss", "epochs", "classes_per_batch", "samples_per_class", "margin", "embed_dim", "lr",
                               "momentum", "val_every"},
                           "config.train");
        if (t.contains("loss")) c.train.loss = train_loss_from_string(t["loss"].get<std::string>());
        read(t, "epochs", c.train.epochs);
        read(t, "classes_per_batch", c.train.classes_per_batch);
        read(t, "samples_per_class", c.train.samples_per_class);
        read(t, "margin", c.train.margin);
        if (t.contains("embed_dim") && !t["embed_dim"].is_null()) c.train.embed_dim = t["embed_dim"].get<std::size_t>();
        read(t, "lr", c.train.lr);
        read(t, "momentum", c.train.momentum);
        read(t, "val_every", c.train.val_every);
    }
    if (j.contains("eval")) {
        const json& e = j["eval"];
        require_known_keys(e, {"k", "rank_ks"}, "config.eval");
        read(e, "k", c.eval.k);
        read(e, "rank_ks", c.eval.rank_ks);
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

std::uint64_t ExperimentConfig::digest() const { return fnv1a64(to_json().dump()); }

std::string ExperimentConfig::run_name() const {
    auto loss_name = [](const std::string& s) {
        if (s == "ntxent") return std::string("NTXent");
        if (s == "batch_all") return std::string("BATriplet");
        if (s == "batch_hard") return std::string("BHTriplet");
        if (s == "cross_entropy") return std::string("CrossEntropy");
        return std::string("None");
    };
    return loss_name(dml::to_string(pretrain.loss)) + "-" + (augment.enabled ? "Aug" : "None") + "-" +
           loss_name(dml::to_string(train.loss));
}

HeadMode ExperimentConfig::head_mode() const {
    return train.loss == TrainLoss::cross_entropy ? HeadMode::logits : HeadMode::l2_normalized;
}

EncoderConfig ExperimentConfig::encoder_config(Shape3 input, int class_count) const {
    EncoderConfig e;
    e.input_shape = input;
    e.conv_blocks = model.conv_blocks;
    e.hidden_dim = model.hidden_dim;
    e.head_mode = head_mode();
    if (train.embed_dim) {
        e.embed_dim = *train.embed_dim;
    } else {
        e.embed_dim = train.loss == TrainLoss::cross_entropy ? static_cast<std::size_t>(class_count) : 6;
    }
    if (train.loss == TrainLoss::cross_entropy && e.embed_dim != static_cast<std::size_t>(class_count)) {
        throw std::invalid_argument("config: cross-entropy training needs embed_dim = class count (" +
                                    std::to_string(class_count) + "), got " + std::to_string(e.embed_dim));
    }
    e.validate();
    return e;
}

}  // namespace dml
