#include "dml/serialization.hpp"

#include <algorithm>
#include <stdexcept>

namespace dml {

void require_known_keys(const json& j, std::initializer_list<const char*> allowed,
                        const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
    for (const auto& item : j.items()) {
        const bool known = std::any_of(allowed.begin(), allowed.end(),
                                       [&](const char* k) { return item.key() == k; });
        if (!known) throw std::invalid_argument(where + ": unknown field '" + item.key() + "'");
    }
}

json to_json(const Shape3& s) { return json::array({s.h, s.w, s.d}); }

Shape3 shape_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3) throw std::invalid_argument("shape: expected [H, W, D]");
    return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

json to_json(const EncoderConfig& cfg) {
    json blocks = json::array();
    for (const auto& b : cfg.conv_blocks) {
        blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"pool", b.pool}});
    }
    return {{"input_shape", to_json(cfg.input_shape)},
            {"conv_blocks", blocks},
            {"hidden_dim", cfg.hidden_dim},
            {"embed_dim", cfg.embed_dim},
            {"head_mode", to_string(cfg.head_mode)}};
}

EncoderConfig encoder_config_from_json(const json& j) {
    require_known_keys(j, {"input_shape", "conv_blocks", "hidden_dim", "embed_dim", "head_mode"},
                       "encoder config");
    EncoderConfig cfg;
    if (j.contains("input_shape")) cfg.input_shape = shape_from_json(j["input_shape"]);
    if (j.contains("conv_blocks")) {
        cfg.conv_blocks.clear();
        for (const auto& b : j["conv_blocks"]) {
            require_known_keys(b, {"out_channels", "kernel", "pool"}, "conv block");
            ConvBlock blk;
            blk.out_channels = b.value("out_channels", blk.out_channels);
            blk.kernel = b.value("kernel", blk.kernel);
            blk.pool = b.value("pool", blk.pool);
            cfg.conv_blocks.push_back(blk);
        }
    }
    cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
    cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
    if (j.contains("head_mode")) cfg.head_mode = head_mode_from_string(j["head_mode"].get<std::string>());
    return cfg;
}

}  // namespace dml
