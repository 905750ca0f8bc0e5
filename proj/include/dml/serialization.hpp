#pragma once

// JSON mappings for the config-like types. Parsing is strict: unknown keys
// are rejected so typos in experiment files fail loudly.

#include <initializer_list>
#include <string>

#include "json.hpp"

#include "dml/model.hpp"
#include "dml/volume.hpp"

namespace dml {

using json = nlohmann::ordered_json;

/// Throws std::invalid_argument naming the first key of `j` not in `allowed`.
void require_known_keys(const json& j, std::initializer_list<const char*> allowed,
                        const std::string& where);

json to_json(const Shape3& s);
Shape3 shape_from_json(const json& j);

json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const json& j);

}  // namespace dml
