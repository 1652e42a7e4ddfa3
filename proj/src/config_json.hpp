#pragma once

#include "json.hpp"
#include "tiledit/dit.hpp"

namespace tiledit {

nlohmann::json config_json(const DitConfig& c);
DitConfig config_from_json(const nlohmann::json& j);

}  // namespace tiledit
