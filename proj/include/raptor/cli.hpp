#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace raptor::cli {

// Exit codes: 0 success, 1 domain error, 2 usage error.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args excludes the program name

// Flat dotted-key config with every recognised key and its default.
nlohmann::json default_config();

// Overlays `overrides` on `base`; throws InvalidArgument on unknown keys or
// type mismatches.
nlohmann::json overlay_config(nlohmann::json base, const nlohmann::json& overrides);

// Stable hash over the entries whose key starts with one of the prefixes.
std::string config_fingerprint(const nlohmann::json& config, const std::vector<std::string>& prefixes);

}  // namespace raptor::cli
