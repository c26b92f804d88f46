#include "polyseg/model_config.hpp"

#include <nlohmann/json.hpp>

#include "polyseg/errors.hpp"

namespace polyseg {

using nlohmann::json;

const char* arch_name(Arch a) {
    switch (a) {
        case Arch::unet: return "unet";
        case Arch::leaky_unet: return "leaky-unet";
        case Arch::resunet: return "resunet";
        case Arch::inception_unet: return "inception-unet";
        case Arch::pranet_lite: return "pranet-lite";
    }
    throw ConfigError("unreachable arch value");
}

std::vector<std::string> arch_names() {
    return {"unet", "leaky-unet", "resunet", "inception-unet", "pranet-lite"};
}

Arch arch_from_name(const std::string& name) {
    if (name == "unet") return Arch::unet;
    if (name == "leaky-unet") return Arch::leaky_unet;
    if (name == "resunet") return Arch::resunet;
    if (name == "inception-unet") return Arch::inception_unet;
    if (name == "pranet-lite") return Arch::pranet_lite;
    std::string valid;
    for (const auto& n : arch_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown arch '" + name + "'; valid: " + valid);
}

void ModelConfig::validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (base_width < 1) throw ConfigError("base_width must be >= 1");
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (leaky_slope < 0.0) throw ConfigError("leaky_slope must be >= 0");
    if (dilation_rates.empty()) throw ConfigError("dilation_rates must be nonempty");
    for (int d : dilation_rates)
        if (d < 1) throw ConfigError("dilation rates must be positive");
    if (arch == Arch::pranet_lite && depth < 2)
        throw ConfigError("pranet-lite aggregates the three deepest features; depth must be >= 2");
}

std::string to_json(const ModelConfig& cfg) {
    json j;
    j["arch"] = arch_name(cfg.arch);
    j["in_channels"] = cfg.in_channels;
    j["base_width"] = cfg.base_width;
    j["depth"] = cfg.depth;
    j["leaky_slope"] = cfg.leaky_slope;
    j["dilation_rates"] = cfg.dilation_rates;
    j["seed"] = cfg.seed;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("model config: expected a JSON object");

    static const char* known[] = {"arch",        "in_channels",    "base_width", "depth",
                                  "leaky_slope", "dilation_rates", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("model config: unknown key '" + it.key() + "'");
    }

    ModelConfig cfg;
    try {
        if (j.contains("arch")) cfg.arch = arch_from_name(j["arch"].get<std::string>());
        if (j.contains("in_channels")) cfg.in_channels = j["in_channels"].get<int>();
        if (j.contains("base_width")) cfg.base_width = j["base_width"].get<int>();
        if (j.contains("depth")) cfg.depth = j["depth"].get<int>();
        if (j.contains("leaky_slope")) cfg.leaky_slope = j["leaky_slope"].get<double>();
        if (j.contains("dilation_rates"))
            cfg.dilation_rates = j["dilation_rates"].get<std::vector<int>>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::int64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: bad field type: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

} // namespace polyseg
