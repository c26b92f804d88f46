#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace polyseg {

enum class Arch { unet, leaky_unet, resunet, inception_unet, pranet_lite };

const char* arch_name(Arch a);
/// Throws ConfigError listing the valid names.
Arch arch_from_name(const std::string& name);
std::vector<std::string> arch_names();

/// Architecture selector plus all width/depth/activation/dilation knobs.
struct ModelConfig {
    Arch arch = Arch::unet;
    int in_channels = 3;
    int base_width = 32;
    int depth = 4; // number of downsampling stages
    double leaky_slope = 0.1;
    std::vector<int> dilation_rates = {1, 2, 4}; // resunet bottleneck
    std::int64_t seed = 0;

    /// Throws ConfigError on invalid settings.
    void validate() const;
};

std::string to_json(const ModelConfig& cfg);
/// Strict parse: unknown keys are rejected; absent keys take defaults.
ModelConfig model_config_from_json(const std::string& text);

} // namespace polyseg
