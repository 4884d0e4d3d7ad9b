#pragma once

#include <filesystem>
#include <string>

#include "sca/train.hpp"

namespace sca {

// A full run description: line-oriented `key = value` text, `#` comments,
// unknown keys are a hard error.
struct RunConfig {
    TrainConfig train;

    std::string data = "synth";  // "synth" or a dataset root with train/ and test/
    int synth_classes = 10;
    int synth_train_per_class = 500;
    int synth_test_per_class = 200;
    int synth_hw = 16;
    double synth_noise = 0.35;

    std::string arch = "16C3-AP2-32C3-AP2-32C3-AP2-64C3-AP2-10FC";
    std::string block_style = "plain";

    void validate() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::filesystem::path& path);

// Byte-stable snapshot of the post-defaulting configuration.
std::string canonical_config(const RunConfig& cfg);

}  // namespace sca
