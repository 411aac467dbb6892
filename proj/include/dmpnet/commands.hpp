#pragma once

// Command implementations behind the CLI: data generation, training,
// inference, evaluation and gradient verification. Each command prints a
// reproducibility header (version, seed, config hash) and is a pure function
// of its config, inputs and seed.

#include <cstdint>
#include <string>

#include "dmpnet/adam.hpp"
#include "dmpnet/config.hpp"
#include "dmpnet/network.hpp"
#include "dmpnet/synth.hpp"

namespace dmpnet {

inline constexpr const char* kVersionString = "0.1.0";

struct CommandContext {
    std::string config_path;  // empty = built-in defaults
    std::uint64_t seed = 1;
    std::string out;          // command-specific output path
};

struct TrainOptions {
    float lr = 5e-5f;
    float weight_decay = 5e-4f;
    int epochs = 30;
};

// key = value parsing into the typed configs; unknown keys fail in finish()
NetworkConfig parse_network_config(ConfigReader& reader);
SynthConfig parse_synth_config(ConfigReader& reader, std::uint64_t seed);
TrainOptions parse_train_options(ConfigReader& reader);

void cmd_gen_data(const CommandContext& ctx);
void cmd_train(const CommandContext& ctx, const std::string& train_dir,
               const std::string& val_dir);
void cmd_infer(const CommandContext& ctx, const std::string& checkpoint_path,
               const std::string& data_dir);
void cmd_eval(const CommandContext& ctx, const std::string& pred_dir,
              const std::string& gt_dir);
int cmd_gradcheck(const CommandContext& ctx, const std::string& scope);  // failure count

}  // namespace dmpnet
