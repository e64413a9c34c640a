#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/trainer.hpp"

namespace embedkit {

// One flat key = value file per run. '#' starts a comment, blank lines are
// skipped, unknown keys are rejected, and every referenced dataset file must
// exist at parse time. Stage keys carry a stage1. / stage2. prefix.
struct RunConfig {
    std::uint64_t seed = 0;
    EncoderConfig enc;
    PoolingConfig pool;
    std::vector<LoraSpec> adapters;  // from lora.targets; empty means none
    StageConfig stage1;
    StageConfig stage2;
    std::string out_checkpoint;         // train: final artifact (required)
    std::string out_stage1_checkpoint;  // train --stage both: optional stage-1 artifact
    std::string metrics_path;           // optional step,loss trace
};

RunConfig parse_run_config(const std::string& path);

// Fresh seeded model for the config; adapter tensors are added when
// lora.targets is non-empty.
ModelCheckpoint init_from_config(const RunConfig& cfg);

// Finite-difference check of every trainable tensor whose name contains
// `filter`, through the full encode/pool/contrastive pipeline of the
// configured model. Sampled elements per tensor; prints one line per tensor
// to `out`. Returns true when nothing failed (no selected tensors passes
// vacuously).
bool gradcheck_model(const RunConfig& cfg, const std::string& filter, std::string& out);

// The command surface: train, mine, eval, compress, gradcheck, embed.
// args excludes the program name. Exit code 0 on success, 1 on validation or
// usage errors, 2 on runtime failures.
int run_cli(const std::vector<std::string>& args);

}  // namespace embedkit
