#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "imnet/encoder.hpp"
#include "imnet/harness.hpp"
#include "imnet/stability.hpp"

namespace imnet {

using Json = nlohmann::json;

// a fully resolved experiment description: command kind plus every knob the
// run needs, written beside the outputs so the run can be replayed exactly
struct Manifest {
  std::string command;  // stability | train_eval | ablation | tsweep | flops
  Json doc;
};

// defaults for one command, ready to run
Manifest default_manifest(const std::string& command);

// merge a user document over the command defaults; unknown keys and bad
// values are config errors
Manifest resolve_manifest(const Json& user_doc);

Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& m, const std::filesystem::path& path);

// typed readers for resolved documents
EncoderConfig encoder_from_json(const Json& j);
SyntheticTask task_from_json(const Json& j);
TrainHyper hyper_from_json(const Json& j);
EulerConfig euler_from_json(const Json& j);
WiringSpec wiring_from_json(const Json& j, int n_layers);
PerturbationSpec perturbation_from_json(const Json& j);
StabilityGrid grid_from_json(const Json& j);

}  // namespace imnet
