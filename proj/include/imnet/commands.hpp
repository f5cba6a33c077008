#pragma once

#include <string>

#include "imnet/manifest.hpp"

namespace imnet {

// execute a resolved manifest. outputs plus manifest.resolved.json go to
// out_override when given, else the manifest's out_dir, else
// $IMNET_OUT/<command> (default root "runs"). the final directory is baked
// into the written manifest so a replay hits the same files.
// exit codes: 0 ok, 1 verification mismatch, 2 usage/config error,
// 3 numeric divergence.
int run_command(Manifest m, const std::string& out_override = "");

}  // namespace imnet
