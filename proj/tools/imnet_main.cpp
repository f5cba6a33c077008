#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "imnet/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Euler-connection experiments: stability maps, training runs, ablations"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  long long seed = -1;
  int threads = 0;

  struct SubDef {
    const char* cli_name;
    const char* command;
    const char* help;
  };
  const SubDef defs[] = {
      {"stability", "stability", "scan stability regions and error trajectories"},
      {"train-eval", "train_eval", "train one wiring and evaluate under perturbations"},
      {"ablation", "ablation", "compare connection placements over repeated runs"},
      {"tsweep", "tsweep", "sweep the inner iteration count"},
      {"flops", "flops", "tabulate forward-cost ratios per placement"},
  };
  for (const SubDef& d : defs) {
    CLI::App* sub = app.add_subcommand(d.cli_name, d.help);
    sub->add_option("--config", config_path, "manifest JSON (defaults used when omitted)");
    sub->add_option("--out", out_dir, "output directory (default $IMNET_OUT/<command>)");
    sub->add_option("--seed", seed, "override the manifest seed");
    sub->add_option("--threads", threads, "override the manifest thread count");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  const char* command = nullptr;
  for (const SubDef& d : defs)
    if (app.get_subcommand(d.cli_name)->parsed()) command = d.command;

  try {
    imnet::Json doc;
    if (!config_path.empty()) {
      imnet::Manifest loaded = imnet::load_manifest(config_path);
      if (loaded.command != command)
        throw imnet::config_error("manifest command '" + loaded.command +
                                  "' does not match subcommand '" + command + "'");
      doc = loaded.doc;
    } else {
      doc = imnet::default_manifest(command).doc;
    }
    if (seed >= 0) doc["seed"] = seed;
    if (threads >= 1) doc["threads"] = threads;
    return imnet::run_command(imnet::resolve_manifest(doc), out_dir);
  } catch (const imnet::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const imnet::usage_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }
}
