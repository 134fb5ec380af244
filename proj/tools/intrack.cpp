// Command-line entry point: generate, train, sweep, eval, visualize, stats, gradcheck.
#include "commands.hpp"

#include "intrack/pathgen.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"PathTracker datasets and recurrent tracking circuits"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  intrack::cli::Registry registry;
  intrack::cli::register_commands(app, registry);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (const CLI::App* sub : app.get_subcommands())
      if (sub->parsed()) failing = sub;
    std::cerr << failing->help();
    return 1;
  }

  try {
    return registry.run();
  } catch (const intrack::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const intrack::cli::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (const CLI::App* sub : app.get_subcommands())
      if (sub->parsed()) failing = sub;
    std::cerr << failing->help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
