#pragma once

#include <CLI11.hpp>

#include <functional>
#include <map>
#include <stdexcept>
#include <string>

namespace intrack::cli {

/// Bad flag values detected after parsing; reported with the subcommand help and exit code 1.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Registry {
 public:
  void add(CLI::App* sub, std::function<int()> run) { runners_[sub] = std::move(run); }
  int run() const {
    for (const auto& [sub, fn] : runners_)
      if (sub->parsed()) return fn();
    throw UsageError("no subcommand given");
  }

 private:
  std::map<CLI::App*, std::function<int()>> runners_;
};

void register_commands(CLI::App& app, Registry& registry);

}  // namespace intrack::cli
