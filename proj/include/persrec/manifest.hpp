#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "persrec/common.hpp"

namespace persrec {

constexpr const char* kToolVersion = "0.1.0";

// Reproducibility record written alongside every artifact-producing run.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  nlohmann::json fingerprints = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"tool_version", kToolVersion},
            {"command", command},
            {"config", config},
            {"inputs", inputs},
            {"outputs", outputs},
            {"fingerprints", fingerprints}};
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot open " + path + " for writing");
    out << to_json().dump(2) << "\n";
  }
};

}  // namespace persrec
