// SPDX-License-Identifier: Apache-2.0
//
// Small helpers shared by the end-to-end tests and the acceptance runner.
#pragma once

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace testsupport {

namespace fs = std::filesystem;

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

/// Fresh, empty directory under the system temp dir.
inline fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "prefprobe_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Runs the CLI through the shell and returns its exit status. `env` is a
/// prefix such as "PREFPROBE_ABORT_AFTER=3 "; output goes to `log`.
inline int run_cli(const std::string& args, const fs::path& log, const std::string& env = "") {
  const std::string cmd = env + "NO_COLOR=1 '" + std::string(PREFPROBE_CLI) + "' " + args + " > '" +
                          log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1 || !WIFEXITED(status)) return -1;
  return WEXITSTATUS(status);
}

}  // namespace testsupport
