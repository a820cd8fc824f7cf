#pragma once

// Runs the capseq executables in a scratch directory. Paths come from
// compile definitions set in tests/CMakeLists.txt.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

namespace capseq::testing {

struct CommandResult {
  int exit_code = -1;
  std::string err;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliSandbox {
 public:
  explicit CliSandbox(const std::string& name)
      : root_(std::filesystem::temp_directory_path() /
              ("capseq_" + name + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(root_);
    std::filesystem::create_directories(root_);
  }
  ~CliSandbox() {
    if (std::getenv("CAPSEQ_KEEP_TEST_DIRS") == nullptr) std::filesystem::remove_all(root_);
  }
  CliSandbox(const CliSandbox&) = delete;
  CliSandbox& operator=(const CliSandbox&) = delete;

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path operator/(const std::string& rel) const { return root_ / rel; }

  // `args` go after the executable; stdout is discarded, stderr captured.
  CommandResult run(const std::string& args, const char* exe = CAPSEQ_CLI) const {
    const auto err = root_ / "last_stderr.txt";
    const std::string cmd = "cd '" + root_.string() + "' && " + exe + " " + args + " > /dev/null 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(err)};
  }

  CommandResult capseq(const std::string& args) const {
    return run("--config " + std::string(CAPSEQ_SOURCE_DIR) + "/configs/desk.conf " + args);
  }
  CommandResult synth(const std::string& args) const { return run(args, CAPSEQ_SYNTH); }

 private:
  std::filesystem::path root_;
};

}  // namespace capseq::testing
