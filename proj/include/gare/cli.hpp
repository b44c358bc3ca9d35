// Command implementations behind the `gare` executable. Each command returns
// its process exit code: 0 success, 1 check failure, 2 usage or config error,
// 3 training divergence.

#ifndef GARE_CLI_HPP
#define GARE_CLI_HPP

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace gare::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDiverged = 3;

struct GenDataArgs {
  std::string config;
  std::string out;
  bool force = false;
};

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  bool force = false;
  bool quiet = false;
};

struct OracleArgs {
  std::string config;
  std::string data;
  std::string out;
  std::size_t steps = 20;
  std::optional<double> epsilon;  // default: 0.05 x mean anchor norm per batch
  std::size_t batches = 10;
  std::size_t batch_size = 8;
  bool force = false;
};

struct GradcheckArgs {
  std::string module = "all";
  std::size_t instances = 100;
  std::optional<std::string> inject_fault;  // op name whose backward is perturbed
};

struct CompareArgs {
  std::vector<std::string> runs;
  std::string csv;  // optional output path
};

int gen_data(const GenDataArgs& args, std::ostream& out, std::ostream& err);
int train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int oracle(const OracleArgs& args, std::ostream& out, std::ostream& err);
int gradcheck(const GradcheckArgs& args, std::ostream& out, std::ostream& err);
int compare(const CompareArgs& args, std::ostream& out, std::ostream& err);

/// Parses argv and dispatches to a command.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gare::cli

#endif  // GARE_CLI_HPP
