#pragma once

#include "omerf/core.hpp"
#include "omerf/metrics.hpp"
#include "omerf/model.hpp"

#include "json.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace omerf::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitConvergence = 3;

/// Runs one command line (without the program name). Errors are reported on
/// `err` and mapped to exit codes.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

inline const std::vector<std::string> kModelKinds{"clm", "clmm", "ordforest-init", "omerf"};

struct BenchmarkPlan {
  std::vector<int> dgps{1};
  int replications = 20;
  std::vector<std::string> models = kModelKinds;
  double ratio = 0.8;
  int groups = 10;
  int per_group = 100;
  OmerfConfig omerf;

  void validate() const;
};

struct ReplicationRow {
  int dgp = 0;
  int replication = 0;
  std::string model;
  bool ok = false;
  double accuracy = 0.0;
  double mse = 0.0;
  double ari = 0.0;
  double kappa = 0.0;
  bool kappa_degenerate = false;
  int iterations = 0;
  bool converged = false;
  std::string message;
};

/// Seed of replication `rep` of scenario `dgp` under a master seed.
std::uint64_t replication_seed(std::uint64_t master, int dgp, int rep);

/// All (dgp, replication, model) rows, ordered by dgp, replication and the
/// plan's model order. Replications run on up to `threads` workers; a failed
/// fit is recorded in its row and the run continues.
std::vector<ReplicationRow> run_benchmark(const BenchmarkPlan& plan, std::uint64_t master_seed,
                                          int threads);

void write_replication_rows(const std::string& path, const std::vector<ReplicationRow>& rows);
std::vector<ReplicationRow> read_replication_rows(const std::string& path);

struct AggregateRow {
  int dgp = 0;
  std::string model;
  std::string metric;
  double mean = 0.0;
  double variance = 0.0;
  std::size_t n = 0;
  std::size_t failures = 0;
};

/// Mean and unbiased variance of every metric over the successful
/// replications of each (dgp, model), in order of first appearance.
std::vector<AggregateRow> aggregate(const std::vector<ReplicationRow>& rows);
void write_aggregate(const std::string& path, const std::vector<AggregateRow>& rows);

/// Full-precision decimal used in every numeric CSV field.
std::string format_double(double v);

/// Splits one CSV line, honouring double quotes.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace omerf::cli
