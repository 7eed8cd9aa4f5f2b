#pragma once

#include <string>
#include <vector>

#include "qrobust/model_json.hpp"

namespace qrobust {
namespace cli {

// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

int cmd_train(const RunConfig& rc);
int cmd_attack(const RunConfig& rc, const std::string& checkpoint);
int cmd_evaluate(const RunConfig& rc, const std::string& checkpoint);
int cmd_sweep(const RunConfig& rc, const std::string& checkpoint);
int cmd_kfold(const RunConfig& rc);
int cmd_footprint(const std::string& model_path, const std::vector<std::string>& schemes,
                  const std::string& out_dir);
int cmd_gradcheck(const std::string& model_path, uint64_t seed, double tolerance);

// Maps exceptions escaping a command onto the exit-code contract.
int run_guarded(const std::function<int()>& fn);

}  // namespace cli
}  // namespace qrobust
