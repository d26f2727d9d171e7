#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace fscope {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitBundle = 2;  // missing prerequisite, version mismatch, hash mismatch
inline constexpr int kExitUsage = 64;

/// Runs one `featurescope` command; args excludes the program name. Errors
/// are reported on `err` as a single JSON object with "error" and "detail".
int runCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Parses "all", "3", "0,2,5" or "0-7" (ranges inclusive, may be mixed).
/// "all" and an empty string give an empty list.
std::vector<std::size_t> parseChannelList(const std::string& text);

}  // namespace fscope
