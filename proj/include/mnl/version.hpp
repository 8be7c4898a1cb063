#pragma once

#include <string>

#ifndef MNL_VERSION
#define MNL_VERSION "0.1.0"
#endif
#ifndef MNL_GIT_REVISION
#define MNL_GIT_REVISION "unknown"
#endif

namespace mnl {

inline std::string version_string() {
  return std::string(MNL_VERSION) + "+" + MNL_GIT_REVISION;
}

}  // namespace mnl
