#include "pairaug/version.hpp"

namespace pairaug {

const char* version() { return "0.1.0"; }

}  // namespace pairaug
