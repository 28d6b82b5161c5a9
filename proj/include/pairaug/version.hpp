#pragma once

namespace pairaug {

const char* version();

}  // namespace pairaug
