#pragma once

#include <functional>
#include <string_view>

namespace escorte {

/// Receives non-fatal warnings. The default sink writes "warning: ..." to stderr.
using WarningSink = std::function<void(std::string_view)>;

void warn(std::string_view message);
/// Installs a new sink and returns the previous one.
WarningSink set_warning_sink(WarningSink sink);

}  // namespace escorte
