#pragma once

#include <string>
#include <vector>

namespace egm {

// One row per token position; amplitude may be NaN where no signal sample
// exists (specials, afib slot, augmentation run).
struct OverlaySeries {
  std::vector<double> amplitude;
  std::vector<double> attention;
  std::vector<double> attribution;
};

void save_overlay_csv(const std::string& path, const OverlaySeries& series);
OverlaySeries load_overlay_csv(const std::string& path);

// Standalone SVG line plot: signal trace with the attention and attribution
// bands overlaid in their own colors and scales.
void save_overlay_svg(const std::string& path, const OverlaySeries& series,
                      const std::string& title);

}  // namespace egm
