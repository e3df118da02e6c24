#include "egm/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "egm/types.hpp"

namespace egm {

namespace {

constexpr double kWidth = 1200.0;
constexpr double kHeight = 360.0;
constexpr double kPad = 40.0;

// Maps a series into plot coordinates; NaN samples break the polyline.
std::string polyline(const std::vector<double>& values, double lo, double hi,
                     const std::string& color, double opacity) {
  const double span = (hi > lo) ? (hi - lo) : 1.0;
  const double n = static_cast<double>(values.size());
  std::ostringstream out;
  std::ostringstream points;
  bool open = false;
  const auto flush = [&]() {
    if (open) {
      out << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-opacity=\"" << opacity
          << "\" stroke-width=\"1.2\" points=\"" << points.str() << "\"/>\n";
      points.str("");
      open = false;
    }
  };
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      flush();
      continue;
    }
    const double x = kPad + (kWidth - 2 * kPad) * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.5);
    const double y = kHeight - kPad - (kHeight - 2 * kPad) * ((values[i] - lo) / span);
    points << x << "," << y << " ";
    open = true;
  }
  flush();
  return out.str();
}

void bounds(const std::vector<double>& values, double& lo, double& hi) {
  lo = std::numeric_limits<double>::infinity();
  hi = -std::numeric_limits<double>::infinity();
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
}

}  // namespace

void save_overlay_csv(const std::string& path, const OverlaySeries& series) {
  if (series.attention.size() != series.amplitude.size() ||
      series.attribution.size() != series.amplitude.size())
    throw DataError("overlay: series lengths differ");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.precision(17);
  os << "position,amplitude,attention,attribution\n";
  for (std::size_t i = 0; i < series.amplitude.size(); ++i) {
    os << i << ",";
    if (std::isfinite(series.amplitude[i])) os << series.amplitude[i];
    os << "," << series.attention[i] << "," << series.attribution[i] << "\n";
  }
  if (!os) throw DataError("failed writing '" + path + "'");
}

OverlaySeries load_overlay_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line.rfind("position,", 0) != 0)
    throw DataError("'" + path + "' is not an overlay CSV");
  OverlaySeries series;
  int row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 4) cells.push_back("");
    if (cells.size() != 4)
      throw DataError("overlay CSV row " + std::to_string(row) + ": expected 4 columns");
    const auto parse = [&](const std::string& s, bool allow_empty) -> double {
      if (s.empty()) {
        if (allow_empty) return std::numeric_limits<double>::quiet_NaN();
        throw DataError("overlay CSV row " + std::to_string(row) + ": empty numeric cell");
      }
      return std::stod(s);
    };
    series.amplitude.push_back(parse(cells[1], true));
    series.attention.push_back(parse(cells[2], false));
    series.attribution.push_back(parse(cells[3], false));
  }
  if (series.amplitude.empty()) throw DataError("'" + path + "' has no data rows");
  return series;
}

void save_overlay_svg(const std::string& path, const OverlaySeries& series,
                      const std::string& title) {
  double alo, ahi, nlo, nhi, glo, ghi;
  bounds(series.amplitude, alo, ahi);
  bounds(series.attention, nlo, nhi);
  bounds(series.attribution, glo, ghi);

  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n"
     << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "  <text x=\"" << kPad << "\" y=\"22\" font-family=\"sans-serif\" font-size=\"14\">"
     << title << "</text>\n"
     << "  <text x=\"" << kWidth - 330 << "\" y=\"22\" font-family=\"sans-serif\" font-size=\"12\">"
     << "<tspan fill=\"#222222\">signal</tspan>  <tspan fill=\"#e6a700\">attention</tspan>"
     << "  <tspan fill=\"#cc2222\">attribution</tspan></text>\n";
  os << polyline(series.amplitude, alo, ahi, "#222222", 0.9);
  os << polyline(series.attention, nlo, nhi, "#e6a700", 0.8);
  os << polyline(series.attribution, glo, ghi, "#cc2222", 0.8);
  os << "</svg>\n";
  if (!os) throw DataError("failed writing '" + path + "'");
}

}  // namespace egm
