#include "fsf/artifacts.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace fsf {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text_file(const std::string& path, const std::string& content) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << content;
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::string samples_csv(const Matrix& x, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != x.rows()) throw std::invalid_argument("samples_csv: label count mismatch");
  std::string out;
  for (Index j = 0; j < x.cols(); ++j) out += "x" + std::to_string(j + 1) + ",";
  out += "label\n";
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) out += format_double(x(i, j)) + ",";
    out += std::to_string(labels[static_cast<std::size_t>(i)]) + "\n";
  }
  return out;
}

Matrix read_samples_csv(const std::string& path, std::vector<int>* labels) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open samples file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("samples file '" + path + "' has no header");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string h; std::getline(ss, h, ',');) header.push_back(h);
  }
  const bool has_label = !header.empty() && header.back() == "label";
  const std::size_t d = header.size() - (has_label ? 1 : 0);
  std::vector<double> values;
  if (labels) labels->clear();
  Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> cells;
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() != header.size()) throw std::runtime_error("samples file '" + path + "': ragged row");
    for (std::size_t j = 0; j < d; ++j) values.push_back(std::stod(cells[j]));
    if (has_label && labels) labels->push_back(std::stoi(cells.back()));
    ++rows;
  }
  Matrix x(rows, static_cast<Index>(d));
  std::copy(values.begin(), values.end(), x.data());
  return x;
}

std::string scatter_svg(const Matrix& x, std::span<const int> labels, const GaussianMixtureSpec& spec,
                        const std::string& title) {
  const double size = 480, pad = 24;
  const bool one_d = spec.dim() == 1;
  auto px = [&](Index i) { return x(i, 0); };
  auto py = [&](Index i) { return one_d ? 0.0 : x(i, 1); };

  // Viewport covers every component's 3-sigma disc.
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int k = 0; k < spec.components(); ++k) {
    const auto& m = spec.means[static_cast<std::size_t>(k)];
    const double r = 3 * spec.stdevs[static_cast<std::size_t>(k)];
    for (Index j = 0; j < std::min<Index>(2, m.size()); ++j) {
      lo = std::min(lo, m(j) - r);
      hi = std::max(hi, m(j) + r);
    }
  }
  if (one_d) {
    lo = std::min(lo, -1.0);
    hi = std::max(hi, 1.0);
  }
  const double span = hi - lo;
  auto sx = [&](double v) { return pad + (v - lo) / span * (size - 2 * pad); };
  auto sy = [&](double v) { return size - pad - (v - lo) / span * (size - 2 * pad); };

  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << size << "\" height=\"" << size
      << "\" viewBox=\"0 0 " << size << " " << size << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << pad << "\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\">" << title << "</text>\n";
  for (int k = 0; k < spec.components(); ++k) {
    const auto& m = spec.means[static_cast<std::size_t>(k)];
    const double cy = one_d ? 0.0 : m(1);
    for (int level = 1; level <= 2; ++level) {
      const double r = level * spec.stdevs[static_cast<std::size_t>(k)];
      svg << "<polyline fill=\"none\" stroke=\"#444\" stroke-width=\"" << (level == 1 ? 1.0 : 0.5) << "\" points=\"";
      for (int a = 0; a <= 64; ++a) {
        const double th = 2 * std::numbers::pi * a / 64;
        svg << format_double(sx(m(0) + r * std::cos(th))) << "," << format_double(sy(cy + r * std::sin(th))) << " ";
      }
      svg << "\"/>\n";
    }
  }
  for (Index i = 0; i < x.rows(); ++i) {
    const int c = labels.empty() ? 0 : labels[static_cast<std::size_t>(i)];
    const char* color = c < 0 ? "#000000" : palette[c % 8];
    svg << "<circle cx=\"" << format_double(sx(px(i))) << "\" cy=\"" << format_double(sy(py(i)))
        << "\" r=\"1.2\" fill=\"" << color << "\" fill-opacity=\"0.5\"/>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace fsf
