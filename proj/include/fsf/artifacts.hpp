#pragma once

#include "fsf/gaussian_mixture.hpp"

#include <span>
#include <string>
#include <vector>

namespace fsf {

/// Shortest decimal form that reads back to the same double.
std::string format_double(double v);

/// Writes `content` to `path`, creating parent directories.
void write_text_file(const std::string& path, const std::string& content);

/// Header x1,...,xd,label then one row per sample.
std::string samples_csv(const Matrix& x, std::span<const int> labels);
/// Reads a samples CSV back (the label column is optional).
Matrix read_samples_csv(const std::string& path, std::vector<int>* labels = nullptr);

/// Scatter of the first two coordinates (or x against 0 for 1-D data) with
/// 1- and 2-sigma circles of every mixture component.
std::string scatter_svg(const Matrix& x, std::span<const int> labels, const GaussianMixtureSpec& spec,
                        const std::string& title);

}  // namespace fsf
