#pragma once

#include <vector>

namespace sparling {

/// Offset cuboid (a rectangle for images) around a motif center: a site
/// p lies in the footprint of a motif at c when min <= p - c <= max per axis.
struct Footprint {
  int min_row = 0;
  int max_row = 0;
  int min_col = 0;
  int max_col = 0;

  bool contains(int drow, int dcol) const {
    return drow >= min_row && drow <= max_row && dcol >= min_col && dcol <= max_col;
  }
  int height() const { return max_row - min_row + 1; }
  int width() const { return max_col - min_col + 1; }
  bool operator==(const Footprint&) const = default;
};

/// Footprint per true-motif channel.
using FootprintTable = std::vector<Footprint>;

}  // namespace sparling
