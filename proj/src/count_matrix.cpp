#include <algorithm>
#include <numeric>
#include <string>

#include "pfm/types.hpp"

namespace pfm {

void ModelConfig::validate() const {
  if (n_factors < 1) throw DomainError("n_factors must be >= 1, got " + std::to_string(n_factors));
  if (!(a > 0.0)) throw DomainError("a must be positive, got " + std::to_string(a));
  if (!(b > 0.0)) throw DomainError("b must be positive, got " + std::to_string(b));
}

CountMatrix::CountMatrix(Index n_rows, Index n_cols, std::vector<Entry> entries)
    : n_rows_(n_rows), n_cols_(n_cols), entries_(std::move(entries)) {
  if (n_rows < 0 || n_cols < 0) throw DomainError("CountMatrix: negative dimension");
  for (const Entry& e : entries_) {
    if (e.row < 0 || e.row >= n_rows || e.col < 0 || e.col >= n_cols)
      throw DomainError("CountMatrix: entry (" + std::to_string(e.row) + ", " +
                        std::to_string(e.col) + ") out of range for " + std::to_string(n_rows) +
                        " x " + std::to_string(n_cols));
    if (e.count < 1)
      throw DomainError("CountMatrix: count at (" + std::to_string(e.row) + ", " +
                        std::to_string(e.col) + ") must be >= 1, got " + std::to_string(e.count));
  }
  std::sort(entries_.begin(), entries_.end(), [](const Entry& l, const Entry& r) {
    return l.row != r.row ? l.row < r.row : l.col < r.col;
  });
  for (std::size_t e = 1; e < entries_.size(); ++e)
    if (entries_[e].row == entries_[e - 1].row && entries_[e].col == entries_[e - 1].col)
      throw DomainError("CountMatrix: duplicate entry (" + std::to_string(entries_[e].row) +
                        ", " + std::to_string(entries_[e].col) + ")");

  row_ptr_.assign(static_cast<std::size_t>(n_rows) + 1, 0);
  col_ptr_.assign(static_cast<std::size_t>(n_cols) + 1, 0);
  for (const Entry& e : entries_) {
    ++row_ptr_[static_cast<std::size_t>(e.row) + 1];
    ++col_ptr_[static_cast<std::size_t>(e.col) + 1];
  }
  std::partial_sum(row_ptr_.begin(), row_ptr_.end(), row_ptr_.begin());
  std::partial_sum(col_ptr_.begin(), col_ptr_.end(), col_ptr_.begin());

  // Entries are row-sorted, so a stable scatter leaves each column row-ordered.
  col_entries_.resize(entries_.size());
  std::vector<Index> fill(col_ptr_.begin(), col_ptr_.end() - 1);
  for (std::size_t e = 0; e < entries_.size(); ++e)
    col_entries_[static_cast<std::size_t>(fill[static_cast<std::size_t>(entries_[e].col)]++)] =
        static_cast<Index>(e);
}

std::span<const CountMatrix::Entry> CountMatrix::row(Index i) const {
  const auto begin = static_cast<std::size_t>(row_begin(i));
  return std::span<const Entry>(entries_).subspan(begin,
                                                  static_cast<std::size_t>(row_end(i)) - begin);
}

std::span<const Index> CountMatrix::column(Index d) const {
  const auto begin = static_cast<std::size_t>(col_ptr_[static_cast<std::size_t>(d)]);
  const auto end = static_cast<std::size_t>(col_ptr_[static_cast<std::size_t>(d) + 1]);
  return std::span<const Index>(col_entries_).subspan(begin, end - begin);
}

}  // namespace pfm
