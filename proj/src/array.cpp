#include "pulseformer/array.hpp"

#include <sstream>

namespace pulseformer {

Shape::Shape(std::initializer_list<Index> dims) {
  if (dims.size() < 1 || dims.size() > 3) {
    throw DimensionError("array rank must be 1..3, got " + std::to_string(dims.size()));
  }
  for (Index d : dims) {
    if (d < 0) throw DimensionError("negative extent");
    dims_[static_cast<std::size_t>(rank_++)] = d;
  }
}

Index Shape::size() const {
  if (rank_ == 0) return 0;
  Index n = 1;
  for (int i = 0; i < rank_; ++i) n *= dims_[static_cast<std::size_t>(i)];
  return n;
}

Index Shape::rows() const {
  Index n = 1;
  for (int i = 0; i + 1 < rank_; ++i) n *= dims_[static_cast<std::size_t>(i)];
  return n;
}

bool Shape::operator==(const Shape& other) const {
  if (rank_ != other.rank_) return false;
  for (int i = 0; i < rank_; ++i) {
    if (dims_[static_cast<std::size_t>(i)] != other.dims_[static_cast<std::size_t>(i)]) return false;
  }
  return true;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (int i = 0; i < rank_; ++i) {
    if (i) os << 'x';
    os << dims_[static_cast<std::size_t>(i)];
  }
  os << ']';
  return os.str();
}

}  // namespace pulseformer
