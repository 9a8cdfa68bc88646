#include "splitnn/rng.hpp"

#include <bit>
#include <sstream>

#include "splitnn/error.hpp"

namespace splitnn {

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  os << ' ' << (has_spare_ ? 1 : 0);
  // Spare normal draw stored as its raw bit pattern to stay exact.
  os << ' ' << std::bit_cast<uint64_t>(spare_);
  return os.str();
}

void Rng::restore(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  int spare_flag = 0;
  uint64_t spare_bits = 0;
  is >> spare_flag >> spare_bits;
  if (is.fail()) {
    throw StateError("Rng::restore: malformed state string");
  }
  has_spare_ = spare_flag != 0;
  spare_ = std::bit_cast<double>(spare_bits);
}

}  // namespace splitnn
