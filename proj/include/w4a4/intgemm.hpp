#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "w4a4/quant.hpp"
#include "w4a4/tensor.hpp"

namespace w4a4 {

/// b-bit codes packed LSB-first into a byte stream in row-major element
/// order: code i occupies bits [i*b, (i+1)*b) of the little-endian stream.
/// For b = 4 the first code of a pair is the low nibble; for b = 3 each group
/// of 8 codes fills exactly 3 bytes. Trailing bits are zero.
struct PackedIntMatrix {
  int bits = 4;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bytes;

  static std::size_t byte_count(std::size_t n_codes, int bits) { return (n_codes * bits + 7) / 8; }
};

/// Throws InputError if a code does not fit in `bits` or the count is not rows*cols.
PackedIntMatrix pack(std::span<const std::uint8_t> codes, std::size_t rows, std::size_t cols, int bits);
std::vector<std::uint8_t> unpack(const PackedIntMatrix& p);

/// Largest inner dimension k for which 32-bit accumulation of Q_U * Q_V
/// cannot overflow: (2^b - 1)^2 * k <= 2^31 - 1.
std::size_t max_inner_dim(int bits);

/// Integer-domain product of a row-quantized U [n x k] and a column-quantized
/// V [k x m]:
///   P     = Q_U Q_V                          (int32 accumulation)
///   cross = z_U (1^T Q_V) + (Q_U 1) z_V^T     (row/column sums)
///   out   = (P - cross + k z_U z_V^T) / (s_U s_V^T)
/// Throws ContractError for any other granularity or an oversized k.
Tensor intmm(const QuantizedTensor& qu, const QuantizedTensor& qv);

/// Integer matrix (Q_U - z_U 1^T)(Q_V - 1 z_V^T) before rescaling, computed
/// through the decomposition above. Exposed for exactness checks.
std::vector<std::int64_t> intmm_integer(const QuantizedTensor& qu, const QuantizedTensor& qv);

}  // namespace w4a4
