#include "w4a4/intgemm.hpp"

#include <limits>

#include "w4a4/errors.hpp"

namespace w4a4 {

PackedIntMatrix pack(std::span<const std::uint8_t> codes, std::size_t rows, std::size_t cols, int bits) {
  if (bits < 1 || bits > 8) throw InputError("pack: bits must be in [1, 8]");
  if (codes.size() != rows * cols) throw InputError("pack: code count does not match rows*cols");
  PackedIntMatrix p{bits, rows, cols, std::vector<std::uint8_t>(PackedIntMatrix::byte_count(codes.size(), bits), 0)};
  const unsigned limit = 1u << bits;
  std::size_t bit = 0;
  for (std::size_t i = 0; i < codes.size(); ++i, bit += bits) {
    const unsigned c = codes[i];
    if (c >= limit) {
      throw InputError("pack: code " + std::to_string(c) + " at index " + std::to_string(i) + " does not fit in " +
                       std::to_string(bits) + " bits");
    }
    const std::size_t byte = bit / 8, shift = bit % 8;
    const unsigned word = c << shift;
    p.bytes[byte] |= static_cast<std::uint8_t>(word & 0xFFu);
    if (shift + bits > 8) p.bytes[byte + 1] |= static_cast<std::uint8_t>(word >> 8);
  }
  return p;
}

std::vector<std::uint8_t> unpack(const PackedIntMatrix& p) {
  const std::size_t n = p.rows * p.cols;
  if (p.bytes.size() != PackedIntMatrix::byte_count(n, p.bits)) throw InputError("unpack: byte count mismatch");
  std::vector<std::uint8_t> codes(n);
  const unsigned mask = (1u << p.bits) - 1u;
  std::size_t bit = 0;
  for (std::size_t i = 0; i < n; ++i, bit += p.bits) {
    const std::size_t byte = bit / 8, shift = bit % 8;
    unsigned word = p.bytes[byte];
    if (shift + p.bits > 8) word |= static_cast<unsigned>(p.bytes[byte + 1]) << 8;
    codes[i] = static_cast<std::uint8_t>((word >> shift) & mask);
  }
  return codes;
}

std::size_t max_inner_dim(int bits) {
  const std::uint64_t m = (1ull << bits) - 1ull;
  return static_cast<std::size_t>(static_cast<std::uint64_t>(std::numeric_limits<std::int32_t>::max()) / (m * m));
}

namespace {

void check_operands(const QuantizedTensor& qu, const QuantizedTensor& qv) {
  qu.validate();
  qv.validate();
  if (qu.shape.size() != 2 || qv.shape.size() != 2) throw ContractError("intmm: operands must be rank 2");
  if (qu.granularity == Granularity::kColumn) {
    throw ContractError("intmm: left operand is column-quantized; integer matmul needs per-row (or per-tensor) scales");
  }
  if (qv.granularity == Granularity::kRow) {
    throw ContractError("intmm: right operand is row-quantized; integer matmul needs per-column (or per-tensor) scales");
  }
  if (qu.cols() != qv.rows()) throw DimensionError("intmm: inner dimensions disagree");
  const int bits = std::max(qu.bits, qv.bits);
  if (qu.cols() > max_inner_dim(bits)) {
    throw ContractError("intmm: inner dimension " + std::to_string(qu.cols()) + " exceeds the 32-bit accumulator bound " +
                        std::to_string(max_inner_dim(bits)) + " for " + std::to_string(bits) + "-bit codes");
  }
}

}  // namespace

std::vector<std::int64_t> intmm_integer(const QuantizedTensor& qu, const QuantizedTensor& qv) {
  check_operands(qu, qv);
  const std::size_t n = qu.rows(), k = qu.cols(), m = qv.cols();
  const std::uint8_t* a = qu.codes.data();
  const std::uint8_t* b = qv.codes.data();

  std::vector<std::int32_t> col_sum_v(m, 0);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) col_sum_v[j] += b[p * m + j];

  std::vector<std::int64_t> out(n * m);
  std::vector<std::int32_t> acc(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0);
    std::int32_t row_sum_u = 0;
    for (std::size_t p = 0; p < k; ++p) {
      const std::int32_t av = a[i * k + p];
      row_sum_u += av;
      const std::uint8_t* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) acc[j] += av * static_cast<std::int32_t>(brow[j]);
    }
    const std::int64_t zu = qu.zero_points[qu.slice_index(i, 0)];
    for (std::size_t j = 0; j < m; ++j) {
      const std::int64_t zv = qv.zero_points[qv.slice_index(0, j)];
      out[i * m + j] = static_cast<std::int64_t>(acc[j]) - zu * col_sum_v[j] - static_cast<std::int64_t>(row_sum_u) * zv +
                       static_cast<std::int64_t>(k) * zu * zv;
    }
  }
  return out;
}

Tensor intmm(const QuantizedTensor& qu, const QuantizedTensor& qv) {
  std::vector<std::int64_t> ints = intmm_integer(qu, qv);
  const std::size_t n = qu.rows(), m = qv.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double su = qu.scales[qu.slice_index(i, 0)];
    for (std::size_t j = 0; j < m; ++j) {
      const double sv = qv.scales[qv.slice_index(0, j)];
      out[i * m + j] = static_cast<float>(static_cast<double>(ints[i * m + j]) / (su * sv));
    }
  }
  return out;
}

}  // namespace w4a4
