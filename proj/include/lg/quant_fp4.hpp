#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lg/error.hpp"

namespace lg {

// IEEE-754 binary16 bit pattern: 1 sign, 5 exponent, 10 fraction bits.
struct Half {
    std::uint16_t bits = 0;

    bool operator==(const Half&) const = default;
};

// Round-to-nearest-even narrowing. Overflow goes to infinity; NaN payloads
// keep their top 10 fraction bits.
Half f32_to_f16(float x);
// Exact widening.
float f16_to_f32(Half h);

enum class QuantScheme : std::uint8_t { E0M4 = 0, Int4 = 1 };

const char* quant_scheme_name(QuantScheme scheme);

// One quantized group: 4-bit codes packed two per byte (low nibble first)
// plus the affine coefficients that map codes back to the original range.
struct QuantGroupE0M4 {
    std::vector<std::uint8_t> codes;
    std::uint32_t count = 0;  // elements in this group
    float scale = 1.0f;
    Half bias;
};

struct QuantGroupInt4 {
    std::vector<std::uint8_t> codes;
    std::uint32_t count = 0;
    float min = 0.0f;
    float step = 1.0f;
};

// Group-quantized [K, N] matrix. Groups run along K (the reduction axis),
// one group per (k-block, column) pair, ordered k-block-major.
struct QuantizedWeight {
    QuantScheme scheme = QuantScheme::E0M4;
    int n_exp = 1;  // E0M4 exponent parameter, 1 or 2
    std::uint32_t group_size = 128;
    std::uint32_t k = 0;
    std::uint32_t n = 0;
    std::vector<QuantGroupE0M4> groups_e0m4;
    std::vector<QuantGroupInt4> groups_int4;

    std::size_t group_rows() const { return (k + group_size - 1) / group_size; }
};

std::uint8_t get_nibble(std::span<const std::uint8_t> codes, std::size_t index);
void set_nibble(std::vector<std::uint8_t>& codes, std::size_t index, std::uint8_t value);

// E0M4: affine-map the group into [2^n, 2^(n+1) - eps], narrow to binary16
// and keep the top four fraction bits (with one extra bit for rounding).
QuantGroupE0M4 quantize_e0m4(std::span<const float> group, int n_exp);
// Dequantization bit stage: (n+15)<<10 | code<<6, reinterpreted as binary16.
Half e0m4_code_to_half(std::uint8_t code, int n_exp);
std::vector<float> dequantize_e0m4(const QuantGroupE0M4& group, int n_exp);

QuantGroupInt4 quantize_int4(std::span<const float> group);
std::vector<float> dequantize_int4(const QuantGroupInt4& group);

// Allocation-free variants writing element i to out[i * stride].
void dequantize_e0m4_into(const QuantGroupE0M4& group, int n_exp, float* out, std::size_t stride);
void dequantize_int4_into(const QuantGroupInt4& group, float* out, std::size_t stride);

// Whole-matrix quantization; column-major groups along K. `weights` is the
// row-major [K, N] payload.
QuantizedWeight quantize_weight(std::span<const float> weights, std::uint32_t k, std::uint32_t n,
                                QuantScheme scheme, std::uint32_t group_size, int n_exp);
std::vector<float> dequantize_weight(const QuantizedWeight& qw);

struct MaeReport {
    double mae_fp4 = 0.0;
    double mae_int4 = 0.0;
    std::optional<double> ratio;  // absent when mae_int4 == 0
};

MaeReport mae_compare(std::span<const float> weights, std::uint32_t k, std::uint32_t n,
                      std::uint32_t group_size, int n_exp);

// "LGQ1" stream format for one matrix.
void pack_weight(const QuantizedWeight& qw, std::ostream& out);
QuantizedWeight unpack_weight(std::istream& in);

std::vector<std::uint8_t> pack_weight_bytes(const QuantizedWeight& qw);
QuantizedWeight unpack_weight_bytes(std::span<const std::uint8_t> bytes);

}  // namespace lg
