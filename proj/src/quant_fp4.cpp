#include "lg/quant_fp4.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace lg {

namespace {

constexpr std::uint16_t kHalfFracMask = 0x3FF;

float ldexp2i(int e) { return std::ldexp(1.0f, e); }

}  // namespace

Half f32_to_f16(float x) {
    const std::uint32_t u = std::bit_cast<std::uint32_t>(x);
    const std::uint16_t sign = static_cast<std::uint16_t>((u >> 16) & 0x8000u);
    const std::uint32_t exp = (u >> 23) & 0xFFu;
    const std::uint32_t frac = u & 0x7FFFFFu;

    if (exp == 0xFFu) {  // infinity or NaN
        if (frac == 0) return {static_cast<std::uint16_t>(sign | 0x7C00u)};
        std::uint16_t payload = static_cast<std::uint16_t>(frac >> 13);
        if (payload == 0) payload = 0x200;
        return {static_cast<std::uint16_t>(sign | 0x7C00u | payload)};
    }
    if (exp == 0) return {sign};  // f32 subnormals are far below half subnormal range

    const int e = static_cast<int>(exp) - 127;
    if (e >= 16) return {static_cast<std::uint16_t>(sign | 0x7C00u)};

    if (e >= -14) {
        // Normal half range; round to nearest even on the 13 dropped bits.
        std::uint32_t mant = frac >> 13;
        const std::uint32_t guard = (frac >> 12) & 1u;
        const std::uint32_t sticky = frac & 0xFFFu;
        if (guard && (sticky || (mant & 1u))) ++mant;
        const std::uint32_t bits = (static_cast<std::uint32_t>(e + 15) << 10) + mant;
        if (bits >= 0x7C00u) return {static_cast<std::uint16_t>(sign | 0x7C00u)};
        return {static_cast<std::uint16_t>(sign | bits)};
    }

    // Subnormal half: count in units of 2^-24.
    const int shift = -e - 1;  // >= 14
    if (shift > 24) return {sign};
    const std::uint32_t mag = 0x800000u | frac;
    std::uint32_t q = mag >> shift;
    const std::uint32_t rem = mag & ((1u << shift) - 1u);
    const std::uint32_t half_point = 1u << (shift - 1);
    if (rem > half_point || (rem == half_point && (q & 1u))) ++q;
    return {static_cast<std::uint16_t>(sign | q)};
}

float f16_to_f32(Half h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h.bits & 0x8000u) << 16;
    const std::uint32_t exp = (h.bits >> 10) & 0x1Fu;
    const std::uint32_t frac = h.bits & kHalfFracMask;
    std::uint32_t bits;
    if (exp == 0) {
        if (frac == 0) {
            bits = sign;
        } else {
            std::uint32_t f = frac;
            int s = 0;
            while (!(f & 0x400u)) {
                f <<= 1;
                ++s;
            }
            bits = sign | (static_cast<std::uint32_t>(113 - s) << 23) | ((f & kHalfFracMask) << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7F800000u | (frac << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (frac << 13);
    }
    return std::bit_cast<float>(bits);
}

const char* quant_scheme_name(QuantScheme scheme) {
    return scheme == QuantScheme::E0M4 ? "e0m4" : "int4";
}

std::uint8_t get_nibble(std::span<const std::uint8_t> codes, std::size_t index) {
    const std::uint8_t byte = codes[index / 2];
    return (index % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
}

void set_nibble(std::vector<std::uint8_t>& codes, std::size_t index, std::uint8_t value) {
    if (index % 2 == 0) {
        codes[index / 2] = static_cast<std::uint8_t>((codes[index / 2] & 0xF0) | (value & 0x0F));
    } else {
        codes[index / 2] = static_cast<std::uint8_t>((codes[index / 2] & 0x0F) | (value << 4));
    }
}

namespace {

void check_group(std::span<const float> group) {
    if (group.empty()) fail(ErrorKind::ConfigError, "empty quantization group");
    for (float v : group) {
        if (!std::isfinite(v)) fail(ErrorKind::NonFinite, "non-finite element in quantization group");
    }
}

}  // namespace

QuantGroupE0M4 quantize_e0m4(std::span<const float> group, int n_exp) {
    if (n_exp != 1 && n_exp != 2) fail(ErrorKind::ConfigError, "E0M4 exponent parameter must be 1 or 2");
    check_group(group);

    const auto [lo_it, hi_it] = std::minmax_element(group.begin(), group.end());
    const float lo = *lo_it;
    const float hi = *hi_it;
    const float range_low = ldexp2i(n_exp);
    const float eps = ldexp2i(n_exp - 9);
    const float range_high = ldexp2i(n_exp + 1) - eps;
    const bool straddles_zero = lo <= 0.0f && 0.0f <= hi;

    QuantGroupE0M4 out;
    out.count = static_cast<std::uint32_t>(group.size());
    out.codes.assign((group.size() + 1) / 2, 0);

    if (hi == lo) {
        out.scale = 1.0f;
        out.bias = f32_to_f16(range_low - lo);
        if (straddles_zero) out.bias.bits &= ~std::uint16_t(0x3F);
        return out;  // all codes zero
    }

    out.scale = (range_high - range_low) / (hi - lo);
    out.bias = f32_to_f16(range_low - lo * out.scale);
    // Zeroing the fraction bits below the stored four puts the bias on the
    // code grid, which is what makes exact zeros survive the round trip.
    if (straddles_zero) out.bias.bits &= ~std::uint16_t(0x3F);
    const float bias = f16_to_f32(out.bias);

    for (std::size_t i = 0; i < group.size(); ++i) {
        float mapped = group[i] * out.scale + bias;
        mapped = std::clamp(mapped, range_low, range_high);
        const Half h = f32_to_f16(mapped);
        const std::uint16_t frac = h.bits & kHalfFracMask;
        const std::uint16_t kept = frac >> 6;
        const std::uint16_t round_bit = (frac >> 5) & 1;
        set_nibble(out.codes, i, static_cast<std::uint8_t>(std::min<std::uint16_t>(kept + round_bit, 15)));
    }
    return out;
}

Half e0m4_code_to_half(std::uint8_t code, int n_exp) {
    const std::uint16_t exp_bin_part = static_cast<std::uint16_t>((n_exp + 15) << 10);
    return Half{static_cast<std::uint16_t>(exp_bin_part | (code << 6))};
}

std::vector<float> dequantize_e0m4(const QuantGroupE0M4& group, int n_exp) {
    std::vector<float> out(group.count);
    const float bias = f16_to_f32(group.bias);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float mapped = f16_to_f32(e0m4_code_to_half(get_nibble(group.codes, i), n_exp));
        out[i] = (mapped - bias) / group.scale;
    }
    return out;
}

QuantGroupInt4 quantize_int4(std::span<const float> group) {
    check_group(group);
    const auto [lo_it, hi_it] = std::minmax_element(group.begin(), group.end());
    QuantGroupInt4 out;
    out.count = static_cast<std::uint32_t>(group.size());
    out.codes.assign((group.size() + 1) / 2, 0);
    out.min = *lo_it;
    out.step = (*hi_it == *lo_it) ? 1.0f : (*hi_it - *lo_it) / 15.0f;
    for (std::size_t i = 0; i < group.size(); ++i) {
        const float q = std::nearbyintf((group[i] - out.min) / out.step);
        set_nibble(out.codes, i, static_cast<std::uint8_t>(std::clamp(q, 0.0f, 15.0f)));
    }
    return out;
}

std::vector<float> dequantize_int4(const QuantGroupInt4& group) {
    std::vector<float> out(group.count);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = group.min + static_cast<float>(get_nibble(group.codes, i)) * group.step;
    }
    return out;
}

void dequantize_e0m4_into(const QuantGroupE0M4& group, int n_exp, float* out, std::size_t stride) {
    const float bias = f16_to_f32(group.bias);
    for (std::size_t i = 0; i < group.count; ++i) {
        const float mapped = f16_to_f32(e0m4_code_to_half(get_nibble(group.codes, i), n_exp));
        out[i * stride] = (mapped - bias) / group.scale;
    }
}

void dequantize_int4_into(const QuantGroupInt4& group, float* out, std::size_t stride) {
    for (std::size_t i = 0; i < group.count; ++i) {
        out[i * stride] = group.min + static_cast<float>(get_nibble(group.codes, i)) * group.step;
    }
}

QuantizedWeight quantize_weight(std::span<const float> weights, std::uint32_t k, std::uint32_t n,
                                QuantScheme scheme, std::uint32_t group_size, int n_exp) {
    if (group_size == 0) fail(ErrorKind::ConfigError, "group_size must be positive");
    if (weights.size() != static_cast<std::size_t>(k) * n) {
        fail(ErrorKind::ShapeMismatch, "weight payload does not match [K, N]");
    }
    QuantizedWeight out;
    out.scheme = scheme;
    out.n_exp = n_exp;
    out.group_size = group_size;
    out.k = k;
    out.n = n;

    std::vector<float> column(group_size);
    for (std::uint32_t kb = 0; kb < k; kb += group_size) {
        const std::uint32_t rows = std::min(group_size, k - kb);
        for (std::uint32_t col = 0; col < n; ++col) {
            for (std::uint32_t r = 0; r < rows; ++r) {
                column[r] = weights[static_cast<std::size_t>(kb + r) * n + col];
            }
            std::span<const float> g(column.data(), rows);
            if (scheme == QuantScheme::E0M4) {
                out.groups_e0m4.push_back(quantize_e0m4(g, n_exp));
            } else {
                out.groups_int4.push_back(quantize_int4(g));
            }
        }
    }
    return out;
}

std::vector<float> dequantize_weight(const QuantizedWeight& qw) {
    std::vector<float> out(static_cast<std::size_t>(qw.k) * qw.n);
    std::size_t gi = 0;
    for (std::uint32_t kb = 0; kb < qw.k; kb += qw.group_size) {
        for (std::uint32_t col = 0; col < qw.n; ++col, ++gi) {
            const std::vector<float> values = qw.scheme == QuantScheme::E0M4
                                                  ? dequantize_e0m4(qw.groups_e0m4[gi], qw.n_exp)
                                                  : dequantize_int4(qw.groups_int4[gi]);
            for (std::size_t r = 0; r < values.size(); ++r) {
                out[(kb + r) * qw.n + col] = values[r];
            }
        }
    }
    return out;
}

MaeReport mae_compare(std::span<const float> weights, std::uint32_t k, std::uint32_t n,
                      std::uint32_t group_size, int n_exp) {
    const QuantizedWeight fp4 = quantize_weight(weights, k, n, QuantScheme::E0M4, group_size, n_exp);
    const QuantizedWeight int4 = quantize_weight(weights, k, n, QuantScheme::Int4, group_size, n_exp);
    const std::vector<float> fp4_back = dequantize_weight(fp4);
    const std::vector<float> int4_back = dequantize_weight(int4);

    MaeReport report;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        report.mae_fp4 += std::abs(static_cast<double>(weights[i]) - fp4_back[i]);
        report.mae_int4 += std::abs(static_cast<double>(weights[i]) - int4_back[i]);
    }
    report.mae_fp4 /= static_cast<double>(weights.size());
    report.mae_int4 /= static_cast<double>(weights.size());
    if (report.mae_int4 != 0.0) report.ratio = report.mae_fp4 / report.mae_int4;
    return report;
}

namespace {

template <typename T>
void write_le(std::ostream& out, T value) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    std::uint8_t buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!in) fail(ErrorKind::TruncatedStream, "quantized weight stream ended early");
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

}  // namespace

void pack_weight(const QuantizedWeight& qw, std::ostream& out) {
    out.write("LGQ1", 4);
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(qw.scheme));
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(qw.n_exp));
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(qw.group_size));
    write_le<std::uint32_t>(out, qw.k);
    write_le<std::uint32_t>(out, qw.n);
    if (qw.scheme == QuantScheme::E0M4) {
        for (const auto& g : qw.groups_e0m4) {
            out.write(reinterpret_cast<const char*>(g.codes.data()),
                      static_cast<std::streamsize>(g.codes.size()));
            write_le<float>(out, g.scale);
            write_le<std::uint16_t>(out, g.bias.bits);
        }
    } else {
        for (const auto& g : qw.groups_int4) {
            out.write(reinterpret_cast<const char*>(g.codes.data()),
                      static_cast<std::streamsize>(g.codes.size()));
            write_le<float>(out, g.min);
            write_le<float>(out, g.step);
        }
    }
}

QuantizedWeight unpack_weight(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "LGQ1", 4) != 0) {
        fail(ErrorKind::BadMagic, "not a quantized weight stream (expected LGQ1)");
    }
    QuantizedWeight qw;
    const auto scheme = read_le<std::uint8_t>(in);
    if (scheme > 1) fail(ErrorKind::SchemeUnsupported, "unknown quantization scheme tag");
    qw.scheme = static_cast<QuantScheme>(scheme);
    qw.n_exp = read_le<std::uint8_t>(in);
    qw.group_size = read_le<std::uint16_t>(in);
    qw.k = read_le<std::uint32_t>(in);
    qw.n = read_le<std::uint32_t>(in);
    if (qw.group_size == 0 || qw.k == 0 || qw.n == 0) {
        fail(ErrorKind::SchemaError, "quantized weight header has zero dimension");
    }
    for (std::uint32_t kb = 0; kb < qw.k; kb += qw.group_size) {
        const std::uint32_t rows = std::min(qw.group_size, qw.k - kb);
        for (std::uint32_t col = 0; col < qw.n; ++col) {
            std::vector<std::uint8_t> codes((rows + 1) / 2);
            in.read(reinterpret_cast<char*>(codes.data()), static_cast<std::streamsize>(codes.size()));
            if (!in) fail(ErrorKind::TruncatedStream, "quantized weight stream ended early");
            if (qw.scheme == QuantScheme::E0M4) {
                QuantGroupE0M4 g;
                g.codes = std::move(codes);
                g.count = rows;
                g.scale = read_le<float>(in);
                g.bias.bits = read_le<std::uint16_t>(in);
                qw.groups_e0m4.push_back(std::move(g));
            } else {
                QuantGroupInt4 g;
                g.codes = std::move(codes);
                g.count = rows;
                g.min = read_le<float>(in);
                g.step = read_le<float>(in);
                qw.groups_int4.push_back(std::move(g));
            }
        }
    }
    return qw;
}

std::vector<std::uint8_t> pack_weight_bytes(const QuantizedWeight& qw) {
    std::ostringstream out(std::ios::binary);
    pack_weight(qw, out);
    const std::string s = out.str();
    return {s.begin(), s.end()};
}

QuantizedWeight unpack_weight_bytes(std::span<const std::uint8_t> bytes) {
    std::istringstream in(std::string(bytes.begin(), bytes.end()), std::ios::binary);
    return unpack_weight(in);
}

}  // namespace lg
