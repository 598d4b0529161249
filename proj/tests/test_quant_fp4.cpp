#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <vector>

#include "lg/quant_fp4.hpp"

using lg::Error;
using lg::ErrorKind;
using lg::Half;
using lg::QuantizedWeight;
using lg::QuantScheme;

namespace {

// Analytic binary16 value, independent of the conversion under test.
double half_value_oracle(std::uint16_t bits) {
    const int sign = (bits & 0x8000) ? -1 : 1;
    const int exp = (bits >> 10) & 0x1F;
    const int frac = bits & 0x3FF;
    if (exp == 0) return sign * std::ldexp(static_cast<double>(frac), -24);
    if (exp == 31) return frac == 0 ? sign * std::numeric_limits<double>::infinity()
                                    : std::numeric_limits<double>::quiet_NaN();
    return sign * std::ldexp(1.0 + frac / 1024.0, exp - 15);
}

// Brute-force round-to-nearest-even narrowing: scan every finite half.
std::uint16_t narrow_oracle(float x) {
    if (std::isnan(x)) return 0x7E00;
    const double dx = x;
    const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0x0000;
    if (std::isinf(x) || std::abs(dx) >= 65520.0) return sign | 0x7C00;
    std::uint16_t best = 0;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::uint32_t mag = 0; mag < 0x7C00; ++mag) {
        const std::uint16_t h = sign | static_cast<std::uint16_t>(mag);
        const double err = std::abs(half_value_oracle(h) - dx);
        if (err < best_err || (err == best_err && (h & 1) == 0)) {
            best_err = err;
            best = h;
        }
    }
    return best;
}

std::vector<float> gaussian(std::size_t count, float stddev, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    auto uniform = [&] { return (static_cast<double>(gen() >> 11) + 0.5) * 0x1p-53; };
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; i += 2) {
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        out[i] = static_cast<float>(r * std::cos(2.0 * M_PI * u2) * stddev);
        if (i + 1 < count) out[i + 1] = static_cast<float>(r * std::sin(2.0 * M_PI * u2) * stddev);
    }
    return out;
}

}  // namespace

TEST_CASE("binary16 narrowing fixed points") {
    CHECK(lg::f32_to_f16(1.0f).bits == 0x3C00);
    CHECK(lg::f32_to_f16(2.0f).bits == 0x4000);
    CHECK(lg::f32_to_f16(0.0f).bits == 0x0000);
    CHECK(lg::f32_to_f16(-0.0f).bits == 0x8000);
    CHECK(lg::f32_to_f16(65504.0f).bits == 0x7BFF);
    CHECK(lg::f32_to_f16(65520.0f).bits == 0x7C00);  // ties toward even -> infinity
    CHECK(lg::f32_to_f16(std::numeric_limits<float>::infinity()).bits == 0x7C00);
    CHECK(lg::f32_to_f16(-std::numeric_limits<float>::infinity()).bits == 0xFC00);
    CHECK(lg::f32_to_f16(1e10f).bits == 0x7C00);
}

TEST_CASE("binary16 widening matches the analytic value for every pattern") {
    for (std::uint32_t bits = 0; bits < 0x10000; ++bits) {
        const auto h = Half{static_cast<std::uint16_t>(bits)};
        const float widened = lg::f16_to_f32(h);
        if ((bits & 0x7C00) == 0x7C00 && (bits & 0x3FF) != 0) {
            CHECK(std::isnan(widened));
            continue;
        }
        CHECK(static_cast<double>(widened) == half_value_oracle(h.bits));
        if (bits == 0x8000) CHECK(std::signbit(widened));
    }
}

TEST_CASE("binary16 round trip is the identity on all 65536 patterns") {
    for (std::uint32_t bits = 0; bits < 0x10000; ++bits) {
        const auto h = Half{static_cast<std::uint16_t>(bits)};
        CHECK(lg::f32_to_f16(lg::f16_to_f32(h)).bits == h.bits);
    }
}

TEST_CASE("binary16 narrowing agrees with the brute-force nearest search") {
    std::mt19937_64 gen(7);
    std::vector<float> samples = {
        0.1f,      0.333333f, 65504.0f,  65519.9f, 65520.1f, 1.5e-7f, 5.96e-8f,
        2.98e-8f,  2.0e-8f,   1e-30f,    -0.1f,    3.0001f,  1024.03f, 0.00006103515625f,
        0.000061f, 6.1e-5f,   -6.09e-5f, 2048.5f,  2049.5f,
    };
    for (int i = 0; i < 400; ++i) {
        const int bucket = i % 4;
        double mag;
        const double u = (gen() >> 11) * 0x1p-53;
        if (bucket == 0) mag = u * 70000.0;         // across the overflow edge
        else if (bucket == 1) mag = u * 4.0;        // ordinary values
        else if (bucket == 2) mag = u * 1e-4;       // subnormal half territory
        else mag = u * 1e-7;                        // deep subnormals / flush to zero
        samples.push_back(static_cast<float>(gen() % 2 ? mag : -mag));
    }
    for (float x : samples) {
        CHECK(lg::f32_to_f16(x).bits == narrow_oracle(x));
    }
}

TEST_CASE("e0m4 dequantization bit contract over every code") {
    for (int n : {1, 2}) {
        for (std::uint8_t code = 0; code < 16; ++code) {
            const Half h = lg::e0m4_code_to_half(code, n);
            CHECK(h.bits == ((n + 15) << 10 | code << 6));
            CHECK(((h.bits >> 10) & 0x1F) == n + 15);
            CHECK((h.bits & 0x8000) == 0);
            // Reconstruction lands on 2^n * (1 + code/16).
            CHECK(lg::f16_to_f32(h) == std::ldexp(1.0f + code / 16.0f, n));
        }
    }
    CHECK(lg::e0m4_code_to_half(0, 1).bits == 0x4000);
    CHECK(lg::e0m4_code_to_half(15, 1).bits == 0x43C0);
    CHECK(lg::f16_to_f32(lg::e0m4_code_to_half(15, 1)) == 3.875f);
    CHECK(lg::f16_to_f32(lg::e0m4_code_to_half(8, 2)) == 6.0f);
}

TEST_CASE("e0m4 all-zero group reconstructs exact zeros") {
    const std::vector<float> zeros(128, 0.0f);
    const auto g = lg::quantize_e0m4(zeros, 1);
    CHECK(g.bias.bits == 0x4000);  // 2.0
    CHECK(g.scale == 1.0f);
    const auto back = lg::dequantize_e0m4(g, 1);
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i] == 0.0f);
        CHECK(lg::get_nibble(g.codes, i) == 0);
    }
}

TEST_CASE("e0m4 hand-traced {0, 1} group") {
    const std::vector<float> group = {0.0f, 1.0f};
    const auto g = lg::quantize_e0m4(group, 1);
    CHECK(lg::get_nibble(g.codes, 0) == 0);
    CHECK(lg::get_nibble(g.codes, 1) == 15);
    CHECK(g.scale == doctest::Approx(511.0 / 256.0).epsilon(1e-7));
    const auto back = lg::dequantize_e0m4(g, 1);
    CHECK(back[0] == 0.0f);
    // Saturation at the top of the range: code 15 reconstructs 3.875, and
    // (3.875 - 2) / (511/256) = 480/511.
    CHECK(back[1] == doctest::Approx(480.0 / 511.0).epsilon(1e-7));
}

TEST_CASE("e0m4 zero-straddling groups keep exact zeros") {
    std::mt19937_64 gen(99);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> group = gaussian(64, 0.5f, gen());
        group[static_cast<std::size_t>(gen() % group.size())] = 0.0f;
        for (int n : {1, 2}) {
            const auto g = lg::quantize_e0m4(group, n);
            CHECK((g.bias.bits & 0x3F) == 0);
            const auto back = lg::dequantize_e0m4(g, n);
            for (std::size_t i = 0; i < group.size(); ++i) {
                if (group[i] == 0.0f) CHECK(back[i] == 0.0f);
            }
        }
    }
}

TEST_CASE("e0m4 codes are monotone in the input") {
    std::mt19937_64 gen(17);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> group = gaussian(128, 0.1f, gen());
        std::sort(group.begin(), group.end());
        const auto g = lg::quantize_e0m4(group, 1 + static_cast<int>(gen() % 2));
        for (std::size_t i = 1; i < group.size(); ++i) {
            CHECK(lg::get_nibble(g.codes, i) >= lg::get_nibble(g.codes, i - 1));
        }
    }
}

TEST_CASE("int4 affine baseline") {
    const std::vector<float> group = {0.0f, 1.0f};
    const auto g = lg::quantize_int4(group);
    CHECK(lg::get_nibble(g.codes, 0) == 0);
    CHECK(lg::get_nibble(g.codes, 1) == 15);
    const auto back = lg::dequantize_int4(g);
    CHECK(back[0] == 0.0f);
    CHECK(back[1] == 1.0f);

    const std::vector<float> constant(16, 0.75f);
    const auto gc = lg::quantize_int4(constant);
    const auto backc = lg::dequantize_int4(gc);
    for (std::size_t i = 0; i < constant.size(); ++i) {
        CHECK(lg::get_nibble(gc.codes, i) == 0);
        CHECK(backc[i] == 0.75f);
    }

    // Error bound: at most half a step plus an ulp of slack.
    std::mt19937_64 gen(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::vector<float> random_group = gaussian(128, 0.2f, gen());
        const auto gq = lg::quantize_int4(random_group);
        const auto recon = lg::dequantize_int4(gq);
        for (std::size_t i = 0; i < random_group.size(); ++i) {
            CHECK(std::abs(recon[i] - random_group[i]) <= gq.step / 2 + 1e-6f);
        }
    }
}

TEST_CASE("int4 re-quantization of reconstructed values is stable") {
    std::mt19937_64 gen(31);
    for (int trial = 0; trial < 200; ++trial) {
        const std::vector<float> group = gaussian(128, 0.3f, gen());
        const auto g1 = lg::quantize_int4(group);
        const auto g2 = lg::quantize_int4(lg::dequantize_int4(g1));
        CHECK(g1.codes == g2.codes);
    }
}

// E0M4 is intentionally not a projection: code 15 reconstructs below the top
// of the quantization range, so re-quantizing reconstructed values stretches
// the interior codes back over the full range. This characterizes that.
TEST_CASE("e0m4 re-quantization re-spreads interior codes") {
    const std::vector<float> group = {0.0f, 0.5f, 1.0f};
    const auto g1 = lg::quantize_e0m4(group, 1);
    CHECK(lg::get_nibble(g1.codes, 0) == 0);
    CHECK(lg::get_nibble(g1.codes, 1) == 8);
    CHECK(lg::get_nibble(g1.codes, 2) == 15);
    const auto g2 = lg::quantize_e0m4(lg::dequantize_e0m4(g1, 1), 1);
    CHECK(lg::get_nibble(g2.codes, 0) == 0);
    CHECK(lg::get_nibble(g2.codes, 1) == 9);  // stretched by ~16/15
    CHECK(lg::get_nibble(g2.codes, 2) == 15);

    // The stable part of the round trip: extremes stay pinned and order is
    // preserved.
    std::mt19937_64 gen(71);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> values = gaussian(64, 0.4f, gen());
        const auto a = lg::quantize_e0m4(values, 1);
        const auto back = lg::dequantize_e0m4(a, 1);
        const auto b = lg::quantize_e0m4(back, 1);
        std::size_t lo = 0, hi = 0;
        for (std::size_t i = 1; i < values.size(); ++i) {
            if (values[i] < values[lo]) lo = i;
            if (values[i] > values[hi]) hi = i;
        }
        CHECK(lg::get_nibble(b.codes, lo) <= 1);
        CHECK(lg::get_nibble(b.codes, hi) == 15);
        for (std::size_t i = 0; i < values.size(); ++i) {
            for (std::size_t j = 0; j < values.size(); ++j) {
                if (back[i] < back[j]) {
                    CHECK(lg::get_nibble(b.codes, i) <= lg::get_nibble(b.codes, j));
                }
            }
        }
    }
}

TEST_CASE("non-finite inputs are rejected") {
    std::vector<float> group = {1.0f, std::numeric_limits<float>::quiet_NaN()};
    CHECK_THROWS_AS((void)lg::quantize_e0m4(group, 1), Error);
    CHECK_THROWS_AS((void)lg::quantize_int4(group), Error);
}

TEST_CASE("mae comparison on gaussian weights lands in the reported band") {
    const std::uint32_t k = 4096, n = 128;
    const auto weights = gaussian(static_cast<std::size_t>(k) * n, 0.02f, 12345);
    const auto report = lg::mae_compare(weights, k, n, 128, 1);
    REQUIRE(report.ratio.has_value());
    CHECK(*report.ratio > 0.93);
    CHECK(*report.ratio < 0.98);
}

// On uniform weights the fp4 grid-spacing advantage (~(M-m)/16 vs (M-m)/15)
// is offset by its top-of-range saturation: code 15 reconstructs about 6%
// below the group max, and a uniform distribution puts real mass there. The
// two schemes end up within a couple percent of each other; the clear fp4 win
// shows up on bell-shaped weights (see the gaussian case above).
TEST_CASE("mae of fp4 is on par with int4 on uniform weights") {
    std::mt19937_64 gen(55);
    std::vector<float> weights(128 * 64);
    for (auto& w : weights) {
        w = static_cast<float>((gen() >> 11) * 0x1p-53 * 2.0 - 1.0);
    }
    const auto report = lg::mae_compare(weights, 128, 64, 128, 1);
    REQUIRE(report.ratio.has_value());
    CHECK(*report.ratio > 0.90);
    CHECK(*report.ratio < 1.05);
}

TEST_CASE("mae ratio is omitted when int4 reconstructs exactly") {
    // Each column covers the exact int4 grid {0, 0.25, ..., 3.75}: the step
    // (3.75 / 15 = 0.25) and every reconstruction are exact in binary.
    const std::uint32_t k = 128, n = 2;
    std::vector<float> weights(static_cast<std::size_t>(k) * n);
    for (std::uint32_t r = 0; r < k; ++r) {
        for (std::uint32_t c = 0; c < n; ++c) {
            weights[r * n + c] = static_cast<float>((r + c) % 16) * 0.25f;
        }
    }
    const auto report = lg::mae_compare(weights, k, n, 128, 1);
    CHECK(report.mae_int4 == 0.0);
    CHECK(report.mae_fp4 > 0.0);
    CHECK_FALSE(report.ratio.has_value());
}

TEST_CASE("quantized weight pack/unpack round trip") {
    const std::uint32_t k = 130, n = 6;  // deliberately not divisible by the group size
    const auto weights = gaussian(static_cast<std::size_t>(k) * n, 0.1f, 777);
    for (QuantScheme scheme : {QuantScheme::E0M4, QuantScheme::Int4}) {
        const auto qw = lg::quantize_weight(weights, k, n, scheme, 128, 1);
        const auto bytes = lg::pack_weight_bytes(qw);
        const auto restored = lg::unpack_weight_bytes(bytes);
        CHECK(lg::pack_weight_bytes(restored) == bytes);
        CHECK(lg::dequantize_weight(restored) == lg::dequantize_weight(qw));

        auto truncated = bytes;
        truncated.resize(bytes.size() - 3);
        try {
            (void)lg::unpack_weight_bytes(truncated);
            FAIL("expected TruncatedStream");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::TruncatedStream);
        }
    }
    std::vector<std::uint8_t> garbage = {'n', 'o', 'p', 'e', 0, 0};
    try {
        (void)lg::unpack_weight_bytes(garbage);
        FAIL("expected BadMagic");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::BadMagic);
    }
}
