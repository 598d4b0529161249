#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "lg/error.hpp"

namespace lg {

// Product of symbols with positive integer powers. The empty monomial is the
// constant term. Pairs are kept sorted by symbol name.
class Monomial {
public:
    Monomial() = default;
    explicit Monomial(const std::string& symbol) : factors_{{symbol, 1}} {}

    bool is_unit() const { return factors_.empty(); }
    const std::vector<std::pair<std::string, int>>& factors() const { return factors_; }

    Monomial operator*(const Monomial& other) const;
    // Exact monomial quotient; nullopt when some power of `other` exceeds ours.
    std::optional<Monomial> divide(const Monomial& other) const;

    bool operator==(const Monomial& other) const { return factors_ == other.factors_; }
    bool operator<(const Monomial& other) const { return factors_ < other.factors_; }

    // Lexicographic order over the merged symbol universe, compatible with
    // monomial multiplication (used by exact division).
    static bool lex_less(const Monomial& a, const Monomial& b);

private:
    std::vector<std::pair<std::string, int>> factors_;
};

enum class CompareResult { Equal, ProvablyLE, ProvablyGE, Unknown };

const char* compare_result_name(CompareResult r);

// Canonical multivariate polynomial with int64 coefficients over named
// dimension symbols. All symbols range over positive integers, which is the
// assumption behind compare(). Immutable value type.
class SymExpr {
public:
    SymExpr() = default;  // zero

    static SymExpr constant(std::int64_t value);
    static SymExpr symbol(const std::string& name);

    // Grammar: expr := ('+'|'-')? term (('+'|'-') term)*
    //          term := factor ('*' factor)*
    //          factor := INT | SYMBOL | '(' expr ')'
    // Throws ErrorKind::Syntax with the byte offset of the offending char.
    static SymExpr parse(std::string_view text);

    bool is_zero() const { return terms_.empty(); }
    bool is_constant() const;
    // Constant term (0 when absent); total value only when is_constant().
    std::int64_t constant_value() const;

    bool all_coefficients_nonnegative() const;
    bool all_coefficients_nonpositive() const;

    std::set<std::string> symbols() const;

    SymExpr operator+(const SymExpr& other) const;
    SymExpr operator-(const SymExpr& other) const;
    SymExpr operator*(const SymExpr& other) const;
    SymExpr operator-() const;

    bool operator==(const SymExpr& other) const { return terms_ == other.terms_; }
    bool operator!=(const SymExpr& other) const { return !(*this == other); }
    bool operator<(const SymExpr& other) const { return terms_ < other.terms_; }

    // Exact polynomial quotient q with *this == q * divisor, nullopt when no
    // such q exists over integer coefficients. Throws ZeroDivisor.
    std::optional<SymExpr> div_exact(const SymExpr& divisor) const;

    // Exact integer evaluation; throws UnboundSymbol on a missing binding.
    std::int64_t evaluate(const std::map<std::string, std::int64_t>& bindings) const;

    std::string to_string() const;

    const std::map<Monomial, std::int64_t>& terms() const { return terms_; }

private:
    void add_term(const Monomial& m, std::int64_t coeff);

    std::map<Monomial, std::int64_t> terms_;
};

// Sound, deliberately incomplete size comparison under the positive-integer
// symbol domain: subtraction coefficient signs plus exact division.
CompareResult compare(const SymExpr& a, const SymExpr& b);

}  // namespace lg
