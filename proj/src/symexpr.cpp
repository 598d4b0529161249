#include "lg/symexpr.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace lg {

Monomial Monomial::operator*(const Monomial& other) const {
    Monomial out;
    auto a = factors_.begin();
    auto b = other.factors_.begin();
    while (a != factors_.end() || b != other.factors_.end()) {
        if (b == other.factors_.end() || (a != factors_.end() && a->first < b->first)) {
            out.factors_.push_back(*a++);
        } else if (a == factors_.end() || b->first < a->first) {
            out.factors_.push_back(*b++);
        } else {
            out.factors_.emplace_back(a->first, a->second + b->second);
            ++a;
            ++b;
        }
    }
    return out;
}

std::optional<Monomial> Monomial::divide(const Monomial& other) const {
    Monomial out;
    auto a = factors_.begin();
    for (const auto& [name, power] : other.factors_) {
        while (a != factors_.end() && a->first < name) out.factors_.push_back(*a++);
        if (a == factors_.end() || a->first != name || a->second < power) return std::nullopt;
        if (a->second > power) out.factors_.emplace_back(a->first, a->second - power);
        ++a;
    }
    while (a != factors_.end()) out.factors_.push_back(*a++);
    return out;
}

bool Monomial::lex_less(const Monomial& a, const Monomial& b) {
    auto ia = a.factors_.begin();
    auto ib = b.factors_.begin();
    while (ia != a.factors_.end() || ib != b.factors_.end()) {
        if (ia == a.factors_.end()) return true;   // a has exponent 0 here, b > 0
        if (ib == b.factors_.end()) return false;
        if (ia->first != ib->first) {
            // The alphabetically earlier symbol has a positive exponent in
            // exactly one monomial; that monomial is lex-greater.
            return ib->first < ia->first;
        }
        if (ia->second != ib->second) return ia->second < ib->second;
        ++ia;
        ++ib;
    }
    return false;
}

const char* compare_result_name(CompareResult r) {
    switch (r) {
        case CompareResult::Equal: return "Equal";
        case CompareResult::ProvablyLE: return "ProvablyLE";
        case CompareResult::ProvablyGE: return "ProvablyGE";
        case CompareResult::Unknown: return "Unknown";
    }
    return "Unknown";
}

SymExpr SymExpr::constant(std::int64_t value) {
    SymExpr e;
    if (value != 0) e.terms_[Monomial()] = value;
    return e;
}

SymExpr SymExpr::symbol(const std::string& name) {
    SymExpr e;
    e.terms_[Monomial(name)] = 1;
    return e;
}

bool SymExpr::is_constant() const {
    return terms_.empty() || (terms_.size() == 1 && terms_.begin()->first.is_unit());
}

std::int64_t SymExpr::constant_value() const {
    auto it = terms_.find(Monomial());
    return it == terms_.end() ? 0 : it->second;
}

bool SymExpr::all_coefficients_nonnegative() const {
    return std::all_of(terms_.begin(), terms_.end(), [](const auto& t) { return t.second >= 0; });
}

bool SymExpr::all_coefficients_nonpositive() const {
    return std::all_of(terms_.begin(), terms_.end(), [](const auto& t) { return t.second <= 0; });
}

std::set<std::string> SymExpr::symbols() const {
    std::set<std::string> out;
    for (const auto& [mono, coeff] : terms_) {
        for (const auto& [name, power] : mono.factors()) out.insert(name);
    }
    return out;
}

void SymExpr::add_term(const Monomial& m, std::int64_t coeff) {
    if (coeff == 0) return;
    auto it = terms_.find(m);
    if (it == terms_.end()) {
        terms_[m] = coeff;
    } else if ((it->second += coeff) == 0) {
        terms_.erase(it);
    }
}

SymExpr SymExpr::operator+(const SymExpr& other) const {
    SymExpr out = *this;
    for (const auto& [m, c] : other.terms_) out.add_term(m, c);
    return out;
}

SymExpr SymExpr::operator-(const SymExpr& other) const {
    SymExpr out = *this;
    for (const auto& [m, c] : other.terms_) out.add_term(m, -c);
    return out;
}

SymExpr SymExpr::operator*(const SymExpr& other) const {
    SymExpr out;
    for (const auto& [ma, ca] : terms_) {
        for (const auto& [mb, cb] : other.terms_) out.add_term(ma * mb, ca * cb);
    }
    return out;
}

SymExpr SymExpr::operator-() const {
    return SymExpr() - *this;
}

std::optional<SymExpr> SymExpr::div_exact(const SymExpr& divisor) const {
    if (divisor.is_zero()) fail(ErrorKind::ZeroDivisor, "division by the zero polynomial");
    // Multivariate exact division under lex order. Terminates because lex is
    // a well-order on monomials; any non-exact step bails out.
    auto leading = [](const SymExpr& e) {
        auto best = e.terms_.begin();
        for (auto it = std::next(best); it != e.terms_.end(); ++it) {
            if (Monomial::lex_less(best->first, it->first)) best = it;
        }
        return best;
    };
    const auto lead_b = leading(divisor);
    SymExpr quotient;
    SymExpr rest = *this;
    while (!rest.is_zero()) {
        const auto lead_r = leading(rest);
        auto mono_q = lead_r->first.divide(lead_b->first);
        if (!mono_q || lead_r->second % lead_b->second != 0) return std::nullopt;
        SymExpr term;
        term.terms_[*mono_q] = lead_r->second / lead_b->second;
        quotient = quotient + term;
        rest = rest - term * divisor;
    }
    return quotient;
}

std::int64_t SymExpr::evaluate(const std::map<std::string, std::int64_t>& bindings) const {
    std::int64_t total = 0;
    for (const auto& [mono, coeff] : terms_) {
        std::int64_t value = coeff;
        for (const auto& [name, power] : mono.factors()) {
            auto it = bindings.find(name);
            if (it == bindings.end()) fail(ErrorKind::UnboundSymbol, "symbol '" + name + "' is not bound");
            for (int i = 0; i < power; ++i) value *= it->second;
        }
        total += value;
    }
    return total;
}

std::string SymExpr::to_string() const {
    if (terms_.empty()) return "0";
    std::ostringstream out;
    bool first = true;
    // Reverse map order puts higher monomials first and the constant last,
    // e.g. "sumN - N" and "4096*N + 64".
    for (auto it = terms_.rbegin(); it != terms_.rend(); ++it) {
        const auto& [mono, coeff] = *it;
        std::int64_t magnitude = coeff;
        if (first) {
            if (coeff < 0) {
                out << "-";
                magnitude = -coeff;
            }
            first = false;
        } else {
            out << (coeff < 0 ? " - " : " + ");
            magnitude = coeff < 0 ? -coeff : coeff;
        }
        bool need_star = false;
        if (magnitude != 1 || mono.is_unit()) {
            out << magnitude;
            need_star = true;
        }
        for (const auto& [name, power] : mono.factors()) {
            for (int i = 0; i < power; ++i) {
                if (need_star) out << "*";
                out << name;
                need_star = true;
            }
        }
    }
    return out.str();
}

namespace {

class Parser {
public:
    explicit Parser(std::string_view text) : text_(text) {}

    SymExpr run() {
        SymExpr e = expr();
        skip_ws();
        if (pos_ != text_.size()) error("unexpected trailing input");
        return e;
    }

private:
    SymExpr expr() {
        skip_ws();
        bool negate = false;
        if (peek() == '+' || peek() == '-') {
            negate = peek() == '-';
            ++pos_;
        }
        SymExpr acc = term();
        if (negate) acc = -acc;
        for (;;) {
            skip_ws();
            char c = peek();
            if (c != '+' && c != '-') break;
            ++pos_;
            SymExpr rhs = term();
            acc = c == '+' ? acc + rhs : acc - rhs;
        }
        return acc;
    }

    SymExpr term() {
        SymExpr acc = factor();
        for (;;) {
            skip_ws();
            if (peek() == '/') error("division is not part of the expression grammar");
            if (peek() != '*') break;
            ++pos_;
            acc = acc * factor();
        }
        return acc;
    }

    SymExpr factor() {
        skip_ws();
        char c = peek();
        if (c == '(') {
            ++pos_;
            SymExpr inner = expr();
            skip_ws();
            if (peek() != ')') error("expected ')'");
            ++pos_;
            return inner;
        }
        if (std::isdigit(static_cast<unsigned char>(c))) {
            std::int64_t value = 0;
            std::size_t start = pos_;
            while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
                std::int64_t digit = text_[pos_] - '0';
                if (value > (INT64_MAX - digit) / 10) error_at(start, "integer literal overflows int64");
                value = value * 10 + digit;
                ++pos_;
            }
            return SymExpr::constant(value);
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t start = pos_;
            while (pos_ < text_.size()) {
                char s = text_[pos_];
                if (!std::isalnum(static_cast<unsigned char>(s)) && s != '_') break;
                ++pos_;
            }
            return SymExpr::symbol(std::string(text_.substr(start, pos_ - start)));
        }
        error(c == '\0' ? "unexpected end of input" : "unexpected character");
    }

    char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    [[noreturn]] void error(const std::string& message) { error_at(pos_, message); }

    [[noreturn]] void error_at(std::size_t offset, const std::string& message) {
        fail(ErrorKind::Syntax, message + " at byte " + std::to_string(offset));
    }

    std::string_view text_;
    std::size_t pos_ = 0;
};

}  // namespace

SymExpr SymExpr::parse(std::string_view text) {
    return Parser(text).run();
}

CompareResult compare(const SymExpr& a, const SymExpr& b) {
    const SymExpr diff = a - b;
    if (diff.is_zero()) return CompareResult::Equal;
    if (diff.all_coefficients_nonnegative()) return CompareResult::ProvablyGE;
    if (diff.all_coefficients_nonpositive()) return CompareResult::ProvablyLE;
    // Division route. A quotient q >= 1 proves a >= b only when the divisor
    // is itself provably nonnegative, so sign-indefinite divisors stay
    // Unknown.
    auto ge_by_division = [](const SymExpr& num, const SymExpr& den) {
        if (den.is_zero() || !den.all_coefficients_nonnegative()) return false;
        auto q = num.div_exact(den);
        return q && q->all_coefficients_nonnegative() && q->constant_value() >= 1;
    };
    if (ge_by_division(a, b)) return CompareResult::ProvablyGE;
    if (ge_by_division(b, a)) return CompareResult::ProvablyLE;
    return CompareResult::Unknown;
}

}  // namespace lg
