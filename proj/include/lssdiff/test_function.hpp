#pragma once

#include <charconv>
#include <cmath>
#include <complex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lssdiff/error.hpp"

namespace lssdiff {

using cplx = std::complex<double>;

/// Test function f of a linear spectral statistic: a real polynomial or log.
/// log uses the principal branch, so contours must stay right of the origin.
class TestFunction {
 public:
  enum class Kind { poly, log };

  static TestFunction polynomial(std::vector<double> coefficients, std::string description = "") {
    if (coefficients.empty()) coefficients.push_back(0.0);
    for (double c : coefficients)
      if (!std::isfinite(c)) throw InvalidArgument("polynomial coefficients must be finite");
    TestFunction f;
    f.kind_ = Kind::poly;
    f.coeffs_ = std::move(coefficients);
    f.description_ = description.empty() ? describe(f.coeffs_) : std::move(description);
    return f;
  }
  static TestFunction monomial(int degree) {
    std::vector<double> c(static_cast<std::size_t>(degree) + 1, 0.0);
    c.back() = 1.0;
    return polynomial(std::move(c));
  }
  static TestFunction logarithm() {
    TestFunction f;
    f.kind_ = Kind::log;
    f.description_ = "log";
    return f;
  }

  /// Accepts "x", "x^k", "log", "poly:c0,c1,...".
  static TestFunction parse(const std::string& text) {
    if (text == "log") return logarithm();
    if (text == "x") return monomial(1);
    if (text.rfind("x^", 0) == 0) {
      try {
        std::size_t used = 0;
        const int k = std::stoi(text.substr(2), &used);
        if (used == text.size() - 2 && k >= 0 && k <= 64) return monomial(k);
      } catch (const std::exception&) {
      }
      throw InvalidArgument("bad monomial '" + text + "'");
    }
    if (text.rfind("poly:", 0) == 0) {
      std::vector<double> c;
      std::stringstream ss(text.substr(5));
      std::string item;
      while (std::getline(ss, item, ',')) {
        try {
          std::size_t used = 0;
          c.push_back(std::stod(item, &used));
          if (used != item.size()) throw InvalidArgument("");
        } catch (const std::exception&) {
          throw InvalidArgument("bad polynomial coefficient '" + item + "' in '" + text + "'");
        }
      }
      if (c.empty()) throw InvalidArgument("empty polynomial '" + text + "'");
      return polynomial(std::move(c));
    }
    throw InvalidArgument("unknown test function '" + text + "'");
  }

  Kind kind() const { return kind_; }
  bool is_log() const { return kind_ == Kind::log; }
  const std::vector<double>& coefficients() const { return coeffs_; }
  const std::string& description() const { return description_; }

  /// Polynomial degree; -1 for log.
  int degree() const { return is_log() ? -1 : static_cast<int>(coeffs_.size()) - 1; }

  double operator()(double x) const {
    if (is_log()) {
      if (!(x > 0.0))
        throw DomainError("log test function evaluated at non-positive value " + std::to_string(x));
      return std::log(x);
    }
    double acc = 0.0;
    for (auto it = coeffs_.rbegin(); it != coeffs_.rend(); ++it) acc = acc * x + *it;
    return acc;
  }

  cplx operator()(cplx z) const {
    if (is_log()) return std::log(z);
    cplx acc = 0.0;
    for (auto it = coeffs_.rbegin(); it != coeffs_.rend(); ++it) acc = acc * z + *it;
    return acc;
  }

  cplx derivative(cplx z) const {
    if (is_log()) return 1.0 / z;
    cplx acc = 0.0;
    for (std::size_t k = coeffs_.size(); k-- > 1;) acc = acc * z + static_cast<double>(k) * coeffs_[k];
    return acc;
  }

  std::optional<double> value_at_zero() const {
    if (is_log()) return std::nullopt;
    return coeffs_.front();
  }

 private:
  static std::string describe(const std::vector<double>& c) {
    std::size_t nonzero = 0, last = 0;
    for (std::size_t k = 0; k < c.size(); ++k)
      if (c[k] != 0.0) ++nonzero, last = k;
    if (nonzero == 1 && c[last] == 1.0) {
      if (last == 0) return "1";
      if (last == 1) return "x";
      return "x^" + std::to_string(last);
    }
    // shortest form that parses back to the same doubles
    std::string out = "poly:";
    char buf[32];
    for (std::size_t k = 0; k < c.size(); ++k) {
      const auto res = std::to_chars(buf, buf + sizeof buf, c[k]);
      if (k) out += ',';
      out.append(buf, res.ptr);
    }
    return out;
  }

  Kind kind_ = Kind::poly;
  std::vector<double> coeffs_;
  std::string description_;
};

}  // namespace lssdiff
