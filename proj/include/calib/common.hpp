#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace calib {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

// Control tokens shared by every task/model in this project.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kNumControlTokens = 4;

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using RowMatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised on any precondition/configuration violation. The CLI maps these to
/// exit code 1 with a machine-parsable E_VALIDATION line.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when a computation produces non-finite values (training divergence,
/// non-finite loss). Carries the name of the first offending tensor.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

template <class S>
bool all_finite(const MatX<S>& m) {
  return m.allFinite();
}

inline bool is_control_token(TokenId t) { return t >= 0 && t < kNumControlTokens; }

/// Tokens with control ids removed; the "content" a quality oracle sees.
inline Tokens strip_control_tokens(const Tokens& toks) {
  Tokens out;
  out.reserve(toks.size());
  for (TokenId t : toks)
    if (!is_control_token(t)) out.push_back(t);
  return out;
}

}  // namespace calib
