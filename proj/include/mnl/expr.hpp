#pragma once

// Observable expression trees over canonical phase-space variables
// q1,p1,...,qn,pn with exact symbolic differentiation. Trees are immutable
// after construction and safe to evaluate concurrently.

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mnl {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& message, int line, int column)
      : std::runtime_error(message + " at " + std::to_string(line) + ":" +
                           std::to_string(column)),
        line_(line),
        column_(column) {}

  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

// Raised when evaluation leaves the real domain (division by zero, square
// root of a negative number). Carries the text of the offending subtree.
class EvalDomainError : public std::runtime_error {
 public:
  EvalDomainError(const std::string& what, std::string subexpression)
      : std::runtime_error(what + " in '" + subexpression + "'"),
        subexpression_(std::move(subexpression)) {}

  const std::string& subexpression() const { return subexpression_; }

 private:
  std::string subexpression_;
};

enum class ExprKind : std::uint8_t {
  kConstant,
  kVariable,
  kNegate,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kPow,  // integer exponent only
  kSin,
  kCos,
  kSqrt,
  kAtan2,
};

struct ExprNode {
  ExprKind kind;
  double value = 0.0;        // kConstant
  std::int32_t var = -1;     // kVariable: coordinate index in [0, 2n)
  std::int32_t a = -1;       // first child
  std::int32_t b = -1;       // second child (kAtan2: y = a, x = b)
  std::int32_t exponent = 0; // kPow
};

// Canonical coordinate ordering: (q1, p1, q2, p2, ..., qn, pn).
inline int coord_index_q(int i) { return 2 * (i - 1); }
inline int coord_index_p(int i) { return 2 * (i - 1) + 1; }

inline std::string coord_name(int coord) {
  const int dof = coord / 2 + 1;
  return (coord % 2 == 0 ? "q" : "p") + std::to_string(dof);
}

inline double integer_power(double base, std::int32_t exponent) {
  std::int64_t e = exponent;
  const bool negative = e < 0;
  if (negative) e = -e;
  double result = 1.0;
  double factor = base;
  while (e != 0) {
    if (e & 1) result *= factor;
    factor *= factor;
    e >>= 1;
  }
  return negative ? 1.0 / result : result;
}

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

class ExprBuilder;

class Expr {
 public:
  Expr() = default;

  int n_dof() const { return n_dof_; }
  int dimension() const { return 2 * n_dof_; }
  bool valid() const { return root_ >= 0; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<ExprNode>& nodes() const { return nodes_; }
  int root() const { return root_; }

  bool is_constant() const {
    return valid() && nodes_[root_].kind == ExprKind::kConstant;
  }
  double constant_value() const { return nodes_[root_].value; }

  // Fills scratch[i] with the value of node i for every node reachable from
  // the root (children always precede parents in the arena).
  double evaluate(std::span<const double> point,
                  std::vector<double>& scratch) const {
    if (static_cast<int>(point.size()) != dimension())
      throw std::invalid_argument(
          "phase point dimension " + std::to_string(point.size()) +
          " does not match expression dimension " + std::to_string(dimension()));
    scratch.resize(nodes_.size());
    double* s = scratch.data();
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const ExprNode& n = nodes_[i];
      switch (n.kind) {
        case ExprKind::kConstant: s[i] = n.value; break;
        case ExprKind::kVariable: s[i] = point[n.var]; break;
        case ExprKind::kNegate: s[i] = -s[n.a]; break;
        case ExprKind::kAdd: s[i] = s[n.a] + s[n.b]; break;
        case ExprKind::kSub: s[i] = s[n.a] - s[n.b]; break;
        case ExprKind::kMul: s[i] = s[n.a] * s[n.b]; break;
        case ExprKind::kDiv:
          if (s[n.b] == 0.0)
            throw EvalDomainError("division by zero", to_string(i));
          s[i] = s[n.a] / s[n.b];
          break;
        case ExprKind::kPow:
          if (n.exponent < 0 && s[n.a] == 0.0)
            throw EvalDomainError("zero raised to a negative power",
                                  to_string(i));
          s[i] = integer_power(s[n.a], n.exponent);
          break;
        case ExprKind::kSin: s[i] = std::sin(s[n.a]); break;
        case ExprKind::kCos: s[i] = std::cos(s[n.a]); break;
        case ExprKind::kSqrt:
          if (s[n.a] < 0.0)
            throw EvalDomainError("square root of a negative value",
                                  to_string(i));
          s[i] = std::sqrt(s[n.a]);
          break;
        case ExprKind::kAtan2: s[i] = std::atan2(s[n.a], s[n.b]); break;
      }
    }
    return s[root_];
  }

  double evaluate(std::span<const double> point) const {
    std::vector<double> scratch;
    return evaluate(point, scratch);
  }

  Expr differentiate(int coord) const;

  std::string to_string() const { return to_string(root_); }

 private:
  friend class ExprBuilder;
  friend bool structurally_equal(const Expr& lhs, const Expr& rhs);

  // Precedence levels used by the printer: +/- = 1, */ / = 2, unary - = 3,
  // ^ = 4, atoms = 5.
  static int precedence(ExprKind k) {
    switch (k) {
      case ExprKind::kAdd:
      case ExprKind::kSub: return 1;
      case ExprKind::kMul:
      case ExprKind::kDiv: return 2;
      case ExprKind::kNegate: return 3;
      case ExprKind::kPow: return 4;
      default: return 5;
    }
  }

  std::string to_string(int idx) const {
    std::string out;
    print_node(idx, 0, out);
    return out;
  }

  void print_node(int idx, int min_prec, std::string& out) const {
    const ExprNode& n = nodes_[idx];
    const int prec = precedence(n.kind);
    const bool parens = prec < min_prec;
    if (parens) out += '(';
    switch (n.kind) {
      case ExprKind::kConstant: out += format_double(n.value); break;
      case ExprKind::kVariable: out += coord_name(n.var); break;
      case ExprKind::kNegate:
        out += '-';
        print_node(n.a, 3, out);
        break;
      case ExprKind::kAdd:
        print_node(n.a, 1, out);
        out += " + ";
        print_node(n.b, 2, out);
        break;
      case ExprKind::kSub:
        print_node(n.a, 1, out);
        out += " - ";
        print_node(n.b, 2, out);
        break;
      case ExprKind::kMul:
        print_node(n.a, 2, out);
        out += '*';
        print_node(n.b, 3, out);
        break;
      case ExprKind::kDiv:
        print_node(n.a, 2, out);
        out += '/';
        print_node(n.b, 3, out);
        break;
      case ExprKind::kPow:
        print_node(n.a, 5, out);
        out += '^';
        out += std::to_string(n.exponent);
        break;
      case ExprKind::kSin:
      case ExprKind::kCos:
      case ExprKind::kSqrt:
        out += (n.kind == ExprKind::kSin    ? "sin("
                : n.kind == ExprKind::kCos ? "cos("
                                           : "sqrt(");
        print_node(n.a, 0, out);
        out += ')';
        break;
      case ExprKind::kAtan2:
        out += "atan2(";
        print_node(n.a, 0, out);
        out += ", ";
        print_node(n.b, 0, out);
        out += ')';
        break;
    }
    if (parens) out += ')';
  }

  std::vector<ExprNode> nodes_;
  std::int32_t root_ = -1;
  int n_dof_ = 0;
};

// Appends nodes bottom-up so children always precede parents, applying the
// local rewrites x*0 -> 0, x*1 -> x, x+0 -> x, x-0 -> x, 0-x -> -x and
// constant folding (folding skips subtrees whose evaluation would leave the
// real domain, so errors surface at evaluation time).
class ExprBuilder {
 public:
  explicit ExprBuilder(int n_dof) : n_dof_(n_dof) {
    if (n_dof <= 0)
      throw std::invalid_argument("number of degrees of freedom must be positive");
  }

  int n_dof() const { return n_dof_; }

  int constant(double v) {
    ExprNode n{ExprKind::kConstant};
    n.value = v;
    return push(n);
  }

  int variable(int coord) {
    if (coord < 0 || coord >= 2 * n_dof_)
      throw std::invalid_argument("coordinate index out of range");
    ExprNode n{ExprKind::kVariable};
    n.var = coord;
    return push(n);
  }

  int variable_q(int i) { return variable(coord_index_q(i)); }
  int variable_p(int i) { return variable(coord_index_p(i)); }

  int negate(int a) {
    if (is_const(a)) return constant(-value(a));
    if (nodes_[a].kind == ExprKind::kNegate) return nodes_[a].a;
    ExprNode n{ExprKind::kNegate};
    n.a = a;
    return push(n);
  }

  int add(int a, int b) {
    if (is_const(a, 0.0)) return b;
    if (is_const(b, 0.0)) return a;
    if (is_const(a) && is_const(b)) return constant(value(a) + value(b));
    ExprNode n{ExprKind::kAdd};
    n.a = a;
    n.b = b;
    return push(n);
  }

  int sub(int a, int b) {
    if (is_const(b, 0.0)) return a;
    if (is_const(a, 0.0)) return negate(b);
    if (is_const(a) && is_const(b)) return constant(value(a) - value(b));
    ExprNode n{ExprKind::kSub};
    n.a = a;
    n.b = b;
    return push(n);
  }

  int mul(int a, int b) {
    if (is_const(a, 0.0) || is_const(b, 0.0)) return constant(0.0);
    if (is_const(a, 1.0)) return b;
    if (is_const(b, 1.0)) return a;
    if (is_const(a) && is_const(b)) return constant(value(a) * value(b));
    ExprNode n{ExprKind::kMul};
    n.a = a;
    n.b = b;
    return push(n);
  }

  int div(int a, int b) {
    if (is_const(b, 1.0)) return a;
    if (is_const(a, 0.0) && !(is_const(b, 0.0))) return constant(0.0);
    if (is_const(a) && is_const(b) && value(b) != 0.0)
      return constant(value(a) / value(b));
    ExprNode n{ExprKind::kDiv};
    n.a = a;
    n.b = b;
    return push(n);
  }

  int pow(int a, std::int32_t exponent) {
    if (exponent == 0) return constant(1.0);
    if (exponent == 1) return a;
    if (is_const(a) && !(value(a) == 0.0 && exponent < 0))
      return constant(integer_power(value(a), exponent));
    ExprNode n{ExprKind::kPow};
    n.a = a;
    n.exponent = exponent;
    return push(n);
  }

  int sin(int a) {
    if (is_const(a)) return constant(std::sin(value(a)));
    ExprNode n{ExprKind::kSin};
    n.a = a;
    return push(n);
  }

  int cos(int a) {
    if (is_const(a)) return constant(std::cos(value(a)));
    ExprNode n{ExprKind::kCos};
    n.a = a;
    return push(n);
  }

  int sqrt(int a) {
    if (is_const(a) && value(a) >= 0.0) return constant(std::sqrt(value(a)));
    ExprNode n{ExprKind::kSqrt};
    n.a = a;
    return push(n);
  }

  int atan2(int y, int x) {
    if (is_const(y) && is_const(x))
      return constant(std::atan2(value(y), value(x)));
    ExprNode n{ExprKind::kAtan2};
    n.a = y;
    n.b = x;
    return push(n);
  }

  // Copies a subtree of another expression into this builder. Repeated
  // subtrees within one copy are shared; the memo is local to the call since
  // callers may pass distinct temporaries living at the same address.
  int copy(const Expr& src, int src_idx) {
    std::unordered_map<int, int> memo;
    return copy_rec(src, src_idx, memo);
  }

  int copy(const Expr& src) { return copy(src, src.root()); }

  // Extracts the expression rooted at `root`, dropping unreachable nodes.
  Expr take(int root) {
    std::vector<std::int32_t> remap(nodes_.size(), -1);
    mark(root, remap);
    Expr out;
    out.n_dof_ = n_dof_;
    std::int32_t next = 0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (remap[i] < 0) continue;
      remap[i] = next++;
      ExprNode n = nodes_[i];
      if (n.a >= 0) n.a = remap[n.a];
      if (n.b >= 0) n.b = remap[n.b];
      out.nodes_.push_back(n);
    }
    out.root_ = remap[root];
    return out;
  }

 private:
  bool is_const(int i) const { return nodes_[i].kind == ExprKind::kConstant; }
  bool is_const(int i, double v) const {
    return is_const(i) && nodes_[i].value == v;
  }
  double value(int i) const { return nodes_[i].value; }

  int push(const ExprNode& n) {
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
  }

  int copy_rec(const Expr& src, int idx, std::unordered_map<int, int>& memo) {
    auto it = memo.find(idx);
    if (it != memo.end()) return it->second;
    const ExprNode& n = src.nodes()[idx];
    ExprNode out = n;
    if (n.a >= 0) out.a = copy_rec(src, n.a, memo);
    if (n.b >= 0) out.b = copy_rec(src, n.b, memo);
    int id = push(out);
    memo.emplace(idx, id);
    return id;
  }

  void mark(int idx, std::vector<std::int32_t>& remap) {
    if (remap[idx] == 0) return;
    remap[idx] = 0;
    if (nodes_[idx].a >= 0) mark(nodes_[idx].a, remap);
    if (nodes_[idx].b >= 0) mark(nodes_[idx].b, remap);
  }

  std::vector<ExprNode> nodes_;
  int n_dof_;
};

namespace detail {

class Differentiator {
 public:
  Differentiator(const Expr& src, int coord, ExprBuilder& builder)
      : src_(src), coord_(coord), builder_(builder) {}

  int run(int idx) {
    auto it = memo_.find(idx);
    if (it != memo_.end()) return it->second;
    const ExprNode& n = src_.nodes()[idx];
    int result = -1;
    switch (n.kind) {
      case ExprKind::kConstant:
        result = builder_.constant(0.0);
        break;
      case ExprKind::kVariable:
        result = builder_.constant(n.var == coord_ ? 1.0 : 0.0);
        break;
      case ExprKind::kNegate:
        result = builder_.negate(run(n.a));
        break;
      case ExprKind::kAdd:
        result = builder_.add(run(n.a), run(n.b));
        break;
      case ExprKind::kSub:
        result = builder_.sub(run(n.a), run(n.b));
        break;
      case ExprKind::kMul: {
        int du = run(n.a);
        int dv = run(n.b);
        int u = builder_.copy(src_, n.a);
        int v = builder_.copy(src_, n.b);
        result = builder_.add(builder_.mul(du, v), builder_.mul(u, dv));
        break;
      }
      case ExprKind::kDiv: {
        // (u'v - uv') / v^2
        int du = run(n.a);
        int dv = run(n.b);
        int u = builder_.copy(src_, n.a);
        int v = builder_.copy(src_, n.b);
        int num = builder_.sub(builder_.mul(du, v), builder_.mul(u, dv));
        result = builder_.div(num, builder_.pow(v, 2));
        break;
      }
      case ExprKind::kPow: {
        // k * u^(k-1) * u'
        int du = run(n.a);
        int u = builder_.copy(src_, n.a);
        int coeff = builder_.constant(static_cast<double>(n.exponent));
        result = builder_.mul(builder_.mul(coeff, builder_.pow(u, n.exponent - 1)), du);
        break;
      }
      case ExprKind::kSin: {
        int du = run(n.a);
        int u = builder_.copy(src_, n.a);
        result = builder_.mul(builder_.cos(u), du);
        break;
      }
      case ExprKind::kCos: {
        int du = run(n.a);
        int u = builder_.copy(src_, n.a);
        result = builder_.negate(builder_.mul(builder_.sin(u), du));
        break;
      }
      case ExprKind::kSqrt: {
        // u' / (2 sqrt(u))
        int du = run(n.a);
        int u = builder_.copy(src_, n.a);
        result = builder_.div(du, builder_.mul(builder_.constant(2.0), builder_.sqrt(u)));
        break;
      }
      case ExprKind::kAtan2: {
        // (x y' - y x') / (x^2 + y^2)
        int dy = run(n.a);
        int dx = run(n.b);
        int y = builder_.copy(src_, n.a);
        int x = builder_.copy(src_, n.b);
        int num = builder_.sub(builder_.mul(x, dy), builder_.mul(y, dx));
        int den = builder_.add(builder_.pow(x, 2), builder_.pow(y, 2));
        result = builder_.div(num, den);
        break;
      }
    }
    memo_.emplace(idx, result);
    return result;
  }

 private:
  const Expr& src_;
  int coord_;
  ExprBuilder& builder_;
  std::unordered_map<int, int> memo_;
};

}  // namespace detail

inline Expr Expr::differentiate(int coord) const {
  if (coord < 0 || coord >= dimension())
    throw std::invalid_argument("differentiation variable " +
                                std::to_string(coord) + " out of range");
  ExprBuilder builder(n_dof_);
  detail::Differentiator d(*this, coord, builder);
  return builder.take(d.run(root_));
}

inline bool structurally_equal_rec(const Expr& lhs, int li, const Expr& rhs,
                                   int ri) {
  const ExprNode& a = lhs.nodes()[li];
  const ExprNode& b = rhs.nodes()[ri];
  if (a.kind != b.kind) return false;
  switch (a.kind) {
    case ExprKind::kConstant: return a.value == b.value;
    case ExprKind::kVariable: return a.var == b.var;
    case ExprKind::kPow:
      return a.exponent == b.exponent &&
             structurally_equal_rec(lhs, a.a, rhs, b.a);
    case ExprKind::kNegate:
    case ExprKind::kSin:
    case ExprKind::kCos:
    case ExprKind::kSqrt:
      return structurally_equal_rec(lhs, a.a, rhs, b.a);
    default:
      return structurally_equal_rec(lhs, a.a, rhs, b.a) &&
             structurally_equal_rec(lhs, a.b, rhs, b.b);
  }
}

inline bool structurally_equal(const Expr& lhs, const Expr& rhs) {
  if (lhs.n_dof() != rhs.n_dof()) return false;
  if (!lhs.valid() || !rhs.valid()) return lhs.valid() == rhs.valid();
  return structurally_equal_rec(lhs, lhs.root(), rhs, rhs.root());
}

namespace detail {

enum class TokenKind {
  kNumber,
  kIdentifier,
  kPlus,
  kMinus,
  kStar,
  kSlash,
  kCaret,
  kLParen,
  kRParen,
  kComma,
  kEnd,
};

struct Token {
  TokenKind kind;
  std::string text;
  double number = 0.0;
  bool integral = false;
  int line = 1;
  int column = 1;
};

class Lexer {
 public:
  explicit Lexer(std::string_view text) : text_(text) {}

  std::vector<Token> run() {
    std::vector<Token> tokens;
    while (true) {
      skip_whitespace();
      Token t;
      t.line = line_;
      t.column = column_;
      if (pos_ >= text_.size()) {
        t.kind = TokenKind::kEnd;
        tokens.push_back(t);
        return tokens;
      }
      const char c = text_[pos_];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        lex_number(t);
      } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        lex_identifier(t);
      } else {
        switch (c) {
          case '+': t.kind = TokenKind::kPlus; break;
          case '-': t.kind = TokenKind::kMinus; break;
          case '*': t.kind = TokenKind::kStar; break;
          case '/': t.kind = TokenKind::kSlash; break;
          case '^': t.kind = TokenKind::kCaret; break;
          case '(': t.kind = TokenKind::kLParen; break;
          case ')': t.kind = TokenKind::kRParen; break;
          case ',': t.kind = TokenKind::kComma; break;
          default:
            throw ParseError(std::string("unexpected character '") + c + "'",
                             line_, column_);
        }
        t.text = c;
        advance();
      }
      tokens.push_back(t);
    }
  }

 private:
  void advance() {
    if (text_[pos_] == '\n') {
      ++line_;
      column_ = 1;
    } else {
      ++column_;
    }
    ++pos_;
  }

  void skip_whitespace() {
    while (pos_ < text_.size() &&
           std::isspace(static_cast<unsigned char>(text_[pos_])))
      advance();
  }

  void lex_number(Token& t) {
    const std::size_t start = pos_;
    bool has_dot = false;
    bool has_exp = false;
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (std::isdigit(static_cast<unsigned char>(c))) {
        advance();
      } else if (c == '.' && !has_dot && !has_exp) {
        has_dot = true;
        advance();
      } else if ((c == 'e' || c == 'E') && !has_exp && pos_ > start) {
        has_exp = true;
        advance();
        if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '-'))
          advance();
      } else {
        break;
      }
    }
    t.kind = TokenKind::kNumber;
    t.text = std::string(text_.substr(start, pos_ - start));
    t.integral = !has_dot && !has_exp;
    auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(),
                                     t.number);
    if (ec != std::errc{} || ptr != t.text.data() + t.text.size())
      throw ParseError("malformed number '" + t.text + "'", t.line, t.column);
  }

  void lex_identifier(Token& t) {
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) ||
            text_[pos_] == '_'))
      advance();
    t.kind = TokenKind::kIdentifier;
    t.text = std::string(text_.substr(start, pos_ - start));
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  int line_ = 1;
  int column_ = 1;
};

// Grammar (precedence low to high; x<i> is accepted as an alias for q<i>):
//   expr   := term (('+' | '-') term)*
//   term   := unary (('*' | '/') unary)*
//   unary  := '-' unary | power
//   power  := atom ('^' integer)*
//   atom   := number | variable | func '(' expr (',' expr)? ')' | '(' expr ')'
class Parser {
 public:
  Parser(std::vector<Token> tokens, ExprBuilder& builder)
      : tokens_(std::move(tokens)), builder_(builder) {}

  int parse() {
    int e = parse_expr();
    expect(TokenKind::kEnd, "end of input");
    return e;
  }

 private:
  const Token& peek() const { return tokens_[pos_]; }
  Token next() { return tokens_[pos_++]; }
  bool accept(TokenKind k) {
    if (peek().kind == k) {
      ++pos_;
      return true;
    }
    return false;
  }
  void expect(TokenKind k, const std::string& what) {
    if (!accept(k))
      throw ParseError("expected " + what, peek().line, peek().column);
  }

  int parse_expr() {
    int lhs = parse_term();
    while (true) {
      if (accept(TokenKind::kPlus))
        lhs = builder_.add(lhs, parse_term());
      else if (accept(TokenKind::kMinus))
        lhs = builder_.sub(lhs, parse_term());
      else
        return lhs;
    }
  }

  int parse_term() {
    int lhs = parse_unary();
    while (true) {
      if (accept(TokenKind::kStar))
        lhs = builder_.mul(lhs, parse_unary());
      else if (accept(TokenKind::kSlash))
        lhs = builder_.div(lhs, parse_unary());
      else
        return lhs;
    }
  }

  int parse_unary() {
    if (accept(TokenKind::kMinus)) return builder_.negate(parse_unary());
    return parse_power();
  }

  int parse_power() {
    int base = parse_atom();
    while (accept(TokenKind::kCaret)) base = builder_.pow(base, parse_exponent());
    return base;
  }

  std::int32_t parse_exponent() {
    int sign = 1;
    while (true) {
      if (accept(TokenKind::kMinus))
        sign = -sign;
      else if (accept(TokenKind::kPlus))
        ;
      else
        break;
    }
    const Token t = peek();
    if (t.kind != TokenKind::kNumber || !t.integral)
      throw ParseError("exponent must be an integer literal", t.line, t.column);
    ++pos_;
    if (t.number > 64.0)
      throw ParseError("exponent magnitude exceeds 64", t.line, t.column);
    return sign * static_cast<std::int32_t>(t.number);
  }

  int parse_atom() {
    const Token t = next();
    switch (t.kind) {
      case TokenKind::kNumber:
        return builder_.constant(t.number);
      case TokenKind::kLParen: {
        int e = parse_expr();
        expect(TokenKind::kRParen, "')'");
        return e;
      }
      case TokenKind::kIdentifier:
        return parse_identifier(t);
      default:
        throw ParseError("expected a value", t.line, t.column);
    }
  }

  int parse_identifier(const Token& t) {
    if (t.text == "sin" || t.text == "cos" || t.text == "sqrt") {
      expect(TokenKind::kLParen, "'(' after '" + t.text + "'");
      int arg = parse_expr();
      expect(TokenKind::kRParen, "')'");
      if (t.text == "sin") return builder_.sin(arg);
      if (t.text == "cos") return builder_.cos(arg);
      return builder_.sqrt(arg);
    }
    if (t.text == "atan2") {
      expect(TokenKind::kLParen, "'(' after 'atan2'");
      int y = parse_expr();
      expect(TokenKind::kComma, "',' between atan2 arguments");
      int x = parse_expr();
      expect(TokenKind::kRParen, "')'");
      return builder_.atan2(y, x);
    }
    // Variables: q<i>, p<i>, and the alias x<i> for q<i>.
    const char head = t.text[0];
    if ((head == 'q' || head == 'p' || head == 'x') && t.text.size() > 1) {
      bool digits = true;
      for (std::size_t i = 1; i < t.text.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(t.text[i]))) {
          digits = false;
          break;
        }
      if (digits) {
        const long idx = std::strtol(t.text.c_str() + 1, nullptr, 10);
        if (idx < 1 || idx > builder_.n_dof())
          throw ParseError("variable '" + t.text +
                               "' out of range for " +
                               std::to_string(builder_.n_dof()) +
                               " degree(s) of freedom",
                           t.line, t.column);
        const int i = static_cast<int>(idx);
        return head == 'p' ? builder_.variable_p(i) : builder_.variable_q(i);
      }
    }
    throw ParseError("unknown identifier '" + t.text + "'", t.line, t.column);
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
  ExprBuilder& builder_;
};

}  // namespace detail

inline Expr parse_observable(std::string_view text, int n_dof) {
  if (text.empty()) throw ParseError("empty expression", 1, 1);
  ExprBuilder builder(n_dof);
  detail::Lexer lexer(text);
  detail::Parser parser(lexer.run(), builder);
  return builder.take(parser.parse());
}

}  // namespace mnl
