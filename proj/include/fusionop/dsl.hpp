#pragma once

// Fusion-operator specifications: domain types, the block-structured text
// format, a recursive-descent parser, the canonical serializer, validation
// and the built-in presets.
//
//   spec   := "fusion" "{" dims branch+ plan ["seed" "=" int ";"] "}"
//   dims   := "dims" "{" (key "=" int ";")+ "}"     keys: dq dv tq tv to classes
//   branch := "branch" ident "{" "fq" "=" act ";" "fv" "=" act ";" [post] "}"
//   post   := "post" "=" "mlp" "(" "layers" "=" int "," "hidden" "=" int
//             ["," "skip" "=" int] ["," "dropout" "=" real] ")" ";"
//   plan   := "reduce" "{" step+ "}"
//   step   := ("sum" | "prod") "(" ident ("," ident)* ["with" "squash" "=" act] ")" ";"
//   act    := "identity" | "lrelu" | "selu" | "sigmoid" | "tanh"
//
// Whitespace is insignificant and '#' starts a comment running to end of line.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "fusionop/tensor.hpp"

namespace fusionop {

struct Dims {
  std::size_t d_q = 1;
  std::size_t d_v = 1;
  std::size_t t_q = 1;
  std::size_t t_v = 1;
  std::size_t t_o = 1;
  std::size_t n_classes = 1;

  bool operator==(const Dims&) const = default;
};

/// Post-fusion network Phi_r. n_layers == 0 means Phi_r is the identity.
struct PostFusionConfig {
  std::size_t n_layers = 0;
  std::size_t hidden = 0;
  std::size_t skip_period = 3;
  double dropout = 0.0;

  bool is_identity() const noexcept { return n_layers == 0; }
  bool operator==(const PostFusionConfig&) const = default;
};

struct BranchSpec {
  std::string id;
  ActivationKind f_q;
  ActivationKind f_v;
  PostFusionConfig post;

  bool operator==(const BranchSpec&) const = default;
};

enum class BinaryOp { sum, prod };

inline std::string_view op_name(BinaryOp op) { return op == BinaryOp::sum ? "sum" : "prod"; }

struct ReductionStep {
  BinaryOp op = BinaryOp::sum;
  std::vector<std::string> members;
  std::optional<ActivationKind> squash;

  bool operator==(const ReductionStep&) const = default;
};

struct ReductionPlan {
  std::vector<ReductionStep> steps;

  bool operator==(const ReductionPlan&) const = default;
};

struct FusionSpec {
  Dims dims;
  std::vector<BranchSpec> branches;
  ReductionPlan plan;
  std::optional<std::uint64_t> seed_hint;

  std::size_t rank() const noexcept { return branches.size(); }

  /// Index of the branch with `id`, or npos.
  std::size_t branch_index(std::string_view id) const noexcept {
    for (std::size_t r = 0; r < branches.size(); ++r) {
      if (branches[r].id == id) return r;
    }
    return npos;
  }

  bool operator==(const FusionSpec&) const = default;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct Violation {
  std::string invariant;  // short machine-friendly tag, e.g. "partition"
  std::string location;   // e.g. "dims.t_o", "branch b2", "reduce step 1"
  std::string message;
};

inline bool is_identifier(std::string_view s) {
  if (s.empty()) return false;
  auto alpha = [](char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; };
  auto digit = [](char c) { return c >= '0' && c <= '9'; };
  if (!alpha(s[0])) return false;
  for (char c : s) {
    if (!alpha(c) && !digit(c)) return false;
  }
  return true;
}

inline std::vector<Violation> validate_spec(const FusionSpec& spec) {
  std::vector<Violation> out;
  auto add = [&](std::string inv, std::string loc, std::string msg) {
    out.push_back({std::move(inv), std::move(loc), std::move(msg)});
  };

  const std::pair<const char*, std::size_t> dims[] = {
      {"d_q", spec.dims.d_q}, {"d_v", spec.dims.d_v}, {"t_q", spec.dims.t_q},
      {"t_v", spec.dims.t_v}, {"t_o", spec.dims.t_o}, {"n_classes", spec.dims.n_classes}};
  for (const auto& [name, value] : dims) {
    if (value < 1) {
      add("dims", std::string("dims.") + name, std::string("dims.") + name + " must be >= 1");
    }
  }

  if (spec.branches.empty()) add("branches", "spec", "spec must declare at least one branch");

  std::set<std::string> ids;
  for (const auto& b : spec.branches) {
    const std::string loc = "branch " + b.id;
    if (!is_identifier(b.id)) add("branch_id", loc, "branch id '" + b.id + "' is not an identifier");
    if (!ids.insert(b.id).second) add("branch_id", loc, "duplicate branch id " + b.id);
    for (const auto* act : {&b.f_q, &b.f_v}) {
      if (act->tag == Activation::leaky_relu && !(act->leaky_slope > 0 && act->leaky_slope < 1)) {
        add("activation", loc, "leaky_relu slope must lie in (0, 1)");
      }
    }
    const auto& p = b.post;
    if (p.n_layers > 0 && p.hidden < 1) add("post", loc, "post hidden must be >= 1 when layers > 0");
    if (p.skip_period < 1) add("post", loc, "post skip period must be >= 1");
    if (!(p.dropout >= 0.0 && p.dropout < 1.0)) add("post", loc, "post dropout must lie in [0, 1)");
  }

  if (spec.plan.steps.empty()) add("plan", "reduce", "plan must have at least one step");

  std::map<std::string, std::size_t> seen;  // branch id -> first step (1-based)
  std::set<std::string> reported;
  for (std::size_t s = 0; s < spec.plan.steps.size(); ++s) {
    const auto& step = spec.plan.steps[s];
    const std::string loc = "reduce step " + std::to_string(s + 1);
    if (step.members.empty()) add("plan", loc, "reduce step has no members");
    if (step.squash && step.squash->tag == Activation::leaky_relu &&
        !(step.squash->leaky_slope > 0 && step.squash->leaky_slope < 1)) {
      add("activation", loc, "leaky_relu slope must lie in (0, 1)");
    }
    for (const auto& m : step.members) {
      if (!ids.count(m)) {
        add("partition", loc, "plan references unknown branch " + m);
        continue;
      }
      auto [it, inserted] = seen.emplace(m, s + 1);
      if (!inserted && reported.insert(m).second) {
        add("partition", loc, "branch " + m + " appears in multiple steps");
      }
    }
  }
  for (const auto& b : spec.branches) {
    if (!seen.count(b.id)) add("partition", "reduce", "plan does not cover branch " + b.id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, std::size_t column, std::size_t length, const std::string& message)
      : std::runtime_error(std::to_string(line) + ":" + std::to_string(column) + ": " + message),
        line_(line),
        column_(column),
        length_(length),
        message_(message) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }
  /// Length in bytes of the offending token (at least 1).
  std::size_t length() const noexcept { return length_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::size_t line_, column_, length_;
  std::string message_;
};

namespace detail {

enum class TokenKind { identifier, integer, real, symbol, end };

struct Token {
  TokenKind kind = TokenKind::end;
  std::string text;
  std::size_t line = 1;
  std::size_t column = 1;

  std::size_t length() const noexcept { return text.empty() ? 1 : text.size(); }
};

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  std::vector<Token> tokenize() {
    std::vector<Token> tokens;
    for (;;) {
      skip_space_and_comments();
      Token t;
      t.line = line_;
      t.column = column_;
      if (pos_ >= src_.size()) {
        tokens.push_back(t);
        return tokens;
      }
      const char c = src_[pos_];
      if (is_alpha(c)) {
        t.kind = TokenKind::identifier;
        while (pos_ < src_.size() && (is_alpha(src_[pos_]) || is_digit(src_[pos_]))) advance();
      } else if (is_digit(c) || c == '.') {
        t.kind = lex_number();
      } else if (std::string_view("{}()=;,").find(c) != std::string_view::npos) {
        t.kind = TokenKind::symbol;
        advance();
      } else {
        throw ParseError(line_, column_, 1, "unexpected character " + describe(c));
      }
      t.text = std::string(src_.substr(token_start_, pos_ - token_start_));
      tokens.push_back(std::move(t));
    }
  }

 private:
  static bool is_alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; }
  static bool is_digit(char c) { return c >= '0' && c <= '9'; }

  static std::string describe(char c) {
    const auto u = static_cast<unsigned char>(c);
    if (u >= 0x20 && u < 0x7f) return std::string("'") + c + "'";
    char buf[8];
    std::snprintf(buf, sizeof buf, "0x%02x", u);
    return buf;
  }

  void advance() {
    if (src_[pos_] == '\n') {
      ++line_;
      column_ = 1;
    } else {
      ++column_;
    }
    ++pos_;
  }

  void skip_space_and_comments() {
    while (pos_ < src_.size()) {
      const char c = src_[pos_];
      if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        advance();
      } else if (c == '#') {
        while (pos_ < src_.size() && src_[pos_] != '\n') advance();
      } else {
        break;
      }
    }
    token_start_ = pos_;
  }

  TokenKind lex_number() {
    bool real = false;
    while (pos_ < src_.size() && is_digit(src_[pos_])) advance();
    if (pos_ < src_.size() && src_[pos_] == '.') {
      real = true;
      advance();
      while (pos_ < src_.size() && is_digit(src_[pos_])) advance();
    }
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      real = true;
      advance();
      if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) advance();
      if (pos_ >= src_.size() || !is_digit(src_[pos_])) {
        throw ParseError(line_, column_, 1, "malformed exponent in number");
      }
      while (pos_ < src_.size() && is_digit(src_[pos_])) advance();
    }
    if (pos_ < src_.size() && is_alpha(src_[pos_])) {
      throw ParseError(line_, column_, 1, "unexpected character " + describe(src_[pos_]) + " after number");
    }
    return real ? TokenKind::real : TokenKind::integer;
  }

  std::string_view src_;
  std::size_t pos_ = 0;
  std::size_t token_start_ = 0;
  std::size_t line_ = 1;
  std::size_t column_ = 1;
};

class Parser {
 public:
  explicit Parser(std::vector<Token> tokens) : tokens_(std::move(tokens)) {}

  FusionSpec parse() {
    FusionSpec spec;
    expect_word("fusion");
    expect_symbol('{');
    parse_dims(spec.dims);
    if (!peek_word("branch")) fail(peek(), "expected 'branch', found " + describe(peek()));
    while (peek_word("branch")) spec.branches.push_back(parse_branch(spec));
    const Token reduce_tok = peek();
    if (!peek_word("reduce")) fail(peek(), "expected 'branch' or 'reduce', found " + describe(peek()));
    parse_plan(spec);
    if (peek_word("seed")) {
      next();
      expect_symbol('=');
      spec.seed_hint = parse_u64(expect_integer());
      expect_symbol(';');
    }
    expect_symbol('}');
    if (peek().kind != TokenKind::end) fail(peek(), "unexpected " + describe(peek()) + " after spec");

    for (const auto& b : spec.branches) {
      if (!covered_.count(b.id)) fail(reduce_tok, "plan does not cover branch " + b.id);
    }
    // Anything the structural checks above missed is still rejected here.
    const auto violations = validate_spec(spec);
    if (!violations.empty()) fail(reduce_tok, violations.front().message);
    return spec;
  }

 private:
  [[noreturn]] static void fail(const Token& t, const std::string& msg) {
    throw ParseError(t.line, t.column, t.length(), msg);
  }

  static std::string describe(const Token& t) {
    if (t.kind == TokenKind::end) return "end of input";
    return "'" + t.text + "'";
  }

  const Token& peek() const { return tokens_[pos_]; }
  const Token& next() {
    const Token& t = tokens_[pos_];
    if (t.kind != TokenKind::end) ++pos_;
    return t;
  }

  bool peek_word(std::string_view w) const {
    return peek().kind == TokenKind::identifier && peek().text == w;
  }
  bool peek_symbol(char c) const {
    return peek().kind == TokenKind::symbol && peek().text[0] == c;
  }

  const Token& expect_word(std::string_view w) {
    if (!peek_word(w)) fail(peek(), "expected '" + std::string(w) + "', found " + describe(peek()));
    return next();
  }
  void expect_symbol(char c) {
    if (!peek_symbol(c)) fail(peek(), std::string("expected '") + c + "', found " + describe(peek()));
    next();
  }
  const Token& expect_identifier(std::string_view what) {
    if (peek().kind != TokenKind::identifier) {
      fail(peek(), "expected " + std::string(what) + ", found " + describe(peek()));
    }
    return next();
  }
  const Token& expect_integer() {
    if (peek().kind != TokenKind::integer) fail(peek(), "expected integer, found " + describe(peek()));
    return next();
  }

  static std::uint64_t parse_u64(const Token& t) {
    std::uint64_t v = 0;
    const auto* first = t.text.data();
    const auto* last = first + t.text.size();
    auto [p, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || p != last) fail(t, "integer out of range: " + t.text);
    return v;
  }

  static std::size_t parse_positive(const Token& t, std::string_view name) {
    const auto v = parse_u64(t);
    if (v == 0) fail(t, std::string(name) + " must be >= 1");
    return static_cast<std::size_t>(v);
  }

  ActivationKind parse_activation() {
    const Token& t = expect_identifier("activation name");
    for (const auto& k : kAllActivations) {
      if (t.text == activation_name(k.tag)) return k;
    }
    fail(t, "unknown activation '" + t.text + "' (expected identity, lrelu, selu, sigmoid or tanh)");
  }

  void parse_dims(Dims& dims) {
    expect_word("dims");
    expect_symbol('{');
    struct Slot {
      const char* key;
      const char* field;
      std::size_t* target;
      bool set = false;
    };
    Slot slots[] = {{"dq", "d_q", &dims.d_q},       {"dv", "d_v", &dims.d_v},
                    {"tq", "t_q", &dims.t_q},       {"tv", "t_v", &dims.t_v},
                    {"to", "t_o", &dims.t_o},       {"classes", "n_classes", &dims.n_classes}};
    if (peek_symbol('}')) fail(peek(), "dims block must assign at least one key");
    while (!peek_symbol('}')) {
      const Token& key = expect_identifier("dims key");
      Slot* slot = nullptr;
      for (auto& s : slots) {
        if (key.text == s.key) slot = &s;
      }
      if (!slot) fail(key, "unknown dims key '" + key.text + "' (expected dq, dv, tq, tv, to or classes)");
      if (slot->set) fail(key, "dims key '" + key.text + "' assigned twice");
      expect_symbol('=');
      *slot->target = parse_positive(expect_integer(), std::string("dims.") + slot->field);
      slot->set = true;
      expect_symbol(';');
    }
    const Token& close = peek();
    for (const auto& s : slots) {
      if (!s.set) fail(close, std::string("dims block is missing key '") + s.key + "'");
    }
    next();
  }

  BranchSpec parse_branch(const FusionSpec& spec) {
    expect_word("branch");
    const Token& id = expect_identifier("branch id");
    for (const auto& b : spec.branches) {
      if (b.id == id.text) fail(id, "duplicate branch id " + id.text);
    }
    BranchSpec b;
    b.id = id.text;
    expect_symbol('{');
    expect_word("fq");
    expect_symbol('=');
    b.f_q = parse_activation();
    expect_symbol(';');
    expect_word("fv");
    expect_symbol('=');
    b.f_v = parse_activation();
    expect_symbol(';');
    if (peek_word("post")) b.post = parse_post();
    expect_symbol('}');
    return b;
  }

  PostFusionConfig parse_post() {
    PostFusionConfig p;
    expect_word("post");
    expect_symbol('=');
    expect_word("mlp");
    expect_symbol('(');
    expect_word("layers");
    expect_symbol('=');
    p.n_layers = static_cast<std::size_t>(parse_u64(expect_integer()));
    expect_symbol(',');
    expect_word("hidden");
    expect_symbol('=');
    const Token& hidden = expect_integer();
    p.hidden = static_cast<std::size_t>(parse_u64(hidden));
    if (p.n_layers > 0 && p.hidden == 0) fail(hidden, "post hidden must be >= 1 when layers > 0");
    bool have_skip = false;
    while (peek_symbol(',')) {
      next();
      if (peek_word("skip") && !have_skip) {
        next();
        expect_symbol('=');
        p.skip_period = parse_positive(expect_integer(), "post skip");
        have_skip = true;
      } else if (peek_word("dropout")) {
        next();
        expect_symbol('=');
        p.dropout = parse_probability();
        break;
      } else {
        fail(peek(), std::string("expected ") + (have_skip ? "'dropout'" : "'skip' or 'dropout'") +
                         ", found " + describe(peek()));
      }
    }
    expect_symbol(')');
    expect_symbol(';');
    return p;
  }

  double parse_probability() {
    const Token& t = peek();
    if (t.kind != TokenKind::integer && t.kind != TokenKind::real) {
      fail(t, "expected number, found " + describe(t));
    }
    next();
    double v = 0;
    const auto* first = t.text.data();
    const auto* last = first + t.text.size();
    auto [p, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || p != last) fail(t, "malformed number " + t.text);
    if (!(v >= 0.0 && v < 1.0)) fail(t, "post dropout must lie in [0, 1)");
    return v;
  }

  void parse_plan(FusionSpec& spec) {
    expect_word("reduce");
    expect_symbol('{');
    if (!peek_word("sum") && !peek_word("prod")) {
      fail(peek(), "expected 'sum' or 'prod', found " + describe(peek()));
    }
    while (peek_word("sum") || peek_word("prod")) {
      ReductionStep step;
      step.op = next().text == "sum" ? BinaryOp::sum : BinaryOp::prod;
      expect_symbol('(');
      for (;;) {
        const Token& m = expect_identifier("branch id");
        if (spec.branch_index(m.text) == FusionSpec::npos) {
          fail(m, "plan references unknown branch " + m.text);
        }
        if (!covered_.insert(m.text).second) {
          fail(m, "branch " + m.text + " appears in multiple steps");
        }
        step.members.push_back(m.text);
        if (!peek_symbol(',')) break;
        next();
      }
      if (peek_word("with")) {
        next();
        expect_word("squash");
        expect_symbol('=');
        step.squash = parse_activation();
      }
      expect_symbol(')');
      expect_symbol(';');
      spec.plan.steps.push_back(std::move(step));
    }
    expect_symbol('}');
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
  std::set<std::string> covered_;
};

}  // namespace detail

/// Parses and validates a spec. Throws ParseError (with line and column) on
/// any lexical, syntactic or semantic problem.
inline FusionSpec parse_spec(std::string_view text) {
  detail::Lexer lexer(text);
  detail::Parser parser(lexer.tokenize());
  return parser.parse();
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline std::string format_real(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

/// Canonical text: two-space indent, grammar field order, branches in
/// declaration order. A Phi_r equal to the default config is omitted.
inline std::string serialize_spec(const FusionSpec& spec) {
  std::string out;
  out += "fusion {\n";
  out += "  dims {\n";
  const std::pair<const char*, std::size_t> dims[] = {
      {"dq", spec.dims.d_q}, {"dv", spec.dims.d_v}, {"tq", spec.dims.t_q},
      {"tv", spec.dims.t_v}, {"to", spec.dims.t_o}, {"classes", spec.dims.n_classes}};
  for (const auto& [key, value] : dims) {
    out += "    ";
    out += key;
    out += " = " + std::to_string(value) + ";\n";
  }
  out += "  }\n";
  for (const auto& b : spec.branches) {
    out += "  branch " + b.id + " {\n";
    out += "    fq = " + std::string(activation_name(b.f_q.tag)) + ";\n";
    out += "    fv = " + std::string(activation_name(b.f_v.tag)) + ";\n";
    if (b.post != PostFusionConfig{}) {
      out += "    post = mlp(layers = " + std::to_string(b.post.n_layers) +
             ", hidden = " + std::to_string(b.post.hidden) +
             ", skip = " + std::to_string(b.post.skip_period) +
             ", dropout = " + format_real(b.post.dropout) + ");\n";
    }
    out += "  }\n";
  }
  out += "  reduce {\n";
  for (const auto& step : spec.plan.steps) {
    out += "    ";
    out += op_name(step.op);
    out += "(";
    for (std::size_t i = 0; i < step.members.size(); ++i) {
      if (i) out += ", ";
      out += step.members[i];
    }
    if (step.squash) out += " with squash = " + std::string(activation_name(step.squash->tag));
    out += ");\n";
  }
  out += "  }\n";
  if (spec.seed_hint) out += "  seed = " + std::to_string(*spec.seed_hint) + ";\n";
  out += "}\n";
  return out;
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Full-scale sizes: 2400-d question and 2048-d image features, 2000 answers.
inline constexpr Dims kFullScaleDims{2400, 2048, 310, 310, 510, 2000};

/// Plan that sums every branch in one step.
inline ReductionPlan sum_all_plan(const std::vector<BranchSpec>& branches) {
  ReductionStep step{BinaryOp::sum, {}, std::nullopt};
  for (const auto& b : branches) step.members.push_back(b.id);
  return {{step}};
}

/// Sums the first R-1 branches, then multiplies by the squashed last branch.
inline ReductionPlan gated_plan(const std::vector<BranchSpec>& branches, ActivationKind squash) {
  if (branches.size() < 2) throw std::invalid_argument("gated plan needs at least two branches");
  ReductionStep head{BinaryOp::sum, {}, std::nullopt};
  for (std::size_t r = 0; r + 1 < branches.size(); ++r) head.members.push_back(branches[r].id);
  ReductionStep gate{BinaryOp::prod, {branches.back().id}, squash};
  return {{head, gate}};
}

inline std::vector<BranchSpec> uniform_branches(std::size_t r, ActivationKind f_q, ActivationKind f_v) {
  std::vector<BranchSpec> out;
  for (std::size_t i = 1; i <= r; ++i) out.push_back({"b" + std::to_string(i), f_q, f_v, {}});
  return out;
}

/// Nonlinearity-ensembled branches: f_v = selu everywhere, f_q cycles
/// through identity, lrelu, selu, sigmoid, tanh.
inline std::vector<BranchSpec> ensembled_branches(std::size_t r) {
  std::vector<BranchSpec> out;
  for (std::size_t i = 0; i < r; ++i) {
    out.push_back({"b" + std::to_string(i + 1), kAllActivations[i % 5], kSelu, {}});
  }
  return out;
}

inline FusionSpec make_spec(Dims dims, std::vector<BranchSpec> branches, ReductionPlan plan) {
  FusionSpec s;
  s.dims = dims;
  s.branches = std::move(branches);
  s.plan = std::move(plan);
  return s;
}

inline std::map<std::string, FusionSpec> builtin_presets() {
  std::map<std::string, FusionSpec> p;
  const auto mlb = uniform_branches(1, kIdentity, kIdentity);
  p["mlb"] = make_spec(kFullScaleDims, mlb, sum_all_plan(mlb));
  const auto mutan = uniform_branches(5, kIdentity, kIdentity);
  p["mutan_r5"] = make_spec(kFullScaleDims, mutan, sum_all_plan(mutan));
  const auto ne = ensembled_branches(5);
  p["ne"] = make_spec(kFullScaleDims, ne, sum_all_plan(ne));
  p["ne_fg"] = make_spec(kFullScaleDims, ne, gated_plan(ne, kSigmoid));
  p["ne_ps"] = make_spec(kFullScaleDims, ne, gated_plan(ne, kTanh));
  auto mlp6 = ne;
  for (auto& b : mlp6) b.post = PostFusionConfig{6, 128, 3, 0.0};
  p["ne_fg_mlp6"] = make_spec(kFullScaleDims, mlp6, gated_plan(mlp6, kSigmoid));
  return p;
}

}  // namespace fusionop
