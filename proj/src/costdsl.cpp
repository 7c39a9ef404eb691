#include "trajguide/costdsl.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <optional>
#include <set>

namespace trajguide::dsl {

namespace g = grad;

DslError::DslError(SourceLoc loc, const std::string& message)
    : std::runtime_error(std::to_string(loc.line) + ":" + std::to_string(loc.column) + ": " + message),
      loc_(loc),
      message_(message) {}

bool Expr::operator==(const Expr& o) const {
  return kind == o.kind && value == o.value && op == o.op && agents == o.agents && refpath == o.refpath &&
         args == o.args;
}

bool RefPathDecl::operator==(const RefPathDecl& o) const {
  return name == o.name && kind == o.kind && agent == o.agent && lane == o.lane;
}

bool Term::operator==(const Term& o) const {
  return name == o.name && weight == o.weight && expr == o.expr;
}

namespace {

void collect_agents(const Expr& e, int& best) {
  for (int a : e.agents) best = std::max(best, a);
  for (const Expr& c : e.args) collect_agents(c, best);
}

}  // namespace

int CostProgram::max_agent() const {
  int best = -1;
  for (const RefPathDecl& d : refpaths) best = std::max(best, d.agent);
  for (const Term& t : terms) collect_agents(t.expr, best);
  return best;
}

const std::vector<std::string>& accessor_names() {
  static const std::vector<std::string> names{"x", "y", "heading", "speed", "accel", "s", "d", "dist", "sin_t"};
  return names;
}
const std::vector<std::string>& unary_names() {
  static const std::vector<std::string> names{"neg", "abs", "sq", "sqrt", "relu", "sin", "cos", "exp", "ddt"};
  return names;
}
const std::vector<std::string>& binary_names() {
  static const std::vector<std::string> names{"add", "sub", "mul", "div", "min", "max"};
  return names;
}
const std::vector<std::string>& reduction_names() {
  static const std::vector<std::string> names{"mean_t", "sum_t", "min_t", "max_t", "at_t"};
  return names;
}

namespace {

bool contains(const std::vector<std::string>& v, std::string_view s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

// ---- lexer ----------------------------------------------------------------------

struct Token {
  enum class Kind { open, close, atom, end };
  Kind kind = Kind::end;
  std::string text;
  SourceLoc loc;
};

std::vector<Token> lex(std::string_view src) {
  std::vector<Token> out;
  SourceLoc loc;
  std::size_t i = 0;
  auto advance = [&](char c) {
    if (c == '\n') {
      ++loc.line;
      loc.column = 1;
    } else {
      ++loc.column;
    }
  };
  while (i < src.size()) {
    const char c = src[i];
    if (c == ';') {
      while (i < src.size() && src[i] != '\n') advance(src[i++]);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      advance(c);
      ++i;
      continue;
    }
    if (c == '(' || c == ')') {
      out.push_back({c == '(' ? Token::Kind::open : Token::Kind::close, std::string(1, c), loc});
      advance(c);
      ++i;
      continue;
    }
    Token t{Token::Kind::atom, {}, loc};
    while (i < src.size()) {
      const char d = src[i];
      if (d == '(' || d == ')' || d == ';' || std::isspace(static_cast<unsigned char>(d))) break;
      t.text.push_back(d);
      advance(d);
      ++i;
    }
    out.push_back(std::move(t));
  }
  out.push_back({Token::Kind::end, {}, loc});
  return out;
}

bool is_name(std::string_view s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  return std::all_of(s.begin(), s.end(),
                     [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; });
}

std::optional<int> parse_agent_ref(std::string_view s) {
  if (s.size() < 2 || s[0] != 'a' || s.size() > 8) return std::nullopt;
  int v = 0;
  auto [p, ec] = std::from_chars(s.data() + 1, s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<long long> parse_int(std::string_view s) {
  long long v = 0;
  const char* b = s.data();
  if (!s.empty() && s[0] == '+') ++b;
  auto [p, ec] = std::from_chars(b, s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || b == s.data() + s.size()) return std::nullopt;
  return v;
}

// FLOAT := [+-]? (digits [. digits?] | . digits) ([eE] [+-]? digits)?
bool looks_numeric(std::string_view s) {
  std::size_t i = 0;
  if (i < s.size() && (s[i] == '+' || s[i] == '-')) ++i;
  std::size_t digits = 0;
  while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i, ++digits;
  if (i < s.size() && s[i] == '.') {
    ++i;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i, ++digits;
  }
  if (digits == 0) return false;
  if (i < s.size() && (s[i] == 'e' || s[i] == 'E')) {
    ++i;
    if (i < s.size() && (s[i] == '+' || s[i] == '-')) ++i;
    std::size_t exp_digits = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i, ++exp_digits;
    if (exp_digits == 0) return false;
  }
  return i == s.size();
}

std::optional<double> parse_float(std::string_view s) {
  if (!looks_numeric(s)) return std::nullopt;
  const std::string buf(s);
  char* end = nullptr;
  const double v = std::strtod(buf.c_str(), &end);
  if (end != buf.c_str() + buf.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// ---- parser ---------------------------------------------------------------------

class Parser {
 public:
  explicit Parser(std::string_view src) : toks_(lex(src)) {}

  CostProgram program() {
    CostProgram prog;
    if (peek().kind == Token::Kind::end) throw DslError(peek().loc, "program has no terms");
    while (peek().kind != Token::Kind::end) {
      const Token open = expect_open("expected '(' to start a declaration or term");
      const Token head = next();
      if (head.kind != Token::Kind::atom) throw DslError(head.loc, "expected 'refpath' or 'term'");
      if (head.text == "refpath") {
        prog.refpaths.push_back(refpath(open.loc));
      } else if (head.text == "term") {
        prog.terms.push_back(term(open.loc));
      } else {
        throw DslError(head.loc, "unknown top-level form '" + head.text + "' (expected refpath or term)");
      }
    }
    check_program(prog);
    return prog;
  }

 private:
  const Token& peek() const { return toks_[pos_]; }
  Token next() {
    Token t = toks_[pos_];
    if (t.kind != Token::Kind::end) ++pos_;
    return t;
  }
  Token expect_open(const std::string& what) {
    Token t = next();
    if (t.kind != Token::Kind::open) throw DslError(t.loc, what + describe(t));
    return t;
  }
  void expect_close(const std::string& form) {
    Token t = next();
    if (t.kind != Token::Kind::close) {
      throw DslError(t.loc, "expected ')' to close " + form + describe(t));
    }
  }
  static std::string describe(const Token& t) {
    switch (t.kind) {
      case Token::Kind::end: return ", found end of input";
      case Token::Kind::open: return ", found '('";
      case Token::Kind::close: return ", found ')'";
      case Token::Kind::atom: return ", found '" + t.text + "'";
    }
    return {};
  }
  Token atom(const std::string& what) {
    Token t = next();
    if (t.kind != Token::Kind::atom) throw DslError(t.loc, "expected " + what + describe(t));
    return t;
  }
  std::string name(const std::string& what) {
    Token t = atom(what);
    if (!is_name(t.text) || parse_agent_ref(t.text)) {
      throw DslError(t.loc, "invalid " + what + " '" + t.text + "'");
    }
    return t.text;
  }
  double number(const std::string& what) {
    Token t = atom(what);
    auto v = parse_float(t.text);
    if (!v) throw DslError(t.loc, "expected " + what + ", found '" + t.text + "'");
    return *v;
  }
  int agent(const std::string& what) {
    Token t = atom(what);
    auto a = parse_agent_ref(t.text);
    if (!a) throw DslError(t.loc, "expected agent reference (a0, a1, ...), found '" + t.text + "'");
    return *a;
  }

  RefPathDecl refpath(SourceLoc loc) {
    RefPathDecl d;
    d.loc = loc;
    d.name = name("refpath name");
    expect_open("expected '(' to start a lane query");
    Token kind = atom("lane query kind");
    auto k = lane_query_kind_from_string(kind.text);
    if (!k) throw DslError(kind.loc, "unknown lane query '" + kind.text + "'");
    d.kind = *k;
    Token arg = atom("agent reference or lane id");
    if (auto a = parse_agent_ref(arg.text)) {
      d.agent = *a;
    } else if (auto lane = parse_int(arg.text); lane && *lane >= 0 && *lane <= 1'000'000'000) {
      if (d.kind == LaneQuery::Kind::current_lane) {
        throw DslError(arg.loc, "current_lane takes an agent reference, not a lane id");
      }
      d.lane = static_cast<int>(*lane);
    } else {
      throw DslError(arg.loc, "expected agent reference or lane id, found '" + arg.text + "'");
    }
    expect_close("lane query");
    expect_close("refpath");
    return d;
  }

  Term term(SourceLoc loc) {
    Term t;
    t.loc = loc;
    t.name = name("term name");
    const SourceLoc wloc = peek().loc;
    t.weight = number("term weight");
    if (t.weight < 0.0) throw DslError(wloc, "term weight must be >= 0");
    t.expr = expr();
    expect_close("term");
    return t;
  }

  Expr expr() {
    const Token& t = peek();
    if (t.kind == Token::Kind::atom) {
      Token a = next();
      auto v = parse_float(a.text);
      if (!v) {
        if (looks_numeric(a.text)) throw DslError(a.loc, "numeric literal out of range '" + a.text + "'");
        throw DslError(a.loc, "unexpected symbol '" + a.text + "' (operators must be parenthesized)");
      }
      Expr e;
      e.kind = Expr::Kind::literal;
      e.value = *v;
      e.loc = a.loc;
      return e;
    }
    if (t.kind != Token::Kind::open) throw DslError(t.loc, "expected expression" + describe(t));
    const Token open = next();
    const Token head = atom("operator");
    Expr e;
    e.loc = open.loc;
    e.op = head.text;
    const std::string& op = head.text;
    if (op == "x" || op == "y" || op == "heading" || op == "speed" || op == "accel") {
      e.kind = Expr::Kind::accessor;
      e.agents = {agent("agent reference")};
    } else if (op == "s" || op == "d") {
      e.kind = Expr::Kind::accessor;
      e.agents = {agent("agent reference")};
      e.refpath = name("refpath name");
    } else if (op == "dist") {
      e.kind = Expr::Kind::accessor;
      e.agents = {agent("agent reference"), agent("agent reference")};
    } else if (op == "sin_t") {
      e.kind = Expr::Kind::accessor;
      e.value = number("frequency");
    } else if (contains(unary_names(), op) || (contains(reduction_names(), op) && op != "at_t")) {
      e.kind = Expr::Kind::call;
      e.args.push_back(operand(op));
    } else if (contains(binary_names(), op)) {
      e.kind = Expr::Kind::call;
      e.args.push_back(operand(op));
      e.args.push_back(operand(op));
    } else if (op == "clamp") {
      e.kind = Expr::Kind::call;
      e.args.push_back(operand(op));
      const SourceLoc bloc = peek().loc;
      Expr lo = literal("clamp lower bound");
      Expr hi = literal("clamp upper bound");
      if (lo.value > hi.value) throw DslError(bloc, "clamp lower bound exceeds upper bound");
      e.args.push_back(lo);
      e.args.push_back(hi);
    } else if (op == "at_t") {
      e.kind = Expr::Kind::call;
      Token idx = atom("timestep index");
      auto k = parse_int(idx.text);
      if (!k || std::abs(*k) > 1'000'000) {
        throw DslError(idx.loc, "expected integer timestep index, found '" + idx.text + "'");
      }
      e.value = static_cast<double>(*k);
      e.args.push_back(operand(op));
    } else {
      throw DslError(head.loc, "unknown operator '" + op + "'");
    }
    if (peek().kind != Token::Kind::close) {
      throw DslError(peek().loc, "too many arguments to '" + op + "'" + describe(peek()));
    }
    next();
    return e;
  }

  Expr operand(const std::string& op) {
    if (peek().kind == Token::Kind::close || peek().kind == Token::Kind::end) {
      throw DslError(peek().loc, "too few arguments to '" + op + "'");
    }
    return expr();
  }

  Expr literal(const std::string& what) {
    Expr e;
    e.kind = Expr::Kind::literal;
    e.loc = peek().loc;
    e.value = number(what);
    return e;
  }

  // Every accessor path must cross exactly one time reduction.
  static void check_reductions(const Expr& e, int depth) {
    if (e.kind == Expr::Kind::accessor) {
      if (depth == 0) throw DslError(e.loc, "unreduced time dimension: '" + e.op + "' needs a time reduction");
      if (depth > 1) throw DslError(e.loc, "'" + e.op + "' is inside nested time reductions");
      return;
    }
    if (e.kind == Expr::Kind::call && contains(reduction_names(), e.op)) {
      if (!has_accessor(e.args[0])) {
        throw DslError(e.loc, "'" + e.op + "' applied to a time-independent expression");
      }
      check_reductions(e.args[0], depth + 1);
      return;
    }
    for (const Expr& c : e.args) check_reductions(c, depth);
  }

  static bool has_accessor(const Expr& e) {
    if (e.kind == Expr::Kind::accessor) return true;
    return std::any_of(e.args.begin(), e.args.end(), has_accessor);
  }

  static void check_refs(const Expr& e, const std::set<std::string>& declared) {
    if (!e.refpath.empty() && !declared.count(e.refpath)) {
      throw DslError(e.loc, "undeclared refpath '" + e.refpath + "'");
    }
    for (const Expr& c : e.args) check_refs(c, declared);
  }

  static void check_program(const CostProgram& prog) {
    if (prog.terms.empty()) {
      throw DslError(prog.refpaths.empty() ? SourceLoc{} : prog.refpaths.back().loc, "program has no terms");
    }
    std::set<std::string> names;
    std::set<std::string> declared;
    for (const RefPathDecl& d : prog.refpaths) {
      if (!names.insert(d.name).second) throw DslError(d.loc, "duplicate name '" + d.name + "'");
      declared.insert(d.name);
    }
    for (const Term& t : prog.terms) {
      if (!names.insert(t.name).second) throw DslError(t.loc, "duplicate name '" + t.name + "'");
      check_refs(t.expr, declared);
      check_reductions(t.expr, 0);
    }
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void print_expr(const Expr& e, std::string& out) {
  if (e.kind == Expr::Kind::literal) {
    out += fmt_double(e.value);
    return;
  }
  out += '(';
  out += e.op;
  if (e.kind == Expr::Kind::accessor) {
    if (e.op == "sin_t") {
      out += ' ';
      out += fmt_double(e.value);
    }
    for (int a : e.agents) out += " a" + std::to_string(a);
    if (!e.refpath.empty()) out += ' ' + e.refpath;
  } else {
    if (e.op == "at_t") out += ' ' + std::to_string(static_cast<long long>(e.value));
    for (const Expr& c : e.args) {
      out += ' ';
      print_expr(c, out);
    }
  }
  out += ')';
}

}  // namespace

CostProgram parse(std::string_view text) { return Parser(text).program(); }

std::string print(const Expr& expr) {
  std::string out;
  print_expr(expr, out);
  return out;
}

std::string print(const CostProgram& program) {
  std::string out;
  for (const RefPathDecl& d : program.refpaths) {
    out += "(refpath " + d.name + " (" + std::string(to_string(d.kind)) + ' ';
    out += d.agent >= 0 ? "a" + std::to_string(d.agent) : std::to_string(d.lane);
    out += "))\n";
  }
  for (const Term& t : program.terms) {
    out += "(term " + t.name + ' ' + fmt_double(t.weight) + ' ' + print(t.expr) + ")\n";
  }
  return out;
}

namespace {

void validate_expr(const Expr& e, int num_agents) {
  for (int a : e.agents) {
    if (a >= num_agents) {
      throw DslError(e.loc, "agent a" + std::to_string(a) + " out of range (scene has " +
                                std::to_string(num_agents) + " agents)");
    }
  }
  for (const Expr& c : e.args) validate_expr(c, num_agents);
}

}  // namespace

void validate(const CostProgram& program, int num_agents) {
  for (const RefPathDecl& d : program.refpaths) {
    if (d.agent >= num_agents) {
      throw DslError(d.loc, "refpath '" + d.name + "': agent a" + std::to_string(d.agent) + " out of range");
    }
  }
  for (const Term& t : program.terms) validate_expr(t.expr, num_agents);
}

// ---- refpath resolution -------------------------------------------------------------

RefPath resolve_refpath(const RefPathDecl& decl, const Scenario& scenario) {
  auto fail = [&](const std::string& why) -> DslError {
    return DslError(decl.loc, "refpath '" + decl.name + "': " + why);
  };
  try {
    int lane = decl.lane;
    if (decl.agent >= 0) {
      if (decl.agent >= static_cast<int>(scenario.agents.size())) throw fail("agent out of range");
      auto cur = current_lane_at(scenario, decl.agent, scenario.t_now);
      if (!cur) throw fail("agent a" + std::to_string(decl.agent) + " is not on any driving lane");
      lane = *cur;
    }
    LaneQuery q{decl.kind, decl.agent, lane, 32};
    std::vector<int> ids = decl.kind == LaneQuery::Kind::current_lane ? std::vector<int>{lane}
                                                                      : lane_query(scenario, q);
    if (ids.empty()) throw fail(std::string(to_string(decl.kind)) + " found no lane");
    if (decl.kind == LaneQuery::Kind::successor_chain) {
      std::vector<Vec2> pts;
      for (int id : ids) {
        for (const Vec2& p : scenario.polyline(id).points) {
          if (!pts.empty() && norm(p - pts.back()) < 1e-9) continue;
          pts.push_back(p);
        }
      }
      return build_ref_path(pts);
    }
    return build_ref_path(corridor_points(scenario, ids.front()));
  } catch (const SceneError& e) {
    throw fail(e.what());
  } catch (const std::invalid_argument& e) {
    throw fail(e.what());
  }
}

std::map<std::string, RefPath> resolve_refpaths(const CostProgram& program, const Scenario& scenario) {
  std::map<std::string, RefPath> out;
  for (const RefPathDecl& d : program.refpaths) out.emplace(d.name, resolve_refpath(d, scenario));
  return out;
}

// ---- evaluation -----------------------------------------------------------------

namespace {

constexpr double kSmoothEps = 1e-12;

class Builder {
 public:
  Builder(std::span<const g::Var> positions, const std::map<std::string, RefPath>& refpaths, double dt)
      : pos_(positions), refpaths_(refpaths), dt_(dt) {
    if (pos_.empty()) throw std::invalid_argument("cost evaluation needs at least one agent trajectory");
    T_ = pos_[0].shape().at(0);
    for (const g::Var& p : pos_) {
      if (p.shape() != g::Shape{T_, 2}) {
        throw g::ShapeError("agent trajectories must share shape [" + std::to_string(T_) + ", 2], got " +
                            g::shape_str(p.shape()));
      }
    }
    for (std::size_t t = 0; t < T_; ++t) {
      next_.push_back(T_ == 1 ? 0 : std::min(t + 1, T_ - 1));
      prev_.push_back(T_ == 1 ? 0 : std::min(t, T_ - 2));
    }
  }

  g::Tape& tape() { return pos_[0].tape(); }

  g::Var build(const Expr& e) {
    switch (e.kind) {
      case Expr::Kind::literal: return tape().constant(g::Tensor::scalar(e.value));
      case Expr::Kind::accessor: return accessor(e);
      case Expr::Kind::call: return call(e);
    }
    throw DslError(e.loc, "bad expression node");
  }

 private:
  struct AgentCache {
    std::optional<g::Var> x, y, vx, vy, speed, accel, heading;
  };

  AgentCache& cache(const Expr& e, int a) {
    if (a < 0 || a >= static_cast<int>(pos_.size())) {
      throw DslError(e.loc, "agent a" + std::to_string(a) + " has no trajectory");
    }
    return agents_[a];
  }

  g::Var column(int a, int c) {
    g::Tensor sel({2, 1});
    sel[c] = 1.0;
    return g::reshape(g::matmul(pos_[a], tape().constant(sel)), {T_});
  }

  g::Var ddt(g::Var v) { return g::mul(g::sub(g::gather(v, next_), g::gather(v, prev_)), 1.0 / dt_); }

  g::Var x(const Expr& e, int a) {
    auto& c = cache(e, a);
    if (!c.x) c.x = column(a, 0);
    return *c.x;
  }
  g::Var y(const Expr& e, int a) {
    auto& c = cache(e, a);
    if (!c.y) c.y = column(a, 1);
    return *c.y;
  }
  g::Var speed(const Expr& e, int a) {
    auto& c = cache(e, a);
    if (!c.speed) {
      if (!c.vx) c.vx = ddt(x(e, a));
      if (!c.vy) c.vy = ddt(y(e, a));
      c.speed = g::sqrt(g::add(g::add(g::square(*c.vx), g::square(*c.vy)), kSmoothEps));
    }
    return *c.speed;
  }

  const FrenetVars& frenet(const Expr& e, int a) {
    auto it = refpaths_.find(e.refpath);
    if (it == refpaths_.end()) throw DslError(e.loc, "refpath '" + e.refpath + "' is not resolved");
    cache(e, a);
    const auto key = std::pair(a, e.refpath);
    auto f = frenet_.find(key);
    if (f == frenet_.end()) f = frenet_.emplace(key, project_trajectory(it->second, pos_[a])).first;
    return f->second;
  }

  g::Var accessor(const Expr& e) {
    if (e.op == "x") return x(e, e.agents[0]);
    if (e.op == "y") return y(e, e.agents[0]);
    if (e.op == "speed") return speed(e, e.agents[0]);
    if (e.op == "accel") {
      auto& c = cache(e, e.agents[0]);
      if (!c.accel) c.accel = ddt(speed(e, e.agents[0]));
      return *c.accel;
    }
    if (e.op == "heading") {
      auto& c = cache(e, e.agents[0]);
      if (!c.heading) {
        speed(e, e.agents[0]);
        c.heading = g::atan2(*c.vy, *c.vx);
      }
      return *c.heading;
    }
    if (e.op == "s") return frenet(e, e.agents[0]).s;
    if (e.op == "d") return frenet(e, e.agents[0]).d;
    if (e.op == "dist") {
      const int a = e.agents[0];
      const int b = e.agents[1];
      g::Var dx = g::sub(x(e, a), x(e, b));
      g::Var dy = g::sub(y(e, a), y(e, b));
      return g::sqrt(g::add(g::add(g::square(dx), g::square(dy)), kSmoothEps));
    }
    if (e.op == "sin_t") {
      g::Tensor v({T_});
      for (std::size_t t = 0; t < T_; ++t) v[t] = std::sin(e.value * static_cast<double>(t) * dt_);
      return tape().constant(std::move(v));
    }
    throw DslError(e.loc, "unknown accessor '" + e.op + "'");
  }

  g::Var call(const Expr& e) {
    const std::string& op = e.op;
    if (op == "clamp") return g::clamp(build(e.args[0]), e.args[1].value, e.args[2].value);
    if (op == "at_t") {
      const long long k = static_cast<long long>(e.value);
      const long long idx = k < 0 ? static_cast<long long>(T_) + k : k;
      if (idx < 0 || idx >= static_cast<long long>(T_)) {
        throw DslError(e.loc, "at_t index " + std::to_string(k) + " outside horizon of " +
                                  std::to_string(T_) + " steps");
      }
      return g::reshape(g::gather(build(e.args[0]), {static_cast<std::size_t>(idx)}), {});
    }
    if (e.args.size() == 1) {
      g::Var a = build(e.args[0]);
      if (op == "neg") return g::neg(a);
      if (op == "abs") return g::abs(a);
      if (op == "sq") return g::square(a);
      if (op == "sqrt") return g::sqrt(a);
      if (op == "relu") return g::relu(a);
      if (op == "sin") return g::sin(a);
      if (op == "cos") return g::cos(a);
      if (op == "exp") return g::exp(a);
      if (op == "ddt") return a.shape().empty() ? tape().constant(g::Tensor::scalar(0.0)) : ddt(a);
      if (op == "mean_t") return g::mean(a);
      if (op == "sum_t") return g::sum(a);
      if (op == "min_t") return g::min(a);
      if (op == "max_t") return g::max(a);
    }
    if (e.args.size() == 2) {
      g::Var a = build(e.args[0]);
      g::Var b = build(e.args[1]);
      if (op == "add") return g::add(a, b);
      if (op == "sub") return g::sub(a, b);
      if (op == "mul") return g::mul(a, b);
      if (op == "div") return g::div(a, b);
      if (op == "min") return g::minimum(a, b);
      if (op == "max") return g::maximum(a, b);
    }
    throw DslError(e.loc, "unknown operator '" + op + "'");
  }

  std::span<const g::Var> pos_;
  const std::map<std::string, RefPath>& refpaths_;
  double dt_;
  std::size_t T_ = 0;
  std::vector<std::size_t> next_, prev_;
  std::map<int, AgentCache> agents_;
  std::map<std::pair<int, std::string>, FrenetVars> frenet_;
};

void check_context(const CostProgram& program, const EvalContext& ctx) {
  validate(program, static_cast<int>(ctx.positions.size()));
  for (const RefPathDecl& d : program.refpaths) {
    if (!ctx.refpaths.count(d.name)) throw DslError(d.loc, "refpath '" + d.name + "' is not resolved");
  }
}

CostValue values_of(const CostProgram& program, const CostVars& vars) {
  CostValue out;
  out.total = vars.total.value().item();
  for (std::size_t i = 0; i < program.terms.size(); ++i) {
    const Term& t = program.terms[i];
    const double v = vars.terms[i].value().item();
    if (!std::isfinite(v)) throw DslError(t.loc, "term '" + t.name + "' evaluated to a non-finite value");
    out.terms.push_back({t.name, t.weight, v});
  }
  return out;
}

}  // namespace

CostVars record(const CostProgram& program, std::span<const g::Var> positions,
                const std::map<std::string, RefPath>& refpaths, double dt) {
  Builder b(positions, refpaths, dt);
  CostVars out;
  std::optional<g::Var> total;
  for (const Term& t : program.terms) {
    g::Var v = b.build(t.expr);
    if (v.size() != 1) throw DslError(t.loc, "term '" + t.name + "' does not reduce to a scalar");
    v = g::reshape(v, {});
    out.terms.push_back(v);
    g::Var w = g::mul(v, t.weight);
    total = total ? g::add(*total, w) : w;
  }
  out.total = *total;
  return out;
}

CostValue evaluate(const CostProgram& program, const EvalContext& ctx) {
  check_context(program, ctx);
  g::Tape tape;
  std::vector<g::Var> pos;
  for (const g::Tensor& p : ctx.positions) pos.push_back(tape.constant(p));
  return values_of(program, record(program, pos, ctx.refpaths, ctx.dt));
}

CostGradient gradient(const CostProgram& program, const EvalContext& ctx) {
  check_context(program, ctx);
  g::Tape tape;
  std::vector<g::Var> pos;
  for (const g::Tensor& p : ctx.positions) pos.push_back(tape.leaf(p));
  const CostVars vars = record(program, pos, ctx.refpaths, ctx.dt);
  CostGradient out;
  out.value = values_of(program, vars);
  tape.backward(vars.total);
  for (const g::Var& p : pos) out.d_positions.push_back(tape.grad(p));
  return out;
}

// ---- builtin programs -------------------------------------------------------------

const std::vector<BuiltinProgram>& builtin_library() {
  static const std::vector<BuiltinProgram> lib = [] {
    std::vector<BuiltinProgram> v = {
        {"speed_limit", "vehicle 1 drives below 10 m/s",
         "(term speed_limit 1.0 (mean_t (sq (relu (sub (speed a0) 10)))))\n", {}},
        {"target_point", "vehicle 1 ends its plan at (60, 0)",
         "(term target 0.05 (add (at_t -1 (sq (sub (x a0) 60))) (at_t -1 (sq (y a0)))))\n", {}},
        {"collision_avoidance", "vehicles 1 and 2 keep at least 5 m apart",
         "(term avoid 1.0 (sum_t (sq (relu (sub 5 (dist a0 a1))))))\n", {}},
        {"lane_change_left", "vehicle 1 changes to the left lane",
         "(refpath target (left_lane a0))\n"
         "(term reach 2.0 (mean_t (mul (relu (sub (sin_t 0.2) 0.6)) (sq (d a0 target)))))\n"
         "(term end 1.0 (at_t -1 (sq (d a0 target))))\n", {}},
        {"lane_change_right", "vehicle 1 changes to the right lane",
         "(refpath target (right_lane a0))\n"
         "(term reach 2.0 (mean_t (mul (relu (sub (sin_t 0.2) 0.6)) (sq (d a0 target)))))\n"
         "(term end 1.0 (at_t -1 (sq (d a0 target))))\n", {}},
        {"rightmost", "vehicle 1 drives to the rightmost lane",
         "(refpath target (rightmost_lane a0))\n"
         "(term settle 5.0 (at_t -1 (sq (d a0 target))))\n"
         "(term approach 2.5 (at_t -20 (sq (d a0 target))))\n", {}},
        {"cut_in", "vehicle 1 cuts in front of vehicle 2",
         "(refpath lane (current_lane a1))\n"
         "(term merge 3.0 (at_t -1 (sq (d a0 lane))))\n"
         "(term merge_early 1.5 (at_t -20 (sq (d a0 lane))))\n"
         "(term keep_lane 3.0 (mean_t (sq (d a1 lane))))\n"
         "(term gap_min 3.0 (at_t -1 (sq (relu (sub 6 (sub (s a0 lane) (s a1 lane)))))))\n"
         "(term gap_max 3.0 (at_t -1 (sq (relu (sub (sub (s a0 lane) (s a1 lane)) 12)))))\n", {}},
        {"yield", "vehicle 1 stops to yield to vehicle 2",
         "(term stop 120.0 (mean_t (sq (relu (sub (speed a0) 0.3)))))\n", {}},
        {"reverse", "vehicle 1 drives backwards along its lane",
         "(refpath lane (current_lane a0))\n"
         "(term reverse 1.0 (mean_t (sq (relu (add (ddt (s a0 lane)) 2)))))\n", {}},
        {"out_of_road", "vehicle 1 drives out of the road",
         "(refpath edge (road_edge_right a0))\n"
         "(term off_road 3.0 (at_t -1 (sq (relu (add (d a0 edge) 3)))))\n"
         "(term stay_off 3.0 (mean_t (mul (relu (sub (sin_t 0.2) 0.5)) (sq (relu (add (d a0 edge) 3))))))\n", {}},
        {"weaving", "vehicle 1 sways left and right within its lane",
         "(refpath lane (current_lane a0))\n"
         "(term weave 1.0 (mean_t (sq (sub (d a0 lane) (mul 1.2 (sin_t 1.5))))))\n", {}},
    };
    for (BuiltinProgram& b : v) b.program = parse(b.text);
    return v;
  }();
  return lib;
}

const BuiltinProgram& builtin(std::string_view name) {
  for (const BuiltinProgram& b : builtin_library()) {
    if (b.name == name) return b;
  }
  throw std::invalid_argument("unknown builtin program '" + std::string(name) + "'");
}

}  // namespace trajguide::dsl
