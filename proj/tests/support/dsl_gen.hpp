#pragma once

// Random cost-program generator and malformed-mutation helpers for DSL tests.

#include <random>
#include <string>
#include <vector>

#include "trajguide/costdsl.hpp"

namespace dslgen {

using trajguide::dsl::CostProgram;
using trajguide::dsl::Expr;
using trajguide::dsl::RefPathDecl;
using trajguide::dsl::Term;

struct GenOptions {
  int num_agents = 2;
  bool smooth_only = false;  // restrict to everywhere-differentiable ops
  int max_depth = 4;
};

class Generator {
 public:
  Generator(std::uint64_t seed, GenOptions opt) : rng_(seed), opt_(opt) {}

  CostProgram program() {
    CostProgram p;
    const int decls = pick(0, 2);
    for (int i = 0; i < decls; ++i) {
      RefPathDecl d;
      d.name = "r" + std::to_string(i);
      static const trajguide::LaneQuery::Kind kinds[] = {
          trajguide::LaneQuery::Kind::current_lane, trajguide::LaneQuery::Kind::rightmost_lane,
          trajguide::LaneQuery::Kind::leftmost_lane};
      d.kind = kinds[pick(0, 2)];
      d.agent = pick(0, opt_.num_agents - 1);
      p.refpaths.push_back(d);
    }
    refs_.clear();
    for (const RefPathDecl& d : p.refpaths) refs_.push_back(d.name);
    const int terms = pick(1, 3);
    for (int i = 0; i < terms; ++i) {
      Term t;
      t.name = "t" + std::to_string(i);
      t.weight = std::uniform_real_distribution<double>(0.0, 3.0)(rng_);
      t.expr = scalar(0);
      p.terms.push_back(std::move(t));
    }
    return p;
  }

 private:
  int pick(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

  Expr lit(double v) {
    Expr e;
    e.kind = Expr::Kind::literal;
    e.value = v;
    return e;
  }
  Expr call(std::string op, std::vector<Expr> args, double value = 0.0) {
    Expr e;
    e.kind = Expr::Kind::call;
    e.op = std::move(op);
    e.args = std::move(args);
    e.value = value;
    return e;
  }

  std::string unary_op() {
    static const std::vector<std::string> smooth{"neg", "sq", "sin", "cos"};
    static const std::vector<std::string> all{"neg", "abs", "sq", "relu", "sin", "cos", "ddt"};
    const auto& v = opt_.smooth_only ? smooth : all;
    return v[pick(0, static_cast<int>(v.size()) - 1)];
  }
  std::string binary_op() {
    static const std::vector<std::string> smooth{"add", "sub", "mul"};
    static const std::vector<std::string> all{"add", "sub", "mul", "min", "max"};
    const auto& v = opt_.smooth_only ? smooth : all;
    return v[pick(0, static_cast<int>(v.size()) - 1)];
  }

  Expr scalar(int depth) {
    const int choice = depth >= opt_.max_depth ? 0 : pick(0, 5);
    switch (choice) {
      case 0:
      case 1: {
        static const std::vector<std::string> red{"mean_t", "sum_t", "min_t", "max_t", "at_t"};
        const std::string op = red[pick(0, opt_.smooth_only ? 1 : 4)];
        const double k = op == "at_t" ? static_cast<double>(pick(-5, 5)) : 0.0;
        return call(op, {series(depth + 1)}, k);
      }
      case 2: return call(unary_op(), {scalar(depth + 1)});
      case 3: return call(binary_op(), {scalar(depth + 1), scalar(depth + 1)});
      case 4: return lit(std::round(real(-5, 5) * 1000) / 1000);
      default: return call("mul", {lit(real(0.1, 2.0)), scalar(depth + 1)});
    }
  }

  Expr accessor() {
    Expr e;
    e.kind = Expr::Kind::accessor;
    std::vector<std::string> names{"x", "y", "speed", "dist", "sin_t"};
    if (!opt_.smooth_only) names.push_back("accel");
    if (!refs_.empty()) {
      names.push_back("s");
      names.push_back("d");
    }
    e.op = names[pick(0, static_cast<int>(names.size()) - 1)];
    const int a = pick(0, opt_.num_agents - 1);
    if (e.op == "sin_t") {
      e.value = real(0.1, 3.0);
    } else if (e.op == "dist") {
      e.agents = {a, (a + 1) % opt_.num_agents};
    } else {
      e.agents = {a};
    }
    if (e.op == "s" || e.op == "d") e.refpath = refs_[pick(0, static_cast<int>(refs_.size()) - 1)];
    return e;
  }

  Expr series(int depth) {
    const int choice = depth >= opt_.max_depth ? 0 : pick(0, 4);
    switch (choice) {
      case 0:
      case 1: return accessor();
      case 2: return call(unary_op(), {series(depth + 1)});
      case 3: {
        Expr other = pick(0, 1) ? series(depth + 1) : lit(std::round(real(-3, 3) * 100) / 100);
        if (pick(0, 1)) return call(binary_op(), {series(depth + 1), other});
        return call(binary_op(), {other, series(depth + 1)});
      }
      default:
        if (opt_.smooth_only) return call("mul", {series(depth + 1), series(depth + 1)});
        return call("clamp", {series(depth + 1), lit(-50), lit(50)});
    }
  }

  std::mt19937_64 rng_;
  GenOptions opt_;
  std::vector<std::string> refs_;
};

// Mutations that are malformed by construction, with a short label.
struct Mutation {
  std::string label;
  std::string text;
};

inline std::vector<Mutation> malformed_mutations(const std::string& text, std::mt19937_64& rng) {
  std::vector<Mutation> out;
  auto positions_of = [&](char c) {
    std::vector<std::size_t> v;
    for (std::size_t i = 0; i < text.size(); ++i) {
      if (text[i] == c) v.push_back(i);
    }
    return v;
  };
  auto any = [&](const std::vector<std::size_t>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  const auto closes = positions_of(')');
  const auto opens = positions_of('(');
  {
    std::string t = text;
    t.erase(any(closes), 1);
    out.push_back({"drop_close", t});
  }
  {
    std::string t = text;
    t.insert(any(opens), "(");
    out.push_back({"extra_open", t});
  }
  {
    std::string t = text;
    t.insert(any(closes) + 1, ")");
    out.push_back({"extra_close", t});
  }
  {
    std::string t = text;
    t.insert(any(opens) + 1, "bogus_op ");
    out.push_back({"unknown_symbol", t});
  }
  {
    std::string t = text;
    t.insert(any(closes), " @");
    out.push_back({"junk_char", t});
  }
  {
    // Strip every time reduction keyword's argument wrapper: (mean_t X) -> X leaves a bare series.
    std::string t = text;
    for (const char* red : {"(mean_t ", "(sum_t ", "(min_t ", "(max_t "}) {
      const auto p = t.find(red);
      if (p != std::string::npos) {
        t.replace(p, std::string(red).size(), "(sq ");
        out.push_back({"drop_reduction", t});
        break;
      }
    }
  }
  {
    std::string t = text;
    const auto p = t.find("(term ");
    t.insert(p + 6, "9");
    out.push_back({"bad_name", t});
  }
  {
    std::string t = text;
    const auto p = t.rfind("(term ");
    const auto q = t.find(' ', p + 6);
    t.replace(q, 1, " -1 ");
    out.push_back({"extra_weight_or_negative", t});
  }
  out.push_back({"empty", "   ; nothing here\n"});
  return out;
}

}  // namespace dslgen
