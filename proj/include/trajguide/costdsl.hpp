#pragma once

// Differentiable s-expression cost language.
//
//   program := (decl | term)+
//   decl    := "(refpath" NAME query ")"
//   query   := "(" QUERYKIND (agentref | laneid) ")"
//   term    := "(term" NAME FLOAT expr ")"
//   expr    := FLOAT | "(" OP expr* ")" | accessor
//
// Accessors produce a time series over the planning horizon; every path from
// a term root to an accessor must cross exactly one time reduction.

#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "trajguide/frenet.hpp"
#include "trajguide/grad.hpp"
#include "trajguide/scene.hpp"

namespace trajguide::dsl {

struct SourceLoc {
  int line = 1;
  int column = 1;
};

class DslError : public std::runtime_error {
 public:
  DslError(SourceLoc loc, const std::string& message);
  SourceLoc loc() const { return loc_; }
  const std::string& message() const { return message_; }

 private:
  SourceLoc loc_;
  std::string message_;
};

struct Expr {
  enum class Kind { literal, accessor, call };

  Kind kind = Kind::literal;
  double value = 0.0;        // literal; sin_t frequency; clamp bounds live in args
  std::string op;            // accessor or operator name
  std::vector<int> agents;   // accessor agent indices
  std::string refpath;       // s / d accessors
  std::vector<Expr> args;    // call operands
  SourceLoc loc;

  bool operator==(const Expr& other) const;
};

struct RefPathDecl {
  std::string name;
  LaneQuery::Kind kind = LaneQuery::Kind::current_lane;
  int agent = -1;  // set when the query names an agent
  int lane = -1;   // set when the query names a lane id
  SourceLoc loc;

  bool operator==(const RefPathDecl& other) const;
};

struct Term {
  std::string name;
  double weight = 1.0;
  Expr expr;
  SourceLoc loc;

  bool operator==(const Term& other) const;
};

struct CostProgram {
  std::vector<RefPathDecl> refpaths;
  std::vector<Term> terms;

  bool operator==(const CostProgram& other) const = default;
  int max_agent() const;  // highest agent index referenced, -1 if none
};

// Parses and structurally validates (arity, symbols, reductions, names).
CostProgram parse(std::string_view text);

// Canonical text: declarations first, then terms; floats printed with %.17g.
std::string print(const CostProgram& program);
std::string print(const Expr& expr);

// Checks agent references against the agent count.
void validate(const CostProgram& program, int num_agents);

// Names usable in the operator position, for prompts and fuzzing.
const std::vector<std::string>& accessor_names();
const std::vector<std::string>& unary_names();
const std::vector<std::string>& binary_names();
const std::vector<std::string>& reduction_names();

struct EvalContext {
  std::vector<grad::Tensor> positions;  // per agent, [T, 2], first row = current state
  std::map<std::string, RefPath> refpaths;
  double dt = kTimestep;
};

// Builds the reference paths of every declaration against the scenario
// (lane ids resolved at t_now). Errors name the failing declaration.
std::map<std::string, RefPath> resolve_refpaths(const CostProgram& program, const Scenario& scenario);
RefPath resolve_refpath(const RefPathDecl& decl, const Scenario& scenario);

struct TermValue {
  std::string name;
  double weight = 0.0;
  double value = 0.0;  // unweighted
};

struct CostValue {
  double total = 0.0;
  std::vector<TermValue> terms;
};

CostValue evaluate(const CostProgram& program, const EvalContext& ctx);

struct CostGradient {
  CostValue value;
  std::vector<grad::Tensor> d_positions;  // per agent, [T, 2]
};

CostGradient gradient(const CostProgram& program, const EvalContext& ctx);

struct CostVars {
  grad::Var total;
  std::vector<grad::Var> terms;
};

// Records the weighted cost on an existing tape, with positions given as
// [T, 2] vars (one per agent). Frenet segments are frozen at the current
// values.
CostVars record(const CostProgram& program, std::span<const grad::Var> positions,
                const std::map<std::string, RefPath>& refpaths, double dt);

struct BuiltinProgram {
  std::string name;
  std::string description;
  std::string text;
  CostProgram program;
};

// Hand-authored programs. Agent roles: a0 acts, a1 is the counterpart.
const std::vector<BuiltinProgram>& builtin_library();
const BuiltinProgram& builtin(std::string_view name);

}  // namespace trajguide::dsl
