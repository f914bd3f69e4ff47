#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace tsd {

// ---------------------------------------------------------------------------
// Types: Int | Cell | Unit | t -> t
// ---------------------------------------------------------------------------

struct Type;
using TypePtr = std::shared_ptr<const Type>;

struct Type {
  enum class Tag { Int, Cell, Unit, Arrow };
  Tag tag = Tag::Int;
  TypePtr dom, cod;  // Arrow only

  static TypePtr intty();
  static TypePtr cellty();
  static TypePtr unitty();
  static TypePtr arrow(TypePtr d, TypePtr c);

  bool is_ground() const { return tag != Tag::Arrow; }
};

bool equal(const TypePtr& a, const TypePtr& b);
std::string to_string(const TypePtr& t);

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

enum class Op {
  // binary arithmetic / logic ($ operators)
  Add, Sub, Mul, Div, Mod, Eq, Ne, Le, Lt, And, Or,
  // dataflow primitives
  Ref, Deref, Root, Link, Assign, Peek,
  // nullary command
  Step,
};

bool op_is_binop(Op o);
bool op_is_unary_prim(Op o);   // Ref, Deref, Root, Peek
int op_arity(Op o);
const char* op_name(Op o);
TypePtr op_type(Op o);
std::int64_t apply_binop(Op o, std::int64_t a, std::int64_t b);

// ---------------------------------------------------------------------------
// Terms (desugared core grammar)
// ---------------------------------------------------------------------------

struct Term;
using TermPtr = std::shared_ptr<const Term>;

struct TVar   { std::string name; };
struct TLam   { std::string name; TypePtr ann; TermPtr body; };
struct TApp   { TermPtr fn; TermPtr arg; };
struct TInt   { std::int64_t value; };
struct TUnit  {};
struct TOp    { Op op; };
struct TIf    { TermPtr cond; TermPtr then_branch; TermPtr else_branch; };
struct TRec   { std::string name; TypePtr ann; TermPtr body; };

struct Term {
  std::variant<TVar, TLam, TApp, TInt, TUnit, TOp, TIf, TRec> node;
  int line = 0, col = 0;
};

TermPtr mk_var(std::string n);
TermPtr mk_lam(std::string n, TermPtr body, TypePtr ann = nullptr);
TermPtr mk_app(TermPtr f, TermPtr a);
TermPtr mk_int(std::int64_t v);
TermPtr mk_unit();
TermPtr mk_op(Op o);
TermPtr mk_if(TermPtr c, TermPtr t, TermPtr e);
TermPtr mk_rec(std::string n, TermPtr body, TypePtr ann = nullptr);

bool term_equal(const TermPtr& a, const TermPtr& b);
bool uses_rec(const TermPtr& t);

// Fully applied primitive application spines: op t1 .. tk.
// Returns the op and operands if t is App(..App(Op o, t1).., tk) with
// k == op_arity(o).
struct PrimApp { Op op; std::vector<TermPtr> args; };
std::optional<PrimApp> as_full_prim_app(const TermPtr& t);

// The top-level statement spine: descends through let-redexes and sequencing
// redexes (both are App(Lam(x, rest), stmt) after desugaring) and returns the
// sequencing App nodes whose argument is a top-level statement, in program
// order. Used by the CLI to observe per-statement values.
std::vector<const Term*> statement_spine(const TermPtr& program);

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct ParseError {
  std::string message;
  int line = 0, col = 0;
  std::string what() const;
};

// Parses and desugars. let/`;`/infix/`true`/`false` reduce to the core
// grammar. Throws ParseError.
TermPtr parse(const std::string& source);

// ---------------------------------------------------------------------------
// Typechecking (bidirectional, annotations required on lambdas in infer
// position except let-redexes)
// ---------------------------------------------------------------------------

struct TypeError {
  std::string message;
  int line = 0, col = 0;
  std::string what() const;
};

class TypeEnv {
 public:
  void bind(const std::string& n, TypePtr t) { entries_.emplace_back(n, std::move(t)); }
  void pop() { entries_.pop_back(); }
  const TypePtr* lookup(const std::string& n) const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      if (it->first == n) return &it->second;
    return nullptr;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto& [n, t] : entries_) out.push_back(n);
    return out;
  }

 private:
  std::vector<std::pair<std::string, TypePtr>> entries_;
};

TypePtr infer_type(TypeEnv& env, const TermPtr& t);
TypePtr infer_type(const TermPtr& t);  // empty env

// ---------------------------------------------------------------------------
// Pretty printing: parse(pretty(t)) is structurally equal to t.
// ---------------------------------------------------------------------------

std::string pretty(const TermPtr& t);

}  // namespace tsd
