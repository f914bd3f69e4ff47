#include "tsd/syntax.hpp"

#include <sstream>
#include <stdexcept>

namespace tsd {

TypePtr Type::intty() {
  static TypePtr t = std::make_shared<Type>(Type{Tag::Int, nullptr, nullptr});
  return t;
}
TypePtr Type::cellty() {
  static TypePtr t = std::make_shared<Type>(Type{Tag::Cell, nullptr, nullptr});
  return t;
}
TypePtr Type::unitty() {
  static TypePtr t = std::make_shared<Type>(Type{Tag::Unit, nullptr, nullptr});
  return t;
}
TypePtr Type::arrow(TypePtr d, TypePtr c) {
  return std::make_shared<Type>(Type{Tag::Arrow, std::move(d), std::move(c)});
}

bool equal(const TypePtr& a, const TypePtr& b) {
  if (a == b) return true;
  if (!a || !b) return false;
  if (a->tag != b->tag) return false;
  if (a->tag == Type::Tag::Arrow)
    return equal(a->dom, b->dom) && equal(a->cod, b->cod);
  return true;
}

std::string to_string(const TypePtr& t) {
  if (!t) return "?";
  switch (t->tag) {
    case Type::Tag::Int: return "Int";
    case Type::Tag::Cell: return "Cell";
    case Type::Tag::Unit: return "Unit";
    case Type::Tag::Arrow: {
      std::string d = to_string(t->dom);
      if (t->dom && t->dom->tag == Type::Tag::Arrow) d = "(" + d + ")";
      return d + " -> " + to_string(t->cod);
    }
  }
  return "?";
}

bool op_is_binop(Op o) {
  switch (o) {
    case Op::Add: case Op::Sub: case Op::Mul: case Op::Div: case Op::Mod:
    case Op::Eq: case Op::Ne: case Op::Le: case Op::Lt:
    case Op::And: case Op::Or:
      return true;
    default:
      return false;
  }
}

bool op_is_unary_prim(Op o) {
  return o == Op::Ref || o == Op::Deref || o == Op::Root || o == Op::Peek;
}

int op_arity(Op o) {
  if (op_is_binop(o) || o == Op::Link || o == Op::Assign) return 2;
  if (op_is_unary_prim(o)) return 1;
  return 0;  // Step
}

const char* op_name(Op o) {
  switch (o) {
    case Op::Add: return "+";
    case Op::Sub: return "-";
    case Op::Mul: return "*";
    case Op::Div: return "/";
    case Op::Mod: return "%";
    case Op::Eq: return "==";
    case Op::Ne: return "<>";
    case Op::Le: return "<=";
    case Op::Lt: return "<";
    case Op::And: return "&&";
    case Op::Or: return "||";
    case Op::Ref: return "ref";
    case Op::Deref: return "deref";
    case Op::Root: return "root";
    case Op::Link: return "link";
    case Op::Assign: return "assign";
    case Op::Peek: return "peek";
    case Op::Step: return "step";
  }
  return "?";
}

TypePtr op_type(Op o) {
  auto I = Type::intty();
  auto C = Type::cellty();
  auto U = Type::unitty();
  if (op_is_binop(o)) return Type::arrow(I, Type::arrow(I, I));
  switch (o) {
    case Op::Ref: return Type::arrow(I, C);
    case Op::Deref: return Type::arrow(C, I);
    case Op::Root: return Type::arrow(C, I);
    case Op::Link: return Type::arrow(C, Type::arrow(I, U));
    case Op::Assign: return Type::arrow(C, Type::arrow(I, U));
    case Op::Peek: return Type::arrow(I, I);
    case Op::Step: return I;
    default: return nullptr;
  }
}

std::int64_t apply_binop(Op o, std::int64_t a, std::int64_t b) {
  switch (o) {
    case Op::Add: return a + b;
    case Op::Sub: return a - b;
    case Op::Mul: return a * b;
    case Op::Div: return b == 0 ? 0 : a / b;  // total: n/0 = 0
    case Op::Mod: return b == 0 ? 0 : a % b;  // total: n%0 = 0
    case Op::Eq: return a == b ? 1 : 0;
    case Op::Ne: return a != b ? 1 : 0;
    case Op::Le: return a <= b ? 1 : 0;
    case Op::Lt: return a < b ? 1 : 0;
    case Op::And: return (a != 0 && b != 0) ? 1 : 0;
    case Op::Or: return (a != 0 || b != 0) ? 1 : 0;
    default: throw std::logic_error("apply_binop: not a binop");
  }
}

TermPtr mk_var(std::string n) { return std::make_shared<Term>(Term{TVar{std::move(n)}}); }
TermPtr mk_lam(std::string n, TermPtr body, TypePtr ann) {
  return std::make_shared<Term>(Term{TLam{std::move(n), std::move(ann), std::move(body)}});
}
TermPtr mk_app(TermPtr f, TermPtr a) {
  return std::make_shared<Term>(Term{TApp{std::move(f), std::move(a)}});
}
TermPtr mk_int(std::int64_t v) { return std::make_shared<Term>(Term{TInt{v}}); }
TermPtr mk_unit() { return std::make_shared<Term>(Term{TUnit{}}); }
TermPtr mk_op(Op o) { return std::make_shared<Term>(Term{TOp{o}}); }
TermPtr mk_if(TermPtr c, TermPtr t, TermPtr e) {
  return std::make_shared<Term>(Term{TIf{std::move(c), std::move(t), std::move(e)}});
}
TermPtr mk_rec(std::string n, TermPtr body, TypePtr ann) {
  return std::make_shared<Term>(Term{TRec{std::move(n), std::move(ann), std::move(body)}});
}

bool term_equal(const TermPtr& a, const TermPtr& b) {
  if (a == b) return true;
  if (!a || !b) return false;
  if (a->node.index() != b->node.index()) return false;
  if (auto* va = std::get_if<TVar>(&a->node))
    return va->name == std::get<TVar>(b->node).name;
  auto ann_equal = [](const TypePtr& x, const TypePtr& y) {
    if (!x && !y) return true;
    if (!x || !y) return false;
    return equal(x, y);
  };
  if (auto* la = std::get_if<TLam>(&a->node)) {
    auto& lb = std::get<TLam>(b->node);
    return la->name == lb.name && ann_equal(la->ann, lb.ann) &&
           term_equal(la->body, lb.body);
  }
  if (auto* pa = std::get_if<TApp>(&a->node)) {
    auto& pb = std::get<TApp>(b->node);
    return term_equal(pa->fn, pb.fn) && term_equal(pa->arg, pb.arg);
  }
  if (auto* ia = std::get_if<TInt>(&a->node))
    return ia->value == std::get<TInt>(b->node).value;
  if (std::get_if<TUnit>(&a->node)) return true;
  if (auto* oa = std::get_if<TOp>(&a->node))
    return oa->op == std::get<TOp>(b->node).op;
  if (auto* fa = std::get_if<TIf>(&a->node)) {
    auto& fb = std::get<TIf>(b->node);
    return term_equal(fa->cond, fb.cond) &&
           term_equal(fa->then_branch, fb.then_branch) &&
           term_equal(fa->else_branch, fb.else_branch);
  }
  if (auto* ra = std::get_if<TRec>(&a->node)) {
    auto& rb = std::get<TRec>(b->node);
    return ra->name == rb.name && ann_equal(ra->ann, rb.ann) &&
           term_equal(ra->body, rb.body);
  }
  return false;
}

bool uses_rec(const TermPtr& t) {
  if (!t) return false;
  return std::visit(
      [](auto&& n) -> bool {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, TRec>) return true;
        else if constexpr (std::is_same_v<T, TLam>) return uses_rec(n.body);
        else if constexpr (std::is_same_v<T, TApp>)
          return uses_rec(n.fn) || uses_rec(n.arg);
        else if constexpr (std::is_same_v<T, TIf>)
          return uses_rec(n.cond) || uses_rec(n.then_branch) || uses_rec(n.else_branch);
        else return false;
      },
      t->node);
}

std::optional<PrimApp> as_full_prim_app(const TermPtr& t) {
  std::vector<TermPtr> args;
  const Term* cur = t.get();
  while (auto* app = std::get_if<TApp>(&cur->node)) {
    args.push_back(app->arg);
    cur = app->fn.get();
  }
  auto* op = std::get_if<TOp>(&cur->node);
  if (!op) return std::nullopt;
  if ((int)args.size() != op_arity(op->op)) return std::nullopt;
  std::reverse(args.begin(), args.end());
  return PrimApp{op->op, std::move(args)};
}

std::vector<const Term*> statement_spine(const TermPtr& program) {
  std::vector<const Term*> spine;
  const Term* cur = program.get();
  while (true) {
    auto* app = std::get_if<TApp>(&cur->node);
    if (!app) break;
    auto* lam = std::get_if<TLam>(&app->fn->node);
    if (!lam) break;
    if (lam->name == "_") spine.push_back(cur);  // sequencing: arg is a statement
    cur = lam->body.get();
  }
  return spine;
}

std::string ParseError::what() const {
  std::ostringstream os;
  os << "parse error at " << line << ":" << col << ": " << message;
  return os.str();
}

std::string TypeError::what() const {
  std::ostringstream os;
  os << "type error";
  if (line) os << " at " << line << ":" << col;
  os << ": " << message;
  return os.str();
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

namespace {

enum class Tok {
  Ident, Int, Lambda, Rec, If, Then, Else, Let, In, True, False,
  LParen, RParen, Unit, Dot, Semi, Equal, Colon, Arrow,
  OpAdd, OpSub, OpMul, OpDiv, OpMod, OpEq, OpNe, OpLe, OpLt, OpAnd, OpOr,
  KwInt, KwCell, KwUnit,
  Eof,
};

struct Token {
  Tok kind;
  std::string text;
  std::int64_t value = 0;
  int line = 1, col = 1;
};

class Lexer {
 public:
  explicit Lexer(const std::string& src) : src_(src) { advance_token(); }

  const Token& peek() const { return cur_; }
  Token take() {
    Token t = cur_;
    advance_token();
    return t;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError{msg, line_, col_};
  }

  int cur_byte() const { return pos_ < src_.size() ? (unsigned char)src_[pos_] : -1; }

  void bump() {
    if (pos_ >= src_.size()) return;
    if (src_[pos_] == '\n') { line_++; col_ = 1; } else { col_++; }
    pos_++;
  }

  bool starts_with(const char* s) const {
    return src_.compare(pos_, std::string::traits_type::length(s), s) == 0;
  }

  void skip_ws() {
    while (pos_ < src_.size()) {
      char c = src_[pos_];
      if (c == ' ' || c == '\t' || c == '\r' || c == '\n') { bump(); continue; }
      if (c == '/' && pos_ + 1 < src_.size() && src_[pos_ + 1] == '/') {
        while (pos_ < src_.size() && src_[pos_] != '\n') bump();
        continue;
      }
      break;
    }
  }

  void advance_token() {
    skip_ws();
    cur_ = Token{Tok::Eof, "", 0, line_, col_};
    if (pos_ >= src_.size()) return;
    cur_.line = line_;
    cur_.col = col_;
    char c = src_[pos_];

    auto single = [&](Tok k) { bump(); cur_.kind = k; };

    // UTF-8 punctuation: λ (CE BB), × (C3 97), ÷ (C3 B7)
    if (starts_with("\xce\xbb")) { bump(); bump(); cur_.kind = Tok::Lambda; return; }
    if (starts_with("\xc3\x97")) { bump(); bump(); cur_.kind = Tok::OpMul; return; }
    if (starts_with("\xc3\xb7")) { bump(); bump(); cur_.kind = Tok::OpDiv; return; }

    if (c == '\\') return single(Tok::Lambda);
    if (c == '(') {
      bump();
      skip_ws();
      if (pos_ < src_.size() && src_[pos_] == ')') { bump(); cur_.kind = Tok::Unit; return; }
      cur_.kind = Tok::LParen;
      return;
    }
    if (c == ')') return single(Tok::RParen);
    if (c == '.') return single(Tok::Dot);
    if (c == ';') return single(Tok::Semi);
    if (c == ':') return single(Tok::Colon);
    if (c == '+') return single(Tok::OpAdd);
    if (c == '*') return single(Tok::OpMul);
    if (c == '/') return single(Tok::OpDiv);
    if (c == '%') return single(Tok::OpMod);
    if (c == '-') {
      bump();
      if (cur_byte() == '>') { bump(); cur_.kind = Tok::Arrow; return; }
      cur_.kind = Tok::OpSub;
      return;
    }
    if (c == '=') {
      bump();
      if (cur_byte() == '=') { bump(); cur_.kind = Tok::OpEq; return; }
      cur_.kind = Tok::Equal;
      return;
    }
    if (c == '<') {
      bump();
      if (cur_byte() == '>') { bump(); cur_.kind = Tok::OpNe; return; }
      if (cur_byte() == '=') { bump(); cur_.kind = Tok::OpLe; return; }
      cur_.kind = Tok::OpLt;
      return;
    }
    if (c == '&') {
      bump();
      if (cur_byte() == '&') { bump(); cur_.kind = Tok::OpAnd; return; }
      fail("expected '&&'");
    }
    if (c == '|') {
      bump();
      if (cur_byte() == '|') { bump(); cur_.kind = Tok::OpOr; return; }
      fail("expected '||'");
    }
    if (c >= '0' && c <= '9') {
      std::int64_t v = 0;
      while (pos_ < src_.size() && src_[pos_] >= '0' && src_[pos_] <= '9') {
        v = v * 10 + (src_[pos_] - '0');
        bump();
      }
      cur_.kind = Tok::Int;
      cur_.value = v;
      return;
    }
    if (isalpha((unsigned char)c) || c == '_') {
      std::string id;
      while (pos_ < src_.size() &&
             (isalnum((unsigned char)src_[pos_]) || src_[pos_] == '_' || src_[pos_] == '\'')) {
        id += src_[pos_];
        bump();
      }
      cur_.text = id;
      if (id == "rec") cur_.kind = Tok::Rec;
      else if (id == "if") cur_.kind = Tok::If;
      else if (id == "then") cur_.kind = Tok::Then;
      else if (id == "else") cur_.kind = Tok::Else;
      else if (id == "let") cur_.kind = Tok::Let;
      else if (id == "in") cur_.kind = Tok::In;
      else if (id == "true") cur_.kind = Tok::True;
      else if (id == "false") cur_.kind = Tok::False;
      else if (id == "fun") cur_.kind = Tok::Lambda;
      else if (id == "Int") cur_.kind = Tok::KwInt;
      else if (id == "Cell") cur_.kind = Tok::KwCell;
      else if (id == "Unit") cur_.kind = Tok::KwUnit;
      else cur_.kind = Tok::Ident;
      return;
    }
    fail("unexpected character");
  }

  const std::string& src_;
  size_t pos_ = 0;
  int line_ = 1, col_ = 1;
  Token cur_;
};

// ---------------------------------------------------------------------------
// Parser (recursive descent, desugaring as it goes)
//
//   term   := λ x [: ty] . term | rec x [: ty] . term
//           | if term then term else term
//           | let x = term in term
//           | seq
//   seq    := or (";" term)?          -- t ; u  ==>  (λ_.u) t
//   or     := and ("||" and)*
//   and    := cmp ("&&" cmp)*
//   cmp    := add (("=="|"<>"|"<="|"<") add)?
//   add    := mul (("+"|"-") mul)*
//   mul    := app (("*"|"/"|"%") app)*
//   app    := app atom | atom
//   atom   := ident | int | true | false | "()" | "(" term ")" | primitive
// ---------------------------------------------------------------------------

class Parser {
 public:
  explicit Parser(const std::string& src) : lex_(src) {}

  TermPtr parse_program() {
    TermPtr t = parse_term();
    expect(Tok::Eof, "expected end of input");
    return t;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) {
    throw ParseError{msg, lex_.peek().line, lex_.peek().col};
  }

  Token expect(Tok k, const std::string& msg) {
    if (lex_.peek().kind != k) fail(msg);
    return lex_.take();
  }

  bool accept(Tok k) {
    if (lex_.peek().kind == k) {
      lex_.take();
      return true;
    }
    return false;
  }

  TypePtr parse_type() {
    TypePtr base;
    auto k = lex_.peek().kind;
    if (k == Tok::KwInt) { lex_.take(); base = Type::intty(); }
    else if (k == Tok::KwCell) { lex_.take(); base = Type::cellty(); }
    else if (k == Tok::KwUnit) { lex_.take(); base = Type::unitty(); }
    else if (k == Tok::LParen) {
      lex_.take();
      base = parse_type();
      expect(Tok::RParen, "expected ')'");
    } else fail("expected a type");
    if (accept(Tok::Arrow)) return Type::arrow(base, parse_type());
    return base;
  }

  TermPtr with_pos(TermPtr t, const Token& tok) {
    auto m = std::make_shared<Term>(*t);
    m->line = tok.line;
    m->col = tok.col;
    return m;
  }

  TermPtr parse_term() {
    const Token& p = lex_.peek();
    switch (p.kind) {
      case Tok::Lambda: {
        Token t = lex_.take();
        std::string name = expect(Tok::Ident, "expected binder name").text;
        TypePtr ann;
        if (accept(Tok::Colon)) ann = parse_type();
        expect(Tok::Dot, "expected '.' after binder");
        return with_pos(mk_lam(name, parse_term(), ann), t);
      }
      case Tok::Rec: {
        Token t = lex_.take();
        std::string name = expect(Tok::Ident, "expected binder name").text;
        TypePtr ann;
        if (accept(Tok::Colon)) ann = parse_type();
        expect(Tok::Dot, "expected '.' after binder");
        return with_pos(mk_rec(name, parse_term(), ann), t);
      }
      case Tok::If: {
        Token t = lex_.take();
        TermPtr c = parse_term();
        expect(Tok::Then, "expected 'then'");
        TermPtr a = parse_term();
        expect(Tok::Else, "expected 'else'");
        TermPtr b = parse_term();
        return with_pos(mk_if(c, a, b), t);
      }
      case Tok::Let: {
        Token t = lex_.take();
        std::string name = expect(Tok::Ident, "expected let-bound name").text;
        TypePtr ann;
        if (accept(Tok::Colon)) ann = parse_type();
        expect(Tok::Equal, "expected '=' in let");
        TermPtr bound = parse_term();
        expect(Tok::In, "expected 'in'");
        TermPtr body = parse_term();
        // let x = t in u  ==>  (λx.u) t
        return with_pos(mk_app(mk_lam(name, body, ann), bound), t);
      }
      default:
        return parse_seq();
    }
  }

  TermPtr parse_seq() {
    TermPtr t = parse_or();
    if (lex_.peek().kind == Tok::Semi) {
      Token s = lex_.take();
      TermPtr u = parse_term();
      // t ; u  ==>  (λ_.u) t
      return with_pos(mk_app(mk_lam("_", u), t), s);
    }
    return t;
  }

  TermPtr binop(Op o, TermPtr a, TermPtr b, const Token& tok) {
    return with_pos(mk_app(mk_app(mk_op(o), a), b), tok);
  }

  TermPtr parse_or() {
    TermPtr t = parse_and();
    while (lex_.peek().kind == Tok::OpOr) {
      Token tok = lex_.take();
      t = binop(Op::Or, t, parse_and(), tok);
    }
    return t;
  }

  TermPtr parse_and() {
    TermPtr t = parse_cmp();
    while (lex_.peek().kind == Tok::OpAnd) {
      Token tok = lex_.take();
      t = binop(Op::And, t, parse_cmp(), tok);
    }
    return t;
  }

  TermPtr parse_cmp() {
    TermPtr t = parse_add();
    auto k = lex_.peek().kind;
    if (k == Tok::OpEq || k == Tok::OpNe || k == Tok::OpLe || k == Tok::OpLt) {
      Token tok = lex_.take();
      Op o = k == Tok::OpEq ? Op::Eq : k == Tok::OpNe ? Op::Ne
           : k == Tok::OpLe ? Op::Le : Op::Lt;
      t = binop(o, t, parse_add(), tok);
    }
    return t;
  }

  TermPtr parse_add() {
    TermPtr t = parse_mul();
    while (true) {
      auto k = lex_.peek().kind;
      if (k != Tok::OpAdd && k != Tok::OpSub) break;
      Token tok = lex_.take();
      t = binop(k == Tok::OpAdd ? Op::Add : Op::Sub, t, parse_mul(), tok);
    }
    return t;
  }

  TermPtr parse_mul() {
    TermPtr t = parse_app();
    while (true) {
      auto k = lex_.peek().kind;
      if (k != Tok::OpMul && k != Tok::OpDiv && k != Tok::OpMod) break;
      Token tok = lex_.take();
      Op o = k == Tok::OpMul ? Op::Mul : k == Tok::OpDiv ? Op::Div : Op::Mod;
      t = binop(o, t, parse_app(), tok);
    }
    return t;
  }

  bool atom_start() const {
    switch (lex_.peek().kind) {
      case Tok::Ident: case Tok::Int: case Tok::True: case Tok::False:
      case Tok::Unit: case Tok::LParen:
        return true;
      default:
        return false;
    }
  }

  TermPtr parse_app() {
    TermPtr t = parse_atom();
    while (atom_start()) t = mk_app(t, parse_atom());
    return t;
  }

  TermPtr parse_atom() {
    Token tok = lex_.peek();
    switch (tok.kind) {
      case Tok::Int: lex_.take(); return with_pos(mk_int(tok.value), tok);
      case Tok::True: lex_.take(); return with_pos(mk_int(1), tok);
      case Tok::False: lex_.take(); return with_pos(mk_int(0), tok);
      case Tok::Unit: lex_.take(); return with_pos(mk_unit(), tok);
      case Tok::LParen: {
        lex_.take();
        TermPtr t = parse_term();
        expect(Tok::RParen, "expected ')'");
        return t;
      }
      case Tok::Ident: {
        lex_.take();
        if (tok.text == "ref") return with_pos(mk_op(Op::Ref), tok);
        if (tok.text == "deref") return with_pos(mk_op(Op::Deref), tok);
        if (tok.text == "root") return with_pos(mk_op(Op::Root), tok);
        if (tok.text == "link") return with_pos(mk_op(Op::Link), tok);
        if (tok.text == "assign") return with_pos(mk_op(Op::Assign), tok);
        if (tok.text == "peek") return with_pos(mk_op(Op::Peek), tok);
        if (tok.text == "step") return with_pos(mk_op(Op::Step), tok);
        return with_pos(mk_var(tok.text), tok);
      }
      default:
        fail("expected an expression");
    }
  }

  Lexer lex_;
};

}  // namespace

TermPtr parse(const std::string& source) { return Parser(source).parse_program(); }

// ---------------------------------------------------------------------------
// Typechecker
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void type_fail(const TermPtr& at, const std::string& msg) {
  throw TypeError{msg + " in `" + pretty(at) + "`", at ? at->line : 0, at ? at->col : 0};
}

TypePtr infer(TypeEnv& env, const TermPtr& t);

void check(TypeEnv& env, const TermPtr& t, const TypePtr& want) {
  if (auto* lam = std::get_if<TLam>(&t->node)) {
    if (want->tag != Type::Tag::Arrow) type_fail(t, "lambda where " + to_string(want) + " expected");
    if (lam->ann && !equal(lam->ann, want->dom))
      type_fail(t, "annotation " + to_string(lam->ann) + " conflicts with expected " + to_string(want->dom));
    env.bind(lam->name, want->dom);
    check(env, lam->body, want->cod);
    env.pop();
    return;
  }
  TypePtr got = infer(env, t);
  if (!equal(got, want))
    type_fail(t, "expected " + to_string(want) + " but found " + to_string(got));
}

TypePtr infer(TypeEnv& env, const TermPtr& t) {
  return std::visit(
      [&](auto&& n) -> TypePtr {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, TVar>) {
          if (auto* ty = env.lookup(n.name)) return *ty;
          type_fail(t, "unbound variable '" + n.name + "'");
        } else if constexpr (std::is_same_v<T, TInt>) {
          return Type::intty();
        } else if constexpr (std::is_same_v<T, TUnit>) {
          return Type::unitty();
        } else if constexpr (std::is_same_v<T, TOp>) {
          return op_type(n.op);
        } else if constexpr (std::is_same_v<T, TLam>) {
          if (!n.ann) type_fail(t, "lambda needs a type annotation here");
          env.bind(n.name, n.ann);
          TypePtr body = infer(env, n.body);
          env.pop();
          return Type::arrow(n.ann, body);
        } else if constexpr (std::is_same_v<T, TApp>) {
          // let-redex: (λx.u) e infers e first, no annotation needed
          if (auto* lam = std::get_if<TLam>(&n.fn->node); lam && !lam->ann) {
            TypePtr bound = infer(env, n.arg);
            env.bind(lam->name, bound);
            TypePtr body = infer(env, lam->body);
            env.pop();
            return body;
          }
          TypePtr fn = infer(env, n.fn);
          if (fn->tag != Type::Tag::Arrow)
            type_fail(t, "applying a non-function of type " + to_string(fn));
          check(env, n.arg, fn->dom);
          return fn->cod;
        } else if constexpr (std::is_same_v<T, TIf>) {
          check(env, n.cond, Type::intty());
          TypePtr a = infer(env, n.then_branch);
          TypePtr b = infer(env, n.else_branch);
          if (!equal(a, b))
            type_fail(t, "branches disagree: " + to_string(a) + " vs " + to_string(b));
          if (!a->is_ground())
            type_fail(t, "branches must be of ground type, found " + to_string(a));
          return a;
        } else if constexpr (std::is_same_v<T, TRec>) {
          if (!n.ann) type_fail(t, "rec binder needs a type annotation");
          if (n.ann->tag != Type::Tag::Arrow)
            type_fail(t, "rec is restricted to arrow type, found " + to_string(n.ann));
          env.bind(n.name, n.ann);
          check(env, n.body, n.ann);
          env.pop();
          return n.ann;
        }
        type_fail(t, "unhandled term");
      },
      t->node);
}

}  // namespace

TypePtr infer_type(TypeEnv& env, const TermPtr& t) { return infer(env, t); }

TypePtr infer_type(const TermPtr& t) {
  TypeEnv env;
  return infer(env, t);
}

// ---------------------------------------------------------------------------
// Pretty printer
// ---------------------------------------------------------------------------

namespace {

// precedence levels: 0 term, 1 or, 2 and, 3 cmp, 4 add, 5 mul, 6 app, 7 atom
int binop_prec(Op o) {
  switch (o) {
    case Op::Or: return 1;
    case Op::And: return 2;
    case Op::Eq: case Op::Ne: case Op::Le: case Op::Lt: return 3;
    case Op::Add: case Op::Sub: return 4;
    case Op::Mul: case Op::Div: case Op::Mod: return 5;
    default: return 6;
  }
}

void pp(std::ostringstream& os, const TermPtr& t, int prec);

void paren(std::ostringstream& os, bool need, const TermPtr& t, int inner) {
  if (need) os << "(";
  pp(os, t, inner);
  if (need) os << ")";
}

void pp(std::ostringstream& os, const TermPtr& t, int prec) {
  // binop application prints infix
  if (auto* app = std::get_if<TApp>(&t->node)) {
    if (auto* app2 = std::get_if<TApp>(&app->fn->node)) {
      if (auto* op = std::get_if<TOp>(&app2->fn->node); op && op_is_binop(op->op)) {
        int p = binop_prec(op->op);
        bool need = prec > p;
        if (need) os << "(";
        // cmp is non-associative; or/and/add/mul associate left
        pp(os, app2->arg, p == 3 ? p + 1 : p);
        os << " " << op_name(op->op) << " ";
        pp(os, app->arg, p + 1);
        if (need) os << ")";
        return;
      }
    }
    // let-redex prints as let
    if (auto* lam = std::get_if<TLam>(&app->fn->node); lam && !lam->ann) {
      bool need = prec > 0;
      if (need) os << "(";
      if (lam->name == "_") {
        pp(os, app->arg, 1);
        os << "; ";
        pp(os, lam->body, 0);
      } else {
        os << "let " << lam->name << " = ";
        pp(os, app->arg, 0);
        os << " in ";
        pp(os, lam->body, 0);
      }
      if (need) os << ")";
      return;
    }
    bool need = prec > 6;
    if (need) os << "(";
    pp(os, app->fn, 6);
    os << " ";
    pp(os, app->arg, 7);
    if (need) os << ")";
    return;
  }
  std::visit(
      [&](auto&& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, TVar>) {
          os << n.name;
        } else if constexpr (std::is_same_v<T, TInt>) {
          if (n.value < 0) {
            os << "(0 - " << -n.value << ")";  // no negative literals in the grammar
          } else os << n.value;
        } else if constexpr (std::is_same_v<T, TUnit>) {
          os << "()";
        } else if constexpr (std::is_same_v<T, TOp>) {
          if (op_is_binop(n.op)) {
            // bare binop: print as eta-expanded section so it reparses
            os << "(\\etaL. (\\etaR. etaL " << op_name(n.op) << " etaR))";
          } else os << op_name(n.op);
        } else if constexpr (std::is_same_v<T, TLam>) {
          bool need = prec > 0;
          if (need) os << "(";
          os << "\\" << n.name;
          if (n.ann) os << " : " << to_string(n.ann);
          os << ". ";
          pp(os, n.body, 0);
          if (need) os << ")";
        } else if constexpr (std::is_same_v<T, TRec>) {
          bool need = prec > 0;
          if (need) os << "(";
          os << "rec " << n.name;
          if (n.ann) os << " : " << to_string(n.ann);
          os << ". ";
          pp(os, n.body, 0);
          if (need) os << ")";
        } else if constexpr (std::is_same_v<T, TIf>) {
          bool need = prec > 0;
          if (need) os << "(";
          os << "if ";
          pp(os, n.cond, 1);
          os << " then ";
          pp(os, n.then_branch, 1);
          os << " else ";
          pp(os, n.else_branch, 1);
          if (need) os << ")";
        } else {
          os << "?";
        }
      },
      t->node);
}

}  // namespace

std::string pretty(const TermPtr& t) {
  std::ostringstream os;
  pp(os, t, 0);
  return os.str();
}

}  // namespace tsd
