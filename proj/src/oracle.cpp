#include "tsd/oracle.hpp"

#include <sstream>
#include <stdexcept>

namespace tsd {
namespace oracle {

NetExprPtr NetExpr::constant(std::int64_t v) {
  auto e = std::make_shared<NetExpr>();
  e->tag = Tag::Const;
  e->value = v;
  return e;
}
NetExprPtr NetExpr::read(int cell) {
  auto e = std::make_shared<NetExpr>();
  e->tag = Tag::ReadCell;
  e->cell = cell;
  return e;
}
NetExprPtr NetExpr::binop(Op o, NetExprPtr l, NetExprPtr r) {
  auto e = std::make_shared<NetExpr>();
  e->tag = Tag::Op;
  e->op = o;
  e->a = std::move(l);
  e->b = std::move(r);
  return e;
}
NetExprPtr NetExpr::select(NetExprPtr cond, NetExprPtr then_e, NetExprPtr else_e) {
  auto e = std::make_shared<NetExpr>();
  e->tag = Tag::Select;
  e->a = std::move(cond);
  e->b = std::move(then_e);
  e->c = std::move(else_e);
  return e;
}
NetExprPtr NetExpr::root_of(int cell) {
  auto e = std::make_shared<NetExpr>();
  e->tag = Tag::RootOf;
  e->cell = cell;
  return e;
}

std::int64_t NetStore::eval(const NetExprPtr& e) const {
  switch (e->tag) {
    case NetExpr::Tag::Const: return e->value;
    case NetExpr::Tag::ReadCell: return cells.at(e->cell).value;
    case NetExpr::Tag::Op:
      return apply_binop(e->op, eval(e->a), eval(e->b));
    case NetExpr::Tag::Select: {
      // both branches evaluated, one selected
      std::int64_t c = eval(e->a);
      std::int64_t t = eval(e->b);
      std::int64_t f = eval(e->c);
      return c != 0 ? t : f;
    }
    case NetExpr::Tag::RootOf:
      return eval(cells.at(e->cell).dependency);
  }
  return 0;
}

namespace {

struct Fuel {
  std::uint64_t left;
};
struct FuelExhausted {};

using Env = std::map<std::string, ValuePtr>;
using EnvPtr = std::shared_ptr<const Env>;

ValuePtr vint(std::int64_t n) {
  auto v = std::make_shared<Value>();
  v->tag = Value::Tag::Int;
  v->n = n;
  return v;
}
ValuePtr vint_flow(std::int64_t n, NetExprPtr e) {
  auto v = std::make_shared<Value>();
  v->tag = Value::Tag::Int;
  v->n = n;
  v->flow = true;
  v->expr = std::move(e);
  return v;
}
ValuePtr vint_capture(std::int64_t n, NetExprPtr e) {
  // plain-tagged, but carries an edge (root's result)
  auto v = std::make_shared<Value>();
  v->tag = Value::Tag::Int;
  v->n = n;
  v->flow = false;
  v->expr = std::move(e);
  return v;
}
ValuePtr vunit() {
  auto v = std::make_shared<Value>();
  v->tag = Value::Tag::Unit;
  return v;
}
ValuePtr vcell(int id) {
  auto v = std::make_shared<Value>();
  v->tag = Value::Tag::Cell;
  v->cell = id;
  return v;
}
ValuePtr vclosure(std::string name, TermPtr body, EnvPtr env, bool rec) {
  auto v = std::make_shared<Value>();
  v->tag = rec ? Value::Tag::RecClosure : Value::Tag::Closure;
  v->name = std::move(name);
  v->body = std::move(body);
  v->env = std::move(env);
  return v;
}

NetExprPtr lift(const ValuePtr& v) {
  if (v->expr) return v->expr;
  return NetExpr::constant(v->n);
}

class Interp {
 public:
  Interp(NetStore& store, std::vector<StepRecord>& steps, std::uint64_t fuel)
      : store_(store), steps_(steps), fuel_{fuel} {}

  ValuePtr eval(const TermPtr& t, const EnvPtr& env) {
    if (fuel_.left-- == 0) throw FuelExhausted{};
    if (auto pa = as_full_prim_app(t)) return eval_prim(*pa, env);
    return std::visit(
        [&](auto&& n) -> ValuePtr {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, TVar>) {
            auto it = env->find(n.name);
            if (it == env->end())
              throw std::logic_error("oracle: unbound " + n.name);
            return it->second;
          } else if constexpr (std::is_same_v<T, TInt>) {
            return vint(n.value);
          } else if constexpr (std::is_same_v<T, TUnit>) {
            return vunit();
          } else if constexpr (std::is_same_v<T, TLam>) {
            return vclosure(n.name, n.body, env, false);
          } else if constexpr (std::is_same_v<T, TRec>) {
            return vclosure(n.name, n.body, env, true);
          } else if constexpr (std::is_same_v<T, TApp>) {
            ValuePtr arg = eval(n.arg, env);  // right-to-left
            ValuePtr fn = eval(n.fn, env);
            return apply(fn, arg);
          } else if constexpr (std::is_same_v<T, TIf>) {
            ValuePtr c = eval(n.cond, env);
            if (!c->flow) {
              // graph-construction branching: only the taken branch runs
              return eval(c->n != 0 ? n.then_branch : n.else_branch, env);
            }
            // dataflow branching: both branches run, else first
            ValuePtr e = eval(n.else_branch, env);
            ValuePtr th = eval(n.then_branch, env);
            if (th->tag == Value::Tag::Unit) return vunit();
            std::int64_t sel = c->n != 0 ? th->n : e->n;
            return vint_flow(sel, NetExpr::select(lift(c), lift(th), lift(e)));
          } else if constexpr (std::is_same_v<T, TOp>) {
            // partial primitives are eta-expanded by callers; a bare step runs
            if (n.op == Op::Step) return do_step();
            throw std::logic_error("oracle: bare primitive");
          } else {
            throw std::logic_error("oracle: unhandled term");
          }
        },
        t->node);
  }

  ValuePtr apply(const ValuePtr& fn, const ValuePtr& arg) {
    if (fuel_.left-- == 0) throw FuelExhausted{};
    if (fn->tag == Value::Tag::Closure) {
      auto env2 = std::make_shared<Env>(*fn->env);
      (*env2)[fn->name] = arg;
      return eval(fn->body, env2);
    }
    if (fn->tag == Value::Tag::RecClosure) {
      auto env2 = std::make_shared<Env>(*fn->env);
      (*env2)[fn->name] = fn;  // unfold
      ValuePtr unfolded = eval(fn->body, env2);
      return apply(unfolded, arg);
    }
    throw std::logic_error("oracle: applying a non-function");
  }

 private:
  ValuePtr eval_prim(const PrimApp& pa, const EnvPtr& env) {
    // operand order: right to left
    std::vector<ValuePtr> args(pa.args.size());
    for (int i = (int)pa.args.size() - 1; i >= 0; i--)
      args[i] = eval(pa.args[i], env);

    switch (pa.op) {
      case Op::Ref: {
        const ValuePtr& v = args[0];
        int id = (int)store_.cells.size();
        store_.cells.push_back(NetCell{v->n, lift(v)});
        return vcell(id);
      }
      case Op::Deref: {
        int id = args[0]->cell;
        return vint_flow(store_.cells.at(id).value, NetExpr::read(id));
      }
      case Op::Root: {
        int id = args[0]->cell;
        // captures the dependency edge as it is now
        return vint_capture(store_.cells.at(id).value, store_.cells.at(id).dependency);
      }
      case Op::Peek:
        return vint(args[0]->n);
      case Op::Assign: {
        int id = args[0]->cell;
        store_.cells.at(id).value = args[1]->n;
        return vunit();
      }
      case Op::Link: {
        int id = args[0]->cell;
        store_.cells.at(id).dependency = lift(args[1]);
        return vunit();
      }
      case Op::Step:
        return do_step();
      default: {  // binary $
        const ValuePtr& l = args[0];
        const ValuePtr& r = args[1];
        std::int64_t n = apply_binop(pa.op, l->n, r->n);
        if (l->flow || r->flow)
          return vint_flow(n, NetExpr::binop(pa.op, lift(l), lift(r)));
        return vint(n);
      }
    }
  }

  ValuePtr do_step() {
    // synchronous: every dependency reads pre-step values, then one commit
    std::vector<std::int64_t> next(store_.cells.size());
    for (size_t i = 0; i < store_.cells.size(); i++)
      next[i] = store_.cells[i].dependency ? store_.eval(store_.cells[i].dependency)
                                           : store_.cells[i].value;
    std::int64_t updated = 0;
    for (size_t i = 0; i < store_.cells.size(); i++) {
      if (store_.cells[i].value != next[i]) {
        store_.cells[i].value = next[i];
        updated++;
      }
    }
    StepRecord rec;
    rec.updated = updated;
    for (auto& c : store_.cells) rec.post_values.push_back(c.value);
    steps_.push_back(rec);
    return vint(updated);
  }

  NetStore& store_;
  std::vector<StepRecord>& steps_;
  Fuel fuel_;
};

}  // namespace

OracleResult oracle_eval(const TermPtr& term, std::uint64_t fuel) {
  OracleResult res;
  Interp interp(res.store, res.steps, fuel);
  try {
    res.value = interp.eval(term, std::make_shared<Env>());
  } catch (const FuelExhausted&) {
    res.error = "fuel";
  }
  return res;
}

AgreementReport compare(const MachineObservables& m, const OracleResult& o) {
  using K = MachineObservables::Kind;
  auto fail = [](std::string why) { return AgreementReport{false, std::move(why)}; };

  if (m.kind == K::Stuck) return fail("machine stuck: " + m.diagnosis);
  if (m.kind == K::FuelExhausted) {
    if (o.error) return {true, "both ran out of fuel"};
    return fail("machine exhausted fuel but oracle finished");
  }
  if (o.error) return fail("oracle error (" + *o.error + ") but machine finished");

  // final value
  switch (m.kind) {
    case K::FinalInt:
      if (o.value->tag != Value::Tag::Int)
        return fail("machine Int vs oracle non-Int");
      if (o.value->n != m.final_int) {
        std::ostringstream os;
        os << "final value: machine " << m.final_int << " vs oracle " << o.value->n;
        return fail(os.str());
      }
      break;
    case K::FinalUnit:
      if (o.value->tag != Value::Tag::Unit) return fail("machine Unit vs oracle non-Unit");
      break;
    case K::FinalLam:
      if (o.value->tag != Value::Tag::Closure && o.value->tag != Value::Tag::RecClosure)
        return fail("machine lambda vs oracle non-lambda");
      break;
    case K::FinalCell:
      if (o.value->tag != Value::Tag::Cell) return fail("machine cell vs oracle non-cell");
      if (o.value->cell != m.final_cell) return fail("final cell identity differs");
      break;
    default:
      break;
  }

  // per-step cell valuations
  if (m.steps.size() != o.steps.size()) {
    std::ostringstream os;
    os << "step count: machine " << m.steps.size() << " vs oracle " << o.steps.size();
    return fail(os.str());
  }
  for (size_t i = 0; i < m.steps.size(); i++) {
    if (m.steps[i].updated != o.steps[i].updated) {
      std::ostringstream os;
      os << "step " << i << " updated: machine " << m.steps[i].updated << " vs oracle "
         << o.steps[i].updated;
      return fail(os.str());
    }
    if (m.steps[i].post_values != o.steps[i].post_values) {
      std::ostringstream os;
      os << "step " << i << " cell values differ: machine [";
      for (auto v : m.steps[i].post_values) os << v << " ";
      os << "] vs oracle [";
      for (auto v : o.steps[i].post_values) os << v << " ";
      os << "]";
      return fail(os.str());
    }
  }
  return {true, ""};
}

}  // namespace oracle
}  // namespace tsd
