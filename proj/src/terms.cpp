#include "mechdiag/terms.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <sstream>

#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

namespace mechdiag {

Value Value::of_entity(std::string name) {
  Value v;
  v.kind = ValueKind::Entity;
  v.entity = std::move(name);
  return v;
}

Value Value::of_real(Vec x) {
  Value v;
  v.kind = ValueKind::Real;
  v.real = std::move(x);
  return v;
}

Value Value::of_real(double x) { return of_real(Vec::Constant(1, x)); }

Value Value::of_truth(double t) {
  Value v;
  v.kind = ValueKind::Truth;
  v.truth = t;
  return v;
}

std::string Value::to_string() const {
  std::ostringstream out;
  out.precision(17);
  switch (kind) {
    case ValueKind::Entity:
      return entity;
    case ValueKind::Truth:
      out << truth;
      return out.str();
    case ValueKind::Real:
      if (real.size() == 1) {
        out << real(0);
      } else {
        out << "[";
        for (Eigen::Index i = 0; i < real.size(); ++i) out << (i ? ", " : "") << real(i);
        out << "]";
      }
      return out.str();
  }
  return "";
}

double value_distance(const Value& a, const Value& b) {
  if (a.kind != b.kind) throw TypeMismatchError("cannot compare values of different kinds");
  switch (a.kind) {
    case ValueKind::Entity:
      return a.entity == b.entity ? 0.0 : 1.0;
    case ValueKind::Truth:
      return std::abs(a.truth - b.truth);
    case ValueKind::Real: {
      if (a.real.size() != b.real.size()) throw TypeMismatchError("real values of different dimension");
      const double d = (a.real - b.real).norm();
      const double scale = std::max({1.0, a.real.norm(), b.real.norm()});
      return d <= 1e-12 * scale ? 0.0 : d;
    }
  }
  return 0.0;
}

const std::vector<LibraryPrimitive>& primitive_library() {
  static const std::vector<LibraryPrimitive> lib{
      {"product", 2, 1, false, false},      {"discount", 2, 1, false, false},
      {"sum", 2, 1, false, false},          {"weighted_sum", 2, 2, false, false},
      {"affine", 1, 2, false, false},       {"scale", 1, 1, false, false},
      {"float_product", 2, 0, false, false}, {"relation", 2, 0, false, true},
      {"bernoulli", 1, 2, true, false},     {"gaussian_shift", 1, 2, true, false},
  };
  return lib;
}

const LibraryPrimitive* find_library_primitive(std::string_view name) {
  for (const auto& p : primitive_library()) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const SymbolDecl& Signature::require(const std::string& symbol) const {
  const auto it = symbols.find(symbol);
  if (it == symbols.end()) throw ValidationError("unknown symbol: " + symbol);
  return it->second;
}

std::size_t Signature::max_arity() const {
  std::size_t k = 0;
  for (const auto& [name, decl] : symbols) k = std::max(k, decl.inputs.size());
  return k;
}

std::vector<std::string> Signature::issues() const {
  std::vector<std::string> out;
  for (const auto& [name, decl] : symbols) {
    const std::string where = "symbols." + name;
    const LibraryPrimitive* lib = find_library_primitive(decl.implementation);
    if (!lib) {
      out.push_back(where + ".implementation: unknown library primitive '" + decl.implementation + "'");
      continue;
    }
    if (decl.inputs.size() != lib->inputs) {
      out.push_back(where + ".inputs: " + decl.implementation + " takes " + std::to_string(lib->inputs) + " inputs");
    }
    if (decl.param_arity != lib->params) {
      out.push_back(where + ".param_arity: " + decl.implementation + " has " + std::to_string(lib->params) + " parameters");
    }
    for (const auto& s : decl.inputs) {
      if (!has_sort(s)) out.push_back(where + ".inputs: unknown sort '" + s + "'");
    }
    if (!has_sort(decl.output)) out.push_back(where + ".output: unknown sort '" + decl.output + "'");
    if (decl.kind == SymbolKind::Predicate && decl.output != kBoolSort) {
      out.push_back(where + ".output: predicates return bool");
    }
    if (lib->relational && decl.kind != SymbolKind::Predicate) {
      out.push_back(where + ".kind: relation symbols must be predicates");
    }
  }
  return out;
}

Term Term::make_slot(std::size_t k) {
  Term t;
  t.kind = Kind::Slot;
  t.slot = k;
  return t;
}

Term Term::apply(std::string symbol, std::vector<Term> children) {
  Term t;
  t.kind = Kind::Apply;
  t.symbol = std::move(symbol);
  t.children = std::move(children);
  return t;
}

Term Term::relation(std::string symbol) {
  Term t;
  t.kind = Kind::Relation;
  t.symbol = std::move(symbol);
  return t;
}

Term Term::compose(Term first, Term second) {
  Term t;
  t.kind = Kind::Compose;
  t.children = {std::move(first), std::move(second)};
  return t;
}

std::size_t depth(const Term& t) {
  switch (t.kind) {
    case Term::Kind::Slot:
      return 0;
    case Term::Kind::Relation:
      return 1;
    default: {
      std::size_t d = 0;
      for (const auto& c : t.children) d = std::max(d, depth(c));
      return d + 1;
    }
  }
}

namespace {

void max_slot(const Term& t, std::size_t& out, bool& any) {
  if (t.kind == Term::Kind::Slot) {
    out = any ? std::max(out, t.slot) : t.slot;
    any = true;
  }
  for (const auto& c : t.children) max_slot(c, out, any);
}

void collect_symbols(const Term& t, std::set<std::string>& out) {
  if (t.kind == Term::Kind::Apply || t.kind == Term::Kind::Relation) out.insert(t.symbol);
  for (const auto& c : t.children) collect_symbols(c, out);
}

}  // namespace

std::size_t arity(const Term& t) {
  if (t.relational()) return 2;
  std::size_t m = 0;
  bool any = false;
  max_slot(t, m, any);
  return any ? m + 1 : 0;
}

std::set<std::string> symbols_of(const Term& t) {
  std::set<std::string> out;
  collect_symbols(t, out);
  return out;
}

bool uses_symbol(const Term& t, const std::string& symbol) { return symbols_of(t).count(symbol) > 0; }

std::string render(const Term& t) {
  switch (t.kind) {
    case Term::Kind::Slot:
      return "$" + std::to_string(t.slot);
    case Term::Kind::Relation:
      return t.symbol;
    case Term::Kind::Compose:
      return "compose(" + render(t.children[0]) + ", " + render(t.children[1]) + ")";
    case Term::Kind::Apply: {
      std::string s = t.symbol + "(";
      for (std::size_t i = 0; i < t.children.size(); ++i) s += (i ? ", " : "") + render(t.children[i]);
      return s + ")";
    }
  }
  return "";
}

namespace {

class TermParser {
 public:
  explicit TermParser(std::string_view text) : text_(text) {}

  Term parse() {
    Term t = term();
    skip_ws();
    if (pos_ != text_.size()) fail("trailing characters");
    return t;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ValidationError("term syntax error at offset " + std::to_string(pos_) + ": " + what + " in '" +
                          std::string(text_) + "'");
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool eat(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  std::string identifier() {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_' || text_[pos_] == '-')) {
      ++pos_;
    }
    if (start == pos_) fail("expected identifier");
    return std::string(text_.substr(start, pos_ - start));
  }

  Term term() {
    skip_ws();
    if (eat('$')) {
      const std::size_t start = pos_;
      while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      if (start == pos_) fail("expected slot index");
      return Term::make_slot(std::stoul(std::string(text_.substr(start, pos_ - start))));
    }
    const std::string name = identifier();
    if (!eat('(')) return Term::relation(name);
    std::vector<Term> args;
    if (!eat(')')) {
      do {
        args.push_back(term());
      } while (eat(','));
      if (!eat(')')) fail("expected ')'");
    }
    if (name == "compose") {
      if (args.size() != 2) fail("compose takes two relations");
      return Term::compose(std::move(args[0]), std::move(args[1]));
    }
    if (args.empty()) fail("application without arguments");
    return Term::apply(name, std::move(args));
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

void merge_slot_sort(std::map<std::size_t, std::string>& slots, std::size_t k, const std::string& sort) {
  const auto [it, inserted] = slots.emplace(k, sort);
  if (!inserted && it->second != sort) {
    throw TypeMismatchError("slot $" + std::to_string(k) + " used at sorts " + it->second + " and " + sort);
  }
}

TermSorts infer(const Term& t, const Signature& sig, std::map<std::size_t, std::string>& slots) {
  switch (t.kind) {
    case Term::Kind::Slot:
      return {{}, ""};
    case Term::Kind::Relation: {
      const SymbolDecl& d = sig.require(t.symbol);
      const LibraryPrimitive* lib = find_library_primitive(d.implementation);
      if (!lib || !lib->relational) throw TypeMismatchError("'" + t.symbol + "' is not a relation");
      return {d.inputs, kBoolSort};
    }
    case Term::Kind::Compose: {
      std::map<std::size_t, std::string> none;
      const TermSorts a = infer(t.children[0], sig, none);
      const TermSorts b = infer(t.children[1], sig, none);
      if (!t.children[0].relational() || !t.children[1].relational()) {
        throw TypeMismatchError("compose expects relations");
      }
      if (a.inputs[1] != b.inputs[0]) {
        throw TypeMismatchError("compose sort mismatch: " + a.inputs[1] + " vs " + b.inputs[0]);
      }
      return {{a.inputs[0], b.inputs[1]}, kBoolSort};
    }
    case Term::Kind::Apply: {
      const SymbolDecl& d = sig.require(t.symbol);
      if (d.inputs.size() != t.children.size()) {
        throw TypeMismatchError("'" + t.symbol + "' takes " + std::to_string(d.inputs.size()) + " arguments");
      }
      for (std::size_t i = 0; i < t.children.size(); ++i) {
        const Term& c = t.children[i];
        if (c.relational()) throw TypeMismatchError("relation used as an argument of '" + t.symbol + "'");
        if (c.kind == Term::Kind::Slot) {
          merge_slot_sort(slots, c.slot, d.inputs[i]);
          continue;
        }
        const TermSorts cs = infer(c, sig, slots);
        if (cs.output != d.inputs[i]) {
          throw TypeMismatchError("argument " + std::to_string(i) + " of '" + t.symbol + "' has sort " +
                                  cs.output + ", expected " + d.inputs[i]);
        }
      }
      return {{}, d.output};
    }
  }
  return {};
}

}  // namespace

Term parse_term(std::string_view text) { return TermParser(text).parse(); }

TermSorts infer_sorts(const Term& t, const Signature& sig) {
  std::map<std::size_t, std::string> slots;
  TermSorts s = infer(t, sig, slots);
  if (t.relational()) return s;
  s.inputs.assign(arity(t), "");
  for (const auto& [k, sort] : slots) s.inputs[k] = sort;
  return s;
}

Term renumber_slots(const Term& t) {
  std::map<std::size_t, std::size_t> order;
  std::function<void(const Term&)> visit = [&](const Term& n) {
    if (n.kind == Term::Kind::Slot) order.emplace(n.slot, order.size());
    for (const auto& c : n.children) visit(c);
  };
  visit(t);
  std::function<Term(const Term&)> rebuild = [&](const Term& n) {
    Term out = n;
    if (n.kind == Term::Kind::Slot) out.slot = order.at(n.slot);
    for (auto& c : out.children) c = rebuild(c);
    return out;
  };
  return rebuild(t);
}

Carrier Carrier::of_entities(std::vector<std::string> names) {
  Carrier c;
  c.finite = true;
  c.entities = std::move(names);
  return c;
}

Carrier Carrier::of_box(Box b) {
  Carrier c;
  c.box = std::move(b);
  return c;
}

std::string DomainInterpretation::param_owner(const std::string& symbol) const {
  const auto it = param_aliases.find(symbol);
  return it == param_aliases.end() ? symbol : it->second;
}

const Carrier& DomainInterpretation::carrier(const std::string& sort) const {
  static const Carrier truth = Carrier::of_entities({"0", "1"});
  if (sort == kBoolSort) return truth;
  const auto it = carriers.find(sort);
  if (it == carriers.end()) throw ValidationError("domain '" + name + "' has no carrier for sort " + sort);
  return it->second;
}

std::vector<std::string> DomainInterpretation::issues() const {
  std::vector<std::string> out = signature.issues();
  for (const auto& s : signature.sorts) {
    const auto it = carriers.find(s);
    if (it == carriers.end()) {
      out.push_back("carriers." + s + ": missing");
      continue;
    }
    const Carrier& c = it->second;
    if (c.finite && c.entities.empty()) out.push_back("carriers." + s + ": empty entity set");
    if (!c.finite && (!c.box.bounded() || c.box.lower.size() != c.box.upper.size() ||
                      (c.box.upper - c.box.lower).minCoeff() < 0)) {
      out.push_back("carriers." + s + ": malformed box");
    }
  }
  for (const auto& [sym, decl] : signature.symbols) {
    const std::string owner = param_owner(sym);
    const auto it = params.find(owner);
    const std::size_t have = it == params.end() ? 0 : it->second.size();
    if (it == params.end() && decl.param_arity > 0) {
      out.push_back("params." + owner + ": missing for symbol " + sym);
    } else if (have < decl.param_arity) {
      out.push_back("params." + owner + ": symbol " + sym + " needs " + std::to_string(decl.param_arity) + " values");
    }
    if (param_aliases.count(sym) && !signature.symbols.count(owner)) {
      out.push_back("param_aliases." + sym + ": unknown target " + owner);
    }
  }
  for (const auto& [rel, table] : relations) {
    if (!signature.symbols.count(rel)) out.push_back("relations." + rel + ": unknown symbol");
    for (const auto& [pair, v] : table) {
      if (!(v >= 0 && v <= 1)) out.push_back("relations." + rel + ": truth outside [0, 1]");
    }
  }
  return out;
}

namespace {

Vec as_vec(const Value& v) {
  if (v.kind == ValueKind::Real) return v.real;
  if (v.kind == ValueKind::Truth) return Vec::Constant(1, v.truth);
  throw TypeMismatchError("entity used where a number is expected");
}

// Elementwise with broadcasting of 1-dimensional operands.
Vec cwise(const Vec& a, const Vec& b, const std::function<double(double, double)>& op) {
  if (a.size() != b.size() && a.size() != 1 && b.size() != 1) {
    throw TypeMismatchError("incompatible real dimensions");
  }
  const Eigen::Index n = std::max(a.size(), b.size());
  Vec out(n);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = op(a(a.size() == 1 ? 0 : i), b(b.size() == 1 ? 0 : i));
  return out;
}

Value wrap(const Vec& v, const std::string& sort) {
  return sort == kBoolSort ? Value::of_truth(v(0)) : Value::of_real(v);
}

bool kind_matches(const Value& v, const Carrier& c, const std::string& sort) {
  if (sort == kBoolSort) return v.kind == ValueKind::Truth;
  return c.finite ? v.kind == ValueKind::Entity : v.kind == ValueKind::Real;
}

class Evaluator {
 public:
  Evaluator(const DomainInterpretation& d, const ParamMap& params, Rng* rng)
      : d_(d), params_(params), rng_(rng) {}

  Value value(const Term& t, const std::vector<Value>& in) {
    switch (t.kind) {
      case Term::Kind::Slot:
        if (t.slot >= in.size()) throw TypeMismatchError("missing input for slot $" + std::to_string(t.slot));
        return in[t.slot];
      case Term::Kind::Relation:
      case Term::Kind::Compose: {
        if (in.size() < 2 || in[0].kind != ValueKind::Entity || in[1].kind != ValueKind::Entity) {
          throw TypeMismatchError("relations are evaluated on entity pairs");
        }
        return Value::of_truth(relation(t, in[0].entity, in[1].entity));
      }
      case Term::Kind::Apply:
        break;
    }
    const SymbolDecl& decl = d_.signature.require(t.symbol);
    std::vector<Value> args;
    args.reserve(t.children.size());
    for (const auto& c : t.children) args.push_back(value(c, in));
    const std::string& impl = decl.implementation;
    if (impl == "relation") {
      if (args[0].kind != ValueKind::Entity || args[1].kind != ValueKind::Entity) {
        throw TypeMismatchError("relation '" + t.symbol + "' expects entities");
      }
      return Value::of_truth(table(t.symbol, args[0].entity, args[1].entity));
    }
    const std::vector<double>& th = theta(t.symbol, decl.param_arity);
    if (impl == "product") {
      return wrap(cwise(as_vec(args[0]), as_vec(args[1]), [&](double x, double y) { return th[0] * x * y; }), decl.output);
    }
    if (impl == "discount") {
      return wrap(cwise(as_vec(args[0]), as_vec(args[1]), [&](double x, double r) { return x * (1 - th[0] * r); }), decl.output);
    }
    if (impl == "sum") {
      return wrap(cwise(as_vec(args[0]), as_vec(args[1]), [&](double x, double y) { return x + y + th[0]; }), decl.output);
    }
    if (impl == "weighted_sum") {
      return wrap(cwise(as_vec(args[0]), as_vec(args[1]), [&](double x, double y) { return th[0] * x + th[1] * y; }), decl.output);
    }
    if (impl == "float_product") {
      return wrap(cwise(as_vec(args[0]), as_vec(args[1]),
                        [](double x, double y) { return static_cast<double>(static_cast<float>(x * y)); }),
                  decl.output);
    }
    if (impl == "affine") return wrap((th[0] * as_vec(args[0]).array() + th[1]).matrix(), decl.output);
    if (impl == "scale") return wrap(th[0] * as_vec(args[0]), decl.output);
    if (impl == "bernoulli" || impl == "gaussian_shift") {
      if (!rng_) throw PreconditionError("stochastic primitive '" + t.symbol + "' needs a random stream");
      Vec x = as_vec(args[0]);
      Vec out(x.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (impl == "bernoulli") {
          out(i) = rng_->bernoulli(std::clamp(th[0] + th[1] * x(i), 0.0, 1.0)) ? 1.0 : 0.0;
        } else {
          out(i) = x(i) + th[0] + th[1] * rng_->normal();
        }
      }
      return wrap(out, decl.output);
    }
    throw ValidationError("unknown implementation '" + impl + "' for symbol " + t.symbol);
  }

 private:
  const std::vector<double>& theta(const std::string& symbol, std::size_t need) {
    const auto it = params_.find(d_.param_owner(symbol));
    static const std::vector<double> empty;
    if (it == params_.end()) {
      if (need == 0) return empty;
      throw ValidationError("no parameters for symbol " + symbol);
    }
    if (it->second.size() < need) throw ValidationError("too few parameters for symbol " + symbol);
    return it->second;
  }

  double table(const std::string& symbol, const std::string& a, const std::string& b) const {
    const auto it = d_.relations.find(symbol);
    if (it == d_.relations.end()) return 0.0;
    const auto cell = it->second.find({a, b});
    return cell == it->second.end() ? 0.0 : cell->second;
  }

  // Max-min composition over the intermediate carrier.
  double relation(const Term& t, const std::string& a, const std::string& b) {
    if (t.kind == Term::Kind::Relation) return table(t.symbol, a, b);
    const TermSorts first = infer_sorts(t.children[0], d_.signature);
    double best = 0.0;
    for (const auto& mid : d_.carrier(first.inputs[1]).entities) {
      const double left = relation(t.children[0], a, mid);
      if (left <= best) continue;
      best = std::max(best, std::min(left, relation(t.children[1], mid, b)));
    }
    return best;
  }

  const DomainInterpretation& d_;
  const ParamMap& params_;
  Rng* rng_;
};

}  // namespace

Value evaluate(const Term& t, const DomainInterpretation& d, const std::vector<Value>& inputs,
               const ParamMap& params, Rng* rng) {
  const TermSorts sorts = infer_sorts(t, d.signature);
  if (inputs.size() < sorts.inputs.size()) {
    throw TypeMismatchError("term needs " + std::to_string(sorts.inputs.size()) + " inputs");
  }
  for (std::size_t i = 0; i < sorts.inputs.size(); ++i) {
    if (sorts.inputs[i].empty()) continue;
    if (!kind_matches(inputs[i], d.carrier(sorts.inputs[i]), sorts.inputs[i])) {
      throw TypeMismatchError("input " + std::to_string(i) + " does not inhabit sort " + sorts.inputs[i]);
    }
  }
  return Evaluator(d, params, rng).value(t, inputs);
}

Value evaluate(const Term& t, const DomainInterpretation& d, const std::vector<Value>& inputs, Rng* rng) {
  return evaluate(t, d, inputs, d.params, rng);
}

bool is_stochastic(const Term& t, const Signature& sig) {
  for (const auto& s : symbols_of(t)) {
    const auto it = sig.symbols.find(s);
    if (it == sig.symbols.end()) continue;
    const LibraryPrimitive* lib = find_library_primitive(it->second.implementation);
    if (lib && lib->stochastic) return true;
  }
  return false;
}

namespace {

Value draw(const DomainInterpretation& d, const std::string& sort, Rng& rng) {
  if (sort == kBoolSort) return Value::of_truth(rng.bernoulli(0.5) ? 1.0 : 0.0);
  const Carrier& c = d.carrier(sort);
  if (c.finite) return Value::of_entity(c.entities[rng.below(c.entities.size())]);
  Vec x(c.dimension());
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = rng.uniform(c.box.lower(i), c.box.upper(i));
  return Value::of_real(x);
}

}  // namespace

InputSet sample_inputs(const DomainInterpretation& d, const std::vector<std::string>& sorts, std::size_t n,
                       std::uint64_t seed) {
  InputSet out;
  out.reserve(n);
  const Rng root(seed);
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng = root.split(r);
    std::vector<Value> row;
    for (const auto& s : sorts) row.push_back(s.empty() ? Value::of_real(0.0) : draw(d, s, rng));
    out.push_back(std::move(row));
  }
  return out;
}

std::optional<InputSet> exhaustive_inputs(const DomainInterpretation& d, const std::vector<std::string>& sorts,
                                          std::size_t limit) {
  std::vector<std::vector<Value>> axes;
  std::size_t total = 1;
  for (const auto& s : sorts) {
    std::vector<Value> axis;
    if (s == kBoolSort) {
      axis = {Value::of_truth(0), Value::of_truth(1)};
    } else {
      const Carrier& c = d.carrier(s);
      if (!c.finite) return std::nullopt;
      for (const auto& e : c.entities) axis.push_back(Value::of_entity(e));
    }
    total *= axis.size();
    if (total > limit) return std::nullopt;
    axes.push_back(std::move(axis));
  }
  InputSet out;
  std::vector<std::size_t> idx(axes.size(), 0);
  for (std::size_t r = 0; r < total; ++r) {
    std::vector<Value> row;
    for (std::size_t k = 0; k < axes.size(); ++k) row.push_back(axes[k][idx[k]]);
    out.push_back(std::move(row));
    for (std::size_t k = axes.size(); k-- > 0;) {
      if (++idx[k] < axes[k].size()) break;
      idx[k] = 0;
    }
  }
  return out;
}

std::vector<Term> default_generators(const Signature& sig) {
  std::vector<Term> out;
  for (const auto& [name, decl] : sig.symbols) {
    const LibraryPrimitive* lib = find_library_primitive(decl.implementation);
    if (lib && lib->relational) {
      out.push_back(Term::relation(name));
      continue;
    }
    std::vector<Term> slots;
    for (std::size_t i = 0; i < decl.inputs.size(); ++i) slots.push_back(Term::make_slot(i));
    out.push_back(Term::apply(name, std::move(slots)));
  }
  return out;
}

namespace {

struct Entry {
  Term term;
  TermSorts sorts;
  std::size_t level;
};

Term shift_slots(const Term& t, std::size_t offset) {
  Term out = t;
  if (out.kind == Term::Kind::Slot) out.slot += offset;
  for (auto& c : out.children) c = shift_slots(c, offset);
  return out;
}

Term substitute(const Term& t, const std::map<std::size_t, Term>& with) {
  if (t.kind == Term::Kind::Slot) return with.at(t.slot);
  Term out = t;
  for (auto& c : out.children) c = substitute(c, with);
  return out;
}

std::string root_name(const Term& t) {
  switch (t.kind) {
    case Term::Kind::Compose:
      return "compose";
    case Term::Kind::Slot:
      return "$";
    default:
      return t.symbol;
  }
}

}  // namespace

CompositeSet generate_composites(const Signature& sig, const std::vector<Term>& generators,
                                 std::size_t max_depth, std::size_t cap, std::size_t level_cap) {
  CompositeSet out;
  if (max_depth == 0 || cap == 0) {
    out.truncated = cap == 0 && !generators.empty();
    return out;
  }
  std::vector<Entry> gens;
  for (const auto& g : generators) {
    try {
      const Term norm = renumber_slots(g);
      gens.push_back({norm, infer_sorts(norm, sig), 1});
    } catch (const TypeMismatchError&) {
      continue;  // ill-sorted generators contribute nothing
    }
  }
  std::stable_sort(gens.begin(), gens.end(),
                   [](const Entry& a, const Entry& b) { return root_name(a.term) < root_name(b.term); });
  const bool any_relational =
      std::any_of(gens.begin(), gens.end(), [](const Entry& e) { return e.term.relational(); });

  std::vector<Entry> all;
  std::set<std::string> seen;
  std::size_t at_level = 0;
  // 0: emitted or duplicate, 1: this level is full, 2: the whole set is full
  auto emit = [&](Entry e) {
    if (seen.count(render(e.term))) return 0;
    if (out.terms.size() == cap) {
      out.truncated = true;
      return 2;
    }
    if (level_cap > 0 && at_level == level_cap) {
      out.truncated = true;
      return 1;
    }
    seen.insert(render(e.term));
    out.terms.push_back(e.term);
    all.push_back(std::move(e));
    ++at_level;
    return 0;
  };
  for (const auto& g : gens) {
    if (const int r = emit(g); r == 2) return out;
  }

  // True when the whole set is full.
  const auto run_level = [&](std::size_t level) -> bool {
    const std::size_t known = all.size();  // only terms from earlier levels are plugged in
    struct Producer {
      std::string name;
      const Entry* generator;  // null for compose
    };
    std::vector<Producer> producers;
    for (const auto& g : gens) {
      if (!g.term.relational() && arity(g.term) > 0) producers.push_back({root_name(g.term), &g});
    }
    if (any_relational) producers.push_back({"compose", nullptr});
    std::stable_sort(producers.begin(), producers.end(),
                     [](const Producer& a, const Producer& b) { return a.name < b.name; });

    for (const auto& prod : producers) {
      if (!prod.generator) {
        std::vector<std::size_t> rel;
        for (std::size_t i = 0; i < known; ++i) {
          if (all[i].term.relational()) rel.push_back(i);
        }
        for (std::size_t a : rel) {
          for (std::size_t b : rel) {
            const Entry& x = all[a];
            const Entry& y = all[b];
            if (std::max(x.level, y.level) != level - 1) continue;
            if (x.sorts.inputs[1] != y.sorts.inputs[0]) continue;
            Term t = Term::compose(x.term, y.term);
            if (const int r = emit({t, {{x.sorts.inputs[0], y.sorts.inputs[1]}, kBoolSort}, level}); r != 0) return r == 2;
          }
        }
        continue;
      }
      const Entry& g = *prod.generator;
      const std::size_t k = g.sorts.inputs.size();
      // Candidate lists per generator slot: a fresh slot (index npos) first.
      std::vector<std::vector<std::size_t>> cand(k);
      constexpr std::size_t kFresh = static_cast<std::size_t>(-1);
      for (std::size_t s = 0; s < k; ++s) {
        cand[s].push_back(kFresh);
        for (std::size_t i = 0; i < known; ++i) {
          if (!all[i].term.relational() && all[i].sorts.output == g.sorts.inputs[s]) cand[s].push_back(i);
        }
      }
      std::vector<std::size_t> odo(k, 0);
      while (true) {
        std::size_t top = 0;
        for (std::size_t s = 0; s < k; ++s) {
          const std::size_t c = cand[s][odo[s]];
          top = std::max(top, c == kFresh ? std::size_t{0} : all[c].level);
        }
        if (top == level - 1) {
          std::map<std::size_t, Term> with;
          std::size_t offset = 0;
          for (std::size_t s = 0; s < k; ++s) {
            const std::size_t c = cand[s][odo[s]];
            if (c == kFresh) {
              with.emplace(s, Term::make_slot(offset++));
            } else {
              with.emplace(s, shift_slots(all[c].term, offset));
              offset += arity(all[c].term);
            }
          }
          Term t = renumber_slots(substitute(g.term, with));
          TermSorts sorts = infer_sorts(t, sig);
          if (const int r = emit({std::move(t), std::move(sorts), level}); r != 0) return r == 2;
        }
        std::size_t s = k;
        while (s-- > 0) {
          if (++odo[s] < cand[s].size()) break;
          odo[s] = 0;
        }
        if (s == static_cast<std::size_t>(-1)) break;
      }
    }
    return false;
  };
  for (std::size_t level = 2; level <= max_depth; ++level) {
    at_level = 0;
    if (run_level(level)) break;
  }
  return out;
}

}  // namespace mechdiag
