#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mechdiag/calculus.hpp"

namespace mechdiag {

class Rng;

inline constexpr const char* kBoolSort = "bool";

enum class ValueKind { Entity, Real, Truth };

struct Value {
  ValueKind kind = ValueKind::Real;
  std::string entity;
  Vec real;
  double truth = 0.0;

  static Value of_entity(std::string name);
  static Value of_real(Vec v);
  static Value of_real(double v);
  static Value of_truth(double t);

  std::string to_string() const;
};

// Truth: |a - b|. Real: Euclidean norm, snapped to 0 at or below
// 1e-12 * max(1, |a|, |b|) so rounding in large composites reads as equal.
// Entity: mismatch indicator.
double value_distance(const Value& a, const Value& b);

enum class SymbolKind { Function, Predicate };

// A library primitive is an implementation; a signature symbol names one.
struct LibraryPrimitive {
  std::string name;
  std::size_t inputs = 0;
  std::size_t params = 0;
  bool stochastic = false;
  bool relational = false;  // binary relation looked up in the domain's tables
};

const std::vector<LibraryPrimitive>& primitive_library();
const LibraryPrimitive* find_library_primitive(std::string_view name);

struct SymbolDecl {
  std::string symbol;
  std::vector<std::string> inputs;
  std::string output;
  SymbolKind kind = SymbolKind::Function;
  std::string implementation;
  std::size_t param_arity = 0;
};

struct Signature {
  std::set<std::string> sorts;
  std::map<std::string, SymbolDecl> symbols;

  bool has_sort(const std::string& s) const { return s == kBoolSort || sorts.count(s) > 0; }
  const SymbolDecl& require(const std::string& symbol) const;
  std::size_t max_arity() const;
  // Empty when well formed.
  std::vector<std::string> issues() const;
};

struct Term {
  enum class Kind { Slot, Apply, Relation, Compose };

  Kind kind = Kind::Slot;
  std::size_t slot = 0;
  std::string symbol;
  std::vector<Term> children;

  static Term make_slot(std::size_t k);
  static Term apply(std::string symbol, std::vector<Term> children);
  static Term relation(std::string symbol);
  static Term compose(Term first, Term second);

  bool relational() const { return kind == Kind::Relation || kind == Kind::Compose; }
  bool operator==(const Term&) const = default;
};

// Slot 0; Apply and Compose 1 + max child; Relation 1.
std::size_t depth(const Term& t);
// Number of inputs: 2 for relational terms, otherwise max slot + 1.
std::size_t arity(const Term& t);
std::set<std::string> symbols_of(const Term& t);
bool uses_symbol(const Term& t, const std::string& symbol);

// Syntax: $k | sym(t, ...) | sym (bare binary relation) | compose(r, r).
std::string render(const Term& t);
Term parse_term(std::string_view text);

struct TermSorts {
  std::vector<std::string> inputs;
  std::string output;
};

// Throws TypeMismatchError on ill-sorted wiring, ValidationError on unknown symbols.
TermSorts infer_sorts(const Term& t, const Signature& sig);

// Renumbers slots left to right so they read $0, $1, ... in order of appearance.
Term renumber_slots(const Term& t);

struct Carrier {
  bool finite = false;
  std::vector<std::string> entities;
  Box box;

  static Carrier of_entities(std::vector<std::string> names);
  static Carrier of_box(Box b);
  Eigen::Index dimension() const { return box.lower.size(); }
};

using ParamMap = std::map<std::string, std::vector<double>>;

struct DomainInterpretation {
  std::string name;
  Signature signature;
  std::map<std::string, Carrier> carriers;
  ParamMap params;
  // symbol -> symbol whose parameter vector it reads (weight tying).
  std::map<std::string, std::string> param_aliases;
  // relation symbol -> (left entity, right entity) -> truth in [0, 1]; absent pairs are 0.
  std::map<std::string, std::map<std::pair<std::string, std::string>, double>> relations;

  std::string param_owner(const std::string& symbol) const;
  const Carrier& carrier(const std::string& sort) const;
  std::vector<std::string> issues() const;
};

// Evaluates with `params` in place of the domain's own. `rng` is required only
// when the term contains stochastic primitives.
Value evaluate(const Term& t, const DomainInterpretation& d, const std::vector<Value>& inputs,
               const ParamMap& params, Rng* rng = nullptr);
Value evaluate(const Term& t, const DomainInterpretation& d, const std::vector<Value>& inputs,
               Rng* rng = nullptr);

bool is_stochastic(const Term& t, const Signature& sig);

using InputSet = std::vector<std::vector<Value>>;

// Uniform over finite carriers, box-uniform over real carriers.
InputSet sample_inputs(const DomainInterpretation& d, const std::vector<std::string>& sorts,
                       std::size_t n, std::uint64_t seed);
// Full product of finite carriers; nullopt if any sort is real or the product exceeds `limit`.
std::optional<InputSet> exhaustive_inputs(const DomainInterpretation& d,
                                          const std::vector<std::string>& sorts,
                                          std::size_t limit = 100000);

struct CompositeSet {
  std::vector<Term> terms;
  bool truncated = false;
};

// Each symbol applied to fresh slots; relation symbols as bare relations.
std::vector<Term> default_generators(const Signature& sig);

// All sort-correct trees up to max_depth. Depth-d terms plug lower-depth terms
// (or slots) into generator slots with at least one child of depth d-1;
// relational terms also combine through compose. Order: depth, then generator
// symbol name, then an odometer over children. Stops at `cap`; a nonzero
// `level_cap` also limits each depth >= 2 so deeper levels still get terms.
CompositeSet generate_composites(const Signature& sig, const std::vector<Term>& generators,
                                 std::size_t max_depth, std::size_t cap, std::size_t level_cap = 0);

}  // namespace mechdiag
