#pragma once

// Deterministic toy scenes and multi-round grounded dialogs. Every question
// is produced from a small template grammar and answered by a symbolic
// oracle over the scene; pronoun questions are resolved through the referent
// chain recorded at generation time.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cag/rng.hpp"
#include "json.hpp"

namespace cag::synth {

using Tokens = std::vector<std::string>;

struct Attributes {
  std::vector<std::string> categories{"person", "dog", "car", "tree", "cat", "ball"};
  std::vector<std::string> colors{"red", "blue", "green", "yellow", "white", "black"};
  std::vector<std::string> sizes{"small", "large"};
};

struct CorpusManifest {
  std::uint64_t seed = 1;
  std::size_t train = 500;
  std::size_t val = 100;
  std::size_t test = 100;
  std::string template_version = "cag-synth-1";
  std::size_t grid = 4;
  std::size_t objects = 6;
  std::size_t rounds = 4;  // history rounds plus the current question
  std::size_t candidates = 10;
  Attributes attributes;

  std::size_t feature_dim() const {
    return attributes.categories.size() + attributes.colors.size() + attributes.sizes.size() + 2;
  }

  void validate() const {
    if (grid < 2) throw std::invalid_argument("manifest: grid must be at least 2");
    if (rounds < 2 || rounds > 10) throw std::invalid_argument("manifest: rounds must lie in [2, 10]");
    if (candidates < 2) throw std::invalid_argument("manifest: need at least 2 candidates");
    if (attributes.categories.size() < 2 || attributes.colors.size() < 2 || attributes.sizes.size() < 2)
      throw std::invalid_argument("manifest: each attribute vocabulary needs at least two values");
    if (std::find(attributes.categories.begin(), attributes.categories.end(), "person") ==
        attributes.categories.end())
      throw std::invalid_argument("manifest: category list must contain 'person'");
  }
};

inline void to_json(nlohmann::json& j, const CorpusManifest& m) {
  j = nlohmann::json{{"seed", m.seed},
                     {"splits", {{"train", m.train}, {"val", m.val}, {"test", m.test}}},
                     {"template_version", m.template_version},
                     {"grid", m.grid},
                     {"objects", m.objects},
                     {"rounds", m.rounds},
                     {"candidates", m.candidates},
                     {"categories", m.attributes.categories},
                     {"colors", m.attributes.colors},
                     {"sizes", m.attributes.sizes}};
}

inline void from_json(const nlohmann::json& j, CorpusManifest& m) {
  m = CorpusManifest{};
  m.seed = j.value("seed", m.seed);
  if (j.contains("splits")) {
    const auto& s = j.at("splits");
    m.train = s.value("train", m.train);
    m.val = s.value("val", m.val);
    m.test = s.value("test", m.test);
  }
  m.template_version = j.value("template_version", m.template_version);
  m.grid = j.value("grid", m.grid);
  m.objects = j.value("objects", m.objects);
  m.rounds = j.value("rounds", m.rounds);
  m.candidates = j.value("candidates", m.candidates);
  m.attributes.categories = j.value("categories", m.attributes.categories);
  m.attributes.colors = j.value("colors", m.attributes.colors);
  m.attributes.sizes = j.value("sizes", m.attributes.sizes);
  m.validate();
}

// ---------------------------------------------------------------------------
// Scenes

struct SceneObject {
  std::size_t category = 0;
  std::size_t color = 0;
  std::size_t size = 0;
  std::size_t x = 0;  // column of the grid cell, grows to the right
  std::size_t y = 0;  // row of the grid cell, grows downward
  std::vector<double> feature;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Scene {
  std::size_t grid = 4;
  std::vector<SceneObject> objects;

  std::size_t size() const { return objects.size(); }
  friend bool operator==(const Scene&, const Scene&) = default;
};

inline constexpr std::size_t kMinObjects = 3;
inline constexpr std::size_t kMaxObjects = 16;

/// One-hot category | one-hot color | one-hot size | x/(g-1) | y/(g-1).
inline std::vector<double> encode_object(const SceneObject& o, const Attributes& a, std::size_t grid) {
  std::vector<double> f(a.categories.size() + a.colors.size() + a.sizes.size() + 2, 0.0);
  f[o.category] = 1.0;
  f[a.categories.size() + o.color] = 1.0;
  f[a.categories.size() + a.colors.size() + o.size] = 1.0;
  const double span = static_cast<double>(grid - 1);
  f[f.size() - 2] = static_cast<double>(o.x) / span;
  f[f.size() - 1] = static_cast<double>(o.y) / span;
  return f;
}

/// Samples `n` objects (clamped to [3, 16]) with distinct (category, color)
/// pairs and distinct cells whenever the attribute space and grid allow it.
inline Scene generate_scene(Rng& rng, const CorpusManifest& m, std::size_t n) {
  n = std::clamp(n, kMinObjects, kMaxObjects);
  const Attributes& a = m.attributes;
  const std::size_t ncat = a.categories.size(), ncol = a.colors.size();
  Scene s;
  s.grid = m.grid;
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  std::set<std::pair<std::size_t, std::size_t>> cells;
  const bool unique_pairs = n <= ncat * ncol;
  const bool unique_cells = n <= m.grid * m.grid;
  for (std::size_t i = 0; i < n; ++i) {
    SceneObject o;
    do {
      o.category = rng.index(ncat);
      o.color = rng.index(ncol);
    } while (unique_pairs && pairs.count({o.category, o.color}));
    pairs.insert({o.category, o.color});
    o.size = rng.index(a.sizes.size());
    do {
      o.x = rng.index(m.grid);
      o.y = rng.index(m.grid);
    } while (unique_cells && cells.count({o.x, o.y}));
    cells.insert({o.x, o.y});
    o.feature = encode_object(o, a, m.grid);
    s.objects.push_back(std::move(o));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Question grammar

enum class QuestionKind { kExists, kCount, kColor, kSize, kRelation, kAnyColor };
enum class Relation { kLeftOf, kRightOf, kAbove, kBelow };
enum class AnswerType { kYesNo, kColor, kSize, kCount };

inline const char* kind_name(QuestionKind k) {
  switch (k) {
    case QuestionKind::kExists: return "exists";
    case QuestionKind::kCount: return "count";
    case QuestionKind::kColor: return "color";
    case QuestionKind::kSize: return "size";
    case QuestionKind::kRelation: return "relation";
    case QuestionKind::kAnyColor: return "any_color";
  }
  return "?";
}

inline AnswerType answer_type(QuestionKind k) {
  switch (k) {
    case QuestionKind::kColor: return AnswerType::kColor;
    case QuestionKind::kSize: return AnswerType::kSize;
    case QuestionKind::kCount: return AnswerType::kCount;
    default: return AnswerType::kYesNo;
  }
}

/// An object description "[color] category"; color may be omitted.
struct Mention {
  std::size_t category = 0;
  std::optional<std::size_t> color;
  friend bool operator==(const Mention&, const Mention&) = default;
};

struct Question {
  QuestionKind kind = QuestionKind::kExists;
  std::string pronoun;            // "it", "he" or "they" when the subject is a pronoun
  std::optional<Mention> subject;  // explicit subject when there is no pronoun
  std::optional<Mention> other;    // reference object of a relation
  Relation relation = Relation::kLeftOf;
  std::size_t color = 0;  // queried color of exists / any_color

  bool uses_pronoun() const { return !pronoun.empty(); }
};

inline Tokens relation_tokens(Relation r) {
  switch (r) {
    case Relation::kLeftOf: return {"left", "of"};
    case Relation::kRightOf: return {"right", "of"};
    case Relation::kAbove: return {"above"};
    case Relation::kBelow: return {"below"};
  }
  return {};
}

inline std::string plural(const std::string& category) { return category == "person" ? "people" : category + "s"; }

inline Tokens render(const Question& q, const Attributes& a) {
  auto mention = [&](const Mention& m, Tokens& out) {
    if (m.color) out.push_back(a.colors.at(*m.color));
    out.push_back(a.categories.at(m.category));
  };
  Tokens t;
  switch (q.kind) {
    case QuestionKind::kExists:
      t = {"is", "there", "a", a.colors.at(q.color), a.categories.at(q.subject->category)};
      break;
    case QuestionKind::kCount:
      t = {"how", "many", plural(a.categories.at(q.subject->category))};
      break;
    case QuestionKind::kColor:
    case QuestionKind::kSize:
      t = {"what", q.kind == QuestionKind::kColor ? "color" : "size", "is"};
      if (q.uses_pronoun()) {
        t.push_back(q.pronoun);
      } else {
        t.push_back("the");
        mention(*q.subject, t);
      }
      break;
    case QuestionKind::kRelation: {
      t = {"is"};
      if (q.uses_pronoun()) {
        t.push_back(q.pronoun);
      } else {
        t.push_back("the");
        mention(*q.subject, t);
      }
      for (auto& w : relation_tokens(q.relation)) t.push_back(w);
      t.push_back("the");
      mention(*q.other, t);
      break;
    }
    case QuestionKind::kAnyColor:
      t = {"do", q.pronoun, "include", "a", a.colors.at(q.color), "one"};
      break;
  }
  return t;
}

namespace detail {

inline std::optional<std::size_t> find_index(const std::vector<std::string>& list, const std::string& tok) {
  auto it = std::find(list.begin(), list.end(), tok);
  if (it == list.end()) return std::nullopt;
  return static_cast<std::size_t>(it - list.begin());
}

class Parser {
 public:
  Parser(const Tokens& t, const Attributes& a) : t_(t), a_(a) {}

  Question parse() {
    Question q;
    if (accept("is") && accept("there") && accept("a")) {
      q.kind = QuestionKind::kExists;
      q.color = need(a_.colors, "color");
      q.subject = Mention{need(a_.categories, "category"), q.color};
    } else if (reset() && accept("how") && accept("many")) {
      q.kind = QuestionKind::kCount;
      const std::string w = next("plural noun");
      std::optional<std::size_t> cat;
      for (std::size_t c = 0; c < a_.categories.size(); ++c)
        if (plural(a_.categories[c]) == w) cat = c;
      if (!cat) fail("unknown plural '" + w + "'");
      q.subject = Mention{*cat, std::nullopt};
    } else if (reset() && accept("what")) {
      const std::string attr = next("attribute");
      if (attr == "color")
        q.kind = QuestionKind::kColor;
      else if (attr == "size")
        q.kind = QuestionKind::kSize;
      else
        fail("unknown attribute '" + attr + "'");
      expect("is");
      subject(q);
    } else if (reset() && accept("do")) {
      q.kind = QuestionKind::kAnyColor;
      q.pronoun = next("pronoun");
      if (q.pronoun != "they") fail("expected 'they'");
      expect("include");
      expect("a");
      q.color = need(a_.colors, "color");
      expect("one");
    } else if (reset() && accept("is")) {
      q.kind = QuestionKind::kRelation;
      subject(q);
      const std::string w = next("relation");
      if (w == "left" || w == "right") {
        expect("of");
        q.relation = w == "left" ? Relation::kLeftOf : Relation::kRightOf;
      } else if (w == "above") {
        q.relation = Relation::kAbove;
      } else if (w == "below") {
        q.relation = Relation::kBelow;
      } else {
        fail("unknown relation '" + w + "'");
      }
      expect("the");
      q.other = mention();
    } else {
      fail("no template matches");
    }
    if (pos_ != t_.size()) fail("trailing tokens");
    return q;
  }

 private:
  bool reset() {
    pos_ = 0;
    return true;
  }
  bool accept(const std::string& w) {
    if (pos_ < t_.size() && t_[pos_] == w) {
      ++pos_;
      return true;
    }
    return false;
  }
  void expect(const std::string& w) {
    if (!accept(w)) fail("expected '" + w + "'");
  }
  std::string next(const char* what) {
    if (pos_ >= t_.size()) fail(std::string("missing ") + what);
    return t_[pos_++];
  }
  std::size_t need(const std::vector<std::string>& list, const char* what) {
    const std::string w = next(what);
    auto i = find_index(list, w);
    if (!i) fail(std::string("unknown ") + what + " '" + w + "'");
    return *i;
  }
  Mention mention() {
    Mention m;
    const std::string w = next("noun");
    if (auto c = find_index(a_.colors, w)) {
      m.color = *c;
      m.category = need(a_.categories, "category");
    } else if (auto cat = find_index(a_.categories, w)) {
      m.category = *cat;
    } else {
      fail("unknown noun '" + w + "'");
    }
    return m;
  }
  void subject(Question& q) {
    if (accept("the")) {
      q.subject = mention();
    } else {
      q.pronoun = next("pronoun");
      if (q.pronoun != "it" && q.pronoun != "he") fail("unknown pronoun '" + q.pronoun + "'");
    }
  }
  [[noreturn]] void fail(const std::string& why) const {
    std::string s;
    for (const auto& w : t_) s += (s.empty() ? "" : " ") + w;
    throw std::invalid_argument("parse_question: " + why + " in \"" + s + "\"");
  }

  const Tokens& t_;
  const Attributes& a_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Question parse_question(const Tokens& tokens, const Attributes& a) {
  return detail::Parser(tokens, a).parse();
}

// ---------------------------------------------------------------------------
// Oracle

inline constexpr std::size_t kMaxCount = 9;

inline std::vector<std::size_t> matches(const Scene& s, const Mention& m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.objects.size(); ++i)
    if (s.objects[i].category == m.category && (!m.color || s.objects[i].color == *m.color)) out.push_back(i);
  return out;
}

inline std::optional<std::size_t> unique_match(const Scene& s, const Mention& m) {
  auto v = matches(s, m);
  if (v.size() != 1) return std::nullopt;
  return v[0];
}

inline bool holds(const SceneObject& a, Relation r, const SceneObject& b) {
  switch (r) {
    case Relation::kLeftOf: return a.x < b.x;
    case Relation::kRightOf: return a.x > b.x;
    case Relation::kAbove: return a.y < b.y;
    case Relation::kBelow: return a.y > b.y;
  }
  return false;
}

/// Exact answer of `q` on `s`. Pronoun subjects are bound to `referent`
/// (object indices); an empty binding for a pronoun question is rejected.
inline std::string oracle_answer(const Scene& s, const Question& q, const std::vector<std::size_t>& referent,
                                 const Attributes& a) {
  auto yes_no = [](bool b) { return std::string(b ? "yes" : "no"); };
  auto single_subject = [&]() -> std::size_t {
    if (q.uses_pronoun()) {
      if (referent.size() != 1)
        throw std::logic_error("oracle_answer: pronoun '" + q.pronoun + "' needs exactly one referent, got " +
                               std::to_string(referent.size()));
      if (referent[0] >= s.size()) throw std::logic_error("oracle_answer: referent outside scene");
      return referent[0];
    }
    auto i = unique_match(s, *q.subject);
    if (!i) throw std::logic_error("oracle_answer: subject does not identify a unique object");
    return *i;
  };
  switch (q.kind) {
    case QuestionKind::kExists:
      return yes_no(!matches(s, *q.subject).empty());
    case QuestionKind::kCount:
      return std::to_string(std::min(matches(s, *q.subject).size(), kMaxCount));
    case QuestionKind::kColor:
      return a.colors.at(s.objects[single_subject()].color);
    case QuestionKind::kSize:
      return a.sizes.at(s.objects[single_subject()].size);
    case QuestionKind::kRelation: {
      const std::size_t subj = single_subject();
      auto other = unique_match(s, *q.other);
      if (!other) throw std::logic_error("oracle_answer: relation target does not identify a unique object");
      return yes_no(holds(s.objects[subj], q.relation, s.objects[*other]));
    }
    case QuestionKind::kAnyColor: {
      if (referent.empty()) throw std::logic_error("oracle_answer: pronoun 'they' has no referent");
      bool any = false;
      for (std::size_t i : referent) any = any || s.objects.at(i).color == q.color;
      return yes_no(any);
    }
  }
  throw std::logic_error("oracle_answer: unknown question kind");
}

/// Objects the question talks about afterwards, i.e. what a pronoun in the
/// next round refers to. Empty when the question establishes nothing.
inline std::vector<std::size_t> subject_after(const Scene& s, const Question& q,
                                              const std::vector<std::size_t>& referent) {
  if (q.uses_pronoun()) return referent;
  switch (q.kind) {
    case QuestionKind::kExists:
    case QuestionKind::kCount:
      return matches(s, *q.subject);
    default: {
      auto i = unique_match(s, *q.subject);
      return i ? std::vector<std::size_t>{*i} : std::vector<std::size_t>{};
    }
  }
}

inline std::size_t person_category(const Attributes& a) { return *detail::find_index(a.categories, "person"); }

/// Pronoun for a referent: "they" for groups, "he" for a person, else "it".
inline std::string pronoun_for(const Scene& s, const std::vector<std::size_t>& referent, const Attributes& a) {
  if (referent.size() >= 2) return "they";
  return s.objects.at(referent.at(0)).category == person_category(a) ? "he" : "it";
}

/// Every referent a pronoun could denote without the dialog history.
inline std::vector<std::vector<std::size_t>> candidate_bindings(const Scene& s, const std::string& pronoun,
                                                                const Attributes& a) {
  std::vector<std::vector<std::size_t>> out;
  const std::size_t person = person_category(a);
  if (pronoun == "they") {
    for (std::size_t c = 0; c < a.categories.size(); ++c) {
      auto group = matches(s, Mention{c, std::nullopt});
      if (group.size() >= 2) out.push_back(group);
    }
    return out;
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool is_person = s.objects[i].category == person;
    if ((pronoun == "he") == is_person) out.push_back({i});
  }
  return out;
}

/// Distinct answers over every history-free binding of the pronoun.
inline std::set<std::string> binding_answers(const Scene& s, const Question& q, const Attributes& a) {
  std::set<std::string> out;
  for (const auto& b : candidate_bindings(s, q.pronoun, a)) {
    if (q.kind == QuestionKind::kRelation) {
      auto other = unique_match(s, *q.other);
      if (!other || (b.size() == 1 && b[0] == *other)) continue;
    }
    out.insert(oracle_answer(s, q, b, a));
  }
  return out;
}

inline std::vector<std::string> answer_values(AnswerType t, const Attributes& a) {
  switch (t) {
    case AnswerType::kYesNo: return {"yes", "no"};
    case AnswerType::kColor: return a.colors;
    case AnswerType::kSize: return a.sizes;
    case AnswerType::kCount: {
      std::vector<std::string> v;
      for (std::size_t i = 0; i <= kMaxCount; ++i) v.push_back(std::to_string(i));
      return v;
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Dialogs

struct Round {
  Tokens question;
  Tokens answer;
  QuestionKind kind = QuestionKind::kExists;
  std::vector<std::size_t> referent;  // binding of the pronoun, empty if none

  bool pronoun() const { return !referent.empty(); }
  friend bool operator==(const Round&, const Round&) = default;
};

struct DialogInstance {
  std::size_t id = 0;
  Scene scene;
  Tokens caption;
  std::vector<Round> history;
  Round current;  // answer holds the ground-truth string
  std::vector<Tokens> candidates;
  std::size_t gt = 0;

  friend bool operator==(const DialogInstance&, const DialogInstance&) = default;
};

class DialogError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline Mention full_mention(const SceneObject& o) { return Mention{o.category, o.color}; }

inline std::optional<Question> fresh_question(const Scene& s, Rng& rng, const Attributes& a) {
  Question q;
  switch (rng.index(5)) {
    case 0: {  // exists
      q.kind = QuestionKind::kExists;
      if (rng.bernoulli(0.6)) {
        const auto& o = s.objects[rng.index(s.size())];
        q.color = o.color;
        q.subject = Mention{o.category, o.color};
      } else {
        q.color = rng.index(a.colors.size());
        q.subject = Mention{rng.index(a.categories.size()), q.color};
      }
      return q;
    }
    case 1: {  // count
      q.kind = QuestionKind::kCount;
      const std::size_t cat =
          rng.bernoulli(0.8) ? s.objects[rng.index(s.size())].category : rng.index(a.categories.size());
      q.subject = Mention{cat, std::nullopt};
      return q;
    }
    case 2: {  // color of a category present exactly once
      q.kind = QuestionKind::kColor;
      const auto& o = s.objects[rng.index(s.size())];
      Mention m{o.category, std::nullopt};
      if (!unique_match(s, m)) return std::nullopt;
      q.subject = m;
      return q;
    }
    case 3: {  // size
      q.kind = QuestionKind::kSize;
      const auto& o = s.objects[rng.index(s.size())];
      if (!unique_match(s, full_mention(o))) return std::nullopt;
      q.subject = full_mention(o);
      return q;
    }
    default: {  // relation between two objects
      q.kind = QuestionKind::kRelation;
      const std::size_t i = rng.index(s.size());
      const std::size_t j = rng.index(s.size());
      if (i == j) return std::nullopt;
      if (!unique_match(s, full_mention(s.objects[i])) || !unique_match(s, full_mention(s.objects[j])))
        return std::nullopt;
      q.subject = full_mention(s.objects[i]);
      q.other = full_mention(s.objects[j]);
      q.relation = static_cast<Relation>(rng.index(4));
      return q;
    }
  }
}

inline std::optional<Question> pronoun_question(const Scene& s, const std::vector<std::size_t>& referent, Rng& rng,
                                                const Attributes& a) {
  Question q;
  q.pronoun = pronoun_for(s, referent, a);
  if (q.pronoun == "they") {
    q.kind = QuestionKind::kAnyColor;
    q.color = rng.bernoulli(0.5) ? s.objects[referent[rng.index(referent.size())]].color
                                 : rng.index(a.colors.size());
    return q;
  }
  switch (rng.index(3)) {
    case 0: q.kind = QuestionKind::kColor; return q;
    case 1: q.kind = QuestionKind::kSize; return q;
    default: {
      q.kind = QuestionKind::kRelation;
      const std::size_t j = rng.index(s.size());
      if (j == referent[0] || !unique_match(s, full_mention(s.objects[j]))) return std::nullopt;
      q.other = full_mention(s.objects[j]);
      q.relation = static_cast<Relation>(rng.index(4));
      return q;
    }
  }
}

inline Tokens caption_for(const Scene& s, Rng& rng, const Attributes& a) {
  const std::size_t i = rng.index(s.size());
  std::size_t j = rng.index(s.size() - 1);
  if (j >= i) ++j;
  return {"a", "picture", "of", "a", a.colors[s.objects[i].color], a.categories[s.objects[i].category],
          "and", "a", a.colors[s.objects[j].color], a.categories[s.objects[j].category]};
}

}  // namespace detail

inline constexpr std::size_t kMaxTemplateFailures = 100;

/// Generates `rounds` QA rounds on `scene`; the last one is the question to
/// answer. At least one round uses a pronoun bound to the previous round's
/// subject, and pronoun questions are chosen so that ignoring the history
/// leaves more than one answer possible.
inline DialogInstance generate_dialog(const Scene& scene, Rng& rng, std::size_t rounds, std::size_t num_candidates,
                                      const Attributes& a) {
  if (rounds < 2 || rounds > 10) throw std::invalid_argument("generate_dialog: rounds must lie in [2, 10]");
  if (num_candidates < 2) throw std::invalid_argument("generate_dialog: need at least 2 candidates");
  std::size_t restarts = 0;
  while (true) {
    DialogInstance d;
    d.scene = scene;
    d.caption = detail::caption_for(scene, rng, a);
    std::vector<std::size_t> subject;
    bool any_pronoun = false;
    std::vector<Round> all;
    std::set<std::string> alternatives;
    for (std::size_t r = 0; r < rounds; ++r) {
      const bool last = r + 1 == rounds;
      const bool want_pronoun = !subject.empty() && rng.bernoulli(last ? 0.75 : 0.5);
      std::optional<Question> q;
      for (std::size_t failures = 0; !q; ++failures) {
        if (failures >= kMaxTemplateFailures)
          throw DialogError("generate_dialog: scene cannot support any template after " +
                            std::to_string(failures) + " attempts");
        // A pronoun template that keeps failing gives way to a fresh question.
        const bool pronoun = want_pronoun && failures < 10;
        q = pronoun ? detail::pronoun_question(scene, subject, rng, a) : detail::fresh_question(scene, rng, a);
        if (q && q->uses_pronoun() && binding_answers(scene, *q, a).size() < 2) q.reset();
      }
      Round round;
      round.kind = q->kind;
      round.question = render(*q, a);
      if (q->uses_pronoun()) {
        round.referent = subject;
        any_pronoun = true;
        if (last) alternatives = binding_answers(scene, *q, a);
      }
      round.answer = {oracle_answer(scene, *q, round.referent, a)};
      subject = subject_after(scene, *q, round.referent);
      all.push_back(std::move(round));
    }
    if (!any_pronoun) {
      if (++restarts >= kMaxTemplateFailures)
        throw DialogError("generate_dialog: no pronoun round after " + std::to_string(restarts) + " attempts");
      continue;
    }
    d.current = all.back();
    all.pop_back();
    d.history = std::move(all);

    // Distractors: other answers the pronoun could have produced, then the
    // rest of the answer type, then other answer types.
    const std::string& gt = d.current.answer[0];
    std::vector<std::string> pool;
    auto push = [&](const std::string& v) {
      if (v != gt && std::find(pool.begin(), pool.end(), v) == pool.end()) pool.push_back(v);
    };
    std::vector<std::string> alt(alternatives.begin(), alternatives.end());
    rng.shuffle(alt);
    for (const auto& v : alt) push(v);
    const AnswerType type = answer_type(d.current.kind);
    auto same = answer_values(type, a);
    rng.shuffle(same);
    for (const auto& v : same) push(v);
    std::vector<std::string> rest;
    for (AnswerType t : {AnswerType::kYesNo, AnswerType::kColor, AnswerType::kSize, AnswerType::kCount})
      if (t != type)
        for (auto& v : answer_values(t, a)) rest.push_back(v);
    rng.shuffle(rest);
    for (const auto& v : rest) push(v);
    if (pool.size() + 1 < num_candidates)
      throw DialogError("generate_dialog: only " + std::to_string(pool.size() + 1) + " distinct answers for " +
                        std::to_string(num_candidates) + " candidates");
    std::vector<std::string> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(num_candidates - 1));
    chosen.push_back(gt);
    rng.shuffle(chosen);
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      d.candidates.push_back({chosen[i]});
      if (chosen[i] == gt) d.gt = i;
    }
    return d;
  }
}

// ---------------------------------------------------------------------------
// Corpus

struct Corpus {
  CorpusManifest manifest;
  std::vector<DialogInstance> train, val, test;

  const std::vector<DialogInstance>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
  }
};

/// Dialog `id` is generated from its own stream keyed by (seed, id), so any
/// dialog can be regenerated independently.
inline DialogInstance generate_instance(const CorpusManifest& m, std::size_t id) {
  Rng rng{m.seed, static_cast<std::uint64_t>(id)};
  Scene scene = generate_scene(rng, m, m.objects);
  DialogInstance d = generate_dialog(scene, rng, m.rounds, m.candidates, m.attributes);
  d.id = id;
  return d;
}

/// Ids run consecutively through train, val, test.
inline Corpus generate_corpus(const CorpusManifest& m) {
  m.validate();
  Corpus c;
  c.manifest = m;
  std::size_t id = 0;
  for (auto* split : {&c.train, &c.val, &c.test}) {
    const std::size_t n = split == &c.train ? m.train : split == &c.val ? m.val : m.test;
    for (std::size_t i = 0; i < n; ++i) split->push_back(generate_instance(m, id++));
  }
  return c;
}

inline nlohmann::json to_json(const DialogInstance& d, const Attributes& a) {
  using nlohmann::json;
  json objects = json::array();
  for (const auto& o : d.scene.objects)
    objects.push_back({{"cat", a.categories[o.category]},
                       {"color", a.colors[o.color]},
                       {"size", a.sizes[o.size]},
                       {"cell", {o.x, o.y}},
                       {"feat", o.feature}});
  json history = json::array();
  json referents = json::array();
  json kinds = json::array();
  for (const auto& r : d.history) {
    history.push_back({r.question, r.answer});
    referents.push_back(r.referent);
    kinds.push_back(kind_name(r.kind));
  }
  return json{{"id", d.id},
              {"scene", {{"grid", d.scene.grid}, {"objects", objects}}},
              {"caption", d.caption},
              {"history", history},
              {"question", d.current.question},
              {"candidates", d.candidates},
              {"gt", d.gt},
              {"kind", kind_name(d.current.kind)},
              {"referent", d.current.referent},
              {"history_referents", referents},
              {"history_kinds", kinds}};
}

inline QuestionKind parse_kind(const std::string& s) {
  for (QuestionKind k : {QuestionKind::kExists, QuestionKind::kCount, QuestionKind::kColor, QuestionKind::kSize,
                         QuestionKind::kRelation, QuestionKind::kAnyColor})
    if (s == kind_name(k)) return k;
  throw std::invalid_argument("unknown question kind '" + s + "'");
}

inline DialogInstance dialog_from_json(const nlohmann::json& j, const Attributes& a) {
  DialogInstance d;
  d.id = j.at("id").get<std::size_t>();
  const auto& sc = j.at("scene");
  d.scene.grid = sc.at("grid").get<std::size_t>();
  for (const auto& o : sc.at("objects")) {
    SceneObject obj;
    auto idx = [&](const std::vector<std::string>& list, const char* key) {
      auto i = detail::find_index(list, o.at(key).get<std::string>());
      if (!i) throw std::invalid_argument(std::string("dialog ") + std::to_string(d.id) + ": unknown " + key);
      return *i;
    };
    obj.category = idx(a.categories, "cat");
    obj.color = idx(a.colors, "color");
    obj.size = idx(a.sizes, "size");
    const auto cell = o.at("cell").get<std::vector<std::size_t>>();
    if (cell.size() != 2) throw std::invalid_argument("dialog " + std::to_string(d.id) + ": cell must have 2 entries");
    obj.x = cell[0];
    obj.y = cell[1];
    obj.feature = o.at("feat").get<std::vector<double>>();
    d.scene.objects.push_back(std::move(obj));
  }
  d.caption = j.at("caption").get<Tokens>();
  const auto referents = j.value("history_referents", nlohmann::json::array());
  const auto kinds = j.value("history_kinds", nlohmann::json::array());
  std::size_t r = 0;
  for (const auto& h : j.at("history")) {
    Round round;
    round.question = h.at(0).get<Tokens>();
    round.answer = h.at(1).get<Tokens>();
    if (r < referents.size()) round.referent = referents[r].get<std::vector<std::size_t>>();
    if (r < kinds.size()) round.kind = parse_kind(kinds[r].get<std::string>());
    d.history.push_back(std::move(round));
    ++r;
  }
  d.current.question = j.at("question").get<Tokens>();
  d.current.kind = parse_kind(j.value("kind", std::string("exists")));
  d.current.referent = j.value("referent", std::vector<std::size_t>{});
  d.candidates = j.at("candidates").get<std::vector<Tokens>>();
  d.gt = j.at("gt").get<std::size_t>();
  if (d.gt >= d.candidates.size())
    throw std::invalid_argument("dialog " + std::to_string(d.id) + ": gt outside candidate list");
  d.current.answer = d.candidates[d.gt];
  return d;
}

/// Question and binding used to check an emitted round against the oracle.
inline std::string replay_answer(const DialogInstance& d, const Round& r, const Attributes& a) {
  return oracle_answer(d.scene, parse_question(r.question, a), r.referent, a);
}

}  // namespace cag::synth
