#include <gtest/gtest.h>

#include <set>

#include "cag/synthdial.hpp"

using namespace cag;
using namespace cag::synth;

namespace {

SceneObject object(std::size_t cat, std::size_t color, std::size_t size, std::size_t x, std::size_t y,
                   const Attributes& a) {
  SceneObject o{cat, color, size, x, y, {}};
  o.feature = encode_object(o, a, 4);
  return o;
}

std::size_t cat_id(const Attributes& a, const std::string& name) { return *detail::find_index(a.categories, name); }
std::size_t color_id(const Attributes& a, const std::string& name) { return *detail::find_index(a.colors, name); }

CorpusManifest small_manifest(std::uint64_t seed, std::size_t train, std::size_t val, std::size_t test) {
  CorpusManifest m;
  m.seed = seed;
  m.train = train;
  m.val = val;
  m.test = test;
  return m;
}

}  // namespace

TEST(Scene, ClampsObjectCount) {
  Rng rng(1);
  const CorpusManifest m;
  EXPECT_EQ(generate_scene(rng, m, 1).size(), 3u);
  EXPECT_EQ(generate_scene(rng, m, 40).size(), 16u);
}

TEST(Scene, DeterministicForSeed) {
  const CorpusManifest m;
  Rng a(7), b(7);
  EXPECT_EQ(generate_scene(a, m, 6), generate_scene(b, m, 6));
}

TEST(Scene, DistinctPairsAndCells) {
  const CorpusManifest m;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const Scene s = generate_scene(rng, m, 6);
    std::set<std::pair<std::size_t, std::size_t>> pairs, cells;
    for (const auto& o : s.objects) {
      pairs.insert({o.category, o.color});
      cells.insert({o.x, o.y});
      ASSERT_EQ(o.feature.size(), m.feature_dim());
    }
    ASSERT_EQ(pairs.size(), 6u);
    ASSERT_EQ(cells.size(), 6u);
  }
}

TEST(Scene, FeatureEncodingIsInjective) {
  const Attributes a;
  std::set<std::vector<double>> seen;
  std::size_t count = 0;
  for (std::size_t c = 0; c < a.categories.size(); ++c)
    for (std::size_t k = 0; k < a.colors.size(); ++k)
      for (std::size_t s = 0; s < a.sizes.size(); ++s)
        for (std::size_t x = 0; x < 4; ++x)
          for (std::size_t y = 0; y < 4; ++y) {
            seen.insert(object(c, k, s, x, y, a).feature);
            ++count;
          }
  EXPECT_EQ(seen.size(), count);
}

TEST(Grammar, RenderParseRoundTrip) {
  const Attributes a;
  const CorpusManifest m = small_manifest(3, 200, 0, 0);
  const Corpus c = generate_corpus(m);
  for (const auto& d : c.train) {
    for (const auto* r : {&d.current}) {
      const Question q = parse_question(r->question, a);
      ASSERT_EQ(render(q, a), r->question);
      ASSERT_EQ(q.kind, r->kind);
    }
    for (const auto& r : d.history) ASSERT_EQ(render(parse_question(r.question, a), a), r.question);
  }
  EXPECT_THROW(parse_question({"is", "there", "a", "purple", "dog"}, a), std::invalid_argument);
}

TEST(Oracle, Examples) {
  const Attributes a;
  const std::size_t car = cat_id(a, "car"), dog = cat_id(a, "dog"), tree = cat_id(a, "tree");
  Scene s;
  s.objects = {object(dog, 0, 0, 1, 1, a),
               object(tree, 2, 1, 1, 3, a), object(tree, 3, 0, 2, 0, a)};

  Question exists;
  exists.kind = QuestionKind::kExists;
  exists.subject = Mention{car, std::nullopt};
  EXPECT_EQ(oracle_answer(s, exists, {}, a), "no");

  Question count;
  count.kind = QuestionKind::kCount;
  count.subject = Mention{tree, std::nullopt};
  EXPECT_EQ(oracle_answer(s, count, {}, a), "2");

  // Dog and first tree share x = 1: strict inequality says neither is left of the other.
  Question rel;
  rel.kind = QuestionKind::kRelation;
  rel.pronoun = "it";
  rel.relation = Relation::kLeftOf;
  rel.other = Mention{tree, std::size_t{2}};
  EXPECT_EQ(oracle_answer(s, rel, {0}, a), "no");
  rel.relation = Relation::kRightOf;
  EXPECT_EQ(oracle_answer(s, rel, {0}, a), "no");
  rel.relation = Relation::kAbove;
  EXPECT_EQ(oracle_answer(s, rel, {0}, a), "yes");

  Question unbound;
  unbound.kind = QuestionKind::kColor;
  unbound.pronoun = "it";
  EXPECT_THROW(oracle_answer(s, unbound, {}, a), std::logic_error);
}

TEST(Oracle, SingleDogPronounColor) {
  const Attributes a;
  const std::size_t dog = cat_id(a, "dog"), red = color_id(a, "red");
  Scene s;
  s.objects = {object(dog, red, 0, 0, 0, a), object(cat_id(a, "car"), 1, 1, 3, 3, a),
               object(cat_id(a, "ball"), 2, 0, 2, 1, a)};
  Question is_there;
  is_there.kind = QuestionKind::kExists;
  is_there.color = red;
  is_there.subject = Mention{dog, red};
  EXPECT_EQ(oracle_answer(s, is_there, {}, a), "yes");
  const auto referent = subject_after(s, is_there, {});
  ASSERT_EQ(referent, (std::vector<std::size_t>{0}));
  Question color;
  color.kind = QuestionKind::kColor;
  color.pronoun = pronoun_for(s, referent, a);
  EXPECT_EQ(color.pronoun, "it");
  EXPECT_EQ(oracle_answer(s, color, referent, a), "red");
}

TEST(Dialog, CorpusInvariants) {
  const CorpusManifest m = small_manifest(11, 300, 50, 50);
  const Corpus c = generate_corpus(m);
  const Attributes& a = m.attributes;
  std::set<std::size_t> ids;
  std::size_t pronoun_current = 0;
  for (const char* split : {"train", "val", "test"})
    for (const auto& d : c.split(split)) {
      ASSERT_TRUE(ids.insert(d.id).second) << "duplicate id " << d.id;
      ASSERT_EQ(d.history.size() + 1, m.rounds);
      ASSERT_EQ(d.candidates.size(), m.candidates);

      // Oracle consistency for every round, including the current one.
      for (const auto& r : d.history) ASSERT_EQ(replay_answer(d, r, a), r.answer[0]);
      const std::string gt = replay_answer(d, d.current, a);
      ASSERT_EQ(d.candidates[d.gt], Tokens{gt});

      // Exactly one candidate is oracle-correct.
      std::size_t correct = 0;
      for (const auto& cand : d.candidates) correct += cand == Tokens{gt} ? 1 : 0;
      ASSERT_EQ(correct, 1u);

      // At least one pronoun round, bound to the previous round's subject.
      bool any = false;
      std::vector<Round> rounds = d.history;
      rounds.push_back(d.current);
      for (std::size_t i = 0; i < rounds.size(); ++i) {
        if (!rounds[i].pronoun()) continue;
        any = true;
        ASSERT_GT(i, 0u);
        const Question prev = parse_question(rounds[i - 1].question, a);
        ASSERT_EQ(subject_after(d.scene, prev, rounds[i - 1].referent), rounds[i].referent);

        // History necessity: without the history the pronoun admits several answers.
        const Question q = parse_question(rounds[i].question, a);
        ASSERT_GE(binding_answers(d.scene, q, a).size(), 2u);
      }
      ASSERT_TRUE(any);
      if (d.current.pronoun()) {
        ++pronoun_current;
        // At least two candidates are consistent with some history-free binding.
        const auto alts = binding_answers(d.scene, parse_question(d.current.question, a), a);
        std::size_t consistent = 0;
        for (const auto& cand : d.candidates) consistent += alts.count(cand[0]);
        ASSERT_GE(consistent, 2u);
      }
    }
  EXPECT_EQ(ids.size(), 400u);
  EXPECT_EQ(*ids.rbegin(), 399u);
  EXPECT_GT(pronoun_current, 100u);
}

TEST(Dialog, CountMatchesEnumeration) {
  const CorpusManifest m = small_manifest(5, 400, 0, 0);
  const Corpus c = generate_corpus(m);
  std::size_t checked = 0;
  for (const auto& d : c.train)
    if (d.current.kind == QuestionKind::kCount) {
      const Question q = parse_question(d.current.question, m.attributes);
      std::size_t n = 0;
      for (const auto& o : d.scene.objects) n += o.category == q.subject->category ? 1 : 0;
      ASSERT_EQ(d.current.answer[0], std::to_string(n));
      ++checked;
    }
  EXPECT_GT(checked, 0u);
}

TEST(Dialog, TemplateCoverage) {
  const Corpus c = generate_corpus(small_manifest(9, 300, 0, 0));
  std::set<QuestionKind> kinds;
  std::set<std::string> pronouns;
  for (const auto& d : c.train) {
    kinds.insert(d.current.kind);
    for (const auto& r : d.history) kinds.insert(r.kind);
    for (const auto& r : d.history)
      if (r.pronoun()) pronouns.insert(parse_question(r.question, c.manifest.attributes).pronoun);
  }
  EXPECT_EQ(kinds.size(), 6u);
  EXPECT_EQ(pronouns, (std::set<std::string>{"he", "it", "they"}));
}

TEST(Dialog, RejectsBadRounds) {
  Rng rng(1);
  const CorpusManifest m;
  const Scene s = generate_scene(rng, m, 6);
  EXPECT_THROW(generate_dialog(s, rng, 1, 10, m.attributes), std::invalid_argument);
  EXPECT_THROW(generate_dialog(s, rng, 11, 10, m.attributes), std::invalid_argument);
}

TEST(Corpus, DeterministicAndIndependentlyRegenerable) {
  const CorpusManifest m = small_manifest(21, 30, 5, 5);
  const Corpus a = generate_corpus(m), b = generate_corpus(m);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(generate_instance(m, 33), a.val[3]);
  const Corpus other = generate_corpus(small_manifest(22, 30, 5, 5));
  EXPECT_NE(a.train, other.train);
}

TEST(Corpus, JsonRoundTrip) {
  const CorpusManifest m = small_manifest(4, 20, 0, 0);
  const Corpus c = generate_corpus(m);
  for (const auto& d : c.train) {
    const auto j = to_json(d, m.attributes);
    ASSERT_EQ(dialog_from_json(j, m.attributes), d);
    ASSERT_TRUE(j.contains("scene") && j.contains("caption") && j.contains("history") && j.contains("question") &&
                j.contains("candidates") && j.contains("gt"));
  }
  const nlohmann::json mj = m;
  EXPECT_EQ(mj.get<CorpusManifest>().seed, 4u);
  EXPECT_EQ(mj.get<CorpusManifest>().train, 20u);
}
