"""Memory core: embeddings, retrieval, retention, merge, triples, knapsack."""

import itertools
import math
import random

import pytest

from agentrec.errors import UnknownEntity
from agentrec.memory import (
    EMBED_DIM,
    MemoryItem,
    MemoryLabel,
    MemoryStore,
    RawContext,
    add_triple,
    cosine,
    embed_text,
    make_item,
    query_triples,
    regulate_context,
    relevance_score,
    retain,
    retrieve_topk,
    store_from_jsonl,
    store_to_jsonl,
    summarize_turns,
    tail_window,
    update_memory,
)

# golden values computed once with a standalone dict-based reference script
GOLDEN_COS_GLUTEN_VS_CHOCOLATE = 0.0
GOLDEN_COS_GLUTEN_VS_GLUTENFREE = 0.4082482904638631
GOLDEN_COS_CHOC_VS_FLOURLESS = 0.8164965809277261
GOLDEN_SCORE_ALLERGY = 0.5163977794943224
GOLDEN_SCORE_CHILDPREF = 0.2581988897471612


def fact_store(*facts, label=MemoryLabel.EPI):
    store = MemoryStore()
    for now, (slot, value) in enumerate(facts):
        store.items[(slot, label)] = make_item(slot, value, label, now)
    return store


# embedding ------------------------------------------------------------

def test_embed_empty_text_is_zero_vector():
    vec = embed_text("")
    assert len(vec) == EMBED_DIM
    assert all(v == 0.0 for v in vec)
    assert embed_text("   !!! ") == vec


def test_embed_identity_cosine_is_exactly_one():
    a = embed_text("gluten allergy")
    b = embed_text("gluten allergy")
    assert a == b
    assert cosine(a, b) == 1.0


def test_embed_unit_norm():
    for text in ("gluten allergy", "chocolate", "a b c d e f g", "MiXeD CaSe!"):
        vec = embed_text(text)
        norm = math.sqrt(sum(v * v for v in vec))
        assert abs(norm - 1.0) < 1e-9


def test_embed_golden_cosines():
    assert cosine(embed_text("gluten allergy"),
                  embed_text("chocolate cake")) == GOLDEN_COS_GLUTEN_VS_CHOCOLATE
    assert cosine(embed_text("gluten allergy"),
                  embed_text("gluten free cake")) == pytest.approx(
        GOLDEN_COS_GLUTEN_VS_GLUTENFREE, abs=1e-15)
    assert cosine(embed_text("chocolate cake"),
                  embed_text("flourless chocolate cake")) == pytest.approx(
        GOLDEN_COS_CHOC_VS_FLOURLESS, abs=1e-15)


def test_embed_case_and_punctuation_insensitive():
    assert embed_text("Gluten-Free!") == embed_text("gluten free")


# relevance ------------------------------------------------------------

def test_relevance_identical_text_scores_one():
    item = make_item("guest_allergy", "gluten", MemoryLabel.EPI, now=0)
    assert relevance_score("guest_allergy: gluten", item) == 1.0


def test_relevance_empty_query_is_zero():
    item = make_item("guest_allergy", "gluten", MemoryLabel.EPI, now=0)
    assert relevance_score("", item) == 0.0


def test_relevance_negative_cosine_clamped_to_zero():
    # "cherry" and "mango" hash to the same bucket with opposite signs,
    # so their raw cosine is -1.0 (pinned by the reference script)
    item = MemoryItem(key=embed_text("cherry"), value="cherry",
                      meta=make_item("x", "y", MemoryLabel.SEM, 0).meta)
    assert cosine(embed_text("mango"), embed_text("cherry")) == -1.0
    assert relevance_score("mango", item) == 0.0


# top-k retrieval --------------------------------------------------------

def test_retrieve_party_example_order():
    store = fact_store(("guest_allergy", "gluten"),
                       ("child_pref", "chocolate"),
                       ("sofa_color", "blue"))
    query = "find gluten-free chocolate cake"
    top2 = retrieve_topk(store, query, 2)
    assert [item.canonical_text() for item in top2] == [
        "guest_allergy: gluten", "child_pref: chocolate"]
    assert relevance_score(query, top2[0]) == pytest.approx(GOLDEN_SCORE_ALLERGY)
    assert relevance_score(query, top2[1]) == pytest.approx(GOLDEN_SCORE_CHILDPREF)


def test_retrieve_from_empty_store():
    assert retrieve_topk(MemoryStore(), "anything", 5) == []


def exhaustive_topk(store, query, k, label=None):
    # independent oracle: score everything, sort with the pinned tie-break
    pool = [m for m in store.items.values()
            if label is None or m.meta.label == label]
    scored = [(relevance_score(query, m), m) for m in pool]
    scored.sort(key=lambda pair: (-pair[0], pair[1].meta.timestamp,
                                  pair[1].canonical_text()))
    return [m for _, m in scored[:k]]


def test_retrieve_matches_bruteforce_on_random_store():
    rng = random.Random(42)
    words = ("alpha beta gamma delta epsilon zeta eta theta iota kappa "
             "lamp sofa cake party gluten chocolate banner rug vase").split()
    store = MemoryStore()
    for i in range(50):
        slot = f"slot_{i}"
        value = " ".join(rng.choices(words, k=rng.randint(1, 4)))
        label = rng.choice(list(MemoryLabel))
        store.items[(slot, label)] = make_item(slot, value, label, now=i)
    query = "gluten chocolate party lamp"
    got = retrieve_topk(store, query, 7)
    assert got == exhaustive_topk(store, query, 7)


def test_retrieve_tiebreak_older_then_lexicographic():
    # all items score 0 against the query: order must be timestamp, then text
    store = fact_store(("b_slot", "zzz"), ("a_slot", "zzz"))
    got = retrieve_topk(store, "", 2)
    assert [item.canonical_text() for item in got] == ["b_slot: zzz", "a_slot: zzz"]

    same_time = MemoryStore()
    same_time.items[("b", MemoryLabel.EPI)] = make_item("b", "v", MemoryLabel.EPI, 5)
    same_time.items[("a", MemoryLabel.EPI)] = make_item("a", "v", MemoryLabel.EPI, 5)
    got = retrieve_topk(same_time, "", 2)
    assert [item.canonical_text() for item in got] == ["a: v", "b: v"]


def test_retrieve_label_filter():
    store = MemoryStore()
    store.items[("a", MemoryLabel.EPI)] = make_item("a", "gluten", MemoryLabel.EPI, 0)
    store.items[("b", MemoryLabel.SEM)] = make_item("b", "gluten", MemoryLabel.SEM, 1)
    only_sem = retrieve_topk(store, "gluten", 5, label_filter=MemoryLabel.SEM)
    assert [item.meta.label for item in only_sem] == [MemoryLabel.SEM]


def test_retrieve_rejects_bad_k():
    with pytest.raises(ValueError):
        retrieve_topk(MemoryStore(), "q", 0)


# retention --------------------------------------------------------------

def ctx(*turns):
    return RawContext(turns=list(turns))


def test_retain_gluten_diet_sentence():
    facts = retain(ctx(("user", "remember that two of my guests require a gluten-free diet")))
    assert facts == [("guest_allergy", "gluten")]


def test_retain_ignores_agent_turns():
    facts = retain(ctx(("agent", "theme = mickey mouse"),
                       ("agent", "the sofa is blue")))
    assert facts == []


def test_retain_smalltalk_yields_nothing():
    facts = retain(ctx(("user", "thanks so much"), ("user", "sounds great")))
    assert facts == []


def test_retain_pair_assignments_pinned_walkthrough():
    # hand-traced against the pattern table before implementation
    facts = retain(ctx(("user", "theme = mickey mouse; budget = 200")))
    assert facts == [("theme", "mickey mouse"), ("budget", "200")]


def test_retain_is_are_pattern():
    facts = retain(ctx(("user", "the sofa is blue")))
    assert facts == [("sofa", "blue")]


def test_retain_order_follows_turns():
    facts = retain(ctx(("user", "budget = 50"),
                       ("agent", "noted"),
                       ("user", "theme: space")))
    assert facts == [("budget", "50"), ("theme", "space")]


def test_summarize_keeps_first_fact_per_turn():
    facts = summarize_turns(ctx(("user", "theme = mickey mouse; budget = 200"),
                                ("user", "color: red")))
    assert facts == [("theme", "mickey mouse"), ("color", "red")]


# memory update -----------------------------------------------------------

GLUTEN_TURN = ("user", "remember that two of my guests require a gluten-free diet")


def test_update_inserts_single_epi_item():
    store = update_memory(MemoryStore(), ctx(GLUTEN_TURN), MemoryLabel.EPI, now=1)
    assert len(store.items) == 1
    item = store.items[("guest_allergy", MemoryLabel.EPI)]
    assert item.canonical_text() == "guest_allergy: gluten"
    assert item.meta.update_count == 1
    assert item.meta.timestamp == 1
    assert len(store.raw_log) == 1


def test_update_same_fact_twice_merges_not_duplicates():
    store = MemoryStore()
    update_memory(store, ctx(GLUTEN_TURN), MemoryLabel.EPI, now=1)
    update_memory(store, ctx(GLUTEN_TURN), MemoryLabel.EPI, now=2)
    assert len(store.items) == 1
    item = store.items[("guest_allergy", MemoryLabel.EPI)]
    assert item.meta.update_count == 2
    assert item.meta.timestamp == 1  # creation tick survives the merge


def test_update_overwrites_value_and_recomputes_key():
    store = MemoryStore()
    update_memory(store, ctx(("user", "theme = pirates")), MemoryLabel.SEM, now=1)
    update_memory(store, ctx(("user", "theme = mickey mouse")), MemoryLabel.SEM, now=2)
    item = store.items[("theme", MemoryLabel.SEM)]
    assert item.canonical_text() == "theme: mickey mouse"
    assert item.key == embed_text("theme: mickey mouse")
    assert item.meta.update_count == 2


def test_update_two_facts_grows_log_by_turn_count():
    store = MemoryStore()
    context = ctx(("user", "theme = mickey mouse"), ("user", "budget = 200"))
    update_memory(store, context, MemoryLabel.EPI, now=3)
    assert len(store.items) == 2
    assert len(store.raw_log) == 2


def test_same_slot_different_labels_coexist():
    store = MemoryStore()
    update_memory(store, ctx(("user", "theme = space")), MemoryLabel.EPI, now=1)
    update_memory(store, ctx(("user", "theme = space")), MemoryLabel.SEM, now=2)
    assert len(store.items) == 2


def test_self_retrieval_invariant():
    store = update_memory(MemoryStore(), ctx(GLUTEN_TURN), MemoryLabel.EPI, now=1)
    item = retrieve_topk(store, "guest_allergy: gluten", 1)[0]
    assert relevance_score("guest_allergy: gluten", item) == 1.0


def test_raw_log_is_monotone_across_operations():
    store = MemoryStore()
    lengths = [len(store.raw_log)]
    for turn in (GLUTEN_TURN, ("user", "budget = 10"), ("agent", "ok")):
        update_memory(store, ctx(turn), MemoryLabel.EPI, now=len(lengths))
        retrieve_topk(store, "anything", 3)
        regulate_context(store, "anything", 8)
        lengths.append(len(store.raw_log))
    assert lengths == sorted(lengths)


def test_replay_determinism_bit_identical_stores():
    def build():
        store = MemoryStore()
        update_memory(store, ctx(GLUTEN_TURN), MemoryLabel.EPI, now=1)
        update_memory(store, ctx(("user", "theme = mickey mouse; budget = 200")),
                      MemoryLabel.SEM, now=2)
        add_triple(store, "user", "likes", "chocolate")
        return store
    assert store_to_jsonl(build()) == store_to_jsonl(build())


# tail window ---------------------------------------------------------------

def test_tail_shorter_log_returned_whole():
    store = MemoryStore(raw_log=[("user", "one two three")])
    assert tail_window(store, 10) == "one two three"


def test_tail_exact_suffix():
    words = [f"w{i}" for i in range(100)]
    store = MemoryStore(raw_log=[("user", " ".join(words))])
    assert tail_window(store, 10) == " ".join(words[-10:])


def test_tail_straddles_turn_boundary():
    store = MemoryStore(raw_log=[("user", "a b c"), ("agent", "d e"), ("user", "f g h")])
    # independent token-by-token oracle
    all_tokens = []
    for _, text in store.raw_log:
        all_tokens.extend(text.split())
    for limit in range(1, len(all_tokens) + 2):
        assert tail_window(store, limit) == " ".join(all_tokens[-limit:])


def test_tail_rejects_bad_limit():
    with pytest.raises(ValueError):
        tail_window(MemoryStore(), 0)


# triples --------------------------------------------------------------------

def test_query_triples_paper_example():
    store = MemoryStore()
    add_triple(store, "user", "likes", "chocolate")
    got = query_triples(store, ("user", "likes", None))
    assert [(t.subject, t.relation, t.object) for t in got] == [
        ("user", "likes", "chocolate")]


def test_query_triples_empty_store():
    store = MemoryStore()
    add_triple(store, "user", "likes", "chocolate")
    store.triples.clear()
    assert query_triples(store, ("user", None, None)) == []


def test_query_triples_unknown_entity():
    store = MemoryStore()
    add_triple(store, "user", "likes", "chocolate")
    with pytest.raises(UnknownEntity):
        query_triples(store, ("stranger", None, None))


def test_query_triples_matches_linear_scan():
    rng = random.Random(7)
    subjects = ["user", "child", "guest"]
    relations = ["likes", "owns", "avoids"]
    objects = ["chocolate", "vanilla", "berry", "sofa"]
    store = MemoryStore()
    for _ in range(20):
        add_triple(store, rng.choice(subjects), rng.choice(relations),
                   rng.choice(objects))
    for pattern in itertools.product([None, "user"], [None, "likes"],
                                     [None, "chocolate"]):
        want = [t for t in store.triples
                if (pattern[0] is None or t.subject == pattern[0])
                and (pattern[1] is None or t.relation == pattern[1])
                and (pattern[2] is None or t.object == pattern[2])]
        assert query_triples(store, pattern) == want


def test_query_triples_scan_equivalence_at_scale():
    rng = random.Random(71)
    combos = [(f"s{i}", rel, f"o{j}")
              for i in range(20) for rel in ("likes", "owns", "near")
              for j in range(20)]
    rng.shuffle(combos)
    store = MemoryStore()
    for subject, relation, obj in combos[:1000]:
        add_triple(store, subject, relation, obj)
    assert len(store.triples) == 1000
    patterns = [(None, None, None), ("s0", None, None), (None, "likes", None),
                (None, None, "o3"), ("s1", "owns", None), ("s2", "near", "o5")]
    for pattern in patterns:
        want = [t for t in store.triples
                if all(p is None or getattr(t, f) == p
                       for p, f in zip(pattern, ("subject", "relation", "object")))]
        assert query_triples(store, pattern) == want


def test_add_triple_deduplicates():
    store = MemoryStore()
    add_triple(store, "user", "likes", "chocolate")
    add_triple(store, "user", "likes", "chocolate")
    assert len(store.triples) == 1


# regulated context window -----------------------------------------------------

def knapsack_bruteforce(scores, lengths, budget):
    """Independent 2^n oracle; sums follow item-index order."""
    best = 0.0
    n = len(scores)
    for mask in range(1 << n):
        total_len = 0
        total_score = 0.0
        for i in range(n):
            if mask >> i & 1:
                total_len += lengths[i]
                total_score += scores[i]
        if total_len <= budget and total_score > best:
            best = total_score
    return best


def test_regulate_zero_budget_selects_nothing():
    store = fact_store(("a", "one two"), ("b", "three"))
    selection = regulate_context(store, "one", 0)
    assert selection.items == []
    assert selection.approximate is False


def test_regulate_everything_fits():
    store = fact_store(("a", "one two"), ("b", "three"), ("c", "zzz"))
    selection = regulate_context(store, "one three", 100)
    assert len(selection.items) == 3
    assert selection.approximate is False


def test_regulate_pinned_three_item_instance():
    # scores {.9, .8, .5}, lengths {6, 5, 4}, budget 10 -> {.9, .5} total 1.4
    # brute force over all 8 subsets done by hand before implementation;
    # lengths count the full "slot: value" text
    store = MemoryStore()
    specs = [("s1", "a b c d e", 0.9), ("s2", "g h i j", 0.8),
             ("s3", "l m n", 0.5)]
    for now, (slot, value, _) in enumerate(specs):
        store.items[(slot, MemoryLabel.EPI)] = make_item(slot, value, MemoryLabel.EPI, now)

    import agentrec.memory as memory_module
    fixed = {f"{slot}: {value}": score for slot, value, score in specs}
    original = memory_module.relevance_score
    memory_module.relevance_score = lambda q, item: fixed[item.canonical_text()]
    try:
        selection = memory_module.regulate_context(store, "q", 10)
    finally:
        memory_module.relevance_score = original
    texts = {item.canonical_text() for item in selection.items}
    assert texts == {"s1: a b c d e", "s3: l m n"}
    assert selection.total_score == pytest.approx(1.4)
    assert selection.total_tokens == 10


def test_regulate_matches_bruteforce_small_instances():
    rng = random.Random(13)
    words = "party cake gluten chocolate lamp rug sofa mickey banner".split()
    for _ in range(40):
        store = MemoryStore()
        n = rng.randint(1, 10)
        for i in range(n):
            value = " ".join(rng.choices(words, k=rng.randint(1, 5)))
            store.items[(f"s{i}", MemoryLabel.EPI)] = make_item(
                f"s{i}", value, MemoryLabel.EPI, now=i)
        budget = rng.randint(0, 12)
        query = " ".join(rng.choices(words, k=3))
        selection = regulate_context(store, query, budget)
        items = list(store.items.values())
        scores = [relevance_score(query, m) for m in items]
        lengths = [m.token_length() for m in items]
        assert selection.total_tokens <= budget or not selection.items
        chosen = set(map(id, selection.items))
        resummed = sum(s for m, s in zip(items, scores) if id(m) in chosen)
        assert resummed == knapsack_bruteforce(scores, lengths, budget)
        assert selection.approximate is False


def test_regulate_large_store_uses_flagged_greedy():
    store = MemoryStore()
    for i in range(25):
        store.items[(f"s{i}", MemoryLabel.EPI)] = make_item(
            f"s{i}", f"word{i} extra", MemoryLabel.EPI, now=i)
    selection = regulate_context(store, "word1 word2", 10)
    assert selection.approximate is True
    assert selection.total_tokens <= 10


def test_regulate_output_sorted_by_score_descending():
    store = fact_store(("a", "gluten"), ("b", "unrelated"), ("c", "gluten cake"))
    selection = regulate_context(store, "gluten", 100)
    scores = [relevance_score("gluten", item) for item in selection.items]
    assert scores == sorted(scores, reverse=True)


# persistence -------------------------------------------------------------------

def test_snapshot_round_trip():
    store = MemoryStore()
    update_memory(store, ctx(GLUTEN_TURN, ("agent", "noted")), MemoryLabel.EPI, now=1)
    update_memory(store, ctx(("user", "theme = mickey mouse")), MemoryLabel.SEM, now=2)
    add_triple(store, "user", "likes", "chocolate")
    add_triple(store, "child", "likes", "vanilla")

    text = store_to_jsonl(store)
    loaded = store_from_jsonl(text)
    assert loaded.raw_log == store.raw_log
    assert loaded.items == store.items
    assert loaded.triples == store.triples
    assert loaded.entity_set == store.entity_set
    assert store_to_jsonl(loaded) == text
