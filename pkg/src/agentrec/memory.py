"""Hierarchical memory: items, retention, retrieval, and the regulated context window.

Pinned constants (changing any of these changes every persisted vector):

* embedding dimension d = 64
* token = maximal run of [0-9a-z] after lowercasing (also the budget token
  for ``tail_window`` / ``regulate_context`` is a maximal whitespace run)
* per-token hash = blake2b(token, digest_size=9, person=b"embed-v1");
  bucket = first 8 bytes (big-endian) mod 64, sign = +1 if the 9th byte is
  even else -1; the accumulated vector is L2-normalized
* empty token set embeds to the all-zero vector (sentinel)
* relevance = cosine clamped to [0, 1]; identical keys score exactly 1.0
* top-K tie-break: higher score first, then older timestamp, then
  lexicographically smaller canonical value text
* context window: exact 0/1-knapsack dynamic program up to 20 items, greedy
  score-density heuristic beyond (result flagged approximate)
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

from .errors import UnknownEntity

EMBED_DIM = 64
_HASH_PERSON = b"embed-v1"
_TOKEN_RE = re.compile(r"[^0-9a-z]+")

Vector = tuple  # tuple[float, ...] of length EMBED_DIM


def tokenize(text: str) -> list:
    """Lowercased alphanumeric tokens; the embedding's unit of content."""
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def _bucket_sign(token: str):
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=9, person=_HASH_PERSON
    ).digest()
    bucket = int.from_bytes(digest[:8], "big") % EMBED_DIM
    sign = 1.0 if digest[8] % 2 == 0 else -1.0
    return bucket, sign


def embed_text(text: str) -> Vector:
    """Signed feature hashing into EMBED_DIM buckets, L2-normalized.

    Deterministic: the same text always yields the identical vector. An
    empty token set yields the all-zero sentinel vector.
    """
    values = [0.0] * EMBED_DIM
    for token in tokenize(text):
        bucket, sign = _bucket_sign(token)
        values[bucket] += sign
    norm = math.sqrt(sum(v * v for v in values))
    if norm == 0.0:
        return tuple(values)
    return tuple(v / norm for v in values)


def cosine(a: Sequence, b: Sequence) -> float:
    """Cosine similarity with exact shortcuts.

    Returns 0.0 when either vector is all-zero and exactly 1.0 when the two
    vectors are identical and nonzero (no float drift on self-similarity).
    """
    if tuple(a) == tuple(b):
        if any(x != 0.0 for x in a):
            return 1.0
        return 0.0
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    dot = sum(x * y for x, y in zip(a, b))
    return max(-1.0, min(1.0, dot / (na * nb)))


class MemoryLabel(str, Enum):
    EPI = "EPI"
    SEM = "SEM"
    PROC = "PROC"


@dataclass(frozen=True)
class Triple:
    """Symbolic (subject, relation, object) fact over the store's entity set."""

    subject: str
    relation: str
    object: str

    def __post_init__(self):
        if not (self.subject and self.relation and self.object):
            raise ValueError("triple components must be non-empty")


@dataclass(frozen=True)
class ItemMeta:
    timestamp: int
    label: MemoryLabel
    update_count: int


@dataclass(frozen=True)
class MemoryItem:
    """One long-term memory unit: retrieval key, payload, metadata."""

    key: Vector
    value: Union[str, Triple]
    meta: ItemMeta

    def canonical_text(self) -> str:
        if isinstance(self.value, Triple):
            return f"{self.value.subject} {self.value.relation} {self.value.object}"
        return self.value

    def slot(self) -> str:
        """The fact slot; the text before the first ': ' of the value."""
        text = self.canonical_text()
        return text.split(": ", 1)[0]

    def token_length(self) -> int:
        return max(1, len(self.canonical_text().split()))


def make_item(slot: str, value: str, label: MemoryLabel, now: int,
              update_count: int = 1) -> MemoryItem:
    text = f"{slot}: {value}"
    return MemoryItem(
        key=embed_text(text),
        value=text,
        meta=ItemMeta(timestamp=now, label=label, update_count=update_count),
    )


@dataclass
class RawContext:
    """One step's raw material: turns, optional reasoning trace, pending tool calls."""

    turns: list  # list[tuple[str speaker, str text]]
    trace: Optional[str] = None
    pending_tool_calls: list = field(default_factory=list)

    def __post_init__(self):
        if not self.turns:
            raise ValueError("RawContext requires at least one turn")


@dataclass
class MemoryStore:
    """Append-only raw log + labelled fact items + symbolic triples.

    Single-writer, multiple-reader: every operation either leaves the store
    untouched or mutates it through the update functions below, which return
    the same store for chaining. Entities enter the entity set only through
    ``add_triple`` so a JSONL snapshot round-trips exactly.
    """

    raw_log: list = field(default_factory=list)  # list[tuple[speaker, text]]
    items: dict = field(default_factory=dict)    # (slot, label) -> MemoryItem
    triples: list = field(default_factory=list)  # insertion-ordered, de-duplicated
    entity_set: set = field(default_factory=set)

    def all_items(self) -> list:
        return list(self.items.values())

    def labelled_items(self, label: MemoryLabel) -> list:
        return [m for m in self.items.values() if m.meta.label == label]


def relevance_score(query: str, item: MemoryItem) -> float:
    """Non-negative query/item affinity: cosine clamped at zero."""
    return max(0.0, cosine(embed_text(query), item.key))


def _topk_sort_key(scored):
    score, item = scored
    return (-score, item.meta.timestamp, item.canonical_text())


def retrieve_topk(store: MemoryStore, query: str, k: int,
                  label_filter: Optional[MemoryLabel] = None) -> list:
    """The K highest-scoring items, exhaustively scored and deterministically ordered."""
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates = store.all_items() if label_filter is None else store.labelled_items(label_filter)
    scored = [(relevance_score(query, item), item) for item in candidates]
    scored.sort(key=_topk_sort_key)
    return [item for _, item in scored[:k]]


# retention -------------------------------------------------------------

@dataclass(frozen=True)
class RetentionRule:
    """One extraction pattern: regex with named groups 'slot'/'value', or a fixed slot."""

    pattern: str
    slot: Optional[str] = None  # fixed slot; None means use the 'slot' group

    def compiled(self):
        return re.compile(self.pattern, re.IGNORECASE)


DEFAULT_RETENTION_RULES = (
    # "two of my guests require a gluten-free diet" -> guest_allergy: gluten
    RetentionRule(r"requires?\s+an?\s+(?P<value>[a-z][\w-]*)-free\s+diet",
                  slot="guest_allergy"),
    # "theme = mickey mouse" / "budget: 200"
    RetentionRule(r"^\s*(?P<slot>[A-Za-z][\w ]{0,40}?)\s*[:=]\s*(?P<value>.+?)\s*$"),
    # "the sofa is blue" / "my guests are vegan"
    RetentionRule(r"^\s*(?:the\s+|a\s+|an\s+|my\s+)?"
                  r"(?P<slot>[A-Za-z][\w ]{0,40}?)\s+(?:is|are)\s+(?P<value>.+?)\s*$"),
)

_SEGMENT_RE = re.compile(r";\s*|[.,](?:\s+|$)")
_USER_TAG = "user"


def _normalize_slot(raw: str) -> str:
    return "_".join(raw.strip().lower().split())


def retain(ctx: RawContext, rules: tuple = DEFAULT_RETENTION_RULES) -> list:
    """Extract (slot, value) assertions from the user turns of a raw context.

    Turns are split into segments on ; . , and each segment yields at most
    one fact: the first rule in the table that matches wins. Output order
    follows turn order, then segment position.
    """
    compiled = [(rule, rule.compiled()) for rule in rules]
    facts = []
    for speaker, text in ctx.turns:
        if speaker.lower() != _USER_TAG:
            continue
        for segment in _SEGMENT_RE.split(text):
            if not segment.strip():
                continue
            for rule, regex in compiled:
                match = regex.search(segment)
                if match is None:
                    continue
                slot = rule.slot if rule.slot is not None else _normalize_slot(match.group("slot"))
                value = match.group("value").strip()
                if slot and value:
                    facts.append((slot, value))
                break
    return facts


def summarize_turns(ctx: RawContext, rules: tuple = DEFAULT_RETENTION_RULES) -> list:
    """Extractive compression: keep only the first retained fact of each turn."""
    facts = []
    for speaker, text in ctx.turns:
        per_turn = retain(RawContext(turns=[(speaker, text)]), rules)
        if per_turn:
            facts.append(per_turn[0])
    return facts


def update_memory(store: MemoryStore, ctx: RawContext, label: MemoryLabel,
                  now: int, rules: tuple = DEFAULT_RETENTION_RULES) -> MemoryStore:
    """Append raw turns and upsert retained facts at slot/label granularity.

    An existing (slot, label) item keeps its creation timestamp, gets the new
    value, and its update counter is incremented; otherwise a fresh item with
    update_count=1 is inserted. Nothing else changes.
    """
    store.raw_log.extend((speaker, text) for speaker, text in ctx.turns)
    for slot, value in retain(ctx, rules):
        existing = store.items.get((slot, label))
        if existing is None:
            store.items[(slot, label)] = make_item(slot, value, label, now)
        else:
            store.items[(slot, label)] = make_item(
                slot, value, label, existing.meta.timestamp,
                update_count=existing.meta.update_count + 1,
            )
    return store


def tail_window(store: MemoryStore, max_tokens: int) -> str:
    """Suffix of the concatenated raw log, at most ``max_tokens`` whitespace tokens."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    tokens = " ".join(text for _, text in store.raw_log).split()
    return " ".join(tokens[-max_tokens:])


def add_triple(store: MemoryStore, subject: str, relation: str, obj: str) -> MemoryStore:
    """Insert a symbolic triple; components register in the entity set."""
    triple = Triple(subject, relation, obj)
    if triple not in store.triples:
        store.triples.append(triple)
    store.entity_set.update((subject, relation, obj))
    return store


def query_triples(store: MemoryStore, pattern: tuple) -> list:
    """All triples matching a (subject|None, relation|None, object|None) pattern.

    None is the wildcard. Bound components must be known entities. Results
    keep insertion order and agree with a linear scan.
    """
    for component in pattern:
        if component is not None and component not in store.entity_set:
            raise UnknownEntity(f"unknown entity: {component!r}")
    subject, relation, obj = pattern
    return [
        t for t in store.triples
        if (subject is None or t.subject == subject)
        and (relation is None or t.relation == relation)
        and (obj is None or t.object == obj)
    ]


# regulated context window ---------------------------------------------

EXACT_KNAPSACK_LIMIT = 20


@dataclass
class ContextSelection:
    """Budget-constrained subset of memory, score-sorted."""

    items: list
    approximate: bool
    total_score: float
    total_tokens: int


def _selection(chosen: list, scored: dict, approximate: bool) -> ContextSelection:
    chosen = sorted(chosen, key=lambda m: _topk_sort_key((scored[id(m)], m)))
    return ContextSelection(
        items=chosen,
        approximate=approximate,
        total_score=sum(scored[id(m)] for m in chosen),
        total_tokens=sum(m.token_length() for m in chosen),
    )


def regulate_context(store: MemoryStore, query: str, budget: int) -> ContextSelection:
    """Maximize total relevance subject to a token budget.

    Exact dynamic program for stores of up to EXACT_KNAPSACK_LIMIT items;
    greedy score-density beyond that, with the result flagged approximate.
    """
    items = store.all_items()
    scores = [relevance_score(query, m) for m in items]
    lengths = [m.token_length() for m in items]
    scored = {id(m): s for m, s in zip(items, scores)}

    if budget <= 0 or not items:
        return _selection([], scored, approximate=False)
    if sum(lengths) <= budget:
        return _selection(list(items), scored, approximate=False)
    if len(items) > EXACT_KNAPSACK_LIMIT:
        chosen = _greedy_fill(items, scores, lengths, budget)
        return _selection(chosen, scored, approximate=True)
    chosen = _exact_knapsack(items, scores, lengths, budget)
    return _selection(chosen, scored, approximate=False)


def _exact_knapsack(items: list, scores: list, lengths: list, budget: int) -> list:
    n = len(items)
    dp = [[0.0] * (budget + 1) for _ in range(n + 1)]
    take = [[False] * (budget + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        length, score = lengths[i - 1], scores[i - 1]
        prev, cur, taken = dp[i - 1], dp[i], take[i]
        for w in range(budget + 1):
            best = prev[w]
            if length <= w:
                candidate = prev[w - length] + score
                if candidate > best:
                    best = candidate
                    taken[w] = True
            cur[w] = best
    chosen = []
    w = budget
    for i in range(n, 0, -1):
        if take[i][w]:
            chosen.append(items[i - 1])
            w -= lengths[i - 1]
    chosen.reverse()
    return chosen


def _greedy_fill(items: list, scores: list, lengths: list, budget: int) -> list:
    order = sorted(
        range(len(items)),
        key=lambda i: (-(scores[i] / lengths[i]), -scores[i],
                       items[i].meta.timestamp, items[i].canonical_text()),
    )
    chosen, used = [], 0
    for i in order:
        if used + lengths[i] <= budget:
            chosen.append(items[i])
            used += lengths[i]
    return chosen


# persistence ------------------------------------------------------------

def store_to_jsonl(store: MemoryStore) -> str:
    """One JSON object per line: turn records, then items, then triples."""
    lines = []
    for speaker, text in store.raw_log:
        lines.append(json.dumps(
            {"kind": "turn", "speaker": speaker, "text": text}, sort_keys=True))
    for item in store.items.values():
        record = {
            "kind": "item",
            "key": list(item.key),
            "value": (item.value if isinstance(item.value, str)
                      else [item.value.subject, item.value.relation, item.value.object]),
            "meta": {
                "timestamp": item.meta.timestamp,
                "label": item.meta.label.value,
                "update_count": item.meta.update_count,
            },
        }
        lines.append(json.dumps(record, sort_keys=True))
    for triple in store.triples:
        lines.append(json.dumps(
            {"kind": "triple", "subject": triple.subject,
             "relation": triple.relation, "object": triple.object},
            sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def store_from_jsonl(text: str) -> MemoryStore:
    store = MemoryStore()
    for line in text.splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        kind = record["kind"]
        if kind == "turn":
            store.raw_log.append((record["speaker"], record["text"]))
        elif kind == "item":
            meta = record["meta"]
            value = record["value"]
            if isinstance(value, list):
                value = Triple(*value)
            item = MemoryItem(
                key=tuple(record["key"]),
                value=value,
                meta=ItemMeta(timestamp=meta["timestamp"],
                              label=MemoryLabel(meta["label"]),
                              update_count=meta["update_count"]),
            )
            store.items[(item.slot(), item.meta.label)] = item
        elif kind == "triple":
            add_triple(store, record["subject"], record["relation"], record["object"])
        else:
            raise ValueError(f"unknown snapshot record kind: {kind!r}")
    return store


def save_store(store: MemoryStore, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(store_to_jsonl(store))


def load_store(path) -> MemoryStore:
    with open(path, "r", encoding="utf-8") as fh:
        return store_from_jsonl(fh.read())
