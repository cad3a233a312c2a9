"""Error propagation, consensus verification, and brand-compliance gating.

The closed-form invalid-output probability assumes independent residual
errors; the structural cascade simulator exists to expose where graph shape
(shared fan-in) breaks that assumption. Divergence between the two is
reported by callers, not reconciled here.

Compliance matching is whole-token and case-insensitive: the text is split
into lowercase alphanumeric tokens and a multi-word term matches only as a
contiguous token run. Substring matches never trigger.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .errors import (
    CyclicGraph,
    NoCompliantCandidate,
    OutOfRange,
)
from .memory import tokenize


@dataclass(frozen=True)
class ValidityOracle:
    """External ground truth: assertion key -> truth value."""

    ground_truth: dict

    def valid(self, assertion: str) -> bool:
        return bool(self.ground_truth[assertion])


@dataclass
class AgentGraph:
    """Directed acyclic dependency graph with per-node residual error rates."""

    nodes: list
    edges: list               # list[tuple[upstream, downstream]]
    error_rates: dict         # node -> p in [0, 1]

    def __post_init__(self):
        for node in self.nodes:
            p = self.error_rates.get(node, 0.0)
            if not (0.0 <= p <= 1.0):
                raise OutOfRange(f"error rate for {node!r} out of [0, 1]: {p}")
        for upstream, downstream in self.edges:
            if upstream not in self.nodes or downstream not in self.nodes:
                raise ValueError(f"edge references unknown node: {(upstream, downstream)}")

    def topological_order(self) -> list:
        incoming = {node: 0 for node in self.nodes}
        for _, downstream in self.edges:
            incoming[downstream] += 1
        ready = [node for node in self.nodes if incoming[node] == 0]
        order = []
        while ready:
            node = ready.pop(0)
            order.append(node)
            for upstream, downstream in self.edges:
                if upstream == node:
                    incoming[downstream] -= 1
                    if incoming[downstream] == 0:
                        ready.append(downstream)
        if len(order) != len(self.nodes):
            raise CyclicGraph("agent dependency graph contains a cycle")
        return order

    def sinks(self) -> list:
        with_out = {upstream for upstream, _ in self.edges}
        return [node for node in self.nodes if node not in with_out]

    def predecessors(self, node: str) -> list:
        return [upstream for upstream, downstream in self.edges if downstream == node]


def default_oracle(graph: AgentGraph) -> ValidityOracle:
    """Each node's clean emission is true, its corrupted emission false."""
    truth = {}
    for node in graph.nodes:
        truth[f"{node}:ok"] = True
        truth[f"{node}:corrupt"] = False
    return ValidityOracle(ground_truth=truth)


def propagation_probability(error_rates: Sequence) -> float:
    """Probability that at least one stage is invalid: 1 - prod(1 - p_i)."""
    product = 1.0
    for p in error_rates:
        if not (0.0 <= p <= 1.0):
            raise OutOfRange(f"probability out of [0, 1]: {p}")
        product *= 1.0 - p
    return 1.0 - product


def simulate_error_cascade(graph: AgentGraph, oracle: ValidityOracle,
                           trials: int, seed: int) -> float:
    """Empirical fraction of trials in which any sink emits an invalid message.

    Per trial every node fails intrinsically with its own rate; an invalid
    upstream emission deterministically corrupts every consumer.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    order = graph.topological_order()
    index = {node: i for i, node in enumerate(order)}
    sinks = {index[node] for node in graph.sinks()}
    predecessors = [[index[p] for p in graph.predecessors(node)] for node in order]
    rates = [graph.error_rates.get(node, 0.0) for node in order]
    # the oracle judges each node's two possible emissions; hoisted out of
    # the trial loop since the verdict per (node, emission) is fixed
    clean_invalid = [not oracle.valid(f"{node}:ok") for node in order]
    corrupt_invalid = [not oracle.valid(f"{node}:corrupt") for node in order]
    rng = random.Random(seed)
    rand = rng.random
    n = len(order)
    bad_trials = 0
    for _ in range(trials):
        invalid = [False] * n
        trial_bad = False
        for i in range(n):
            corrupted = rand() < rates[i] or any(invalid[j] for j in predecessors[i])
            invalid[i] = corrupt_invalid[i] if corrupted else clean_invalid[i]
            if invalid[i] and i in sinks:
                trial_bad = True
        if trial_bad:
            bad_trials += 1
    return bad_trials / trials


def consensus(replies: Sequence, rule: str = "majority") -> str:
    """Majority vote over redundant replies; ties take the lexicographic smallest."""
    if not replies:
        raise ValueError("consensus requires at least one reply")
    if rule != "majority":
        raise ValueError(f"unknown consensus rule: {rule!r}")
    counts = {}
    for reply in replies:
        counts[reply] = counts.get(reply, 0) + 1
    best = max(counts.values())
    return min(reply for reply, count in counts.items() if count == best)


# brand compliance --------------------------------------------------------

@dataclass(frozen=True)
class BrandPolicy:
    """Finite rule set: banned terms, trigger->disclosure pairs, tone allowlist."""

    banned_terms: frozenset = frozenset()
    required_disclosures: tuple = ()   # tuple[(trigger, disclosure), ...]
    tone_allowlist: Optional[frozenset] = None

    def __post_init__(self):
        disclosures = {disclosure for _, disclosure in self.required_disclosures}
        if self.banned_terms & disclosures:
            raise ValueError("banned terms and required disclosures must be disjoint")


EMPTY_POLICY = BrandPolicy()


def _contains_phrase(tokens: list, phrase: str) -> bool:
    needle = tokenize(phrase)
    if not needle:
        return False
    span = len(needle)
    return any(tokens[i:i + span] == needle
               for i in range(len(tokens) - span + 1))


def check_compliance(text: str, policy: BrandPolicy,
                     tone_tags: Iterable = ()) -> bool:
    """True iff the text satisfies every rule in the policy."""
    tokens = tokenize(text)
    for term in policy.banned_terms:
        if _contains_phrase(tokens, term):
            return False
    for trigger, disclosure in policy.required_disclosures:
        if _contains_phrase(tokens, trigger) and not _contains_phrase(tokens, disclosure):
            return False
    if policy.tone_allowlist is not None:
        for tag in tone_tags:
            if tag not in policy.tone_allowlist:
                return False
    return True


def constrained_select(candidates: Sequence, policy: BrandPolicy) -> str:
    """Highest-scoring compliant candidate text; ties take the smaller text."""
    if not candidates:
        raise ValueError("candidates must be non-empty")
    for text, score in candidates:
        if not math.isfinite(score):
            raise ValueError(f"candidate score must be finite: {score!r}")
    compliant = [(text, score) for text, score in candidates
                 if check_compliance(text, policy)]
    if not compliant:
        raise NoCompliantCandidate("every candidate fails the compliance predicate")
    compliant.sort(key=lambda pair: (-pair[1], pair[0]))
    return compliant[0][0]
