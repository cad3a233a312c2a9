"""Interactive party-planner blueprint: config-declared agents over the runtime.

Agents exchange plain text with two pinned wire conventions:

* section framing: ``query=<text> | facts=<slot: value; slot: value>``
  (the separator `` | `` never appears inside queries or fact values)
* item sets: one single-line JSON object per message,
  ``{"category": ..., "items": [[id, score], ...], "query": ..., "facts": ...}``

Tool handlers are built-ins parameterized by the environment; the scenario
config decides which agent carries which tool, the rule table, the
communication matrix, the routing, and the spawn declarations.
"""

from __future__ import annotations

import json

from .agents import AgentSpec, Tool, ToolRegistry, scripted_core
from .errors import ConfigInvalid
from .memory import (
    MemoryLabel,
    MemoryStore,
    RawContext,
    make_item,
    relevance_score,
    retain,
    retrieve_topk,
)
from .pipelines import constraints_from_facts, score_item, violations_for
from .runtime import Environment, MasRuntime, MessageSchema

SECTION_SEPARATOR = " | "
FACT_SEPARATOR = "; "


def render_sections(**sections) -> str:
    return SECTION_SEPARATOR.join(f"{key}={value}" for key, value in sections.items())


def parse_sections(text: str) -> dict:
    out = {}
    for part in text.split(SECTION_SEPARATOR):
        key, sep, value = part.partition("=")
        if sep:
            out[key.strip()] = value
    return out


def render_facts(facts) -> str:
    return FACT_SEPARATOR.join(f"{slot}: {value}" for slot, value in facts)


def parse_facts(text: str) -> list:
    facts = []
    for chunk in text.split(FACT_SEPARATOR):
        slot, sep, value = chunk.partition(": ")
        if sep and slot.strip():
            facts.append((slot.strip(), value.strip()))
    return facts


def _facts_in_play(sections: dict) -> list:
    """Explicit facts plus whatever the query text itself asserts."""
    facts = parse_facts(sections.get("facts", ""))
    query = sections.get("query", "")
    if query:
        facts += retain(RawContext(turns=[("user", query)]))
    return facts


# tool handlers ------------------------------------------------------------

def _memory_recall_tool(env, budgets, store, tool_cfg) -> Tool:
    top_k = int(tool_cfg.get("top_k", 4))

    def handler(args: str) -> str:
        items = retrieve_topk(store, args, top_k)
        hits = [item for item in items if relevance_score(args, item) > 0.0]
        return render_facts(
            (item.slot(), item.canonical_text().partition(": ")[2]) for item in hits)

    return Tool(name=tool_cfg["name"], handler=handler,
                cost_tokens=int(tool_cfg.get("cost_tokens", 0)))


def _nli_validate_tool(env, budgets, store, tool_cfg) -> Tool:
    def handler(args: str) -> str:
        sections = parse_sections(args)
        query = sections.get("query", args)
        current = dict(retain(RawContext(turns=[("user", query)])))
        validated = [
            (slot, value) for slot, value in parse_facts(sections.get("facts", ""))
            if slot not in current or current[slot].lower() == value.lower()
        ]
        return render_sections(query=query, facts=render_facts(validated))

    return Tool(name=tool_cfg["name"], handler=handler,
                cost_tokens=int(tool_cfg.get("cost_tokens", 0)))


def _category_search_tool(env, budgets, store, tool_cfg) -> Tool:
    category = tool_cfg["category"]
    limit = int(tool_cfg.get("limit", 3))

    def handler(args: str) -> str:
        sections = parse_sections(args)
        facts = _facts_in_play(sections)
        constraints = constraints_from_facts(facts)
        query = " ".join(
            part for part in (sections.get("query", ""), render_facts(facts)) if part)
        candidates = [item for item in env.catalog
                      if category in item.tags
                      and not violations_for(item, constraints)]
        scored = sorted(((score_item(query, item), item) for item in candidates),
                        key=lambda pair: (-pair[0], pair[1].id))
        return json.dumps({
            "category": category,
            "items": [[item.id, score] for score, item in scored[:limit]],
            "query": sections.get("query", ""),
            "facts": sections.get("facts", ""),
        }, sort_keys=True)

    return Tool(name=tool_cfg["name"], handler=handler,
                cost_tokens=int(tool_cfg.get("cost_tokens", 0)))


def _collection_check_tool(env, budgets, store, tool_cfg) -> Tool:
    def handler(args: str) -> str:
        merged, query, facts_text = [], "", ""
        for line in args.splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            query = record.get("query", query)
            facts_text = record.get("facts", facts_text)
            merged.extend(record.get("items", []))
        sections = {"query": query, "facts": facts_text}
        constraints = constraints_from_facts(_facts_in_play(sections))
        validated = [
            [item_id, score] for item_id, score in merged
            if not violations_for(env.item_by_id(item_id), constraints)
        ]
        return json.dumps({"items": validated, "query": query, "facts": facts_text},
                          sort_keys=True)

    return Tool(name=tool_cfg["name"], handler=handler,
                cost_tokens=int(tool_cfg.get("cost_tokens", 0)))


def _rank_items_tool(env, budgets, store, tool_cfg) -> Tool:
    top_l = int(tool_cfg.get("top_l", budgets.get("L", 5)))

    def handler(args: str) -> str:
        record = json.loads(args)
        ranked = sorted(record.get("items", []),
                        key=lambda entry: (-entry[1], entry[0]))
        return json.dumps({"ranked": ranked[:top_l]}, sort_keys=True)

    return Tool(name=tool_cfg["name"], handler=handler,
                cost_tokens=int(tool_cfg.get("cost_tokens", 0)))


TOOL_KINDS = {
    "memory_recall": _memory_recall_tool,
    "nli_validate": _nli_validate_tool,
    "category_search": _category_search_tool,
    "collection_check": _collection_check_tool,
    "rank_items": _rank_items_tool,
}


# construction from config ---------------------------------------------------

def _build_store(facts: dict) -> MemoryStore:
    store = MemoryStore()
    for index, (slot, value) in enumerate(facts.items()):
        item = make_item(slot, str(value), MemoryLabel.EPI, now=index)
        store.items[(slot, MemoryLabel.EPI)] = item
    return store


def build_agent(agent_cfg: dict, env: Environment, budgets: dict) -> AgentSpec:
    store = _build_store(agent_cfg.get("memory_facts", {}))
    tools = []
    for tool_cfg in agent_cfg.get("tools", ()):
        kind = tool_cfg.get("kind")
        factory = TOOL_KINDS.get(kind)
        if factory is None:
            raise ConfigInvalid(f"unknown tool kind: {kind!r}")
        tools.append(factory(env, budgets, store, tool_cfg))
    rules = [(pattern, template) for pattern, template in agent_cfg.get("rules", ())]
    if not rules:
        rules = [(".*", "$input")]
    return AgentSpec(
        id=agent_cfg["id"],
        core=scripted_core(*rules),
        input_schema=frozenset(agent_cfg.get("input_kinds", ())),
        output_schema=frozenset(agent_cfg.get("output_kinds", ())),
        tools=ToolRegistry(tools),
        memory=store,
        context_budget=int(budgets.get("B", 64)),
        stm_tokens=int(budgets.get("L_stm", 256)),
    )


def routing_kinds(config: dict) -> list:
    return [kind for _, _, kind in (tuple(edge) for edge in config.get("routing", ()))]


def derive_schemata(config: dict) -> list:
    kinds = set(routing_kinds(config)) | {"query"}
    for agent_cfg in list(config.get("agents", ())) + [
            child for decl in config.get("children", {}).values()
            for child in decl.get("agents", ())]:
        kinds.update(agent_cfg.get("input_kinds", ()))
        kinds.update(agent_cfg.get("output_kinds", ()))
    return [MessageSchema(kind=kind, payload_shape=("text",)) for kind in sorted(kinds)]


def build_interactive_runtime(config: dict, env: Environment):
    """Returns (runtime, routing edges) wired per the scenario config."""
    budgets = config.get("budgets", {})
    runtime = MasRuntime(env, derive_schemata(config))
    for agent_cfg in config.get("agents", ()):
        runtime.register_agent(build_agent(agent_cfg, env, budgets))
    matrix_cfg = config.get("matrix", {})
    for sender, recipient in matrix_cfg.get("allow", ()):
        runtime.toggle_channel(sender, recipient, True)
    for parent_id, decl in config.get("children", {}).items():
        children = [build_agent(child_cfg, env, budgets)
                    for child_cfg in decl.get("agents", ())]
        runtime.declare_spawn(parent_id, children, [tuple(pair) for pair in decl.get("open", ())])
    routing = [
        (edge[0], tuple(edge[1]) if isinstance(edge[1], list) else edge[1], edge[2])
        for edge in (tuple(e) for e in config.get("routing", ()))
    ]
    return runtime, routing


def ranked_entries_from_trace(trace) -> list:
    """The final ranked list carried by the last ranked_list message."""
    for message in reversed(trace):
        if message.kind == "ranked_list":
            record = json.loads(message.payload["text"])
            return [(item_id, score) for item_id, score in record.get("ranked", [])]
    return []
