"""Declaration-level dependency graph and bottom-up processing order."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .source_model import DeclKind, Declaration

# Which referenced declaration kinds produce an edge, per source kind.
_EDGE_TARGETS = {
    DeclKind.PROCEDURE: {DeclKind.PROCEDURE, DeclKind.TYPEDECL,
                         DeclKind.GLOBAL, DeclKind.MACRO},
    DeclKind.TYPEDECL: {DeclKind.TYPEDECL, DeclKind.MACRO},
    DeclKind.GLOBAL: {DeclKind.TYPEDECL, DeclKind.MACRO},
    DeclKind.MACRO: set(),
}


@dataclass
class DependencyGraph:
    nodes: list[str]
    edges: set[tuple[str, str]]
    broken_edges: set[tuple[str, str]] = field(default_factory=set)
    # (kind, name) per node, used for all deterministic tie-breaking
    sort_keys: dict[str, tuple[str, str]] = field(default_factory=dict)

    def successors(self, node: str) -> list[str]:
        succ = [b for (a, b) in self.edges if a == node]
        return sorted(succ, key=lambda n: self.sort_keys.get(n, ("", n)))

    def retained_edges(self) -> set[tuple[str, str]]:
        return self.edges - self.broken_edges


@dataclass
class BottomUpOrder:
    sequence: list[str]

    def index(self, node: str) -> int:
        return self.sequence.index(node)


def build_graph(decls: list[Declaration]) -> DependencyGraph:
    by_name: dict[str, Declaration] = {d.name: d for d in decls}
    nodes = [d.id for d in decls]
    sort_keys = {d.id: (d.kind.value, d.name) for d in decls}
    edges: set[tuple[str, str]] = set()
    for d in decls:
        targets = _EDGE_TARGETS[d.kind]
        if not targets:
            continue
        for ref in d.meta.referenced_names:
            t = by_name.get(ref)
            if t is None or t.kind not in targets:
                continue
            if t.id == d.id:
                continue  # direct recursion never needs itself in a prelude
            edges.add((d.id, t.id))
    return DependencyGraph(nodes=nodes, edges=edges, sort_keys=sort_keys)


def bottom_up_order(g: DependencyGraph) -> BottomUpOrder:
    """Reverse-topological order: every retained edge (a, b) puts b first.

    Cycles are broken deterministically: a DFS over nodes and successors in
    (kind, name) order removes every back edge it meets. Removing only back
    edges keeps the DFS tree intact, so re-adding any single broken edge
    closes a cycle again (the minimality the property suite checks).
    """
    key = lambda n: g.sort_keys.get(n, ("", n))
    order_nodes = sorted(g.nodes, key=key)
    adj: dict[str, list[str]] = {n: [] for n in g.nodes}
    for a, b in g.edges:
        adj[a].append(b)
    for n in adj:
        adj[n].sort(key=key)

    broken: set[tuple[str, str]] = set()
    color: dict[str, int] = {}  # 0/absent=unvisited, 1=on stack, 2=done
    for root in order_nodes:
        if color.get(root):
            continue
        stack = [(root, iter(adj[root]))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if (node, nxt) in broken:
                    continue
                c = color.get(nxt, 0)
                if c == 1:
                    broken.add((node, nxt))
                elif c == 0:
                    color[nxt] = 1
                    stack.append((nxt, iter(adj[nxt])))
                    advanced = True
                    break
            if not advanced:
                color[node] = 2
                stack.pop()

    g.broken_edges = broken
    retained = g.edges - broken

    # Kahn over retained edges, emitting nodes whose successors are all done;
    # ties resolved by (kind, name).
    out_remaining = {n: 0 for n in g.nodes}
    preds: dict[str, list[str]] = {n: [] for n in g.nodes}
    for a, b in retained:
        out_remaining[a] += 1
        preds[b].append(a)
    heap = [(key(n), n) for n in g.nodes if out_remaining[n] == 0]
    heapq.heapify(heap)
    seq: list[str] = []
    while heap:
        _, n = heapq.heappop(heap)
        seq.append(n)
        for p in preds[n]:
            out_remaining[p] -= 1
            if out_remaining[p] == 0:
                heapq.heappush(heap, (key(p), p))
    if len(seq) != len(g.nodes):
        raise AssertionError("cycle survived breaking; ordering incomplete")
    return BottomUpOrder(sequence=seq)


def prelude_of(d: Declaration, g: DependencyGraph,
               current: dict[str, str] | None = None,
               decls_by_id: dict[str, Declaration] | None = None) -> list[str]:
    """Context fragments for d: its direct successors.

    Procedures contribute only their (current) signature; types, globals and
    macros contribute full code. `current` supplies updated code mid-pass.
    """
    if decls_by_id is None:
        raise ValueError("decls_by_id required to render prelude")
    frags: list[str] = []
    for sid in g.successors(d.id):
        sd = decls_by_id.get(sid)
        if sd is None:
            continue
        code = (current or {}).get(sid, sd.code)
        if sd.kind == DeclKind.PROCEDURE:
            frags.append(signature_of(code))
        else:
            frags.append(code)
    return frags


def signature_of(proc_code: str) -> str:
    """Header text of a procedure's current code (text before the body)."""
    from .source_model import mask_comments_and_literals

    masked = mask_comments_and_literals(proc_code)
    brace = masked.find("{")
    if brace < 0:
        return proc_code.rstrip()
    sig = proc_code[:brace].rstrip()
    return sig if sig else proc_code.rstrip()


def graph_to_json(g: DependencyGraph, order: BottomUpOrder,
                  decls: list[Declaration]) -> dict:
    by_id = {d.id: d for d in decls}
    nodes = []
    for d in sorted(decls, key=lambda d: (d.unit_path, d.start)):
        nodes.append({
            "id": d.id, "kind": d.kind.value, "name": d.name,
            "file": d.unit_path, "start_line": d.start_line,
            "end_line": d.end_line,
        })
    key = lambda e: (by_id[e[0]].name, by_id[e[1]].name)
    return {
        "nodes": nodes,
        "edges": [{"from": a, "to": b} for a, b in sorted(g.retained_edges(), key=key)],
        "broken": [{"from": a, "to": b} for a, b in sorted(g.broken_edges, key=key)],
        "order": list(order.sequence),
    }
