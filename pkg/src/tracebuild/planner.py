"""Build planning: decide which extra commands must run before the next
phase.

Starting from the commands that observed changes, marks propagate over the
dependence graph:

  (2) a command whose output persists at build end but is not cached must
      run (make-target simulation: leftover files must be reproducible);
  (3) the producer of an uncached state consumed by a marked command must
      run (e.g. a pipe writer whose reader reruns);
  (4) the consumer of an uncached state produced by a marked command must
      run.

Commands joined in a cycle through uncacheable states form a cluster and
run atomically; otherwise the build could alternate marking them forever.
Clusters are the strongly connected components of the graph restricted to
uncacheable edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .depgraph import DepGraph

REASON_CHANGED = "changed-predicate"
REASON_PERSISTENT = "uncached-persistent-output"
REASON_PRODUCER = "uncached-producer"
REASON_CONSUMER = "uncached-consumer"
REASON_CLUSTER = "cluster-member"


@dataclass(slots=True)
class RunSet:
    commands: set[int] = field(default_factory=set)
    reasons: dict[int, str] = field(default_factory=dict)

    def add(self, cmd: int, reason: str) -> bool:
        if cmd in self.commands:
            return False
        self.commands.add(cmd)
        self.reasons.setdefault(cmd, reason)
        return True

    def __contains__(self, cmd: int) -> bool:
        return cmd in self.commands

    def __len__(self) -> int:
        return len(self.commands)

    def __iter__(self):
        return iter(self.commands)


def find_clusters(graph: DepGraph) -> list[set[int]]:
    """Strongly connected components of the uncacheable-edge subgraph,
    via Tarjan's algorithm (iterative)."""
    succ: dict[int, set[int]] = {}
    nodes = set(graph.commands)
    for producer, consumer, sid in graph.all_edges():
        if graph.states[sid].uncacheable:
            succ.setdefault(producer, set()).add(consumer)
            nodes.add(producer)
            nodes.add(consumer)

    index: dict[int, int] = {}
    lowlink: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    sccs: list[set[int]] = []
    counter = 0

    for start in sorted(nodes):
        if start in index:
            continue
        work = [(start, iter(sorted(succ.get(start, ()))))]
        index[start] = lowlink[start] = counter
        counter += 1
        stack.append(start)
        on_stack.add(start)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index:
                    index[nxt] = lowlink[nxt] = counter
                    counter += 1
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(sorted(succ.get(nxt, ())))))
                    advanced = True
                    break
                if nxt in on_stack:
                    lowlink[node] = min(lowlink[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[node])
            if lowlink[node] == index[node]:
                scc = set()
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    scc.add(member)
                    if member == node:
                        break
                sccs.append(scc)
    return sccs


def plan(graph: DepGraph, changed: set[int],
         reasons: dict[int, str] | None = None) -> RunSet:
    """Least fixpoint of rules (2)-(4) plus cluster closure over the initial
    set of changed commands. Monotone and idempotent."""
    rs = RunSet()
    for cmd in changed:
        rs.add(cmd, (reasons or {}).get(cmd, REASON_CHANGED))

    # rule (2): uncached outputs that persist at build end
    for sid, info in graph.states.items():
        if info.persists and not info.cached and info.producer is not None:
            rs.add(info.producer, REASON_PERSISTENT)

    clusters = [c for c in find_clusters(graph) if len(c) > 1]
    cluster_of: dict[int, set[int]] = {}
    for cluster in clusters:
        for member in cluster:
            cluster_of[member] = cluster

    changed_flag = True
    while changed_flag:
        changed_flag = False
        for producer, consumer, sid in graph.all_edges():
            if graph.states[sid].cached:
                continue
            # rule (3): marked consumer pulls in its producer
            if consumer in rs and producer not in rs:
                rs.add(producer, REASON_PRODUCER)
                changed_flag = True
            # rule (4): marked producer pushes to its consumer
            if producer in rs and consumer not in rs:
                rs.add(consumer, REASON_CONSUMER)
                changed_flag = True
        for member in list(rs.commands):
            cluster = cluster_of.get(member)
            if cluster is None:
                continue
            for other in cluster:
                if other not in rs:
                    rs.add(other, REASON_CLUSTER)
                    changed_flag = True
    return rs
