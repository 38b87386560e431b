"""Command dependence graph built during trace evaluation.

Nodes are command ids. An edge producer -> consumer exists when the consumer
checked state against a version the producer wrote. Each referenced state
carries a cached flag (its bytes are restorable right now) and an
uncacheable flag (it can never be restored: pipe or always-changed special
content). Both flags are fixed at recording time; a later cache store does
not retroactively clear them.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True, slots=True)
class StateId:
    """Identity of one artifact version within a single evaluation pass."""

    artifact: int
    index: int
    meta: bool = False


@dataclass(slots=True)
class StateInfo:
    producer: int | None
    cached: bool
    uncacheable: bool = False
    persists: bool = False


@dataclass(slots=True)
class DepGraph:
    states: dict[StateId, StateInfo] = field(default_factory=dict)
    # producer -> consumer -> set of state ids carried on the edge
    edges: dict[int, dict[int, set[StateId]]] = field(default_factory=dict)
    inputs: dict[int, set[StateId]] = field(default_factory=dict)
    outputs: dict[int, set[StateId]] = field(default_factory=dict)
    commands: set[int] = field(default_factory=set)
    # parent -> child launches; informational (exit-code dependence is
    # handled by backtracking, not by mark propagation)
    launches: list[tuple[int, int]] = field(default_factory=list)

    def note_command(self, cmd: int) -> None:
        self.commands.add(cmd)

    def launches_note(self, parent: int, child: int) -> None:
        self.commands.add(parent)
        self.commands.add(child)
        self.launches.append((parent, child))

    def record_output(self, cmd: int, sid: StateId, cached: bool,
                      uncacheable: bool = False) -> None:
        self.note_command(cmd)
        self.states[sid] = StateInfo(producer=cmd, cached=cached,
                                     uncacheable=uncacheable)
        self.outputs.setdefault(cmd, set()).add(sid)

    def record_dependency(self, producer: int | None, consumer: int,
                          sid: StateId, cached: bool,
                          uncacheable: bool = False) -> None:
        """Add a read edge. A command reading its own output adds no edge;
        duplicates are idempotent."""
        self.note_command(consumer)
        self.inputs.setdefault(consumer, set()).add(sid)
        if sid not in self.states:
            self.states[sid] = StateInfo(producer=producer, cached=cached,
                                         uncacheable=uncacheable)
        if producer is None or producer == consumer:
            return
        self.note_command(producer)
        self.edges.setdefault(producer, {}).setdefault(consumer, set()).add(sid)

    def mark_persistent(self, sid: StateId) -> None:
        info = self.states.get(sid)
        if info is not None:
            info.persists = True

    def consumers_of(self, producer: int) -> dict[int, set[StateId]]:
        return self.edges.get(producer, {})

    def all_edges(self):
        for producer, consumers in self.edges.items():
            for consumer, sids in consumers.items():
                for sid in sids:
                    yield producer, consumer, sid
