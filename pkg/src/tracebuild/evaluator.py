"""Trace evaluation: one pass over a build transcript.

Statements are evaluated in trace order against the model. Statements owned
by commands marked to run are skipped; those commands are re-executed when
their Launch is reached, and their freshly traced statements replace the old
ones in the output transcript. Everything else is emulated: checks compare
recorded expectations with modeled state and flag changes, updates install
uncommitted versions.

A command reruns only when it observes both a pre-build change and a
post-build change; commands that were never post-checked (new in this
trace) rerun on a pre-build change alone. The final pass of a build runs
with post=True: it is read-only against the finished model and emits, for
every check, the echoed statement plus a post-build twin capturing the
state present at the very end of the build.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import ir
from .buildscript import Channel, Handle, Scheduler, Task, Translator
from .cache import EMPTY_KEY
from .depgraph import DepGraph, StateId
from .errors import ModelIntegrityError
from .fsmodel import Artifact, Env
from .templates import (InvocationTemplate, TemplateIndex, canon_path,
                        is_temp_path, temp_rewrite_map)


@dataclass(slots=True)
class CommandInfo:
    command: ir.Command | None = None
    parent: int | None = None
    children: list[int] = field(default_factory=list)
    positions: list[int] = field(default_factory=list)
    has_exit: bool = False
    exit_code: int | None = None
    has_post: bool = False


class TraceStore:
    """Indexed view of a transcript: records in order plus per-command
    structure (launch tree, owned record positions)."""

    def __init__(self, records: list[ir.Record]):
        self.records = records
        self.commands: dict[int, CommandInfo] = {0: CommandInfo()}
        for idx, rec in enumerate(records):
            stmt = rec.stmt
            info = self.commands.setdefault(stmt.owner, CommandInfo())
            info.positions.append(idx)
            if rec.post:
                info.has_post = True
            if isinstance(stmt, ir.Launch):
                child = self.commands.setdefault(stmt.child, CommandInfo())
                child.command = stmt.command
                child.parent = stmt.owner
                info.children.append(stmt.child)
            elif isinstance(stmt, ir.Exit) and not rec.post:
                info.has_exit = True
                info.exit_code = stmt.code

    def __len__(self) -> int:
        return len(self.records)

    def subtree(self, cmd: int) -> set[int]:
        out = {cmd}
        stack = [cmd]
        while stack:
            for child in self.commands.get(stack.pop(), CommandInfo()).children:
                if child not in out:
                    out.add(child)
                    stack.append(child)
        return out

    def subtree_records(self, cmd: int) -> list[ir.Record]:
        ids = self.subtree(cmd)
        positions: list[int] = []
        for c in ids:
            positions.extend(self.commands[c].positions)
        return [self.records[i] for i in sorted(positions)]

    def complete(self, cmd: int) -> bool:
        """A command whose trace never recorded an Exit cannot be emulated."""
        info = self.commands.get(cmd)
        return info is not None and info.has_exit

    def build_templates(self, temp_roots: tuple[str, ...],
                        ignored_env: frozenset[str] = frozenset()) -> TemplateIndex:
        index = TemplateIndex(temp_roots, ignored_env)
        for cmd_id, info in self.commands.items():
            if info.command is None:
                continue
            index.add(cmd_id, info.command,
                      self._temp_content(cmd_id, info, temp_roots))
        return index

    def _temp_content(self, cmd_id: int, info: CommandInfo,
                      temp_roots: tuple[str, ...]) -> tuple[tuple[int, str], ...]:
        command = info.command
        temp_argv = {}
        idx = 0
        seen: dict[str, int] = {}
        for token in command.argv:
            if "/" in token and is_temp_path(token, temp_roots, command.cwd):
                canon = canon_path(token, command.cwd)
                if canon not in seen:
                    seen[canon] = idx
                    idx += 1
                temp_argv[canon] = seen[canon]
        if not temp_argv:
            return ()
        ref_paths: dict[int, str] = {}
        found: dict[int, str] = {}
        for pos in info.positions:
            rec = self.records[pos]
            if rec.post:
                continue
            stmt = rec.stmt
            if isinstance(stmt, ir.PathRef):
                ref_paths[stmt.ref] = canon_path(stmt.path, command.cwd)
            elif isinstance(stmt, ir.MatchContent) and isinstance(
                    stmt.state, ir.FileState):
                path = ref_paths.get(stmt.ref)
                if path in temp_argv and temp_argv[path] not in found:
                    found[temp_argv[path]] = stmt.state.hash
        return tuple(sorted(found.items()))


@dataclass(slots=True)
class Binding:
    artifact: int | None
    code: int
    closed: bool = False


class _Ctx:
    """Mutable evaluation sink; speculative skip attempts run against a
    nested one that is merged on success or discarded on failure."""

    __slots__ = ("records", "dep", "bindings", "commands", "parents",
                 "exit_codes", "pre_changed", "post_changed", "new_to_old",
                 "skipped")

    def __init__(self):
        self.records: list[ir.Record] = []
        self.dep = DepGraph()
        self.bindings: dict[tuple[int, int], Binding] = {}
        self.commands: dict[int, ir.Command] = {}
        self.parents: dict[int, int] = {}
        self.exit_codes: dict[int, int] = {}
        self.pre_changed: set[int] = set()
        self.post_changed: set[int] = set()
        self.new_to_old: dict[int, int] = {}
        self.skipped: list[int] = []

    def merge(self, other: "_Ctx") -> None:
        self.records.extend(other.records)
        self.bindings.update(other.bindings)
        self.commands.update(other.commands)
        self.parents.update(other.parents)
        self.exit_codes.update(other.exit_codes)
        self.pre_changed.update(other.pre_changed)
        self.post_changed.update(other.post_changed)
        self.new_to_old.update(other.new_to_old)
        self.skipped.extend(other.skipped)
        d, o = self.dep, other.dep
        d.states.update(o.states)
        for p, cons in o.edges.items():
            for c, sids in cons.items():
                d.edges.setdefault(p, {}).setdefault(c, set()).update(sids)
        for c, s in o.inputs.items():
            d.inputs.setdefault(c, set()).update(s)
        for c, s in o.outputs.items():
            d.outputs.setdefault(c, set()).update(s)
        d.commands.update(o.commands)
        d.launches.extend(o.launches)


@dataclass(slots=True)
class EvalResult:
    records: list[ir.Record]
    dep: DepGraph
    rerun: set[int]
    env: Env
    exit_codes: dict[int, int]
    root_exit: int | None
    traced: list[tuple[int, ir.Command]]
    skipped: list[tuple[int, ir.Command]]
    backtracked: int
    anomalies: int


class Evaluation:
    """One pass of trace evaluation (EvalTrace)."""

    def __init__(self, env: Env, store: TraceStore, run_set: set[int],
                 engine, post: bool = False):
        self.env = env
        self.store = store
        self.run_set = set(run_set)
        self.engine = engine  # cache, temp_roots, stats hooks, options
        self.post = post
        self.templates = store.build_templates(engine.temp_roots,
                                               engine.ignored_env)
        self.scheduler = Scheduler()
        self.ctx = _Ctx()
        self._ctx_stack: list[_Ctx] = []
        self.idmap: dict[int, int] = {0: 0}
        self.next_cmd = 1
        self.suppressed: set[int] = set()
        self.traced_handles: dict[int, Handle] = {}
        self.joined: set[int] = set()
        self.traced: list[tuple[int, ir.Command]] = []
        self.backtracked = 0
        self.anomalies = 0
        self.pipe_end_refs: dict[tuple[int, int], tuple[int, int]] = {}
        self._speculating = 0

    # ---- host protocol for the tracer -------------------------------------

    @property
    def sandbox(self):
        return self.env.sandbox

    def content_is_cached(self, key: str) -> bool:
        return self.engine.cache.has(key)

    def materialize(self, canon: str) -> None:
        count = self.engine.materialize(self.env, canon)
        self.engine.stats.versions_committed += count

    def written(self, canon: str, data: bytes) -> None:
        pass  # cache storage happens at event translation time

    def pipe_epoch(self, channel: Channel) -> int:
        return self.env.artifacts[channel.artifact_id].epoch

    def pipe_refs(self, task: Task, channel: Channel):
        return self.pipe_end_refs.get((task.cmd_id, channel.artifact_id))

    def handle_statement(self, task: Task, stmt: ir.Statement):
        self._eval(ir.Record(stmt, ir.PRE_BUILD), fresh=True)

    def handle_event(self, task: Task, ev):
        if ev.op == "write":
            self.engine.cache.store_bytes(ev.data)
        if ev.op == "pipe":
            stmts = task.translator.translate(ev)
            pipe_stmt = stmts[0]
            for st in stmts:
                self._eval(ir.Record(st, ir.PRE_BUILD), fresh=True)
            artifact = self._artifact_of(task.cmd_id, pipe_stmt.read_ref)
            channel = Channel(artifact.id, creator=task)
            artifact.buffer = channel
            self.pipe_end_refs[(task.cmd_id, artifact.id)] = (
                pipe_stmt.read_ref, pipe_stmt.write_ref)
            return channel
        for st in task.translator.translate(ev):
            self._eval(ir.Record(st, ir.PRE_BUILD), fresh=True)
        return None

    def make_task(self, command: ir.Command, wired: dict[int, object],
                  cmd_id: int | None = None) -> Task:
        if cmd_id is None:
            cmd_id = self._alloc()
        return Task(cmd_id, command, self, wired)

    def spawn(self, parent_task: Task, command: ir.Command,
              wired: dict[int, object]) -> Handle:
        """Live launch from a traced parent: match against the recorded
        trace and skip when safe, otherwise trace the child."""
        parent_new = parent_task.cmd_id
        looked = self.templates.lookup(command)
        if looked is not None and not wired:
            stored_id, incoming_tpl = looked
            stored_tpl = self.templates.template_of(stored_id)
            stored_cmd = self.store.commands[stored_id].command
            subtree = self.store.subtree(stored_id)
            if (not (subtree & self.run_set)
                    and not stored_cmd.initial_fds
                    and self.store.complete(stored_id)):
                handle = self._try_skip(parent_new, stored_id, stored_tpl,
                                        incoming_tpl, command)
                if handle is not None:
                    return handle
        return self._trace_child(parent_new, command, wired)

    # ---- allocation / shared helpers ----------------------------------------

    def _alloc(self) -> int:
        cid = self.next_cmd
        self.next_cmd += 1
        return cid

    def _bind(self, cmd: int, ref: int, artifact: Artifact | None, code: int):
        self.ctx.bindings[(cmd, ref)] = Binding(
            artifact.id if artifact is not None else None, code)

    def _binding(self, cmd: int, ref: int) -> Binding:
        for ctx in (self.ctx, *reversed(self._ctx_stack)):
            b = ctx.bindings.get((cmd, ref))
            if b is not None:
                if b.closed:
                    raise ModelIntegrityError(
                        f"use of closed ref r{ref} by command {cmd}")
                return b
        raise ModelIntegrityError(f"unknown ref r{ref} for command {cmd}")

    def _artifact_of(self, cmd: int, ref: int) -> Artifact | None:
        b = self._binding(cmd, ref)
        if b.artifact is None:
            return None
        return self.env.artifacts.get(b.artifact)

    def _exit_code_of(self, cmd: int) -> int | None:
        for ctx in (self.ctx, *reversed(self._ctx_stack)):
            if cmd in ctx.exit_codes:
                return ctx.exit_codes[cmd]
        return None

    def _owner(self, stmt: ir.Statement) -> int:
        return self.idmap.get(stmt.owner, stmt.owner)

    def _emit(self, stmt: ir.Statement, phase: int = ir.PRE_BUILD):
        self.ctx.records.append(ir.Record(stmt, phase))

    def _mark(self, cmd: int, pre: bool, post: bool):
        if cmd == 0:
            return  # the build tool itself is never re-marked
        if pre:
            self.ctx.pre_changed.add(cmd)
        if post:
            self.ctx.post_changed.add(cmd)

    def _version_cached(self, artifact: Artifact, version) -> tuple[bool, bool]:
        """(cached, uncacheable) for a version of this artifact."""
        if artifact.kind == ir.PIPE:
            return (False, True)
        if artifact.kind == ir.SPECIAL:
            if artifact.policy == ir.ALWAYS_CHANGED:
                return (False, True)
            return (True, False)
        if artifact.kind in (ir.DIR, ir.SYMLINK):
            return (True, False)
        key = version.cache_key
        if key is None and isinstance(version.state, ir.FileState):
            key = version.state.hash or None
        if key is None:
            return (False, False)
        return (self.engine.cache.has(key), False)

    def _record_read(self, owner: int, artifact: Artifact, version,
                     meta: bool = False):
        idx = (len(artifact.metadata_versions) if meta
               else len(artifact.content_versions)) - 1
        sid = StateId(artifact.id, idx, meta)
        cached, uncach = (True, False) if meta else \
            self._version_cached(artifact, version)
        if artifact.kind == ir.PIPE:
            artifact.readers.add(owner)
            for writer in artifact.writers:
                self.ctx.dep.record_dependency(writer, owner, sid, cached,
                                               uncach)
            self.ctx.dep.inputs.setdefault(owner, set()).add(sid)
            self.ctx.dep.note_command(owner)
            if sid not in self.ctx.dep.states:
                self.ctx.dep.record_dependency(None, owner, sid, cached, uncach)
            return
        self.ctx.dep.record_dependency(version.producer, owner, sid, cached,
                                       uncach)

    def _record_write(self, owner: int, artifact: Artifact, version,
                      meta: bool = False):
        if version is None:
            return
        idx = (len(artifact.metadata_versions) if meta
               else len(artifact.content_versions)) - 1
        sid = StateId(artifact.id, idx, meta)
        cached, uncach = (True, False) if meta else \
            self._version_cached(artifact, version)
        self.ctx.dep.record_output(owner, sid, cached, uncach)

    # ---- the pass ------------------------------------------------------------

    def run(self) -> EvalResult:
        if self.post:
            return self._run_post()
        for rec in self.store.records:
            if rec.stmt.owner in self.suppressed:
                continue
            self._eval(rec, fresh=False)
        self._finale()
        self._mark_persistent()
        rerun = {
            c for c in self.ctx.pre_changed
            if c in self.ctx.post_changed
            or not self._had_post(c)
        }
        root_exit = self._root_exit()
        return EvalResult(
            records=self.ctx.records, dep=self.ctx.dep, rerun=rerun,
            env=self.env, exit_codes=self.ctx.exit_codes, root_exit=root_exit,
            traced=self.traced,
            skipped=[(c, self.ctx.commands[c]) for c in self.ctx.skipped],
            backtracked=self.backtracked, anomalies=self.anomalies)

    def _had_post(self, new_cmd: int) -> bool:
        old = self.ctx.new_to_old.get(new_cmd)
        if old is None:
            return False
        return self.store.commands[old].has_post

    def _root_exit(self) -> int | None:
        roots = [c for c, p in self.ctx.parents.items() if p == 0]
        if not roots:
            return None
        return self._exit_code_of(roots[0])

    def _finale(self):
        """Drive any traced commands whose Join never appeared (the build
        tool's own children), then record their results."""
        for old_id, handle in list(self.traced_handles.items()):
            if old_id in self.joined:
                continue
            self.scheduler.drive_until(lambda h=handle: h.done)
            self.joined.add(old_id)
            self._emit(ir.Join(0, handle.cmd_id))
            self._emit(ir.ExitResult(0, handle.cmd_id, handle.exit_code))
            self.ctx.exit_codes.setdefault(handle.cmd_id, handle.exit_code)
        self.scheduler.drive_all()

    def _mark_persistent(self):
        for artifact in self.env.reachable_artifacts():
            if not artifact.content_versions:
                continue
            idx = len(artifact.content_versions) - 1
            sid = StateId(artifact.id, idx, False)
            self.ctx.dep.mark_persistent(sid)

    # ---- statement evaluation -------------------------------------------------

    def _eval(self, rec: ir.Record, fresh: bool):
        stmt = rec.stmt
        kind = type(stmt)
        handler = _HANDLERS.get(kind)
        if handler is None:
            raise ModelIntegrityError(f"unhandled statement {kind.__name__}")
        handler(self, rec, fresh)

    # each handler receives the record with OLD ids for echoes and NEW ids
    # for fresh statements; echo handlers remap owner/refs on emission.

    def _h_launch(self, rec: ir.Record, fresh: bool):
        stmt: ir.Launch = rec.stmt
        owner = self._owner(stmt)
        if fresh:
            raise ModelIntegrityError("fresh Launch must go through spawn()")
        old_child = stmt.child
        new_child = self._alloc()
        self.idmap[old_child] = new_child
        self.ctx.new_to_old[new_child] = old_child
        self.ctx.commands[new_child] = stmt.command
        self.ctx.parents[new_child] = owner
        self.ctx.dep.launches_note(owner, new_child)
        self._emit(ir.Launch(owner, new_child, stmt.command))
        if not self.post and old_child in self.run_set:
            self.suppressed |= self.store.subtree(old_child)
            handle = self._start_traced_child(owner, new_child, stmt.command)
            self.traced_handles[old_child] = handle
            return
        self._bind_initial_fds(owner, new_child, stmt.command)
        if not self.post and not self.store.complete(old_child):
            # never recorded to completion: must run (first build seed case)
            self._mark(new_child, pre=True, post=True)

    def _start_traced_child(self, parent_new: int, new_child: int,
                            command: ir.Command) -> Handle:
        wired: dict[int, object] = {}
        for fd, pref in command.initial_fds:
            artifact = self._artifact_of(parent_new, pref)
            if artifact is None:
                continue
            if artifact.kind == ir.PIPE:
                if artifact.buffer is None:
                    artifact.buffer = Channel(artifact.id, creator=None)
                wired[fd] = artifact.buffer
            else:
                wired[fd] = ("file", "/" + (self.env.model_path(artifact) or ""))
        task = self.make_task(command, wired, cmd_id=new_child)
        handle = Handle(new_child, f"cmd{new_child}", task)
        task.handle = handle
        self.scheduler.add(task)
        self._register_pipe_writer_wiring(command, wired, handle)
        self._bind_wired(new_child, command, wired)
        self._count_traced(new_child, command)
        return handle

    def _register_pipe_writer_wiring(self, command: ir.Command,
                                     wired: dict[int, object], handle: Handle):
        for fd, obj in wired.items():
            if isinstance(obj, Channel) and fd != 0:
                obj.writer_handles.append(handle)

    def _count_traced(self, new_child: int, command: ir.Command):
        self.traced.append((new_child, command))
        self.engine.note_traced(command)

    def _bind_initial_fds(self, parent_new: int, new_child: int,
                          command: ir.Command):
        for i, (fd, pref) in enumerate(sorted(command.initial_fds)):
            b = self.ctx.bindings.get((parent_new, pref)) or self._binding(
                parent_new, pref)
            self.ctx.bindings[(new_child, i)] = Binding(b.artifact, b.code)

    def _bind_wired(self, new_child: int, command: ir.Command,
                    wired: dict[int, object]):
        for i, (fd, obj) in enumerate(sorted(wired.items())):
            if isinstance(obj, Channel):
                self.ctx.bindings[(new_child, i)] = Binding(obj.artifact_id,
                                                            ir.SUCCESS)
            else:
                res = self.env.resolve_path(self.env.root(), obj[1],
                                            ir.AccessFlags(), new_child,
                                            mode="readonly")
                self.ctx.bindings[(new_child, i)] = Binding(
                    res.artifact.id if res.artifact else None, res.code)

    def _h_join(self, rec: ir.Record, fresh: bool):
        stmt: ir.Join = rec.stmt
        owner = self._owner(stmt)
        child_new = self.idmap.get(stmt.child) if not fresh else stmt.child
        if child_new is None:
            raise ModelIntegrityError("join on unlaunched child")
        old_child = stmt.child if not fresh else None
        if not fresh and old_child in self.traced_handles:
            handle = self.traced_handles[old_child]
            self.scheduler.drive_until(lambda: handle.done)
            self.joined.add(old_child)
            child_new = handle.cmd_id
        self._emit(ir.Join(owner, child_new))

    def _h_exit_result(self, rec: ir.Record, fresh: bool):
        stmt: ir.ExitResult = rec.stmt
        owner = self._owner(stmt)
        child_new = stmt.child if fresh else self.idmap.get(stmt.child)
        if child_new is None:
            raise ModelIntegrityError("exit check on unlaunched child")
        if self.post:
            actual = self._exit_code_of(child_new)
            self._emit(ir.ExitResult(owner, child_new, stmt.expected_code),
                       ir.PRE_BUILD)
            self._emit(ir.ExitResult(
                owner, child_new,
                actual if actual is not None else stmt.expected_code),
                ir.POST_BUILD)
            return
        if not fresh and stmt.child in self.traced_handles:
            handle = self.traced_handles[stmt.child]
            self.scheduler.drive_until(lambda: handle.done)
            self.joined.add(stmt.child)
            child_new = handle.cmd_id
            actual = handle.exit_code
            self.ctx.exit_codes.setdefault(child_new, actual)
            if actual != stmt.expected_code and owner != 0:
                self.backtracked += 1
                self.engine.note_backtrack(owner, child_new,
                                           stmt.expected_code, actual)
                self._mark(owner, pre=True, post=True)
            self._emit(ir.ExitResult(owner, child_new, actual))
            return
        actual = self._exit_code_of(child_new)
        if fresh:
            self._emit(ir.ExitResult(owner, child_new, stmt.expected_code))
            return
        if actual is None or actual != stmt.expected_code:
            self._mark(owner, pre=not rec.post, post=rec.post)
        self._emit(ir.ExitResult(owner, child_new, stmt.expected_code),
                   rec.phase)

    def _h_path_ref(self, rec: ir.Record, fresh: bool):
        stmt: ir.PathRef = rec.stmt
        owner = self._owner(stmt)
        base = self._artifact_of(owner, stmt.base)
        if base is None:
            raise ModelIntegrityError("path ref from unresolved base")
        mode = "traced" if fresh else ("readonly" if self.post else "emulate")
        res = self.env.resolve_path(base, stmt.path, stmt.flags, owner, mode)
        self._bind(owner, stmt.ref, res.artifact, res.code)
        if res.ok and res.artifact is not None and mode != "readonly":
            a = res.artifact
            if a.content_versions and a.content_versions[-1].producer == owner \
                    and (stmt.flags.truncate or stmt.flags.create):
                self._record_write(owner, a, a.content_versions[-1])
        self._emit(ir.PathRef(owner, stmt.base, stmt.path, stmt.flags,
                              stmt.ref), rec.phase)

    def _h_file_ref(self, rec: ir.Record, fresh: bool):
        stmt: ir.FileRef = rec.stmt
        owner = self._owner(stmt)
        a = self.env.new_anon(ir.FILE)
        self._bind(owner, stmt.ref, a, ir.SUCCESS)
        self._emit(ir.FileRef(owner, stmt.ref), rec.phase)

    def _h_dir_ref(self, rec: ir.Record, fresh: bool):
        stmt: ir.DirRef = rec.stmt
        owner = self._owner(stmt)
        a = self.env.new_anon(ir.DIR)
        a.entries_loaded = True
        self._bind(owner, stmt.ref, a, ir.SUCCESS)
        self._emit(ir.DirRef(owner, stmt.ref), rec.phase)

    def _h_pipe_ref(self, rec: ir.Record, fresh: bool):
        stmt: ir.PipeRef = rec.stmt
        owner = self._owner(stmt)
        a = self.env.new_pipe()
        self._bind(owner, stmt.read_ref, a, ir.SUCCESS)
        self._bind(owner, stmt.write_ref, a, ir.SUCCESS)
        self._emit(ir.PipeRef(owner, stmt.read_ref, stmt.write_ref), rec.phase)

    def _h_symlink_ref(self, rec: ir.Record, fresh: bool):
        stmt: ir.SymlinkRef = rec.stmt
        owner = self._owner(stmt)
        a = self.env.new_anon(ir.SYMLINK)
        from .fsmodel import Version
        a.content_versions.append(Version(ir.SymlinkState(dest=stmt.dest),
                                          fresh, owner))
        self._bind(owner, stmt.ref, a, ir.SUCCESS)
        self._emit(ir.SymlinkRef(owner, stmt.dest, stmt.ref), rec.phase)

    def _h_special_ref(self, rec: ir.Record, fresh: bool):
        stmt: ir.SpecialRef = rec.stmt
        owner = self._owner(stmt)
        a = self.env.special(stmt.which)
        self._bind(owner, stmt.ref, a, ir.SUCCESS)
        self._emit(ir.SpecialRef(owner, stmt.which, stmt.ref), rec.phase)

    def _h_compare_refs(self, rec: ir.Record, fresh: bool):
        stmt: ir.CompareRefs = rec.stmt
        owner = self._owner(stmt)
        b1 = self._binding(owner, stmt.ref1)
        b2 = self._binding(owner, stmt.ref2)
        same = b1.artifact is not None and b1.artifact == b2.artifact
        holds = same if stmt.relation == ir.SAME_INSTANCE else not same
        if self.post and not rec.post:
            self._emit(stmt_replace_owner(stmt, owner), ir.PRE_BUILD)
            observed = (ir.SAME_INSTANCE if same else ir.DIFFERENT_INSTANCE)
            self._emit(ir.CompareRefs(owner, stmt.ref1, stmt.ref2, observed),
                       ir.POST_BUILD)
            return
        if not fresh and not holds:
            self._mark(owner, pre=not rec.post, post=rec.post)
        self._emit(ir.CompareRefs(owner, stmt.ref1, stmt.ref2, stmt.relation),
                   rec.phase)

    def _h_expect_result(self, rec: ir.Record, fresh: bool):
        stmt: ir.ExpectResult = rec.stmt
        owner = self._owner(stmt)
        b = self._binding(owner, stmt.ref)
        if fresh:
            if b.code != stmt.expected:
                raise ModelIntegrityError(
                    f"model disagrees with traced outcome for r{stmt.ref}: "
                    f"{ir.RESULT_NAMES.get(b.code)} vs "
                    f"{ir.RESULT_NAMES.get(stmt.expected)}")
            self._emit(stmt)
            return
        if self.post and not rec.post:
            self._emit(stmt_replace_owner(stmt, owner), ir.PRE_BUILD)
            self._emit(ir.ExpectResult(owner, stmt.ref, b.code), ir.POST_BUILD)
            return
        if b.code != stmt.expected:
            self._mark(owner, pre=not rec.post, post=rec.post)
        self._emit(ir.ExpectResult(owner, stmt.ref, stmt.expected), rec.phase)

    def _h_match_metadata(self, rec: ir.Record, fresh: bool):
        stmt: ir.MatchMetadata = rec.stmt
        owner = self._owner(stmt)
        a = self._artifact_of(owner, stmt.ref)
        if self.post and not rec.post:
            self._emit(stmt_replace_owner(stmt, owner), ir.PRE_BUILD)
            if a is not None:
                self._emit(ir.MatchMetadata(
                    owner, stmt.ref, self.env.current_metadata(a).state),
                    ir.POST_BUILD)
            return
        if a is None:
            if not fresh:
                self._mark(owner, pre=not rec.post, post=rec.post)
            self._emit(stmt_replace_owner(stmt, owner), rec.phase)
            return
        if not fresh and not rec.post:
            version = self.env.current_metadata(a)
            self._record_read(owner, a, version, meta=True)
        if not fresh and not self.env.match_metadata(a, stmt.state):
            self._mark(owner, pre=not rec.post, post=rec.post)
        self._emit(ir.MatchMetadata(owner, stmt.ref, stmt.state), rec.phase)

    def _h_match_content(self, rec: ir.Record, fresh: bool):
        stmt: ir.MatchContent = rec.stmt
        owner = self._owner(stmt)
        a = self._artifact_of(owner, stmt.ref)
        if self.post and not rec.post:
            self._emit(stmt_replace_owner(stmt, owner), ir.PRE_BUILD)
            if a is not None:
                self._emit(ir.MatchContent(owner, stmt.ref,
                                           self.env.content_snapshot(a)),
                           ir.POST_BUILD)
            return
        if a is None:
            if not fresh:
                self._mark(owner, pre=not rec.post, post=rec.post)
            self._emit(stmt_replace_owner(stmt, owner), rec.phase)
            return
        version = (self.env.current_content(a)
                   if a.kind != ir.SPECIAL else None)
        if not rec.post:
            if version is not None:
                self._record_read(owner, a, version)
            elif a.kind == ir.SPECIAL and a.policy == ir.ALWAYS_CHANGED:
                idx = 0
                sid = StateId(a.id, idx, False)
                self.ctx.dep.record_dependency(None, owner, sid, False, True)
        if not fresh and not self.env.match_content(a, stmt.state):
            self._mark(owner, pre=not rec.post, post=rec.post)
        self._emit(ir.MatchContent(owner, stmt.ref, stmt.state), rec.phase)

    def _h_update_metadata(self, rec: ir.Record, fresh: bool):
        stmt: ir.UpdateMetadata = rec.stmt
        owner = self._owner(stmt)
        a = self._artifact_of(owner, stmt.ref)
        if self.post and not rec.post:
            self._emit(stmt_replace_owner(stmt, owner), ir.PRE_BUILD)
            return
        if rec.post:
            return
        if a is None:
            if not fresh:
                self._mark(owner, pre=True, post=True)
            self._emit(stmt_replace_owner(stmt, owner), rec.phase)
            return
        v = self.env.apply_metadata(a, stmt.state, owner, committed=fresh)
        self._record_write(owner, a, v, meta=True)
        self._emit(ir.UpdateMetadata(owner, stmt.ref, stmt.state), rec.phase)

    def _h_update_content(self, rec: ir.Record, fresh: bool):
        stmt: ir.UpdateContent = rec.stmt
        owner = self._owner(stmt)
        a = self._artifact_of(owner, stmt.ref)
        if self.post and not rec.post:
            self._emit(stmt_replace_owner(stmt, owner), ir.PRE_BUILD)
            return
        if rec.post:
            return
        if a is None:
            if not fresh:
                self._mark(owner, pre=True, post=True)
            self._emit(stmt_replace_owner(stmt, owner), rec.phase)
            return
        cache_key = None
        if isinstance(stmt.state, ir.FileState) and stmt.state.hash:
            if stmt.state.hash == EMPTY_KEY or self.engine.cache.has(
                    stmt.state.hash):
                cache_key = stmt.state.hash
        v = self.env.apply_update(a, stmt.state, owner, committed=fresh,
                                  cache_key=cache_key)
        self._record_write(owner, a, v)
        self._emit(ir.UpdateContent(owner, stmt.ref, stmt.state), rec.phase)

    def _h_add_entry(self, rec: ir.Record, fresh: bool):
        stmt: ir.AddEntry = rec.stmt
        owner = self._owner(stmt)
        if self.post and not rec.post:
            self._emit(stmt_replace_owner(stmt, owner), ir.PRE_BUILD)
            return
        if rec.post:
            return
        d = self._artifact_of(owner, stmt.dir)
        t = self._artifact_of(owner, stmt.target)
        if d is None or t is None:
            if not fresh:
                self._mark(owner, pre=True, post=True)
            self._emit(stmt_replace_owner(stmt, owner), rec.phase)
            return
        mismatch, v = self.env.add_entry(d, stmt.name, t, owner,
                                         committed=fresh)
        if mismatch and not fresh:
            self._mark(owner, pre=True, post=True)
        self._record_write(owner, d, v)
        self._emit(ir.AddEntry(owner, stmt.dir, stmt.name, stmt.target),
                   rec.phase)

    def _h_remove_entry(self, rec: ir.Record, fresh: bool):
        stmt: ir.RemoveEntry = rec.stmt
        owner = self._owner(stmt)
        if self.post and not rec.post:
            self._emit(stmt_replace_owner(stmt, owner), ir.PRE_BUILD)
            return
        if rec.post:
            return
        d = self._artifact_of(owner, stmt.dir)
        if d is None:
            if not fresh:
                self._mark(owner, pre=True, post=True)
            self._emit(stmt_replace_owner(stmt, owner), rec.phase)
            return
        mismatch, v = self.env.remove_entry(d, stmt.name, owner,
                                            committed=fresh)
        if mismatch and not fresh:
            self._mark(owner, pre=True, post=True)
        self._record_write(owner, d, v)
        self._emit(ir.RemoveEntry(owner, stmt.dir, stmt.name, stmt.target),
                   rec.phase)

    def _h_using_ref(self, rec: ir.Record, fresh: bool):
        stmt: ir.UsingRef = rec.stmt
        owner = self._owner(stmt)
        self._binding(owner, stmt.ref)
        self._emit(ir.UsingRef(owner, stmt.ref), rec.phase)

    def _h_done_with_ref(self, rec: ir.Record, fresh: bool):
        stmt: ir.DoneWithRef = rec.stmt
        owner = self._owner(stmt)
        b = self._binding(owner, stmt.ref)
        b.closed = True
        self._emit(ir.DoneWithRef(owner, stmt.ref), rec.phase)

    def _h_exit(self, rec: ir.Record, fresh: bool):
        stmt: ir.Exit = rec.stmt
        owner = self._owner(stmt)
        self.ctx.exit_codes[owner] = stmt.code
        self._emit(ir.Exit(owner, stmt.code), rec.phase)

    # ---- command skipping -------------------------------------------------------

    def _try_skip(self, parent_new: int, stored_id: int,
                  stored_tpl: InvocationTemplate,
                  incoming_tpl: InvocationTemplate,
                  command: ir.Command) -> Handle | None:
        rewrite = temp_rewrite_map(stored_tpl, incoming_tpl)
        # required temp content: previously read temp inputs must hold the
        # same bytes behind the new names
        for tmp_idx, key in stored_tpl.required_temp_content:
            if tmp_idx >= len(incoming_tpl.temp_tokens):
                return None
            new_path = canon_path(incoming_tpl.temp_tokens[tmp_idx],
                                  command.cwd)
            res = self.env.resolve_path(self.env.root(), "/" + new_path,
                                        ir.AccessFlags(read=True), None,
                                        mode="readonly")
            if not res.ok or res.artifact is None \
                    or res.artifact.kind != ir.FILE:
                return None
            if self.env.file_hash(res.artifact) != key:
                return None
        records = self.store.subtree_records(stored_id)
        # every file output must be restorable before we promise to replay it
        for r in records:
            if r.post:
                continue
            st = r.stmt
            if isinstance(st, ir.UpdateContent) and isinstance(
                    st.state, ir.FileState):
                key = st.state.hash
                if key and key != EMPTY_KEY and not self.engine.cache.has(key):
                    return None
        return self._speculate(parent_new, stored_id, records, rewrite,
                               command)

    def _speculate(self, parent_new: int, stored_id: int,
                   records: list[ir.Record], rewrite: dict[str, str],
                   command: ir.Command) -> Handle | None:
        saved_env = self.env
        saved_next = self.next_cmd
        saved_idmap = dict(self.idmap)
        self.env = saved_env.clone()
        self._ctx_stack.append(self.ctx)
        self.ctx = _Ctx()
        self._speculating += 1
        ok = False
        try:
            new_child = self._alloc()
            self.idmap[stored_id] = new_child
            self.ctx.new_to_old[new_child] = stored_id
            self.ctx.commands[new_child] = command
            self.ctx.parents[new_child] = parent_new
            self._emit(ir.Launch(parent_new, new_child, command))
            for r in records:
                stmt = _rewrite_paths(r.stmt, rewrite, self.store, self)
                self._eval(ir.Record(stmt, r.phase), fresh=False)
            ok = not self.ctx.pre_changed
        except ModelIntegrityError:
            ok = False
        finally:
            self._speculating -= 1
        spec_ctx = self.ctx
        self.ctx = self._ctx_stack.pop()
        if not ok:
            self.env = saved_env
            self.next_cmd = saved_next
            self.idmap = saved_idmap
            return None
        # adopt: the clone becomes the model, the echoed records are kept
        self.ctx.merge(spec_ctx)
        new_child = self.idmap[stored_id]
        for cid in sorted(self.store.subtree(stored_id)):
            mapped = self.idmap.get(cid)
            if mapped is not None:
                self.ctx.skipped.append(mapped)
        self.engine.note_skipped(command)
        code = spec_ctx.exit_codes.get(new_child, 0)
        return Handle(new_child, f"cmd{new_child}", None, exit_code=code,
                      skipped=True)

    def _trace_child(self, parent_new: int, command: ir.Command,
                     wired: dict[int, object]) -> Handle:
        new_child = self._alloc()
        self.ctx.commands[new_child] = command
        self.ctx.parents[new_child] = parent_new
        fds = []
        for i, (fd, obj) in enumerate(sorted(wired.items())):
            fds.append((fd, self._wired_parent_ref(parent_new, obj, fd)))
        command = ir.Command(exe=command.exe, argv=command.argv,
                             env=command.env, cwd=command.cwd,
                             root=command.root, initial_fds=tuple(fds))
        self._emit(ir.Launch(parent_new, new_child, command))
        self.ctx.dep.launches_note(parent_new, new_child)
        task = self.make_task(command, wired, cmd_id=new_child)
        handle = Handle(new_child, f"cmd{new_child}", task)
        task.handle = handle
        self.scheduler.add(task)
        self._bind_wired(new_child, command, wired)
        self._count_traced(new_child, command)
        return handle

    def _wired_parent_ref(self, parent_new: int, obj, fd: int) -> int:
        if isinstance(obj, Channel):
            refs = self.pipe_end_refs.get((parent_new, obj.artifact_id))
            if refs is not None:
                return refs[0] if fd == 0 else refs[1]
            # the parent inherited this channel on one of its own fds
            for task in self.scheduler.tasks:
                if task.cmd_id == parent_new:
                    for pfd, wobj in task.wired.items():
                        if wobj is obj:
                            return task.translator.fd_refs[pfd]
            raise ModelIntegrityError("pipe wiring lost its parent ref")
        # file redirect: the parent just opened it
        for task in self.scheduler.tasks:
            if task.cmd_id == parent_new:
                return task.translator.path_refs[obj[1]]
        raise ModelIntegrityError("file wiring lost its parent ref")

    # ---- post-build pass ---------------------------------------------------------

    def _run_post(self) -> EvalResult:
        for rec in self.store.records:
            if rec.post:
                continue  # regenerated from the pre statement
            self._eval(rec, fresh=False)
        return EvalResult(
            records=self.ctx.records, dep=self.ctx.dep, rerun=set(),
            env=self.env, exit_codes=self.ctx.exit_codes,
            root_exit=self._root_exit(), traced=[], skipped=[],
            backtracked=0, anomalies=self.anomalies)


def stmt_replace_owner(stmt: ir.Statement, owner: int) -> ir.Statement:
    if stmt.owner == owner:
        return stmt
    values = {f: getattr(stmt, f) for f in stmt.__dataclass_fields__}
    values["owner"] = owner
    return type(stmt)(**values)


def _rewrite_paths(stmt: ir.Statement, rewrite: dict[str, str],
                   store: TraceStore, evaluation: Evaluation) -> ir.Statement:
    """Apply the temp-name mapping to a statement echoed during a skip."""
    if not rewrite:
        return stmt
    if isinstance(stmt, ir.PathRef):
        cwd = _owner_cwd(stmt.owner, store)
        canon = canon_path(stmt.path, cwd)
        if canon in rewrite:
            return ir.PathRef(stmt.owner, stmt.base, "/" + rewrite[canon],
                              stmt.flags, stmt.ref)
        return stmt
    if isinstance(stmt, ir.Launch):
        cmd = stmt.command
        cwd = cmd.cwd
        new_argv = []
        changed = False
        for token in cmd.argv:
            canon = canon_path(token, cwd) if "/" in token else token
            if "/" in token and canon in rewrite:
                new_argv.append("/" + rewrite[canon])
                changed = True
            else:
                new_argv.append(token)
        if not changed:
            return stmt
        return ir.Launch(stmt.owner, stmt.child, ir.Command(
            exe=cmd.exe, argv=tuple(new_argv), env=cmd.env, cwd=cmd.cwd,
            root=cmd.root, initial_fds=cmd.initial_fds))
    return stmt


def _owner_cwd(owner: int, store: TraceStore) -> str:
    info = store.commands.get(owner)
    if info is not None and info.command is not None:
        return info.command.cwd
    return ""


_HANDLERS = {
    ir.PathRef: Evaluation._h_path_ref,
    ir.FileRef: Evaluation._h_file_ref,
    ir.DirRef: Evaluation._h_dir_ref,
    ir.PipeRef: Evaluation._h_pipe_ref,
    ir.SymlinkRef: Evaluation._h_symlink_ref,
    ir.SpecialRef: Evaluation._h_special_ref,
    ir.CompareRefs: Evaluation._h_compare_refs,
    ir.ExpectResult: Evaluation._h_expect_result,
    ir.MatchMetadata: Evaluation._h_match_metadata,
    ir.MatchContent: Evaluation._h_match_content,
    ir.ExitResult: Evaluation._h_exit_result,
    ir.UpdateMetadata: Evaluation._h_update_metadata,
    ir.UpdateContent: Evaluation._h_update_content,
    ir.AddEntry: Evaluation._h_add_entry,
    ir.RemoveEntry: Evaluation._h_remove_entry,
    ir.Launch: Evaluation._h_launch,
    ir.Join: Evaluation._h_join,
    ir.UsingRef: Evaluation._h_using_ref,
    ir.DoneWithRef: Evaluation._h_done_with_ref,
    ir.Exit: Evaluation._h_exit,
}
