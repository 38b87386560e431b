"""In-memory model of filesystem state beneath a sandbox root.

The model maps artifact ids to artifacts (files, dirs, symlinks, pipes,
special files). Each artifact carries ordered version lists for content and
metadata; the last version is the current modeled state, earlier versions
give reused paths temporal identity. A version is committed when it is
reflected on the real filesystem, uncommitted when it exists only in the
model. Match operations always compare against the modeled state, so an
uncommitted version takes precedence over disk.

Disk state is pulled in lazily: a directory's entries and a file's baseline
content are loaded the first time they are needed. Resolution jails at the
sandbox root; a path cannot escape it.
"""

from __future__ import annotations

import os
import stat as statmod
from pathlib import Path

from . import ir
from .cache import Cache, EMPTY_KEY, hash_file
from .errors import ModelIntegrityError, UncommittableError

SYMLINK_HOP_LIMIT = 40


class Version:
    __slots__ = ("state", "committed", "producer", "cache_key")

    def __init__(self, state, committed: bool, producer: int | None,
                 cache_key: str | None = None):
        self.state = state
        self.committed = committed
        self.producer = producer
        self.cache_key = cache_key

    def copy(self) -> "Version":
        return Version(self.state, self.committed, self.producer, self.cache_key)


class Entry:
    __slots__ = ("target", "present", "committed")

    def __init__(self, target: int, present: bool, committed: bool):
        self.target = target
        self.present = present
        self.committed = committed

    def copy(self) -> "Entry":
        return Entry(self.target, self.present, self.committed)


class Artifact:
    __slots__ = ("id", "kind", "parent", "name", "on_disk",
                 "content_versions", "metadata_versions",
                 "entries", "entries_loaded", "epoch", "run_dirty",
                 "readers", "writers", "buffer", "policy")

    def __init__(self, aid: int, kind: str, parent: int | None, name: str | None,
                 on_disk: bool):
        self.id = aid
        self.kind = kind
        self.parent = parent
        self.name = name
        self.on_disk = on_disk
        self.content_versions: list[Version] = []
        self.metadata_versions: list[Version] = []
        self.entries: dict[str, Entry] = {}
        self.entries_loaded = False
        self.epoch = 0            # pipes: write counter
        self.run_dirty = False    # pipes: a traced command wrote this build
        self.readers: set[int] = set()
        self.writers: set[int] = set()
        self.buffer = None        # pipes: runtime buffer, owned by the tracer
        self.policy = ir.NEVER_CHANGED

    def copy(self) -> "Artifact":
        a = Artifact(self.id, self.kind, self.parent, self.name, self.on_disk)
        a.content_versions = [v.copy() for v in self.content_versions]
        a.metadata_versions = [v.copy() for v in self.metadata_versions]
        a.entries = {k: e.copy() for k, e in self.entries.items()}
        a.entries_loaded = self.entries_loaded
        a.epoch = self.epoch
        a.run_dirty = self.run_dirty
        a.readers = set(self.readers)
        a.writers = set(self.writers)
        a.buffer = self.buffer  # runtime handle, intentionally shared
        a.policy = self.policy
        return a


def _kind_of_mode(mode: int) -> str:
    if statmod.S_ISDIR(mode):
        return ir.DIR
    if statmod.S_ISLNK(mode):
        return ir.SYMLINK
    if statmod.S_ISREG(mode):
        return ir.FILE
    if statmod.S_ISFIFO(mode):
        return ir.PIPE
    return ir.SPECIAL


class Resolution:
    """Outcome of a path walk: the artifact (when resolution succeeded) and
    a result code. Failure is data, never an exception."""

    __slots__ = ("artifact", "code")

    def __init__(self, artifact: Artifact | None, code: int):
        self.artifact = artifact
        self.code = code

    @property
    def ok(self) -> bool:
        return self.code == ir.SUCCESS


class Env:
    """The modeled environment. Confined to a single evaluation thread."""

    def __init__(self, sandbox: str | os.PathLike, cache: Cache | None = None):
        self.sandbox = Path(sandbox).resolve()
        self.cache = cache
        self.euid = os.geteuid()
        self.egid = os.getegid()
        self.artifacts: dict[int, Artifact] = {}
        self._next_id = 0
        root = self._new_artifact(ir.DIR, None, None, on_disk=True)
        self.root_id = root.id
        self.specials: dict[str, int] = {}
        for which, policy in (("stdin", ir.ALWAYS_CHANGED),
                              ("stdout", ir.NEVER_CHANGED),
                              ("stderr", ir.NEVER_CHANGED),
                              ("null", ir.NEVER_CHANGED)):
            a = self._new_artifact(ir.SPECIAL, None, None, on_disk=False)
            a.policy = policy
            self.specials[which] = a.id

    # -- construction ----------------------------------------------------

    def _new_artifact(self, kind: str, parent: int | None, name: str | None,
                      on_disk: bool) -> Artifact:
        a = Artifact(self._next_id, kind, parent, name, on_disk)
        self._next_id += 1
        self.artifacts[a.id] = a
        return a

    def root(self) -> Artifact:
        return self.artifacts[self.root_id]

    def special(self, which: str) -> Artifact:
        if which == "root":
            return self.root()
        if which in self.specials:
            return self.artifacts[self.specials[which]]
        # named special paths (e.g. /dev/null analogues) are never-changed
        a = self._new_artifact(ir.SPECIAL, None, which, on_disk=False)
        a.policy = ir.NEVER_CHANGED
        self.specials[which] = a.id
        return a

    def new_anon(self, kind: str) -> Artifact:
        return self._new_artifact(kind, None, None, on_disk=False)

    def new_pipe(self) -> Artifact:
        return self._new_artifact(ir.PIPE, None, None, on_disk=False)

    def clone(self) -> "Env":
        """Copy the model for speculative evaluation. Artifact ids are
        preserved, so ref bindings made against the original stay valid."""
        env = Env.__new__(Env)
        env.sandbox = self.sandbox
        env.cache = self.cache
        env.euid = self.euid
        env.egid = self.egid
        env.artifacts = {aid: a.copy() for aid, a in self.artifacts.items()}
        env._next_id = self._next_id
        env.root_id = self.root_id
        env.specials = dict(self.specials)
        return env

    # -- real paths --------------------------------------------------------

    def model_path(self, a: Artifact) -> str | None:
        """Sandbox-relative path of a path-reachable artifact, or None."""
        parts: list[str] = []
        cur = a
        while cur.parent is not None:
            parts.append(cur.name)
            cur = self.artifacts[cur.parent]
        if cur.id != self.root_id:
            return None
        return "/".join(reversed(parts))

    def real_path(self, a: Artifact) -> Path | None:
        p = self.model_path(a)
        if p is None:
            return None
        return self.sandbox / p if p else self.sandbox

    # -- lazy disk loading -------------------------------------------------

    def _load_entries(self, d: Artifact) -> None:
        if d.entries_loaded:
            return
        d.entries_loaded = True
        if not d.on_disk:
            return
        real = self.real_path(d)
        if real is None:
            return
        try:
            names = sorted(os.listdir(real))
        except OSError:
            return
        for name in names:
            if name in d.entries:
                continue
            try:
                st = os.lstat(real / name)
            except OSError:
                continue
            child = self._new_artifact(_kind_of_mode(st.st_mode), d.id, name,
                                       on_disk=True)
            d.entries[name] = Entry(child.id, present=True, committed=True)

    def _baseline_content(self, a: Artifact) -> Version:
        real = self.real_path(a)
        if a.kind == ir.FILE:
            st = os.lstat(real)
            state = ir.FileState(hash="", size=st.st_size,
                                 mtime_ns=st.st_mtime_ns, cached=False)
        elif a.kind == ir.DIR:
            self._load_entries(a)
            state = ir.DirState(entries=self._entry_names(a))
        elif a.kind == ir.SYMLINK:
            state = ir.SymlinkState(dest=os.readlink(real))
        else:
            state = ir.SpecialState(policy=a.policy)
        return Version(state, committed=True, producer=None)

    def current_content(self, a: Artifact) -> Version:
        if not a.content_versions:
            if a.kind == ir.PIPE:
                a.content_versions.append(
                    Version(ir.PipeState("write", 0), committed=False,
                            producer=None))
            elif a.on_disk:
                a.content_versions.append(self._baseline_content(a))
            else:
                # model-created artifact with no recorded content yet
                if a.kind == ir.FILE:
                    state = ir.FileState(hash=EMPTY_KEY, size=0, mtime_ns=0,
                                         cached=True)
                elif a.kind == ir.DIR:
                    a.entries_loaded = True
                    state = ir.DirState(entries=())
                elif a.kind == ir.SYMLINK:
                    state = ir.SymlinkState(dest="")
                else:
                    state = ir.SpecialState(policy=a.policy)
                a.content_versions.append(
                    Version(state, committed=False, producer=None,
                            cache_key=EMPTY_KEY if a.kind == ir.FILE else None))
        return a.content_versions[-1]

    def current_metadata(self, a: Artifact) -> Version:
        if not a.metadata_versions:
            real = self.real_path(a) if a.on_disk else None
            if real is not None:
                st = os.lstat(real)
                state = ir.MetadataState(uid=st.st_uid, gid=st.st_gid,
                                         kind=_kind_of_mode(st.st_mode),
                                         perms=st.st_mode & 0o777)
                a.metadata_versions.append(Version(state, True, None))
            else:
                state = ir.MetadataState(uid=self.euid, gid=self.egid,
                                         kind=a.kind, perms=0o644)
                a.metadata_versions.append(Version(state, False, None))
        return a.metadata_versions[-1]

    def _entry_names(self, d: Artifact) -> tuple[str, ...]:
        self._load_entries(d)
        return tuple(sorted(n for n, e in d.entries.items() if e.present))

    def file_hash(self, a: Artifact) -> str:
        """Content hash of a file artifact's current version, computing and
        memoizing the disk hash for baseline versions."""
        v = self.current_content(a)
        state = v.state
        if not isinstance(state, ir.FileState):
            raise ModelIntegrityError("file_hash on non-file state")
        if state.hash:
            return state.hash
        real = self.real_path(a)
        h = hash_file(real)
        v.state = ir.FileState(hash=h, size=state.size,
                               mtime_ns=state.mtime_ns, cached=state.cached)
        return h

    # -- permission checks ---------------------------------------------------

    def _perm_ok(self, a: Artifact, want_r: bool, want_w: bool, want_x: bool) -> bool:
        meta = self.current_metadata(a).state
        if self.euid == 0:
            # root bypasses read/write checks; execute needs some x bit,
            # except directory search which is always permitted
            if want_x and a.kind != ir.DIR and not (meta.perms & 0o111):
                return False
            return True
        if meta.uid == self.euid:
            shift = 6
        elif meta.gid == self.egid:
            shift = 3
        else:
            shift = 0
        bits = (meta.perms >> shift) & 0o7
        if want_r and not (bits & 0o4):
            return False
        if want_w and not (bits & 0o2):
            return False
        if want_x and not (bits & 0o1):
            return False
        return True

    # -- path resolution -----------------------------------------------------

    def resolve_path(self, base: Artifact, path: str, flags: ir.AccessFlags,
                     acting: int | None, mode: str = "emulate") -> Resolution:
        """Walk path from base, following symlinks (limit 40 hops; exceeding
        it maps to EACCES). mode is one of:

          emulate  - create/truncate effects are applied uncommitted
          traced   - effects are applied committed (the real op already ran)
          readonly - no model mutation at all
        """
        if path.startswith("/"):
            cur = self.root()
            pending = [p for p in path.split("/") if p]
        else:
            cur = base
            pending = [p for p in path.split("/") if p]
        hops = 0
        while True:
            # "." components only assert that the current artifact is a dir
            while pending and pending[0] == ".":
                if cur.kind != ir.DIR:
                    return Resolution(None, ir.ENOTDIR)
                pending.pop(0)
            if not pending:
                return self._finalize(cur, flags, acting, mode)
            if cur.kind != ir.DIR:
                return Resolution(None, ir.ENOTDIR)
            if not self._perm_ok(cur, False, False, True):
                return Resolution(None, ir.EACCES)
            comp = pending.pop(0)
            if comp == "..":
                if cur.parent is not None:
                    cur = self.artifacts[cur.parent]
                continue
            self._load_entries(cur)
            entry = cur.entries.get(comp)
            last = not pending
            if entry is None or not entry.present:
                if last and flags.create:
                    if not self._perm_ok(cur, False, True, False):
                        return Resolution(None, ir.EACCES)
                    if mode == "readonly":
                        return Resolution(None, ir.ENOENT)
                    return Resolution(
                        self._create_file(cur, comp, flags, acting, mode),
                        ir.SUCCESS)
                return Resolution(None, ir.ENOENT)
            target = self.artifacts[entry.target]
            if target.kind == ir.SYMLINK and not (last and flags.nofollow):
                hops += 1
                if hops > SYMLINK_HOP_LIMIT:
                    return Resolution(None, ir.EACCES)
                dest = self._link_dest(target)
                if dest.startswith("/"):
                    cur = self.root()
                dest_parts = [p for p in dest.split("/") if p]
                pending = dest_parts + pending
                continue
            if last:
                return self._finalize(target, flags, acting, mode)
            cur = target

    def _link_dest(self, link: Artifact) -> str:
        state = self.current_content(link).state
        return state.dest if isinstance(state, ir.SymlinkState) else ""

    def _finalize(self, target: Artifact, flags: ir.AccessFlags,
                  acting: int | None, mode: str) -> Resolution:
        if flags.create and flags.exclusive:
            return Resolution(None, ir.EEXIST)
        if target.kind == ir.DIR and flags.write:
            return Resolution(None, ir.EISDIR)
        if not self._perm_ok(target, flags.read, flags.write, flags.execute):
            return Resolution(None, ir.EACCES)
        if (flags.truncate and flags.write and target.kind == ir.FILE
                and mode != "readonly"):
            self.apply_update(
                target,
                ir.FileState(hash=EMPTY_KEY, size=0, mtime_ns=0, cached=True),
                acting, committed=(mode == "traced"), cache_key=EMPTY_KEY)
        return Resolution(target, ir.SUCCESS)

    def _create_file(self, parent: Artifact, name: str, flags: ir.AccessFlags,
                     acting: int | None, mode: str) -> Artifact:
        committed = mode == "traced"
        a = self._new_artifact(ir.FILE, parent.id, name, on_disk=committed)
        a.metadata_versions.append(Version(
            ir.MetadataState(uid=self.euid, gid=self.egid, kind=ir.FILE,
                             perms=flags.create_mode),
            committed, acting))
        a.content_versions.append(Version(
            ir.FileState(hash=EMPTY_KEY, size=0, mtime_ns=0, cached=True),
            committed, acting, cache_key=EMPTY_KEY))
        parent.entries[name] = Entry(a.id, present=True, committed=committed)
        self._bump_dir(parent, acting, committed)
        return a

    def _bump_dir(self, d: Artifact, acting: int | None, committed: bool) -> Version:
        v = Version(ir.DirState(entries=self._entry_names(d)), committed, acting)
        self.current_content(d)  # force the baseline in first
        d.content_versions.append(v)
        return v

    # -- state checks ----------------------------------------------------------

    def match_content(self, a: Artifact, expected) -> bool:
        if a.kind == ir.SPECIAL:
            return a.policy == ir.NEVER_CHANGED
        if a.kind == ir.PIPE:
            if not isinstance(expected, ir.PipeState):
                return False
            if a.run_dirty:
                return False  # a writer ran; pipe content is conservative
            return a.epoch == expected.writer_epoch
        if a.kind == ir.FILE:
            if not isinstance(expected, ir.FileState):
                return False
            v = self.current_content(a)
            state = v.state
            if not state.hash:
                # on-disk baseline: (mtime, size) equality is a fast path,
                # any doubt falls through to hashing
                if (state.mtime_ns == expected.mtime_ns
                        and state.size == expected.size):
                    return True
                return self.file_hash(a) == expected.hash
            return state.hash == expected.hash
        if a.kind == ir.DIR:
            if not isinstance(expected, ir.DirState):
                return False
            return self._entry_names(a) == tuple(expected.entries)
        if a.kind == ir.SYMLINK:
            if not isinstance(expected, ir.SymlinkState):
                return False
            return self._link_dest(a) == expected.dest
        return False

    def match_metadata(self, a: Artifact, expected: ir.MetadataState) -> bool:
        return self.current_metadata(a).state == expected

    def content_snapshot(self, a: Artifact):
        """Current content state, hashed if needed (for post-build records)."""
        if a.kind == ir.FILE:
            v = self.current_content(a)
            h = self.file_hash(a)
            st = v.state
            return ir.FileState(hash=h, size=st.size, mtime_ns=st.mtime_ns,
                                cached=bool(v.cache_key))
        if a.kind == ir.DIR:
            return ir.DirState(entries=self._entry_names(a))
        if a.kind == ir.SYMLINK:
            return ir.SymlinkState(dest=self._link_dest(a))
        if a.kind == ir.PIPE:
            return ir.PipeState(op="read", writer_epoch=a.epoch)
        return ir.SpecialState(policy=a.policy)

    # -- state updates -----------------------------------------------------------

    def apply_update(self, a: Artifact, state, acting: int | None,
                     committed: bool, cache_key: str | None = None) -> Version | None:
        """Install a new content version. Committed versions reflect real
        effects of traced commands; emulated updates stay model-only unless
        the disk already holds identical content."""
        if a.kind == ir.SPECIAL:
            return None  # writes to special files are a no-op by policy
        if a.kind == ir.PIPE:
            if not isinstance(state, ir.PipeState):
                raise ModelIntegrityError("pipe update with non-pipe state")
            a.epoch = state.writer_epoch
            if committed:
                a.run_dirty = True
            if acting is not None:
                a.writers.add(acting)
            v = Version(state, False, acting)
            a.content_versions.append(v)
            return v
        if isinstance(state, ir.FileState) and not committed:
            committed = self._disk_matches(a, state)
        self.current_content(a)  # force baseline so temporal history is kept
        v = Version(state, committed, acting, cache_key)
        a.content_versions.append(v)
        if committed and not a.on_disk:
            a.on_disk = True
        return v

    def _disk_matches(self, a: Artifact, state: ir.FileState) -> bool:
        """True when the real file already holds the given content, which
        lets an emulated update be born committed (no later disk write)."""
        if not a.on_disk:
            return False
        real = self.real_path(a)
        if real is None:
            return False
        try:
            st = os.lstat(real)
        except OSError:
            return False
        if not statmod.S_ISREG(st.st_mode):
            return False
        if st.st_size != state.size:
            return False
        baseline = a.content_versions[0] if a.content_versions else None
        if (baseline is not None and baseline.committed
                and isinstance(baseline.state, ir.FileState)
                and baseline.state.hash):
            return baseline.state.hash == state.hash
        try:
            return hash_file(real) == state.hash
        except OSError:
            return False

    def apply_metadata(self, a: Artifact, state: ir.MetadataState,
                       acting: int | None, committed: bool) -> Version | None:
        if a.kind == ir.SPECIAL:
            return None
        self.current_metadata(a)
        if not committed and self.current_metadata(a).state == state \
                and self.current_metadata(a).committed:
            committed = True
        v = Version(state, committed, acting)
        a.metadata_versions.append(v)
        return v

    def add_entry(self, d: Artifact, name: str, target: Artifact,
                  acting: int | None, committed: bool) -> tuple[bool, Version | None]:
        """Returns (outcome_mismatch, new_dir_version). Adding a name that is
        already present with a compatible target is accepted idempotently so
        replays of create-if-absent operations stay stable."""
        if "/" in name:
            raise ModelIntegrityError(f"invalid entry name {name!r}")
        self._load_entries(d)
        existing = d.entries.get(name)
        if existing is not None and existing.present:
            old = self.artifacts[existing.target]
            return (old.kind != target.kind, None)
        d.entries[name] = Entry(target.id, present=True, committed=committed)
        target.parent = d.id
        target.name = name
        if committed and not target.on_disk:
            target.on_disk = True
        return (False, self._bump_dir(d, acting, committed))

    def remove_entry(self, d: Artifact, name: str, acting: int | None,
                     committed: bool) -> tuple[bool, Version | None]:
        """Returns (outcome_mismatch, new_dir_version). Removing an absent
        entry signals an outcome mismatch."""
        if "/" in name:
            raise ModelIntegrityError(f"invalid entry name {name!r}")
        self._load_entries(d)
        existing = d.entries.get(name)
        if existing is None or not existing.present:
            return (True, None)
        existing.present = False
        existing.committed = committed
        return (False, self._bump_dir(d, acting, committed))

    # -- sync / commit --------------------------------------------------------

    def sync(self) -> None:
        """Discard all uncommitted state. Disk-backed state re-derives lazily
        on next access; committed versions survive."""
        dead: list[int] = []
        for a in self.artifacts.values():
            a.content_versions = [v for v in a.content_versions if v.committed]
            a.metadata_versions = [v for v in a.metadata_versions if v.committed]
            if a.kind == ir.DIR:
                a.entries = {}
                a.entries_loaded = False
                # entry tables re-derive from disk; committed dir versions
                # describe disk and stay valid
            if a.kind == ir.PIPE:
                dead.append(a.id)
                continue
            if not a.on_disk and a.id != self.root_id \
                    and a.id not in self.specials.values() \
                    and not a.content_versions and not a.metadata_versions:
                dead.append(a.id)
        for aid in dead:
            self.artifacts.pop(aid, None)

    def uncommitted_count(self) -> int:
        n = 0
        for a in self.artifacts.values():
            n += sum(1 for v in a.content_versions if not v.committed)
            n += sum(1 for v in a.metadata_versions if not v.committed)
        return n

    def commit(self, a: Artifact, counter: list[int] | None = None) -> None:
        """Write an artifact's modeled state to the real filesystem. Parents
        commit first. Pipe state is uncommittable and silently skipped when
        reached through commit_all (callers asking directly get an error)."""
        self._commit_chain(a, counter if counter is not None else [0])

    def _commit_chain(self, a: Artifact, counter: list[int]) -> None:
        if a.parent is not None:
            self._commit_chain(self.artifacts[a.parent], counter)
        self._commit_one(a, counter)

    def _commit_one(self, a: Artifact, counter: list[int]) -> None:
        if a.kind in (ir.SPECIAL,):
            return
        if a.kind == ir.PIPE:
            raise UncommittableError("pipe contents cannot be committed")
        real = self.real_path(a)
        if real is None:
            return  # anonymous artifacts have no path to commit to
        if a.kind == ir.DIR:
            self._commit_dir(a, real, counter)
            return
        if a.kind == ir.SYMLINK:
            v = self.current_content(a) if a.content_versions else None
            if v is not None and not v.committed:
                if os.path.lexists(real):
                    os.unlink(real)
                os.symlink(v.state.dest, real)
                counter[0] += 1
                self._mark_committed(a)
            return
        # regular file
        if not a.content_versions:
            return
        v = a.content_versions[-1]
        if not v.committed:
            key = v.cache_key or (v.state.hash if isinstance(v.state, ir.FileState) else None)
            if not key:
                raise UncommittableError(
                    f"no cached bytes for {self.model_path(a)}")
            if self.cache is None:
                raise UncommittableError("no cache configured")
            self.cache.restore(key, real)
            counter[0] += 1
            self._mark_committed(a)
            a.on_disk = True
        mv = a.metadata_versions[-1] if a.metadata_versions else None
        if mv is not None and not mv.committed:
            try:
                os.chmod(real, mv.state.perms)
                counter[0] += 1
            except OSError:
                pass  # best-effort metadata
            mv.committed = True

    def _commit_dir(self, d: Artifact, real: Path, counter: list[int]) -> None:
        if not d.on_disk:
            real.mkdir(parents=True, exist_ok=True)
            d.on_disk = True
            counter[0] += 1
        self._load_entries(d)
        for name, entry in list(d.entries.items()):
            if entry.committed:
                continue
            target = self.artifacts[entry.target]
            if not entry.present:
                path = real / name
                try:
                    if path.is_dir() and not path.is_symlink():
                        os.rmdir(path)
                    else:
                        os.unlink(path)
                    counter[0] += 1
                except FileNotFoundError:
                    pass
                entry.committed = True
                continue
            if target.kind == ir.PIPE:
                raise UncommittableError("pipe entry in a directory")
            self._commit_one(target, counter)
            entry.committed = True
        for v in d.content_versions:
            v.committed = True

    def _mark_committed(self, a: Artifact) -> None:
        for v in a.content_versions:
            v.committed = True

    def commit_all(self) -> int:
        """Materialize every modeled version on disk, parents before
        children. Returns the number of real filesystem writes."""
        counter = [0]
        self._commit_tree(self.root(), counter)
        return counter[0]

    def _commit_tree(self, d: Artifact, counter: list[int]) -> None:
        self._commit_one(d, counter)
        if d.kind != ir.DIR or not d.entries_loaded:
            return
        for name, entry in sorted(d.entries.items()):
            if not entry.present:
                continue
            target = self.artifacts.get(entry.target)
            if target is None or target.kind == ir.PIPE:
                continue
            if target.kind == ir.DIR:
                self._commit_tree(target, counter)
            else:
                self._commit_one(target, counter)

    # -- queries for planning ---------------------------------------------------

    def reachable_artifacts(self):
        """Artifacts reachable by path from the sandbox root, without
        touching unloaded directories (those were never part of the build)."""
        out = []
        stack = [self.root()]
        seen = set()
        while stack:
            a = stack.pop()
            if a.id in seen:
                continue
            seen.add(a.id)
            out.append(a)
            if a.kind == ir.DIR and a.entries_loaded:
                for entry in a.entries.values():
                    if entry.present and entry.target in self.artifacts:
                        stack.append(self.artifacts[entry.target])
        return out
