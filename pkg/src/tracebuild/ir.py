"""Statement language for build transcripts.

A transcript is a totally ordered sequence of statements, each owned by
exactly one command. Statements either access artifacts (returning refs),
check state against an expectation, or update state. Refs play the role of
file descriptors: they are integers local to the owning command, and must
not be used after DoneWithRef.

Command ids are dense in launch order; id 0 is reserved for the build tool
itself (the command that launches the user's build script). Ref ids are
dense per command, so re-tracing a command yields stable ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# Resolution outcomes. A failed resolution is data, not an exception:
# builds legitimately depend on ENOENT results.
SUCCESS = 0
ENOENT = 1
EACCES = 2
EEXIST = 3
ENOTDIR = 4
EISDIR = 5

RESULT_NAMES = {
    SUCCESS: "SUCCESS",
    ENOENT: "ENOENT",
    EACCES: "EACCES",
    EEXIST: "EEXIST",
    ENOTDIR: "ENOTDIR",
    EISDIR: "EISDIR",
}

# CompareRefs relations
SAME_INSTANCE = 0
DIFFERENT_INSTANCE = 1

# Special artifact policies
ALWAYS_CHANGED = 0
NEVER_CHANGED = 1

# Artifact kinds
FILE = "file"
DIR = "dir"
SYMLINK = "symlink"
PIPE = "pipe"
SPECIAL = "special"


@dataclass(frozen=True, slots=True)
class AccessFlags:
    """Permissions and open(2)-style flags requested by a path access.

    exclusive implies create; create_mode is ignored unless create is set.
    nofollow resolves a trailing symlink to the link itself (lstat-style).
    """

    read: bool = False
    write: bool = False
    execute: bool = False
    create: bool = False
    exclusive: bool = False
    truncate: bool = False
    nofollow: bool = False
    create_mode: int = 0o644

    def __post_init__(self):
        if self.exclusive and not self.create:
            raise ValueError("exclusive requires create")

    def short(self) -> str:
        s = ("r" if self.read else "-") + ("w" if self.write else "-") + (
            "x" if self.execute else "-")
        extra = [
            name
            for name, on in (
                ("create", self.create),
                ("excl", self.exclusive),
                ("trunc", self.truncate),
                ("nofollow", self.nofollow),
            )
            if on
        ]
        return s + (" " + " ".join(extra) if extra else "")


R_OK = AccessFlags(read=True)


@dataclass(frozen=True, slots=True)
class MetadataState:
    """uid, gid, artifact kind, and permission bits. Any field difference
    is a metadata change."""

    uid: int
    gid: int
    kind: str
    perms: int


@dataclass(frozen=True, slots=True)
class FileState:
    """Content state of a regular file.

    Hash equality is authoritative; (mtime_ns, size) is only a fast path
    that may confirm equality without hashing, never inequality.
    """

    hash: str
    size: int
    mtime_ns: int
    cached: bool = False


@dataclass(frozen=True, slots=True)
class DirState:
    """Content state of a directory: the sorted set of entry names."""

    entries: tuple[str, ...]

    def __post_init__(self):
        if list(self.entries) != sorted(set(self.entries)):
            raise ValueError("dir entries must be sorted and unique")


@dataclass(frozen=True, slots=True)
class SymlinkState:
    dest: str


@dataclass(frozen=True, slots=True)
class PipeState:
    """Pipe content is uncacheable; only the write epoch observed at the
    recorded operation is kept. op is 'read' or 'write'."""

    op: str
    writer_epoch: int


@dataclass(frozen=True, slots=True)
class SpecialState:
    policy: int  # ALWAYS_CHANGED or NEVER_CHANGED


ContentState = FileState | DirState | SymlinkState | PipeState | SpecialState


@dataclass(frozen=True, slots=True)
class Command:
    """One executed program. Two commands are identity-equal iff exe, argv,
    env, cwd and root all compare equal (the basis of weak equivalence).

    initial_fds transfers refs from the launching parent: a tuple of
    (fd number, parent ref id) pairs. The child's ref ids 0..n-1 bind to
    those artifacts in ascending fd order before any of its own statements
    create refs.
    """

    exe: str
    argv: tuple[str, ...]
    env: tuple[tuple[str, str], ...] = ()
    cwd: str = ""
    root: str = ""
    initial_fds: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not self.argv:
            raise ValueError("argv must be non-empty")

    def identity(self) -> tuple:
        return (self.exe, self.argv, self.env, self.cwd, self.root)


# --- statements -------------------------------------------------------------
#
# Every statement carries its owner command id. Statements that create refs
# also record the ref ids they produced, so a decoded transcript replays with
# stable ids.


@dataclass(frozen=True, slots=True)
class PathRef:
    owner: int
    base: int  # ref id of the base directory (a prior ref of this command)
    path: str
    flags: AccessFlags
    ref: int  # resulting ref id


@dataclass(frozen=True, slots=True)
class FileRef:
    owner: int
    ref: int


@dataclass(frozen=True, slots=True)
class DirRef:
    owner: int
    ref: int


@dataclass(frozen=True, slots=True)
class PipeRef:
    owner: int
    read_ref: int
    write_ref: int


@dataclass(frozen=True, slots=True)
class SymlinkRef:
    owner: int
    dest: str
    ref: int


@dataclass(frozen=True, slots=True)
class SpecialRef:
    owner: int
    which: str  # stdin | stdout | stderr | root | a named special path
    ref: int


@dataclass(frozen=True, slots=True)
class CompareRefs:
    owner: int
    ref1: int
    ref2: int
    relation: int  # SAME_INSTANCE | DIFFERENT_INSTANCE


@dataclass(frozen=True, slots=True)
class ExpectResult:
    owner: int
    ref: int
    expected: int  # SUCCESS or an error code above


@dataclass(frozen=True, slots=True)
class MatchMetadata:
    owner: int
    ref: int
    state: MetadataState


@dataclass(frozen=True, slots=True)
class MatchContent:
    owner: int
    ref: int
    state: ContentState


@dataclass(frozen=True, slots=True)
class ExitResult:
    owner: int
    child: int  # command id of the child
    expected_code: int


@dataclass(frozen=True, slots=True)
class UpdateMetadata:
    owner: int
    ref: int
    state: MetadataState


@dataclass(frozen=True, slots=True)
class UpdateContent:
    owner: int
    ref: int
    state: ContentState


@dataclass(frozen=True, slots=True)
class AddEntry:
    owner: int
    dir: int  # ref id of the directory
    name: str
    target: int  # ref id of the entry target


@dataclass(frozen=True, slots=True)
class RemoveEntry:
    owner: int
    dir: int
    name: str
    target: int


@dataclass(frozen=True, slots=True)
class Launch:
    owner: int
    child: int  # command id assigned to the child
    command: Command


@dataclass(frozen=True, slots=True)
class Join:
    owner: int
    child: int


@dataclass(frozen=True, slots=True)
class UsingRef:
    owner: int
    ref: int


@dataclass(frozen=True, slots=True)
class DoneWithRef:
    owner: int
    ref: int


@dataclass(frozen=True, slots=True)
class Exit:
    owner: int
    code: int


Statement = (
    PathRef | FileRef | DirRef | PipeRef | SymlinkRef | SpecialRef
    | CompareRefs | ExpectResult | MatchMetadata | MatchContent | ExitResult
    | UpdateMetadata | UpdateContent | AddEntry | RemoveEntry
    | Launch | Join | UsingRef | DoneWithRef | Exit
)

# Statement kinds that compare state against an expectation. These are the
# statements that acquire a post-build twin during the final check pass.
CHECK_KINDS = (CompareRefs, ExpectResult, MatchMetadata, MatchContent, ExitResult)

# Phase tags carried per record
PRE_BUILD = 0
POST_BUILD = 1


@dataclass(frozen=True, slots=True)
class Record:
    """One transcript entry: a statement plus its phase tag."""

    stmt: Statement
    phase: int = PRE_BUILD

    @property
    def post(self) -> bool:
        return self.phase == POST_BUILD


def ref_results(stmt: Statement) -> tuple[int, ...]:
    """Ref ids a statement creates, in order."""
    if isinstance(stmt, (PathRef, FileRef, DirRef, SymlinkRef, SpecialRef)):
        return (stmt.ref,)
    if isinstance(stmt, PipeRef):
        return (stmt.read_ref, stmt.write_ref)
    return ()
