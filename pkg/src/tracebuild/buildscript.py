"""Build script execution backend.

Scripts (.bsh files, or the root Buildfile) are a small deterministic
command language whose instructions perform real filesystem operations
inside the sandbox and emit trace events at syscall granularity. The
grammar is line oriented: '#' starts a comment, tokens are whitespace
separated, double-quoted literals support \\n, \\t, \\" and \\\\ escapes.

    READ path [INTO var]        content dependency; var gets the text
    WRITE path token...         truncate-create write; tokens joined by " "
    APPEND path token...        read-modify-write append
    STAT path                   metadata dependency
    LIST path [INTO var]        directory listing dependency
    MKDIR path                  create dir if absent
    RM path                     remove if present (rm -f)
    SYMLINK dest name           create symlink if absent
    GLOB pattern INTO var       shell-style expansion (lists the directory)
    SPAWN [AS n] [STDIN=p] [STDOUT=p|path] argv...
    WAIT [name]                 wait one child (or all); sets $?
    PIPE name                   create a pipe, readable/writable by name
    EXIT code                   stop with exit code
    SET var token...            set a variable
    IF-CONTAINS path substr {   run block when file content contains substr
    }
    HASHCOPY src dst            deterministic transform: dst holds a labeled
                                digest of src with comment lines stripped

READ/WRITE/APPEND on a name declared by PIPE act on the pipe. Inside a
script, @stdin/@stdout/@stderr name the standard streams (pipes or files
when wired by the parent, special artifacts otherwise). $0..$9 are argv
words, $# the argument count, $? the last waited exit code. Variable
references expand in all tokens; an unquoted token splits on whitespace
after expansion.

Interpretation is deterministic: children run cooperatively, scheduled
round-robin in creation order at blocking points (pipe reads and waits),
so the same program over the same tree yields the same event order.
"""

from __future__ import annotations

import fnmatch
import os
import re
import stat as statmod
from dataclasses import dataclass
from pathlib import Path

from . import ir
from .cache import hash_bytes
from .errors import DeadlockError, ModelIntegrityError
from .templates import canon_path

PIPE_BUFFER_LIMIT = 1 << 20

_VAR_RE = re.compile(r"\$([A-Za-z_][A-Za-z0-9_]*|\?|#|[0-9])")

KEYWORDS = {
    "READ", "WRITE", "APPEND", "STAT", "LIST", "MKDIR", "RM", "SYMLINK",
    "GLOB", "SPAWN", "WAIT", "PIPE", "EXIT", "SET", "IF-CONTAINS", "HASHCOPY",
}


class ParseError(Exception):
    pass


@dataclass(slots=True)
class Token:
    text: str
    quoted: bool = False


@dataclass(slots=True)
class Instr:
    op: str
    args: list[Token]
    block: list["Instr"] | None = None
    line: int = 0


def _tokenize(line: str, lineno: int) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    n = len(line)
    while i < n:
        c = line[i]
        if c in " \t":
            i += 1
            continue
        if c == "#":
            break
        if c == '"':
            i += 1
            buf = []
            while i < n:
                c = line[i]
                if c == "\\" and i + 1 < n:
                    nxt = line[i + 1]
                    buf.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(nxt, nxt))
                    i += 2
                    continue
                if c == '"':
                    break
                buf.append(c)
                i += 1
            if i >= n:
                raise ParseError(f"line {lineno}: unterminated string")
            i += 1
            tokens.append(Token("".join(buf), quoted=True))
            continue
        j = i
        while j < n and line[j] not in ' \t#"':
            j += 1
        tokens.append(Token(line[i:j]))
        i = j
    return tokens


def parse(text: str) -> list[Instr]:
    """Parse a build script into an instruction list."""
    stack: list[list[Instr]] = [[]]
    for lineno, raw in enumerate(text.splitlines(), 1):
        tokens = _tokenize(raw, lineno)
        if not tokens:
            continue
        head = tokens[0].text
        if head == "}" and not tokens[0].quoted:
            if len(tokens) != 1 or len(stack) == 1:
                raise ParseError(f"line {lineno}: unmatched '}}'")
            stack.pop()
            continue
        if head not in KEYWORDS or tokens[0].quoted:
            raise ParseError(f"line {lineno}: unknown instruction {head!r}")
        args = tokens[1:]
        if head == "IF-CONTAINS":
            if not args or args[-1].text != "{" or args[-1].quoted:
                raise ParseError(f"line {lineno}: IF-CONTAINS needs a '{{' block")
            instr = Instr(head, args[:-1], block=[], line=lineno)
            stack[-1].append(instr)
            stack.append(instr.block)
            continue
        stack[-1].append(Instr(head, args, line=lineno))
    if len(stack) != 1:
        raise ParseError("unterminated block")
    return stack[0]


# -- trace events -------------------------------------------------------------


@dataclass(slots=True)
class TraceEvent:
    """One observed operation, analogous to a syscall, with its outcome."""

    op: str
    path: str = ""
    flags: ir.AccessFlags | None = None
    code: int = ir.SUCCESS
    data: bytes = b""
    names: tuple[str, ...] = ()
    dest: str = ""
    created: bool = False
    size: int = 0
    mtime_ns: int = 0
    uid: int = 0
    gid: int = 0
    kind: str = ir.FILE
    perms: int = 0
    ref: int = -1        # pipe/special events: the acting command's ref id
    epoch: int = 0       # pipe events
    child: int = -1      # wait: child command id
    exit_code: int = 0


class Translator:
    """Statement generation for one traced command.

    Allocates the command's ref ids (dense, wired fds first) and coalesces
    repeated reads: one MatchContent per (path, content) per command.
    """

    def __init__(self, cmd_id: int, command: ir.Command, cached_lookup=None):
        self.cmd = cmd_id
        self.command = command
        self.next_ref = len(command.initial_fds)
        self.fd_refs: dict[int, int] = {
            fd: i for i, (fd, _pref) in enumerate(sorted(command.initial_fds))}
        self.root_ref = -1
        self.cwd_ref = -1
        self.path_refs: dict[str, int] = {}
        self.seen_reads: set[tuple[str, str]] = set()
        self.cached_lookup = cached_lookup or (lambda key: False)

    def alloc(self) -> int:
        rid = self.next_ref
        self.next_ref += 1
        return rid

    def prologue(self) -> list[ir.Statement]:
        """Statements that establish the standard refs. Wired fds got their
        ids at Launch; unwired standard streams bind to special artifacts."""
        out: list[ir.Statement] = []
        for fd, which in ((0, "stdin"), (1, "stdout"), (2, "stderr")):
            if fd not in self.fd_refs:
                rid = self.alloc()
                self.fd_refs[fd] = rid
                out.append(ir.SpecialRef(self.cmd, which, rid))
        self.root_ref = self.alloc()
        out.append(ir.SpecialRef(self.cmd, "root", self.root_ref))
        self.cwd_ref = self.alloc()
        out.append(ir.PathRef(self.cmd, self.root_ref,
                              self.command.cwd or ".",
                              ir.AccessFlags(execute=True), self.cwd_ref))
        out.append(ir.ExpectResult(self.cmd, self.cwd_ref, ir.SUCCESS))
        return out

    def _base_and_path(self, path: str) -> tuple[int, str]:
        if path.startswith("/"):
            return self.root_ref, path
        return self.cwd_ref, path

    def _file_state(self, ev: TraceEvent, data: bytes) -> ir.FileState:
        h = hash_bytes(data)
        return ir.FileState(hash=h, size=ev.size, mtime_ns=ev.mtime_ns,
                            cached=self.cached_lookup(h))

    def translate(self, ev: TraceEvent) -> list[ir.Statement]:
        c = self.cmd
        op = ev.op
        if op == "open":
            base, path = self._base_and_path(ev.path)
            rid = self.alloc()
            self.path_refs[ev.path] = rid
            return [ir.PathRef(c, base, path, ev.flags or ir.AccessFlags(), rid),
                    ir.ExpectResult(c, rid, ev.code)]
        if op == "read":
            h = hash_bytes(ev.data)
            key = (ev.path, h)
            if key in self.seen_reads:
                return []
            self.seen_reads.add(key)
            rid = self.path_refs[ev.path]
            return [ir.MatchContent(c, rid, self._file_state(ev, ev.data))]
        if op == "write":
            rid = self.path_refs[ev.path]
            self.seen_reads.add((ev.path, hash_bytes(ev.data)))
            return [ir.UpdateContent(c, rid, self._file_state(ev, ev.data))]
        if op == "stat":
            rid = self.path_refs[ev.path]
            return [ir.MatchMetadata(c, rid, ir.MetadataState(
                uid=ev.uid, gid=ev.gid, kind=ev.kind, perms=ev.perms))]
        if op == "list":
            rid = self.path_refs[ev.path]
            return [ir.MatchContent(c, rid, ir.DirState(entries=ev.names))]
        if op == "mkdir":
            if not ev.created:
                base, path = self._base_and_path(ev.path)
                rid = self.alloc()
                self.path_refs[ev.path] = rid
                return [ir.PathRef(c, base, path, ir.AccessFlags(), rid),
                        ir.ExpectResult(c, rid, ev.code)]
            parent, name = _split_parent(ev.path)
            base, ppath = self._base_and_path(parent)
            prid = self.alloc()
            drid = self.alloc()
            self.path_refs[ev.path] = drid
            return [ir.PathRef(c, base, ppath, ir.AccessFlags(write=True), prid),
                    ir.ExpectResult(c, prid, ir.SUCCESS),
                    ir.DirRef(c, drid),
                    ir.AddEntry(c, prid, name, drid)]
        if op == "unlink":
            base, path = self._base_and_path(ev.path)
            rid = self.alloc()
            if ev.code != ir.SUCCESS:
                return [ir.PathRef(c, base, path, ir.AccessFlags(), rid),
                        ir.ExpectResult(c, rid, ev.code)]
            parent, name = _split_parent(ev.path)
            pbase, ppath = self._base_and_path(parent)
            prid = self.alloc()
            return [ir.PathRef(c, base, path, ir.AccessFlags(nofollow=True), rid),
                    ir.ExpectResult(c, rid, ir.SUCCESS),
                    ir.PathRef(c, pbase, ppath, ir.AccessFlags(write=True), prid),
                    ir.ExpectResult(c, prid, ir.SUCCESS),
                    ir.RemoveEntry(c, prid, name, rid)]
        if op == "symlink":
            if not ev.created:
                base, path = self._base_and_path(ev.path)
                rid = self.alloc()
                self.path_refs[ev.path] = rid
                return [ir.PathRef(c, base, path, ir.AccessFlags(nofollow=True), rid),
                        ir.ExpectResult(c, rid, ev.code),
                        ir.MatchContent(c, rid, ir.SymlinkState(dest=ev.dest))]
            parent, name = _split_parent(ev.path)
            base, ppath = self._base_and_path(parent)
            prid = self.alloc()
            srid = self.alloc()
            return [ir.PathRef(c, base, ppath, ir.AccessFlags(write=True), prid),
                    ir.ExpectResult(c, prid, ir.SUCCESS),
                    ir.SymlinkRef(c, ev.dest, srid),
                    ir.AddEntry(c, prid, name, srid)]
        if op == "pipe":
            r1 = self.alloc()
            r2 = self.alloc()
            return [ir.PipeRef(c, r1, r2),
                    ir.UsingRef(c, r1), ir.UsingRef(c, r2)]
        if op == "pipe_read":
            return [ir.MatchContent(c, ev.ref,
                                    ir.PipeState(op="read", writer_epoch=ev.epoch))]
        if op == "pipe_write":
            return [ir.UpdateContent(c, ev.ref,
                                     ir.PipeState(op="write", writer_epoch=ev.epoch))]
        if op == "special_read":
            return [ir.MatchContent(c, ev.ref,
                                    ir.SpecialState(policy=ir.ALWAYS_CHANGED))]
        if op == "special_write":
            return [ir.UpdateContent(c, ev.ref,
                                     ir.SpecialState(policy=ir.NEVER_CHANGED))]
        if op == "wait":
            return [ir.Join(c, ev.child),
                    ir.ExitResult(c, ev.child, ev.exit_code)]
        if op == "exit":
            return [ir.Exit(c, ev.exit_code)]
        raise ModelIntegrityError(f"untranslatable event {op!r}")


def _split_parent(path: str) -> tuple[str, str]:
    if "/" in path:
        parent, name = path.rsplit("/", 1)
        return parent or "/", name
    return ".", path


# -- runtime ------------------------------------------------------------------


class Channel:
    """In-memory pipe buffer shared by the evaluator and running tasks."""

    __slots__ = ("artifact_id", "data", "writer_handles", "creator")

    def __init__(self, artifact_id: int, creator: "Task | None"):
        self.artifact_id = artifact_id
        self.data = bytearray()
        self.writer_handles: list[Handle] = []
        self.creator = creator

    def write(self, data: bytes) -> None:
        if len(self.data) + len(data) > PIPE_BUFFER_LIMIT:
            raise DeadlockError("pipe buffer limit exceeded")
        self.data.extend(data)

    def take_all(self) -> bytes:
        out = bytes(self.data)
        del self.data[:]
        return out


class Handle:
    """A spawned child as seen by its parent."""

    __slots__ = ("cmd_id", "name", "task", "exit_code", "skipped")

    def __init__(self, cmd_id: int, name: str, task: "Task | None",
                 exit_code: int | None = None, skipped: bool = False):
        self.cmd_id = cmd_id
        self.name = name
        self.task = task
        self.exit_code = exit_code
        self.skipped = skipped

    @property
    def done(self) -> bool:
        return self.exit_code is not None


class _ExitScript(Exception):
    def __init__(self, code: int):
        self.code = code


class Task:
    """One traced command being interpreted."""

    def __init__(self, cmd_id: int, command: ir.Command, host,
                 wired: dict[int, object]):
        self.cmd_id = cmd_id
        self.command = command
        self.host = host
        self.wired = wired  # fd -> Channel | ("file", canon path)
        self.vars: dict[str, str] = {}
        self.pipes: dict[str, Channel] = {}
        self.children: list[Handle] = []
        self.waited: set[int] = set()
        self.translator = Translator(cmd_id, command, host.content_is_cached)
        self.gen = None
        self.started = False
        self.done = False
        self.exit_code: int | None = None
        self.park = None  # None | ("child", Handle) | ("pipe", Channel)
        self.reply = None

    # -- helpers -----------------------------------------------------------

    def _canon(self, path: str) -> str:
        return canon_path(path, self.command.cwd)

    def _real(self, path: str) -> Path:
        c = self._canon(path)
        return self.host.sandbox / c if c else self.host.sandbox

    def _emit(self, ev: TraceEvent):
        return self.host.handle_event(self, ev)

    def _expand(self, tok: Token) -> list[str]:
        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name == "#":
                return str(len(self.command.argv) - 1)
            if name == "?":
                return self.vars.get("?", "0")
            if name.isdigit():
                idx = int(name)
                return self.command.argv[idx] if idx < len(self.command.argv) else ""
            if name not in self.vars:
                raise _ExitScript(127)
            return self.vars[name]

        text = _VAR_RE.sub(sub, tok.text)
        if tok.quoted:
            return [text]
        return text.split()

    def _expand_all(self, tokens: list[Token]) -> list[str]:
        out: list[str] = []
        for t in tokens:
            out.extend(self._expand(t))
        return out

    def _stream(self, name: str):
        """Resolve @stdin/@stdout/@stderr or a declared pipe name. Returns
        ("pipe", Channel) | ("file", path) | ("special", fd) | None."""
        if name in self.pipes:
            return ("pipe", self.pipes[name])
        if name in ("@stdin", "@stdout", "@stderr"):
            fd = {"@stdin": 0, "@stdout": 1, "@stderr": 2}[name]
            wired = self.wired.get(fd)
            if isinstance(wired, Channel):
                return ("pipe", wired)
            if isinstance(wired, tuple):
                return ("file", wired[1])
            return ("special", fd)
        return None

    # -- filesystem primitives w/ events ------------------------------------

    def _stat_fields(self, real: Path, ev: TraceEvent) -> None:
        st = os.lstat(real)
        ev.size = st.st_size
        ev.mtime_ns = st.st_mtime_ns
        ev.uid = st.st_uid
        ev.gid = st.st_gid
        ev.perms = st.st_mode & 0o777
        if statmod.S_ISDIR(st.st_mode):
            ev.kind = ir.DIR
        elif statmod.S_ISLNK(st.st_mode):
            ev.kind = ir.SYMLINK
        elif statmod.S_ISREG(st.st_mode):
            ev.kind = ir.FILE
        else:
            ev.kind = ir.SPECIAL

    def _open_and_read(self, path: str) -> bytes | None:
        """Open and read a file; a directory records a listing dependency
        and reads as nothing (returns None, like a missing file)."""
        c = self._canon(path)
        self.host.materialize(c)
        real = self._real(path)
        flags = ir.AccessFlags(read=True)
        if real.is_file():
            data = real.read_bytes()
            self._emit(TraceEvent(op="open", path=path, flags=flags))
            ev = TraceEvent(op="read", path=path, data=data)
            self._stat_fields(real, ev)
            self._emit(ev)
            return data
        if real.is_dir():
            names = tuple(sorted(os.listdir(real)))
            self._emit(TraceEvent(op="open", path=path, flags=flags))
            self._emit(TraceEvent(op="list", path=path, names=names))
            return None
        self._emit(TraceEvent(op="open", path=path, flags=flags,
                              code=ir.ENOENT))
        return None

    def _write_file(self, path: str, data: bytes, append: bool) -> bool:
        c = self._canon(path)
        self.host.materialize(c)
        real = self._real(path)
        if append:
            flags = ir.AccessFlags(read=True, write=True, create=True)
        else:
            flags = ir.AccessFlags(write=True, create=True, truncate=True)
        if real.is_dir():
            self._emit(TraceEvent(op="open", path=path, flags=flags,
                                  code=ir.EISDIR))
            return False
        if not real.parent.is_dir():
            self._emit(TraceEvent(op="open", path=path, flags=flags,
                                  code=ir.ENOENT))
            return False
        if append:
            prior = real.read_bytes() if real.is_file() else None
            self._emit(TraceEvent(op="open", path=path, flags=flags))
            if prior is not None:
                ev = TraceEvent(op="read", path=path, data=prior)
                self._stat_fields(real, ev)
                self._emit(ev)
            new = (prior or b"") + data
        else:
            self._emit(TraceEvent(op="open", path=path, flags=flags))
            new = data
        real.write_bytes(new)
        self.host.written(c, new)
        ev = TraceEvent(op="write", path=path, data=new)
        self._stat_fields(real, ev)
        self._emit(ev)
        return True

    # -- instruction execution ------------------------------------------------

    def run(self):
        """Generator body; yields only at blocking points."""
        code = 0
        try:
            real_exe = self.host.sandbox / canon_path(
                self.command.exe, self.command.cwd)
            self.host.materialize(canon_path(self.command.exe, self.command.cwd))
            try:
                program = parse(real_exe.read_text())
            except (OSError, ParseError):
                raise _ExitScript(127)
            for st in self.translator.prologue():
                self.host.handle_statement(self, st)
            yield from self._exec_block(program)
        except _ExitScript as e:
            code = e.code
        yield from self._drain()
        self._emit(TraceEvent(op="exit", exit_code=code))
        self.exit_code = code

    def _drain(self):
        for handle in self.children:
            if handle.cmd_id in self.waited:
                continue
            yield from self._wait_one(handle)

    def _wait_one(self, handle: Handle):
        if not handle.done:
            code = yield ("child", handle)
        else:
            code = handle.exit_code
        self.waited.add(handle.cmd_id)
        self.vars["?"] = str(code)
        self._emit(TraceEvent(op="wait", child=handle.cmd_id, exit_code=code))

    def _exec_block(self, instrs: list[Instr]):
        for instr in instrs:
            yield from self._exec(instr)

    def _exec(self, instr: Instr):
        op = instr.op
        args = self._expand_all(instr.args)

        if op == "SET":
            if not args:
                raise _ExitScript(127)
            self.vars[args[0]] = " ".join(args[1:])
            return

        if op == "EXIT":
            try:
                raise _ExitScript(int(args[0]) if args else 0)
            except ValueError:
                raise _ExitScript(127)

        if op == "PIPE":
            if len(args) != 1:
                raise _ExitScript(127)
            ev = TraceEvent(op="pipe")
            channel = self._emit(ev)
            self.pipes[args[0]] = channel
            return

        if op == "READ":
            into = None
            if len(args) == 3 and args[1] == "INTO":
                into = args[2]
            elif len(args) != 1:
                raise _ExitScript(127)
            data = yield from self._read_source(args[0])
            if into:
                self.vars[into] = (data or b"").decode("utf-8", "replace")
            return

        if op in ("WRITE", "APPEND"):
            if not args:
                raise _ExitScript(127)
            target = args[0]
            content = (" ".join(args[1:]) + "\n").encode()
            stream = self._stream(target)
            if stream is not None:
                self._write_stream(stream, content)
                return
            if not self._write_file(target, content, append=(op == "APPEND")):
                raise _ExitScript(1)
            return

        if op == "STAT":
            if len(args) != 1:
                raise _ExitScript(127)
            path = args[0]
            c = self._canon(path)
            self.host.materialize(c)
            real = self._real(path)
            if os.path.lexists(real):
                self._emit(TraceEvent(op="open", path=path,
                                      flags=ir.AccessFlags()))
                ev = TraceEvent(op="stat", path=path)
                self._stat_fields(real, ev)
                self._emit(ev)
            else:
                self._emit(TraceEvent(op="open", path=path,
                                      flags=ir.AccessFlags(), code=ir.ENOENT))
            return

        if op == "LIST" or op == "GLOB":
            if op == "LIST":
                if len(args) not in (1, 3):
                    raise _ExitScript(127)
                pattern = None
                dirname = args[0]
                into = args[2] if len(args) == 3 else None
            else:
                if len(args) != 3 or args[1] != "INTO":
                    raise _ExitScript(127)
                pattern = args[0]
                into = args[2]
                dirname, _, pattern = pattern.rpartition("/")
                dirname = dirname or "."
            c = self._canon(dirname)
            self.host.materialize(c)
            real = self._real(dirname)
            if not real.is_dir():
                self._emit(TraceEvent(op="open", path=dirname,
                                      flags=ir.AccessFlags(read=True),
                                      code=ir.ENOENT))
                if into:
                    self.vars[into] = ""
                return
            names = tuple(sorted(os.listdir(real)))
            self._emit(TraceEvent(op="open", path=dirname,
                                  flags=ir.AccessFlags(read=True)))
            self._emit(TraceEvent(op="list", path=dirname, names=names))
            if pattern is not None:
                matched = [n for n in names if fnmatch.fnmatchcase(n, pattern)]
                prefix = "" if dirname == "." else dirname.rstrip("/") + "/"
                self.vars[into] = " ".join(prefix + m for m in matched)
            elif into:
                self.vars[into] = " ".join(names)
            return

        if op == "MKDIR":
            if len(args) != 1:
                raise _ExitScript(127)
            path = args[0]
            c = self._canon(path)
            self.host.materialize(c)
            real = self._real(path)
            if real.is_dir():
                self._emit(TraceEvent(op="mkdir", path=path, created=False))
                return
            if not real.parent.is_dir():
                self._emit(TraceEvent(op="mkdir", path=path, created=False,
                                      code=ir.ENOENT))
                raise _ExitScript(1)
            real.mkdir()
            self._emit(TraceEvent(op="mkdir", path=path, created=True))
            return

        if op == "RM":
            if len(args) != 1:
                raise _ExitScript(127)
            path = args[0]
            c = self._canon(path)
            self.host.materialize(c)
            real = self._real(path)
            if not os.path.lexists(real):
                self._emit(TraceEvent(op="unlink", path=path, code=ir.ENOENT))
                return
            if real.is_dir() and not real.is_symlink():
                try:
                    os.rmdir(real)
                except OSError:
                    raise _ExitScript(1)
            else:
                os.unlink(real)
            self._emit(TraceEvent(op="unlink", path=path))
            return

        if op == "SYMLINK":
            if len(args) != 2:
                raise _ExitScript(127)
            dest, name = args
            c = self._canon(name)
            self.host.materialize(c)
            real = self._real(name)
            if os.path.lexists(real):
                cur = os.readlink(real) if real.is_symlink() else ""
                self._emit(TraceEvent(op="symlink", path=name, dest=cur,
                                      created=False))
                return
            if not real.parent.is_dir():
                raise _ExitScript(1)
            os.symlink(dest, real)
            self._emit(TraceEvent(op="symlink", path=name, dest=dest,
                                  created=True))
            return

        if op == "HASHCOPY":
            if len(args) != 2:
                raise _ExitScript(127)
            data = yield from self._read_source(args[0])
            if data is None:
                raise _ExitScript(1)
            kept = [ln for ln in data.decode("utf-8", "replace").splitlines()
                    if not ln.lstrip().startswith("#")]
            digest = hash_bytes("\n".join(kept).encode())
            out = f"obj:{digest}\n".encode()
            if not self._write_file(args[1], out, append=False):
                raise _ExitScript(1)
            return

        if op == "IF-CONTAINS":
            if len(args) != 2:
                raise _ExitScript(127)
            data = yield from self._read_source(args[0])
            text = (data or b"").decode("utf-8", "replace")
            if args[1] in text:
                yield from self._exec_block(instr.block or [])
            return

        if op == "SPAWN":
            yield from self._spawn(args)
            return

        if op == "WAIT":
            if args:
                handle = next((h for h in self.children if h.name == args[0]
                               and h.cmd_id not in self.waited), None)
                if handle is None:
                    raise _ExitScript(127)
                yield from self._wait_one(handle)
            else:
                yield from self._drain()
            return

        raise _ExitScript(127)

    def _read_source(self, source: str):
        """Read a file, pipe, or standard stream. Missing files yield None
        (recorded as an ENOENT outcome)."""
        stream = self._stream(source)
        if stream is None:
            return self._open_and_read(source)
        kind, obj = stream
        if kind == "pipe":
            data = yield ("pipe", obj)
            ev = TraceEvent(op="pipe_read",
                            ref=self._channel_ref(obj),
                            epoch=self.host.pipe_epoch(obj))
            self._emit(ev)
            return data
        if kind == "file":
            return self._open_and_read(obj)
        # special stream: stdin reads are always-changed, yield nothing
        fd = obj
        self._emit(TraceEvent(op="special_read",
                              ref=self.translator.fd_refs[fd]))
        return b""

    def _write_stream(self, stream, content: bytes) -> None:
        kind, obj = stream
        if kind == "pipe":
            obj.write(content)
            self._emit(TraceEvent(op="pipe_write",
                                  ref=self._channel_ref(obj, write=True),
                                  epoch=self.host.pipe_epoch(obj) + 1))
            return
        if kind == "file":
            if not self._write_file(obj, content, append=True):
                raise _ExitScript(1)
            return
        fd = obj
        self._emit(TraceEvent(op="special_write",
                              ref=self.translator.fd_refs[fd]))

    def _channel_ref(self, channel: Channel, write: bool = False) -> int:
        """The acting command's ref id for a channel: its own pipe ref when
        it created the pipe, else the wired fd ref."""
        refs = self.host.pipe_refs(self, channel)
        if refs is not None:
            return refs[1] if write else refs[0]
        for fd, wired in self.wired.items():
            if wired is channel:
                return self.translator.fd_refs[fd]
        raise ModelIntegrityError("write to a pipe this command cannot reach")

    def _spawn(self, args: list[str]):
        name = None
        stdin = None
        stdout = None
        rest = list(args)
        while rest:
            tok = rest[0]
            if tok == "AS" and len(rest) >= 2:
                name = rest[1]
                rest = rest[2:]
                continue
            if tok.startswith("STDIN="):
                stdin = tok[6:]
                rest = rest[1:]
                continue
            if tok.startswith("STDOUT="):
                stdout = tok[7:]
                rest = rest[1:]
                continue
            break
        if not rest:
            raise _ExitScript(127)
        exe = rest[0]
        wired: dict[int, object] = {}
        if stdin is not None:
            if stdin not in self.pipes:
                raise _ExitScript(127)
            wired[0] = self.pipes[stdin]
        if stdout is not None:
            if stdout in self.pipes:
                wired[1] = self.pipes[stdout]
            else:
                # redirect stdout to a file: the parent opens it
                if not self._write_file(stdout, b"", append=False):
                    raise _ExitScript(1)
                wired[1] = ("file", stdout)
        argv = (os.path.basename(exe),) + tuple(rest[1:])
        command = ir.Command(exe=exe, argv=argv, env=self.command.env,
                             cwd=self.command.cwd, root=self.command.root)
        handle = self.host.spawn(self, command, wired)
        handle.name = name or f"child{len(self.children)}"
        self.children.append(handle)
        if stdout is not None and stdout in self.pipes:
            self.pipes[stdout].writer_handles.append(handle)
        return
        yield  # pragma: no cover - makes _spawn a generator


class Scheduler:
    """Cooperative round-robin driver for traced command tasks. Exactly one
    task runs at a time; the delivered event order is the execution order,
    which preserves the serialized-observation contract."""

    def __init__(self):
        self.tasks: list[Task] = []

    def add(self, task: Task) -> None:
        self.tasks.append(task)

    def _runnable(self, task: Task):
        """Returns (True, reply) when the task can take a step."""
        if task.done:
            return (False, None)
        if task.park is None:
            return (True, task.reply)
        kind, obj = task.park
        if kind == "child":
            if obj.done:
                return (True, obj.exit_code)
            return (False, None)
        channel: Channel = obj
        if channel.data:
            return (True, channel.take_all())
        if self._channel_eof(channel):
            return (True, b"")
        return (False, None)

    def _channel_eof(self, channel: Channel) -> bool:
        """A reader sees end-of-stream when the buffer cannot grow: every
        wired writer has exited and the creating command cannot write right
        now (it is done, blocked, or not a running task at all). Pipe
        writes from a creator must precede its blocking points."""
        for h in channel.writer_handles:
            if not h.done:
                return False
        creator = channel.creator
        if creator is None or creator.done or creator.park is not None:
            return True
        return False

    def drive_until(self, cond) -> None:
        while not cond():
            stepped = False
            for task in self.tasks:
                ok, reply = self._runnable(task)
                if not ok:
                    continue
                self._step(task, reply)
                stepped = True
                break
            if not stepped:
                raise DeadlockError(
                    "all commands are blocked on pipes; cannot progress")

    def drive_task(self, task: Task) -> int:
        self.drive_until(lambda: task.done)
        return task.exit_code if task.exit_code is not None else 1

    def drive_all(self) -> None:
        self.drive_until(lambda: all(t.done for t in self.tasks))

    def _step(self, task: Task, reply) -> None:
        try:
            if not task.started:
                task.started = True
                task.gen = task.run()
                request = task.gen.send(None)
            else:
                task.park = None
                request = task.gen.send(reply)
        except StopIteration:
            task.done = True
            task.park = None
            if task.exit_code is None:
                task.exit_code = 0
            handle = getattr(task, "handle", None)
            if handle is not None:
                handle.exit_code = task.exit_code
            return
        task.park = request


def run_traced(command: ir.Command, host) -> tuple[list[TraceEvent], int]:
    """Run one command tree to completion under the given host, returning
    the ordered event stream and the root command's exit code. Used by the
    engine through its own host; handy standalone for tests."""
    events: list[TraceEvent] = []
    original = host.handle_event

    def recording(task, ev):
        events.append(ev)
        return original(task, ev)

    host.handle_event = recording
    try:
        scheduler = host.scheduler
        task = host.make_task(command, {})
        scheduler.add(task)
        code = scheduler.drive_task(task)
    finally:
        host.handle_event = original
    return events, code
