"""Streaming binary codec for build transcripts.

On-disk format: 4-byte magic "TBLD", 4-byte little-endian format version,
then one record per statement. A record is a 1-byte kind tag, a 1-byte flag
byte (bit 0 = post-build phase), and the statement's fields in declared
order. Strings are UTF-8 with a 32-bit length prefix; integers are fixed
width little-endian. Records are self-delimiting, so the reader needs
memory proportional to the largest single record, never to trace length.

Trace replacement is atomic: the writer targets a temp file and renames it
into place on close, so an interrupted build never corrupts the previous
transcript.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Iterable, Iterator

from .errors import CodecError, CorruptTraceError, UnsupportedTraceError
from . import ir

MAGIC = b"TBLD"
FORMAT_VERSION = 1

_TAGS: list[type] = [
    ir.PathRef, ir.FileRef, ir.DirRef, ir.PipeRef, ir.SymlinkRef,
    ir.SpecialRef, ir.CompareRefs, ir.ExpectResult, ir.MatchMetadata,
    ir.MatchContent, ir.ExitResult, ir.UpdateMetadata, ir.UpdateContent,
    ir.AddEntry, ir.RemoveEntry, ir.Launch, ir.Join, ir.UsingRef,
    ir.DoneWithRef, ir.Exit,
]
_TAG_OF = {cls: i + 1 for i, cls in enumerate(_TAGS)}
_CLS_OF = {i + 1: cls for i, cls in enumerate(_TAGS)}

# Field schemas, in declared field order. 'owner' is implicit first.
_SCHEMAS = {
    ir.PathRef: (("base", "u32"), ("path", "str"), ("flags", "flags"), ("ref", "u32")),
    ir.FileRef: (("ref", "u32"),),
    ir.DirRef: (("ref", "u32"),),
    ir.PipeRef: (("read_ref", "u32"), ("write_ref", "u32")),
    ir.SymlinkRef: (("dest", "str"), ("ref", "u32")),
    ir.SpecialRef: (("which", "str"), ("ref", "u32")),
    ir.CompareRefs: (("ref1", "u32"), ("ref2", "u32"), ("relation", "u8")),
    ir.ExpectResult: (("ref", "u32"), ("expected", "u8")),
    ir.MatchMetadata: (("ref", "u32"), ("state", "meta")),
    ir.MatchContent: (("ref", "u32"), ("state", "content")),
    ir.ExitResult: (("child", "u32"), ("expected_code", "i64")),
    ir.UpdateMetadata: (("ref", "u32"), ("state", "meta")),
    ir.UpdateContent: (("ref", "u32"), ("state", "content")),
    ir.AddEntry: (("dir", "u32"), ("name", "name"), ("target", "u32")),
    ir.RemoveEntry: (("dir", "u32"), ("name", "name"), ("target", "u32")),
    ir.Launch: (("child", "u32"), ("command", "command")),
    ir.Join: (("child", "u32"),),
    ir.UsingRef: (("ref", "u32"),),
    ir.DoneWithRef: (("ref", "u32"),),
    ir.Exit: (("code", "i64"),),
}

_CONTENT_TAGS = {ir.FileState: 1, ir.DirState: 2, ir.SymlinkState: 3,
                 ir.PipeState: 4, ir.SpecialState: 5}


class _Writer:
    def __init__(self, sink: BinaryIO):
        self.sink = sink
        self.written = 0

    def raw(self, b: bytes):
        self.sink.write(b)
        self.written += len(b)

    def u8(self, v: int):
        self.raw(struct.pack("<B", v))

    def u32(self, v: int):
        self.raw(struct.pack("<I", v))

    def i64(self, v: int):
        self.raw(struct.pack("<q", v))

    def u64(self, v: int):
        self.raw(struct.pack("<Q", v))

    def boolean(self, v: bool):
        self.u8(1 if v else 0)

    def string(self, v: str, field: str):
        if "\x00" in v:
            raise CodecError(f"field {field!r} contains a NUL byte")
        data = v.encode("utf-8")
        self.u32(len(data))
        self.raw(data)


class _Reader:
    def __init__(self, source: BinaryIO):
        self.source = source
        self.offset = 0

    def raw(self, n: int) -> bytes:
        data = self.source.read(n)
        self.offset += len(data)
        if len(data) != n:
            raise CorruptTraceError("truncated record", self.offset)
        return data

    def u8(self) -> int:
        return self.raw(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.raw(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.raw(8))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.raw(8))[0]

    def boolean(self) -> bool:
        return self.u8() != 0

    def string(self) -> str:
        n = self.u32()
        return self.raw(n).decode("utf-8")


def _encode_flags(w: _Writer, f: ir.AccessFlags):
    bits = (f.read | f.write << 1 | f.execute << 2 | f.create << 3
            | f.exclusive << 4 | f.truncate << 5 | f.nofollow << 6)
    w.u8(bits)
    w.u32(f.create_mode)


def _decode_flags(r: _Reader) -> ir.AccessFlags:
    bits = r.u8()
    mode = r.u32()
    return ir.AccessFlags(
        read=bool(bits & 1), write=bool(bits & 2), execute=bool(bits & 4),
        create=bool(bits & 8), exclusive=bool(bits & 16),
        truncate=bool(bits & 32), nofollow=bool(bits & 64), create_mode=mode)


def _encode_meta(w: _Writer, m: ir.MetadataState):
    w.i64(m.uid)
    w.i64(m.gid)
    w.string(m.kind, "kind")
    w.u32(m.perms)


def _decode_meta(r: _Reader) -> ir.MetadataState:
    return ir.MetadataState(uid=r.i64(), gid=r.i64(), kind=r.string(),
                            perms=r.u32())


def _encode_content(w: _Writer, s):
    tag = _CONTENT_TAGS.get(type(s))
    if tag is None:
        raise CodecError(f"unencodable content state {type(s).__name__}")
    w.u8(tag)
    if isinstance(s, ir.FileState):
        w.string(s.hash, "hash")
        w.u64(s.size)
        w.i64(s.mtime_ns)
        w.boolean(s.cached)
    elif isinstance(s, ir.DirState):
        w.u32(len(s.entries))
        for name in s.entries:
            w.string(name, "entries")
    elif isinstance(s, ir.SymlinkState):
        w.string(s.dest, "dest")
    elif isinstance(s, ir.PipeState):
        w.string(s.op, "op")
        w.u64(s.writer_epoch)
    else:
        w.u8(s.policy)


def _decode_content(r: _Reader):
    tag = r.u8()
    if tag == 1:
        return ir.FileState(hash=r.string(), size=r.u64(), mtime_ns=r.i64(),
                            cached=r.boolean())
    if tag == 2:
        return ir.DirState(entries=tuple(r.string() for _ in range(r.u32())))
    if tag == 3:
        return ir.SymlinkState(dest=r.string())
    if tag == 4:
        return ir.PipeState(op=r.string(), writer_epoch=r.u64())
    if tag == 5:
        return ir.SpecialState(policy=r.u8())
    raise CorruptTraceError(f"unknown content state tag {tag}", r.offset)


def _encode_command(w: _Writer, c: ir.Command):
    w.string(c.exe, "exe")
    w.u32(len(c.argv))
    for a in c.argv:
        w.string(a, "argv")
    w.u32(len(c.env))
    for k, v in c.env:
        w.string(k, "env key")
        w.string(v, "env value")
    w.string(c.cwd, "cwd")
    w.string(c.root, "root")
    w.u32(len(c.initial_fds))
    for fd, ref in c.initial_fds:
        w.u32(fd)
        w.u32(ref)


def _decode_command(r: _Reader) -> ir.Command:
    exe = r.string()
    argv = tuple(r.string() for _ in range(r.u32()))
    env = tuple((r.string(), r.string()) for _ in range(r.u32()))
    cwd = r.string()
    root = r.string()
    fds = tuple((r.u32(), r.u32()) for _ in range(r.u32()))
    return ir.Command(exe=exe, argv=argv, env=env, cwd=cwd, root=root,
                      initial_fds=fds)


_FIELD_ENCODERS = {
    "u8": lambda w, v: w.u8(v),
    "u32": lambda w, v: w.u32(v),
    "i64": lambda w, v: w.i64(v),
    "flags": _encode_flags,
    "meta": _encode_meta,
    "content": _encode_content,
    "command": _encode_command,
}

_FIELD_DECODERS = {
    "u8": lambda r: r.u8(),
    "u32": lambda r: r.u32(),
    "i64": lambda r: r.i64(),
    "flags": _decode_flags,
    "meta": _decode_meta,
    "content": _decode_content,
    "command": _decode_command,
}


def encode_statement(stmt: ir.Statement, sink: BinaryIO,
                     phase: int = ir.PRE_BUILD) -> int:
    """Write one self-delimiting record; returns bytes written."""
    tag = _TAG_OF.get(type(stmt))
    if tag is None:
        raise CodecError(f"unencodable statement {type(stmt).__name__}")
    w = _Writer(sink)
    w.u8(tag)
    w.u8(phase & 1)
    w.u32(stmt.owner)
    for name, kind in _SCHEMAS[type(stmt)]:
        value = getattr(stmt, name)
        if kind == "str" or kind == "name":
            if kind == "name" and "/" in value:
                raise CodecError(f"field {name!r} contains '/'")
            w.string(value, name)
        else:
            _FIELD_ENCODERS[kind](w, value)
    return w.written


def decode_statement(source: BinaryIO) -> ir.Record | None:
    """Decode the next record, or return None at end of trace."""
    r = _Reader(source)
    first = source.read(1)
    if first == b"":
        return None
    r.offset += 1
    tag = first[0]
    cls = _CLS_OF.get(tag)
    if cls is None:
        raise UnsupportedTraceError(f"unknown statement tag {tag}")
    phase = r.u8() & 1
    owner = r.u32()
    values = {"owner": owner}
    for name, kind in _SCHEMAS[cls]:
        if kind in ("str", "name"):
            values[name] = r.string()
        else:
            values[name] = _FIELD_DECODERS[kind](r)
    return ir.Record(cls(**values), phase)


class TraceReader:
    """Streams records from a trace file. Iterating holds only one record
    in memory at a time."""

    def __init__(self, source: BinaryIO):
        self.source = source
        header = source.read(8)
        if len(header) == 0:
            self.empty = True
            return
        self.empty = False
        if len(header) < 8 or header[:4] != MAGIC:
            raise CorruptTraceError("bad trace magic", 0)
        version = struct.unpack("<I", header[4:])[0]
        if version != FORMAT_VERSION:
            raise UnsupportedTraceError(f"unsupported trace version {version}")

    def __iter__(self) -> Iterator[ir.Record]:
        if self.empty:
            return
        while True:
            rec = decode_statement(self.source)
            if rec is None:
                return
            yield rec


def open_trace(path: str | os.PathLike) -> list[ir.Record]:
    """Load a trace. A missing file is an empty trace, not an error."""
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        return []
    with f:
        return list(TraceReader(f))


def iter_trace(path: str | os.PathLike) -> Iterator[ir.Record]:
    """Stream a trace without materializing it."""
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        return
    with f:
        yield from TraceReader(f)


def write_trace(path: str | os.PathLike, records: Iterable[ir.Record]) -> None:
    """Write a trace atomically (temp file + rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        for rec in records:
            encode_statement(rec.stmt, f, rec.phase)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def encoded_size(stmt: ir.Statement, phase: int = ir.PRE_BUILD) -> int:
    buf = io.BytesIO()
    return encode_statement(stmt, buf, phase)
