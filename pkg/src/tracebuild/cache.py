"""Content-addressed store for file bytes.

Keys are lowercase hex digests (blake2b-256) of the file contents. Bytes
live at <state-dir>/cache/<h[0:2]>/<h[2:4]>/<h[4:6]>/<h>; three two-char
levels keep fan-out at most 256 per level. Empty content is never stored:
it is recreatable on demand and its key is synthesized.

Writes go through a temp file and rename, so store/restore are safe for
concurrent use; gc requires exclusive access.
"""

from __future__ import annotations

import hashlib
import os
import shutil
from pathlib import Path

from .errors import CacheError, CacheMissError

HASH_HEX_LEN = 64

EMPTY_KEY = hashlib.blake2b(b"", digest_size=32).hexdigest()


def hash_bytes(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=32).hexdigest()


def hash_file(path: str | os.PathLike) -> str:
    h = hashlib.blake2b(digest_size=32)
    with open(path, "rb") as f:
        while chunk := f.read(1 << 16):
            h.update(chunk)
    return h.hexdigest()


class Cache:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[0:2] / key[2:4] / key[4:6] / key

    def has(self, key: str) -> bool:
        return key == EMPTY_KEY or self._path(key).is_file()

    def store_bytes(self, data: bytes) -> str:
        key = hash_bytes(data)
        if key == EMPTY_KEY:
            return key  # recreatable on demand, never occupies cache space
        dest = self._path(key)
        if dest.exists():
            return key
        try:
            dest.parent.mkdir(parents=True, exist_ok=True)
            tmp = dest.with_name(dest.name + f".tmp{os.getpid()}")
            tmp.write_bytes(data)
            os.replace(tmp, dest)
        except OSError as e:
            raise CacheError(f"cache store failed: {e}") from e
        return key

    def store(self, path: str | os.PathLike) -> str:
        """Store a file's bytes; idempotent, returns the key."""
        key = hash_file(path)
        if key == EMPTY_KEY:
            return key
        dest = self._path(key)
        if dest.exists():
            return key
        try:
            dest.parent.mkdir(parents=True, exist_ok=True)
            tmp = dest.with_name(dest.name + f".tmp{os.getpid()}")
            shutil.copyfile(path, tmp)
            os.replace(tmp, dest)
        except OSError as e:
            raise CacheError(f"cache store failed: {e}") from e
        return key

    def restore(self, key: str, dest: str | os.PathLike) -> None:
        """Write the cached bytes for key to dest."""
        dest = Path(dest)
        dest.parent.mkdir(parents=True, exist_ok=True)
        if key == EMPTY_KEY:
            dest.write_bytes(b"")
            return
        src = self._path(key)
        if not src.is_file():
            raise CacheMissError(f"cache miss for {key}")
        shutil.copyfile(src, dest)

    def read(self, key: str) -> bytes:
        if key == EMPTY_KEY:
            return b""
        src = self._path(key)
        if not src.is_file():
            raise CacheMissError(f"cache miss for {key}")
        return src.read_bytes()

    def keys(self) -> set[str]:
        found = set()
        if not self.root.is_dir():
            return found
        for dirpath, _dirnames, filenames in os.walk(self.root):
            for name in filenames:
                if len(name) == HASH_HEX_LEN:
                    found.add(name)
        return found

    def gc(self, live: set[str]) -> int:
        """Remove every cached file whose key is not live; prune empty
        prefix directories. Missing files are tolerated."""
        removed = 0
        for key in self.keys() - set(live):
            try:
                os.unlink(self._path(key))
                removed += 1
            except FileNotFoundError:
                pass
        if self.root.is_dir():
            for dirpath, _dirnames, _filenames in os.walk(self.root, topdown=False):
                if Path(dirpath) != self.root:
                    try:
                        os.rmdir(dirpath)  # only succeeds when empty
                    except OSError:
                        pass
        return removed
