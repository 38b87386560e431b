"""Invocation templates: matching a new command launch against a recorded
one, modulo temporary file names.

Temp names are often random, so argv tokens under a temp root are replaced
with TMP0, TMP1, ... in first-appearance order before comparison. Two argv
lists differing in any non-temp token produce different templates. When a
recorded command read temp content, a candidate invocation only matches if
the content behind its corresponding temp token is identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import ir


def canon_path(path: str, cwd: str = "") -> str:
    """Sandbox-relative canonical form of an instruction path. Absolute
    paths are jailed at the sandbox root."""
    if path.startswith("/"):
        parts: list[str] = []
        raw = path.split("/")
    else:
        parts = [p for p in cwd.split("/") if p]
        raw = path.split("/")
    for comp in raw:
        if comp in ("", "."):
            continue
        if comp == "..":
            if parts:
                parts.pop()
            continue
        parts.append(comp)
    return "/".join(parts)


def is_temp_path(path: str, temp_roots: tuple[str, ...], cwd: str = "") -> bool:
    c = canon_path(path, cwd)
    for root in temp_roots:
        if c == root or c.startswith(root + "/"):
            return True
    return False


def _looks_like_path(token: str) -> bool:
    return "/" in token


@dataclass(frozen=True)
class InvocationTemplate:
    exe: str
    normalized_argv: tuple[str, ...]
    env: tuple[tuple[str, str], ...]
    cwd: str
    root: str
    temp_tokens: tuple[str, ...] = ()  # original paths behind TMP0, TMP1, ...
    # (TMP index, content key) for temp inputs the command previously read
    required_temp_content: tuple[tuple[int, str], ...] = ()

    def key(self) -> tuple:
        return (self.exe, self.normalized_argv, self.env, self.cwd, self.root)


def normalize(command: ir.Command, temp_roots: tuple[str, ...],
              ignored_env: frozenset[str] = frozenset()) -> InvocationTemplate:
    temp_order: list[str] = []
    seen: dict[str, int] = {}
    normalized = []
    for token in command.argv:
        if _looks_like_path(token) and is_temp_path(token, temp_roots, command.cwd):
            canon = canon_path(token, command.cwd)
            if canon not in seen:
                seen[canon] = len(temp_order)
                temp_order.append(token)
            normalized.append(f"TMP{seen[canon]}")
        else:
            normalized.append(token)
    env = tuple((k, v) for k, v in command.env if k not in ignored_env)
    return InvocationTemplate(
        exe=command.exe, normalized_argv=tuple(normalized), env=env,
        cwd=command.cwd, root=command.root, temp_tokens=tuple(temp_order))


def temp_rewrite_map(stored: InvocationTemplate, incoming: InvocationTemplate
                     ) -> dict[str, str]:
    """Map recorded temp paths (canonical) to the new invocation's paths for
    each TMP position. Only exact-token paths are rewritten; derived names a
    script builds internally stay as recorded, which at worst forces the
    consumer to run."""
    mapping: dict[str, str] = {}
    for old, new in zip(stored.temp_tokens, incoming.temp_tokens):
        old_c = canon_path(old, stored.cwd)
        new_c = canon_path(new, incoming.cwd)
        if old_c != new_c:
            mapping[old_c] = new_c
    return mapping


class TemplateIndex:
    """Templates for every command in a loaded trace. When several recorded
    commands share a template, the most recent trace occurrence wins."""

    def __init__(self, temp_roots: tuple[str, ...],
                 ignored_env: frozenset[str] = frozenset()):
        self.temp_roots = temp_roots
        self.ignored_env = ignored_env
        self._by_key: dict[tuple, int] = {}
        self._templates: dict[int, InvocationTemplate] = {}

    def add(self, cmd_id: int, command: ir.Command,
            required_temp_content: tuple[tuple[int, str], ...] = ()) -> None:
        tpl = normalize(command, self.temp_roots, self.ignored_env)
        tpl = InvocationTemplate(
            exe=tpl.exe, normalized_argv=tpl.normalized_argv, env=tpl.env,
            cwd=tpl.cwd, root=tpl.root, temp_tokens=tpl.temp_tokens,
            required_temp_content=required_temp_content)
        self._templates[cmd_id] = tpl
        self._by_key[tpl.key()] = cmd_id

    def template_of(self, cmd_id: int) -> InvocationTemplate | None:
        return self._templates.get(cmd_id)

    def lookup(self, command: ir.Command) -> tuple[int, InvocationTemplate] | None:
        """Find the recorded command matching an invocation, or None."""
        tpl = normalize(command, self.temp_roots, self.ignored_env)
        cmd_id = self._by_key.get(tpl.key())
        if cmd_id is None:
            return None
        return cmd_id, tpl
