"""Exception hierarchy for tracebuild.

Every error the tool can surface to a user derives from TbldError; the CLI
maps these to exit code 2 (internal/usage error). A failing build command is
not an error in this sense, it is a result (exit code 1).
"""


class TbldError(Exception):
    """Base class for all tracebuild errors."""


class CodecError(TbldError):
    """A statement could not be encoded (e.g. a NUL byte in a name)."""


class CorruptTraceError(CodecError):
    """The trace file is damaged; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedTraceError(CodecError):
    """The trace file has an unknown format version or statement tag."""


class ModelIntegrityError(TbldError):
    """The transcript violated an internal invariant (use of a closed ref,
    join on an unlaunched child). Indicates a tracer bug, not a user change."""


class CacheError(TbldError):
    """The content store failed (e.g. disk full while storing)."""


class CacheMissError(CacheError):
    """A requested cache key is not present and not recreatable."""


class UncommittableError(TbldError):
    """A modeled version cannot be written to disk (pipe, uncached file)."""


class BuildError(TbldError):
    """The build could not be carried out (bad build file, lock held)."""


class DeadlockError(BuildError):
    """All live commands are blocked on pipes; the build cannot progress."""


class TerminationGuardError(BuildError):
    """A command was re-marked more times than the command count allows,
    which indicates nondeterminism beyond weak equivalence."""
