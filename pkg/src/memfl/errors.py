"""Exception hierarchy shared by all memfl modules.

Every error carries a short machine-readable ``code`` so the CLI can print
``error[<code>]: <message>`` and pick an exit status without string matching.
"""

from __future__ import annotations


class MemflError(Exception):
    code = "error"
    exit_code = 1


class ValidationError(MemflError):
    code = "validation"


class MalformedRef(ValidationError):
    code = "malformed_ref"


class NotFound(MemflError):
    code = "not_found"


class Ambiguous(MemflError):
    code = "ambiguous"


class ManifestInvalid(ValidationError):
    code = "manifest_invalid"

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class IndexingError(ValidationError):
    """Raised by the builtin indexer when brace structure cannot be recovered."""

    code = "index_error"


class UnresolvedCoverage(ValidationError):
    code = "unresolved_coverage"


class InvalidInput(ValidationError):
    code = "invalid_input"


class CorruptMemoryFile(ValidationError):
    code = "corrupt_memory"


class UnparseableSelection(MemflError):
    code = "unparseable_selection"


class MissingPatch(ValidationError):
    code = "missing_patch"


class InvalidBatch(ValidationError):
    code = "invalid_batch"


class LeakageError(ValidationError):
    code = "leakage"


class MissingTruth(ValidationError):
    code = "missing_truth"


class ProviderError(MemflError):
    code = "provider"
    exit_code = 2


class ProviderUnavailable(ProviderError):
    code = "provider_unavailable"


class CassetteMiss(ProviderError):
    code = "cassette_miss"

    def __init__(self, tag: str, prompt_hash: str):
        super().__init__(f"no cassette entry for tag={tag!r} prompt_hash={prompt_hash}")
        self.tag = tag
        self.prompt_hash = prompt_hash


class ScriptExhausted(ProviderError):
    code = "script_exhausted"
