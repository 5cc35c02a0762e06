"""Exception hierarchy shared by every perturbex module.

Each category carries the process exit code the CLI reports for it.
"""

from __future__ import annotations

EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_IO = 4


class PerturbexError(Exception):
    """Base class for all engine errors."""

    exit_code = 1
    category = "internal"


class ConfigError(PerturbexError):
    exit_code = EXIT_CONFIG
    category = "config"


class ManifestError(ConfigError):
    """Dataset manifest is missing or malformed."""

    def __init__(self, message: str, *, index: int | None = None) -> None:
        if index is not None:
            message = f"entry {index}: {message}"
        super().__init__(message)
        self.index = index


class PromptError(ConfigError):
    pass


class SweepError(ConfigError):
    pass


class AnnotationError(ConfigError):
    pass


class BackendError(PerturbexError):
    exit_code = EXIT_BACKEND
    category = "backend"


class BackendTimeoutError(BackendError):
    pass


class ServiceError(BackendError):
    pass


class MalformedResponseError(BackendError):
    """Backend answered with something that does not match the wire schema."""

    EXCERPT_CHARS = 200

    def __init__(self, message: str, payload: str | bytes = "") -> None:
        if isinstance(payload, bytes):
            payload = payload.decode("utf-8", errors="replace")
        self.excerpt = payload[: self.EXCERPT_CHARS]
        super().__init__(f"{message} (payload: {self.excerpt!r})")


class ImageIOError(PerturbexError):
    exit_code = EXIT_IO
    category = "io"


class UnsupportedFormatError(ImageIOError):
    pass


class DimensionMismatchError(PerturbexError, ValueError):
    category = "dimension"


class NotApplicableError(PerturbexError):
    """The perturbation has nothing to edit for this image."""

    category = "not_applicable"


class PerturbationError(PerturbexError):
    """A backend failure raised while applying one perturbation."""

    exit_code = EXIT_BACKEND
    category = "backend"

    def __init__(self, message: str, *, image_id: str | None, spec_label: str) -> None:
        super().__init__(f"[{image_id or '?'} / {spec_label}] {message}")
        self.image_id = image_id
        self.spec_label = spec_label


class MetricsError(PerturbexError, ValueError):
    category = "metrics"
