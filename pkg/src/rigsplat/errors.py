"""Exception types shared across the package.

Data-shaped failures (bad files, bad manifests, bad checkpoints) derive
from DataError so the CLI can map them to one exit code; numerical
failures (non-finite losses or gradients) get their own class.
"""


class RigsplatError(Exception):
    """Base class for everything raised deliberately by this package."""


class DataError(RigsplatError):
    """Malformed or inconsistent input data (files, manifests, arrays).

    `code` is a short machine-readable tag for the specific failure
    (e.g. "non_triangular", "checksum") so callers can branch without
    parsing messages.
    """

    def __init__(self, message, code="data"):
        super().__init__(message)
        self.code = code


class MeshError(DataError):
    """Mesh file or topology problem; message carries the line number."""


class ManifestError(DataError):
    """Dataset manifest is missing fields or internally inconsistent."""


class CheckpointError(DataError):
    """Checkpoint bytes are unreadable: magic, version, or checksum."""


class ImageIOError(DataError):
    """Image file could not be read or written as requested."""


class NumericalError(RigsplatError):
    """A finite quantity came out non-finite; aborts the current step."""


class InvalidStateError(RigsplatError):
    """Backward called with state that does not match the forward pass."""
