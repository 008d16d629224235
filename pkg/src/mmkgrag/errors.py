"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for every error raised by this package."""


# --- corpus loading ---------------------------------------------------------

class ManifestNotFound(PipelineError):
    """The manifest path does not exist."""


class MalformedManifest(PipelineError):
    """The manifest parsed but violates the documented schema."""


class MissingAsset(PipelineError):
    """A manifest entry points at a file that does not exist."""


# --- graph construction -----------------------------------------------------

class EmptyAfterNormalization(PipelineError):
    """An entity name normalized to the empty string."""


class NoValidRecords(PipelineError):
    """A model reply contained no parseable extraction records."""


class ExtractionFailed(PipelineError):
    """Every page in the corpus failed extraction."""


class EmptyGraph(PipelineError):
    """A graph operation needs at least one entity but the graph has none."""


class DanglingEndpoint(PipelineError):
    """A relation references an entity absent from its graph."""


class InvalidGraphFile(PipelineError):
    """A graph artifact on disk is unparseable or breaks a graph invariant."""


class UnknownSeed(PipelineError):
    """A seed name passed to expansion is not in the graph.

    Expansion itself skips unknown seeds with a warning; this error exists
    for callers that want the strict behaviour.
    """


# --- model backends ---------------------------------------------------------

class BackendError(PipelineError):
    """Base class for failures talking to a model backend."""


class BackendUnavailable(BackendError):
    """The backend is unreachable or returned a server-side failure."""


class RateLimited(BackendError):
    """The backend rejected the call for quota reasons."""


class ResponseEmpty(BackendError):
    """The backend produced no usable content for a request."""


class DimensionMismatch(BackendError):
    """An embedding does not match the configured dimensionality."""


class InvalidVector(BackendError):
    """An embedding contains non-finite values or has zero norm."""


class UnreadableImage(PipelineError):
    """An image file could not be read from disk."""


# --- indexing and retrieval -------------------------------------------------

class EmptyIndex(PipelineError):
    """A retrieval call hit a vector store with no records."""


class InvalidStoreFile(PipelineError):
    """A vector-store artifact on disk is unreadable or inconsistent."""


class IndexBuildError(PipelineError):
    """Embedding failed partway through an indexing run.

    Attributes:
        partial: the store (or tuple of stores) holding every record that
            was embedded before the failure; pass it back as ``previous``
            to resume without re-embedding.
        failed_key: key of the record whose embedding call failed.
    """

    def __init__(self, message: str, partial=None, failed_key=None):
        super().__init__(message)
        self.partial = partial
        self.failed_key = failed_key


# --- generation and evaluation ----------------------------------------------

class GenerationShortfall(PipelineError):
    """A generation stage produced fewer items than required after retry."""


class UnparseableVerdict(PipelineError):
    """A judge reply could not be parsed after retry."""


class InvalidAnswerFile(PipelineError):
    """An answers file (JSONL) is unreadable or misses required fields."""


# --- configuration and CLI --------------------------------------------------

class ConfigInvalid(PipelineError):
    """A configuration value is out of range or of the wrong type."""


class MissingPrerequisite(PipelineError):
    """A command needs an artifact that an earlier stage has not produced."""
