"""Exception hierarchy shared across the package."""

from __future__ import annotations


class NexusError(Exception):
    """Base class for all errors raised by this package."""


# -- wire protocol ----------------------------------------------------------

class ProtocolError(NexusError):
    pass


class OversizeFrame(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class SchemaError(ProtocolError):
    """A JSON body failed validation; names the first offending field."""

    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class HintTooLarge(SchemaError):
    def __init__(self, field: str, size: int, limit: int):
        super().__init__(field, f"size_bytes {size} exceeds configured max {limit}")
        self.size = size
        self.limit = limit


# -- shared memory ----------------------------------------------------------

class CapacityExceeded(NexusError):
    pass


class RegionFull(NexusError):
    pass


class AttachError(NexusError):
    pass


# -- object store -----------------------------------------------------------

class StoreError(NexusError):
    pass


class NotFound(StoreError):
    def __init__(self, bucket: str, key: str):
        super().__init__(f"no such object: {bucket}/{key}")
        self.bucket = bucket
        self.key = key


class InjectedFailure(StoreError):
    pass


# -- backend ----------------------------------------------------------------

class UnknownFunction(NexusError):
    pass


class SpawnError(NexusError):
    pass


class ProvisionFailed(NexusError):
    pass


class PrefetchFailed(NexusError):
    pass


# -- frontend ---------------------------------------------------------------

class TransportError(NexusError):
    pass


class IllegalState(NexusError):
    pass
