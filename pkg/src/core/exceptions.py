class VBStoreError(Exception):
    """Base class for every error raised by the storage engine."""


class RecordEncodeError(VBStoreError):
    """A document cannot be represented in the vector-based format."""


class RecordFormatError(VBStoreError):
    """A byte image is not a well-formed vector-based record."""


class SchemaError(VBStoreError):
    """Schema inference or maintenance hit an inconsistent state."""


class SchemaCorruptError(SchemaError):
    """A persisted schema blob cannot be decoded."""


class DuplicateKeyError(VBStoreError):
    """Strict insert of a primary key that is already live."""


class KeyExtractionError(VBStoreError):
    """A document has no usable primary key."""


class WalCorruptError(VBStoreError):
    """A write-ahead log record failed its checksum or framing."""


class ComponentCorruptError(VBStoreError):
    """A VALID component has an unreadable metadata region."""

    def __init__(self, component: str, reason: str):
        super().__init__(f"component {component} is corrupt: {reason}")
        self.component = component
        self.reason = reason


class PageCorruptError(VBStoreError):
    """A compressed page does not decompress to a full logical page."""


class PageOrderError(VBStoreError):
    """Pages of a write-once file were written out of order."""


class PlanError(VBStoreError):
    """A query plan document cannot be planned."""


class SchemaRegistryError(VBStoreError):
    """A partition schema was needed but never broadcast."""


class DatasetNotFoundError(VBStoreError):
    """The named dataset is not in the catalog."""


class DatasetExistsError(VBStoreError):
    """The named dataset is already in the catalog."""


class SimulatedCrash(VBStoreError):
    """Raised by an armed crash point when running in-process."""

    def __init__(self, point: str):
        super().__init__(f"simulated crash at {point}")
        self.point = point
