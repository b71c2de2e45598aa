from datetime import datetime
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.core.types import DeclaredKeySpec


class DatasetConfig(BaseModel):
    """Definition of a dataset as stored in the catalog."""
    name: str = Field(..., min_length=1)
    primary_key: str
    declared_fields: List[str] = Field(default_factory=list, description="Extra declared root fields.")
    tuple_compactor_enabled: bool = True
    compression: Optional[str] = Field(None, description="Page codec name; None stores plain pages.")
    partitions: int = 4
    memtable_bytes: int = 8 * 1024 * 1024
    merge_max_bytes: int = 64 * 1024 * 1024
    merge_tolerable_count: int = 5
    created_at: Optional[datetime] = None

    model_config = ConfigDict(from_attributes=True)

    @field_validator("primary_key")
    @classmethod
    def _primary_key_present(cls, value: str) -> str:
        if not value or not value.strip():
            raise ValueError("primary key field must be non-empty")
        return value

    @field_validator("partitions")
    @classmethod
    def _at_least_one_partition(cls, value: int) -> int:
        if value < 1:
            raise ValueError("a dataset needs at least one partition")
        return value

    @field_validator("compression")
    @classmethod
    def _normalize_codec(cls, value: Optional[str]) -> Optional[str]:
        if value is None or value.lower() in ("off", "none", ""):
            return None
        from src.services.page_compression import codec_id

        codec_id(value)
        return value.lower()

    @property
    def declared(self) -> DeclaredKeySpec:
        """Declared root fields; the primary key is always index 0."""
        extra = [name for name in self.declared_fields if name != self.primary_key]
        return DeclaredKeySpec.of(self.primary_key, *extra)


class DatasetListResponse(BaseModel):
    name: str
    primary_key: str
    partitions: int
    tuple_compactor_enabled: bool
    compression: Optional[str] = None

    model_config = ConfigDict(from_attributes=True)
