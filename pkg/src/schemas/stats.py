from typing import List, Optional

from pydantic import BaseModel, Field


class EncodingSize(BaseModel):
    """Size of the live records under one storage encoding."""
    encoding: str = Field(..., description="open | inferred")
    uncompressed_bytes: int
    compressed_bytes: int


class ComponentStats(BaseModel):
    partition: int
    component: str
    entry_count: int
    record_count: int
    size_bytes: int


class StatsReport(BaseModel):
    dataset: str
    live_records: int
    codec: Optional[str] = None
    encodings: List[EncodingSize] = Field(default_factory=list)
    components: List[ComponentStats] = Field(default_factory=list)
    total_component_bytes: int = 0
    schema_nodes: int = 0
    dictionary_entries: int = 0
    dictionary_bytes: int = 0

    def encoding(self, name: str) -> EncodingSize:
        return next(e for e in self.encodings if e.encoding == name)
