from typing import Any, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class RefSpec(BaseModel):
    """A path expression (or ``$var``) bound to an output name."""
    ref: str
    as_: str = Field(..., alias="as")

    model_config = ConfigDict(populate_by_name=True)


class UnnestSpec(BaseModel):
    path: str = Field(..., description="Path with exactly one [*] step.")
    as_: str = Field(..., alias="as")

    model_config = ConfigDict(populate_by_name=True)


class PredicateSpec(BaseModel):
    ref: str
    op: Literal["=", "!=", "<", "<=", ">", ">=", "exists"]
    value: Any = None


class AggregateSpec(BaseModel):
    fn: Literal["COUNT", "SUM", "AVG", "MIN", "MAX"]
    ref: Optional[str] = Field(None, description="COUNT without a ref counts rows.")
    as_: str = Field(..., alias="as")

    model_config = ConfigDict(populate_by_name=True)

    @model_validator(mode="after")
    def _ref_required(self):
        if self.fn != "COUNT" and self.ref is None:
            raise ValueError(f"{self.fn} needs a ref")
        return self


class GroupBySpec(BaseModel):
    keys: List[RefSpec] = Field(default_factory=list)
    aggregates: List[AggregateSpec] = Field(default_factory=list)


class OrderSpec(BaseModel):
    field: str
    desc: bool = False


class QuerySpec(BaseModel):
    """Structured query document accepted by the ``query`` command."""
    dataset: str
    unnest: Optional[UnnestSpec] = None
    where: List[PredicateSpec] = Field(default_factory=list)
    group_by: Optional[GroupBySpec] = None
    select: Optional[List[RefSpec]] = None
    order_by: List[OrderSpec] = Field(default_factory=list)
    limit: Optional[int] = Field(None, ge=0)
    pushdown: Optional[bool] = Field(None, description="Overrides the configured pushdown mode.")

    @model_validator(mode="after")
    def _one_output_shape(self):
        if self.group_by is not None and self.select is not None:
            raise ValueError("a query has either group_by or select, not both")
        if self.group_by is None and self.select is None:
            raise ValueError("a query needs group_by or select")
        return self
