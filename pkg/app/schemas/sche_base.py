from pydantic import BaseModel, ConfigDict


class ConfigSchemaBase(BaseModel):
    """Base for every config section: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ArraySchemaBase(BaseModel):
    """Base for in-memory domain records holding numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)
