"""Batch scheduling for a two-stage production line with a central buffer."""

from batchsched.instance import (
    FasSchedule,
    GeneratorParams,
    InfeasibleParamsError,
    Instance,
    InstanceFormatError,
    InstanceValidationError,
    desk_params,
    full_params,
    generate,
    load,
    save,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "FasSchedule",
    "GeneratorParams",
    "InfeasibleParamsError",
    "Instance",
    "InstanceFormatError",
    "InstanceValidationError",
    "desk_params",
    "full_params",
    "generate",
    "load",
    "save",
    "validate",
    "__version__",
]
