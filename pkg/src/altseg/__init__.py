"""Unpaired CT/MR volumetric segmentation with frozen text-prompt conditioning
and strictly alternating per-modality training."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    ClassTable,
    LabelMask,
    Modality,
    PatchBatch,
    Volume,
    make_class_table,
    one_hot_mask,
)
from .errors import (  # noqa: F401
    AltsegError,
    CompatibilityError,
    ConfigError,
    FormatError,
    ModalityError,
    ProtocolError,
    ShapeError,
    TrainingDivergedError,
    ValidationError,
)
