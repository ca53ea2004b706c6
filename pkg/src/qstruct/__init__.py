"""Structure-relative and Bohmian simulation of the Stern-Gerlach atom."""

from qstruct.errors import QstructError
from qstruct.structure import (
    LinearStructureMap,
    cm_relative_map,
    compose,
    invert,
    jacobian_abs,
    make_map,
)

__version__ = "0.1.0"

__all__ = [
    "LinearStructureMap",
    "QstructError",
    "cm_relative_map",
    "compose",
    "invert",
    "jacobian_abs",
    "make_map",
]
