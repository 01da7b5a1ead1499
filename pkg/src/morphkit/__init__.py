"""Diffeomorphic metric distances and longitudinal morphometry statistics."""

__version__ = "0.1.0"

from .errors import MorphkitError  # noqa: E402
from .lddmm import LddmmParams, register  # noqa: E402
from .longitudinal import load_table, parse_table  # noqa: E402
from .volume import Volume3D, read_mvol, write_mvol  # noqa: E402

__all__ = ["__version__", "MorphkitError", "LddmmParams", "register", "load_table", "parse_table",
           "Volume3D", "read_mvol", "write_mvol"]
