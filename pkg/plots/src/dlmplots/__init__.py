"""Figure rendering for dlmscope CSV exports."""

__version__ = "0.1.0"

from .figures import render
from .specfile import FigureSpec, SpecError, parse_spec

__all__ = ["FigureSpec", "SpecError", "parse_spec", "render"]
