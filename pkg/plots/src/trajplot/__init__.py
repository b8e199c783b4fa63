"""Batch figure rendering from experiment CSV logs."""

from .figures import (EmptyInputError, FigureSpec, SchemaError, aggregate,
                      read_rows, render)

__all__ = ["EmptyInputError", "FigureSpec", "SchemaError", "aggregate",
           "read_rows", "render"]
