"""Boundless unsupervised domain adaptation for per-pixel segmentation on synthetic grids."""

__version__ = "0.1.0"

from .errors import BudaError, ContractError, FormatError, NumericError, ScheduleExhausted, ShapeError  # noqa: E402,F401
