"""Checkpoints, reports, ablations and the command-line interface."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .cli import build_parser, main
from .experiments import run_ablation, strict_subsets
from .report import RunReport, canonical_json, format_table

__all__ = [
    "Checkpoint",
    "RunReport",
    "build_parser",
    "canonical_json",
    "format_table",
    "load_checkpoint",
    "main",
    "run_ablation",
    "save_checkpoint",
    "strict_subsets",
]
