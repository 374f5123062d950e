"""CLI package for PCP-MAE."""

from .interface import CommandLineInterface, build_parser

__all__ = ["CommandLineInterface", "build_parser"]
