"""Lexer, parser and formatter for ``.iotecs`` simulation specifications."""
from .ast import (
    CloudDecl,
    DeviceDecl,
    Duration,
    EdgeDeviceDecl,
    PayloadSpec,
    PlatformDecl,
    Ref,
    SimNodeDecl,
    SimulatorDecl,
    Span,
    SpecAst,
)
from .lexer import Token, tokenize
from .parser import parse
from .printer import format_spec

# ``print`` is the public name of the formatter; keep the builtin reachable.
print = format_spec  # noqa: A001

__all__ = [
    "CloudDecl",
    "DeviceDecl",
    "Duration",
    "EdgeDeviceDecl",
    "PayloadSpec",
    "PlatformDecl",
    "Ref",
    "SimNodeDecl",
    "SimulatorDecl",
    "Span",
    "SpecAst",
    "Token",
    "format_spec",
    "parse",
    "print",
    "tokenize",
]
