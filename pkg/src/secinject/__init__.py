"""Functionality-preserving section injection for PE32 executables, plus an
image-based GIST+KNN family classifier and the experiment harness used to
measure how injection degrades it."""

from .errors import SecInjectError
from .injector import InjectionConfig, InjectionRecord, PayloadKind, inject_sections
from .pe_core import PeFile, parse_pe, serialize_pe, validate

__version__ = "0.1.0"

__all__ = [
    "InjectionConfig", "InjectionRecord", "PayloadKind", "PeFile", "SecInjectError",
    "inject_sections", "parse_pe", "serialize_pe", "validate",
]
