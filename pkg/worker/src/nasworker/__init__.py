"""Evaluation worker speaking the JSON-lines architecture-scoring protocol."""

from .arch import ArchSpec, GenotypeError, GenotypeNet, parse_genotype
from .serve import evaluate_request, handle_line, serve

__all__ = [
    "ArchSpec",
    "GenotypeError",
    "GenotypeNet",
    "parse_genotype",
    "evaluate_request",
    "handle_line",
    "serve",
]
