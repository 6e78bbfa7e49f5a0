"""Exact and approximate simulation of long-context transformers with a length-capped oracle."""
from .estimators import OracleSimulator, ReferenceTransformer
from .exceptions import (
    ConfigurationError,
    DegenerateRatioError,
    NonFiniteError,
    OracleSimError,
    RestrictionError,
    ShapeError,
)
from .harness import SimulationReport, run
from .instances import RunConfig, generate_instance, preset
from .oracle import CallLedger, Oracle, OracleCapacity, Workbench, audit_restriction
from .reference import HeadParams, Layer, TransformerParams, attention_head, transformer_forward
from .reverse import ReverseConfig, reverse_simulate
from .sim_linear import BoundednessProfile, avg_simulate, check_boundedness, sink_simulate, window_simulate
from .sim_quadratic import simulate_full, simulate_full_causal, simulate_single_head
from .tensor import Causal, Dense, Sink, Window

__version__ = "0.1.0"

__all__ = [
    "OracleSimulator",
    "ReferenceTransformer",
    "ConfigurationError",
    "DegenerateRatioError",
    "NonFiniteError",
    "OracleSimError",
    "RestrictionError",
    "ShapeError",
    "SimulationReport",
    "run",
    "RunConfig",
    "generate_instance",
    "preset",
    "CallLedger",
    "Oracle",
    "OracleCapacity",
    "Workbench",
    "audit_restriction",
    "HeadParams",
    "Layer",
    "TransformerParams",
    "attention_head",
    "transformer_forward",
    "ReverseConfig",
    "reverse_simulate",
    "BoundednessProfile",
    "avg_simulate",
    "check_boundedness",
    "sink_simulate",
    "window_simulate",
    "simulate_full",
    "simulate_full_causal",
    "simulate_single_head",
    "Causal",
    "Dense",
    "Sink",
    "Window",
]
