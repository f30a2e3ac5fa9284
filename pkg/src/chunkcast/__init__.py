"""Chunk-based P2P live-streaming diffusion: event simulator and mean-field solver."""

__version__ = "0.1.0"

from .domain import (  # noqa: F401
    BandwidthClass,
    Chunk,
    Scenario,
    ScenarioError,
    SchemeSpec,
    SourcePolicy,
    SourceSpec,
    StreamSpec,
    TimingTable,
    derive_timing,
    validate_scenario,
)
from .engine import RunResult, TransmissionLog, run  # noqa: F401
from .overlay import Overlay, generate_overlay, neighbors  # noqa: F401
