"""Scenario vocabulary: bandwidth classes, stream parameters, validation, timing.

All capacities are in megabits per second, sizes in megabits, times in
seconds.  A scenario is immutable once validated and can be shared freely
across concurrent runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

WEIGHT_KINDS = (
    "random",
    "bandwidth-aware",
    "tit-for-tat",
    "most-deprived",
    "proportional-deprived",
)
CHUNK_POLICIES = ("latest-blind", "latest-useful")
SOURCE_POLICY_KINDS = ("random-peer", "class-targeted", "aware")

# Weight kinds whose H depends only on the scenario, not on run-time state.
STATIC_WEIGHT_KINDS = ("random", "bandwidth-aware")


class ScenarioError(ValueError):
    """Raised when a scenario violates one or more invariants.

    ``errors`` lists every violation found, each naming the offending field.
    """

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class BandwidthClass:
    id: int                   # 1-based, contiguous
    upload_capacity: float    # Mbps; 0 = free-rider
    fraction: float           # share of the peer population


@dataclass(frozen=True)
class StreamSpec:
    stream_rate: float        # Mbps
    chunk_size: float         # Mb

    @property
    def chunk_period(self) -> float:
        """Seconds between chunk creations."""
        return self.chunk_size / self.stream_rate


@dataclass(frozen=True)
class SourcePolicy:
    """Target-selection rule used by the source.

    kind = "random-peer":    uniform over the source's neighbors.
    kind = "class-targeted": uniform over neighbors of ``target_class``.
    kind = "aware":          mixture selection with ``weight_kind``/``awareness``.
    """

    kind: str = "random-peer"
    target_class: int | None = None
    weight_kind: str | None = None
    awareness: float | None = None


@dataclass(frozen=True)
class SourceSpec:
    upload_capacity: float    # Mbps, u_S > 0
    policy: SourcePolicy = field(default_factory=SourcePolicy)


@dataclass(frozen=True)
class SchemeSpec:
    weight_kind: str = "random"
    awareness_probability: float = 0.0     # W in [0, 1]
    chunk_policy: str = "latest-useful"
    epoch_length: float | None = None      # seconds, required for tit-for-tat


@dataclass(frozen=True)
class Scenario:
    n: int
    edge_probability: float | str          # p_e in [0,1] or "complete"
    classes: tuple[BandwidthClass, ...]
    stream: StreamSpec
    source: SourceSpec
    scheme: SchemeSpec
    buffer_deadline: float                 # seconds (D)
    duration: float                        # seconds
    warmup: float = 0.0                    # seconds
    seed: int = 0
    # Attached by validate_scenario; None until then.
    populations: tuple[int, ...] | None = None

    @property
    def validated(self) -> bool:
        return self.populations is not None


@dataclass(frozen=True)
class Chunk:
    """A stream piece; ``id`` orders freshness, creation_time = id * chunk period."""

    id: int
    creation_time: float


@dataclass(frozen=True)
class TimingTable:
    chunk_period: float                    # T_SR = c / SR
    source_upload_time: float              # T_S = c / u_S
    class_upload_time: dict[int, float | None]  # T_i = c / u_i; None for free-riders


def largest_remainder(fractions: list[float], total: int) -> list[int]:
    """Integer apportionment of ``total`` by ``fractions`` (largest remainder).

    Deterministic: remainder ties go to the earlier index.  The result sums to
    ``total`` exactly.
    """
    quotas = [f * total for f in fractions]
    counts = [math.floor(q) for q in quotas]
    shortfall = total - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:shortfall]:
        counts[i] += 1
    return counts


def validate_scenario(s: Scenario) -> Scenario:
    """Check every scenario invariant; return the scenario with populations attached.

    Raises ScenarioError listing one message per violated invariant.  Validation
    is deterministic and idempotent: validating an already-validated scenario
    returns an equal scenario.
    """
    errors: list[str] = []

    if s.n < 1:
        errors.append(f"n: must be >= 1, got {s.n}")

    if s.edge_probability != "complete":
        try:
            pe = float(s.edge_probability)  # type: ignore[arg-type]
            if not (0.0 <= pe <= 1.0):
                errors.append(f"edge_probability: must be in [0, 1] or 'complete', got {pe}")
        except (TypeError, ValueError):
            errors.append(f"edge_probability: must be numeric or 'complete', got {s.edge_probability!r}")

    if not s.classes:
        errors.append("classes: at least one bandwidth class is required")
    else:
        ids = [c.id for c in s.classes]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            errors.append(f"classes: ids must be distinct and contiguous from 1, got {ids}")
        for c in s.classes:
            if c.upload_capacity < 0:
                errors.append(f"classes[{c.id}].upload_capacity: must be >= 0, got {c.upload_capacity}")
            if c.fraction < 0:
                errors.append(f"classes[{c.id}].fraction: must be >= 0, got {c.fraction}")
        frac_sum = math.fsum(c.fraction for c in s.classes)
        if abs(frac_sum - 1.0) > 1e-9:
            errors.append(f"classes: fractions sum != 1 (got {frac_sum!r})")

    if s.stream.stream_rate <= 0:
        errors.append(f"stream.stream_rate: must be > 0, got {s.stream.stream_rate}")
    if s.stream.chunk_size <= 0:
        errors.append(f"stream.chunk_size: must be > 0, got {s.stream.chunk_size}")

    if s.source.upload_capacity <= 0:
        errors.append(f"source.upload_capacity: must be > 0, got {s.source.upload_capacity}")
    sp = s.source.policy
    if sp.kind not in SOURCE_POLICY_KINDS:
        errors.append(f"source.policy.kind: unknown kind {sp.kind!r}")
    elif sp.kind == "class-targeted":
        known = {c.id for c in s.classes}
        if sp.target_class not in known:
            errors.append(f"source.policy.target_class: {sp.target_class!r} is not a class id")
    elif sp.kind == "aware":
        if sp.weight_kind not in WEIGHT_KINDS:
            errors.append(f"source.policy.weight_kind: unknown kind {sp.weight_kind!r}")
        elif sp.weight_kind in ("most-deprived", "proportional-deprived"):
            errors.append("source.policy.weight_kind: data-driven weights are not supported for the source")
        if sp.awareness is None or not (0.0 <= sp.awareness <= 1.0):
            errors.append(f"source.policy.awareness: must be in [0, 1], got {sp.awareness!r}")

    sch = s.scheme
    if sch.weight_kind not in WEIGHT_KINDS:
        errors.append(f"scheme.weight_kind: unknown kind {sch.weight_kind!r}")
    if not (0.0 <= sch.awareness_probability <= 1.0):
        errors.append(f"scheme.awareness_probability: must be in [0, 1], got {sch.awareness_probability}")
    if sch.chunk_policy not in CHUNK_POLICIES:
        errors.append(f"scheme.chunk_policy: unknown policy {sch.chunk_policy!r}")
    if sch.weight_kind == "tit-for-tat":
        if sch.epoch_length is None:
            errors.append("scheme.epoch_length: required for tit-for-tat")
        elif sch.epoch_length <= 0:
            errors.append(f"scheme.epoch_length: must be > 0, got {sch.epoch_length}")
    elif sch.epoch_length is not None and sch.epoch_length <= 0:
        errors.append(f"scheme.epoch_length: must be > 0 when present, got {sch.epoch_length}")

    if s.buffer_deadline <= 0:
        errors.append(f"buffer_deadline: must be > 0, got {s.buffer_deadline}")
    if not (0 <= s.warmup < s.duration):
        errors.append(f"warmup/duration: need 0 <= warmup < duration, got {s.warmup}/{s.duration}")
    if not isinstance(s.seed, int) or not (-(2**63) <= s.seed < 2**64):
        errors.append(f"seed: must be a 64-bit integer, got {s.seed!r}")

    if errors:
        raise ScenarioError(errors)

    pops = tuple(largest_remainder([c.fraction for c in s.classes], s.n))
    # Random weighting ignores W entirely; normalize so equal scenarios compare equal.
    if sch.weight_kind == "random" and sch.awareness_probability != 0.0:
        sch = replace(sch, awareness_probability=0.0)
    return replace(s, scheme=sch, populations=pops)


def derive_timing(s: Scenario) -> TimingTable:
    """Per-copy upload times for the source and each class, plus the chunk period.

    Free-rider classes (zero capacity) map to None: they never upload.
    """
    if not s.validated:
        s = validate_scenario(s)
    per_class: dict[int, float | None] = {}
    for c in s.classes:
        if c.upload_capacity > 0:
            per_class[c.id] = s.stream.chunk_size / c.upload_capacity
        else:
            per_class[c.id] = None
    return TimingTable(
        chunk_period=s.stream.chunk_period,
        source_upload_time=s.stream.chunk_size / s.source.upload_capacity,
        class_upload_time=per_class,
    )


def mean_capacity(classes: tuple[BandwidthClass, ...]) -> float:
    """Population-weighted mean upload capacity in Mbps."""
    return math.fsum(c.fraction * c.upload_capacity for c in classes)


def class_of_peer(populations: tuple[int, ...]) -> list[int]:
    """Class id for each peer id 1..n, assigned in contiguous blocks.

    Peer ids start at 1 (node 0 is the source); exchangeability of peers makes
    the block layout statistically equivalent to a shuffled one.
    """
    out = [0]  # index 0 unused (source)
    for cid, pop in enumerate(populations, start=1):
        out.extend([cid] * pop)
    return out
