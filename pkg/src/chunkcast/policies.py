"""Peer-selection weights, the aware/agnostic mixture, and chunk picks.

A sender mixes two selection modes: with probability W (the awareness
probability) it picks a neighbor proportionally to a weight function H, and
with probability 1-W uniformly at random.  The resulting distribution is

    beta(l, v) = W * H(v) / sum(H) + (1 - W) / |N(l)|

An all-zero weight vector is legal (fresh tit-for-tat epoch, no deprived
neighbor): the aware mass is then redistributed uniformly, so the
distribution degenerates to the uniform one.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field


@dataclass
class WeightContext:
    """Inputs for a weight computation; only the fields the kind needs are read."""

    sender: int
    neighbor_ids: list[int]
    capacities: dict[int, float] | None = None          # bandwidth-aware
    epoch_received: dict[int, float] | None = None      # tit-for-tat (last epoch, Mb)
    sender_chunks: set[int] | None = None               # data-driven kinds
    neighbor_chunks: dict[int, set[int]] | None = None  # data-driven kinds


@dataclass(frozen=True)
class SelectionDistribution:
    neighbor_ids: tuple[int, ...]
    probabilities: tuple[float, ...]
    _cumulative: tuple[float, ...] = field(repr=False, default=())

    def __len__(self) -> int:
        return len(self.neighbor_ids)


class NoNeighborError(ValueError):
    """Selection requested for a sender with an empty neighbor list."""


def compute_weights(kind: str, ctx: WeightContext) -> list[float]:
    """Per-neighbor weights H_l(v) for the given weight kind.

    random           -> all equal
    bandwidth-aware  -> neighbor upload capacity
    tit-for-tat      -> megabits received from the neighbor in the last
                        completed epoch (missing history counts as zero)
    most-deprived    -> 1 for neighbors maximizing |B(l) \\ B(v)|, else 0
    proportional-deprived -> |B(l) \\ B(v)|

    All-zero vectors are legal output; selection_distribution handles them.
    """
    ids = ctx.neighbor_ids
    if kind == "random":
        return [1.0] * len(ids)
    if kind == "bandwidth-aware":
        caps = ctx.capacities
        if caps is None:
            raise ValueError("bandwidth-aware weights need capacities")
        return [caps[v] for v in ids]
    if kind == "tit-for-tat":
        hist = ctx.epoch_received or {}
        return [hist.get(v, 0.0) for v in ids]
    if kind in ("most-deprived", "proportional-deprived"):
        if ctx.sender_chunks is None or ctx.neighbor_chunks is None:
            raise ValueError(f"{kind} weights need chunk collections")
        deprived = [len(ctx.sender_chunks - ctx.neighbor_chunks[v]) for v in ids]
        if kind == "proportional-deprived":
            return [float(d) for d in deprived]
        top = max(deprived) if deprived else 0
        if top == 0:
            return [0.0] * len(ids)
        return [1.0 if d == top else 0.0 for d in deprived]
    raise ValueError(f"unknown weight kind {kind!r}")


def selection_distribution(
    neighbor_ids: list[int] | tuple[int, ...],
    weights: list[float],
    awareness: float,
) -> SelectionDistribution:
    """Mix the weighted and uniform selections into one distribution.

    Raises NoNeighborError on an empty neighbor list (the caller keeps the
    sender idle).  Every probability is at least (1-W)/|N|, and the vector
    sums to 1 within 1e-12.
    """
    deg = len(neighbor_ids)
    if deg == 0:
        raise NoNeighborError("sender has no neighbors")
    if not (0.0 <= awareness <= 1.0):
        raise ValueError(f"awareness probability must be in [0, 1], got {awareness}")

    if any(w < 0 for w in weights):
        raise ValueError("weights must be nonnegative")
    total = math.fsum(weights)
    uniform = 1.0 / deg
    first = weights[0]
    homogeneous = all(w == first for w in weights)
    if total <= 0.0 or (homogeneous and first > 0.0):
        # Zero weights: aware mass redistributed uniformly.  Equal positive
        # weights: aware share is exactly uniform; computing it directly keeps
        # the equality bit-exact.
        probs = [uniform] * deg
    elif awareness == 0.0:
        probs = [uniform] * deg
    else:
        agn = (1.0 - awareness) * uniform
        probs = [awareness * (w / total) + agn for w in weights]

    cum = []
    acc = 0.0
    for p in probs:
        acc += p
        cum.append(acc)
    cum[-1] = 1.0  # guard the last bucket against float shortfall
    return SelectionDistribution(
        neighbor_ids=tuple(neighbor_ids),
        probabilities=tuple(probs),
        _cumulative=tuple(cum),
    )


def sample_peer(dist: SelectionDistribution, rng) -> int:
    """Draw one neighbor id according to the distribution."""
    if len(dist) == 0:
        raise NoNeighborError("empty distribution")
    if len(dist) == 1:
        return dist.neighbor_ids[0]
    i = bisect.bisect_right(dist._cumulative, rng.random())
    if i >= len(dist.neighbor_ids):
        i = len(dist.neighbor_ids) - 1
    return dist.neighbor_ids[i]


def latest_blind_pick(owned: set[int]) -> int | None:
    """Freshest chunk the sender owns, regardless of the receiver's holdings."""
    return max(owned) if owned else None


def latest_useful_pick(owned: set[int], receiver_owned: set[int]) -> int | None:
    """Freshest chunk the sender owns that the receiver lacks, if any."""
    best = -1
    for c in owned:
        if c > best and c not in receiver_owned:
            best = c
    return best if best >= 0 else None


class TftHistory:
    """Per-peer download accounting over synchronized epochs.

    ``current`` accumulates megabits received per neighbor during the running
    epoch; ``last`` holds the previous, completed epoch and is what the weight
    function reads.  Epochs are global: every peer rolls at the same
    multiples of the epoch length.
    """

    __slots__ = ("current", "last", "rolls")

    def __init__(self):
        self.current: dict[int, float] = {}
        self.last: dict[int, float] = {}
        self.rolls = 0

    def record_transfer(self, sender: int, megabits: float) -> None:
        self.current[sender] = self.current.get(sender, 0.0) + megabits

    def roll_epoch(self) -> None:
        self.last = self.current
        self.current = {}
        self.rolls += 1


def record_tft_transfer(history: TftHistory, sender: int, megabits: float, now: float) -> None:
    """Credit a completed transfer from ``sender`` to the history's owner."""
    history.record_transfer(sender, megabits)


def roll_epoch(history: TftHistory, now: float) -> None:
    """Close the running epoch; weights now read what it accumulated."""
    history.roll_epoch()
