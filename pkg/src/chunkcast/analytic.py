"""Recursive mean-field approximation of single-chunk diffusion.

The solver predicts, without a full simulation, how one tagged chunk spreads
through the peer classes under a latest-blind scheme with static selection
weights (random or bandwidth-aware), on a full mesh.

Approach: the early, high-variance part of the diffusion is sampled exactly
(peer-level stochastic prefix until T_init); each sampled prefix becomes an
initial condition for a deterministic class-level recursion on the
synchronized event grid.  The recursion tracks r_i(t), the fraction of
class-i peers holding the chunk, and p(t), the per-peer probability mass of
uploads completing at t:

* at an upload event of class i at time t, every class k gains
  (1 - exp(-beta(i,k) * p(t) * n / pop_k)) * (1 - r_k(t')) new holders; the
  exponent spreads the class-aggregate mass beta(i,k) * p(t) over the pop_k
  peers of class k (Poisson approximation of the copy count seen by one
  peer), and the (1 - r_k) factor discards copies landing on peers that
  already hold the chunk;
* class i then schedules its next uploads: p(t + T_i) gains
  alpha_i * r_i(t) * prod_{g=1..floor(t/T_SR)} (1 - rbar_i(g*T_SR)), the
  product being the probability that the tagged chunk is still the freshest
  in a class-i holder's collection (fresher chunks compete for the
  latest-blind pick);
* chunk-generation events leave r unchanged.

rbar (the averaged curve inside the freshness product) is obtained by
fixed-point iteration starting from rbar = 0.  An optional variant evaluates
the freshness product at chunk ages, prod (1 - rbar_i(t - g*T_SR)), instead
of at the literal grid times; the two only coincide when t is a multiple of
T_SR, so both forms are exposed.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .domain import STATIC_WEIGHT_KINDS, Scenario, validate_scenario

GENERATION = 0  # timeline tag for chunk-generation events; classes use their id
SOURCE = -1     # pending-upload sender kind for the source

_TIME_DECIMALS = 9  # event times rounded so simultaneous events compare equal
_EPS = 1e-12


@dataclass(frozen=True)
class EventTimeline:
    """Sorted event multiset: (time, tag) with generation before class events."""

    times: tuple[float, ...]
    tags: tuple[int, ...]            # GENERATION or class id
    horizon: float
    chunk_period: float
    class_period: dict[int, float]   # class id -> upload period T_i

    def __len__(self) -> int:
        return len(self.times)

    def events(self):
        return zip(self.times, self.tags)


@dataclass
class InitialCondition:
    """Exact early-diffusion snapshot at T_init for one sampled prefix.

    ``receipts`` lists (time, class index) for every peer receipt up to
    T_init; ``pending`` lists (sender kind, exact completion time) for
    uploads still in flight at T_init, where the kind is a 0-based class
    index or SOURCE.  Fractions are receipts per class over class
    population.
    """

    t_init: float
    fractions: np.ndarray                      # shape (U,)
    receipts: list[tuple[float, int]] = field(default_factory=list)
    pending: list[tuple[int, float]] = field(default_factory=list)
    exchanges: int = 0                         # transfers completed in the prefix


@dataclass
class DiffusionCurve:
    """Per-class holder fractions along the timeline for one initial condition."""

    times: np.ndarray                # event times (timeline order)
    r: np.ndarray                    # shape (len(times), U)
    p: np.ndarray                    # upload mass consumed at each event
    rate: np.ndarray                 # shape (U,): r at the horizon
    mean_delay: np.ndarray           # shape (U,): receipt-mass weighted delay


@dataclass
class SolveResult:
    curves_rate: np.ndarray          # shape (|J|, U): per-condition final rates
    curves_delay: np.ndarray         # shape (|J|, U): per-condition mean delays (NaN if empty)
    r_bar: np.ndarray                # shape (len(timeline), U): averaged curve
    timeline: EventTimeline
    iterations: int
    converged: bool
    rate: np.ndarray                 # shape (U,): predicted per-class rate
    mean_delay: np.ndarray           # shape (U,): predicted per-class mean delay

    def summary_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "per_class": {
                str(i + 1): {
                    "rate": float(self.rate[i]),
                    "mean_delay": (None if math.isnan(self.mean_delay[i])
                                   else float(self.mean_delay[i])),
                }
                for i in range(len(self.rate))
            },
        }

    def dump_curves_csv(self, path) -> None:
        """CSV `t,class,r_bar` of the averaged diffusion curve."""
        with open(path, "w") as fh:
            fh.write("t,class,r_bar\n")
            for idx, t in enumerate(self.timeline.times):
                for ci in range(self.r_bar.shape[1]):
                    fh.write(f"{t:.6f},{ci + 1},{self.r_bar[idx, ci]:.8f}\n")


def build_timeline(class_periods: dict[int, float | None], chunk_period: float,
                   horizon: float) -> EventTimeline:
    """Merge the class upload grids and the generation grid up to the horizon.

    Simultaneous events are kept with their multiplicity; equal times order
    generation first, then ascending class id.  Free-rider classes (None
    period) contribute no events.
    """
    entries: list[tuple[float, int]] = []
    k = 1
    while True:
        t = round(k * chunk_period, _TIME_DECIMALS)
        if t > horizon + _EPS:
            break
        entries.append((t, GENERATION))
        k += 1
    for cid in sorted(class_periods):
        period = class_periods[cid]
        if period is None or period <= 0:
            continue
        k = 1
        while True:
            t = round(k * period, _TIME_DECIMALS)
            if t > horizon + _EPS:
                break
            entries.append((t, cid))
            k += 1
    entries.sort()
    return EventTimeline(
        times=tuple(t for t, _ in entries),
        tags=tuple(tag for _, tag in entries),
        horizon=horizon,
        chunk_period=chunk_period,
        class_period={cid: p for cid, p in class_periods.items() if p},
    )


def class_beta(s: Scenario) -> np.ndarray:
    """Class-to-class selection matrix beta(i, i') on a full mesh.

    beta(i, i') is the probability that a class-i peer selects a class-i'
    peer: the aware share distributes proportionally to population-weighted
    weights (self excluded), the agnostic share uniformly over the other
    n - 1 peers.  Rows sum to 1.  Only static weight kinds are supported;
    dynamic ones (tit-for-tat, data-driven) are rejected.
    """
    if not s.validated:
        s = validate_scenario(s)
    kind = s.scheme.weight_kind
    if kind not in STATIC_WEIGHT_KINDS:
        raise ValueError(
            f"analytic solver supports static weight kinds {STATIC_WEIGHT_KINDS}, got {kind!r}")
    U = len(s.classes)
    pops = np.array(s.populations, dtype=np.float64)
    n = s.n
    w = s.scheme.awareness_probability if kind == "bandwidth-aware" else 0.0
    h = np.array([c.upload_capacity for c in s.classes], dtype=np.float64)

    beta = np.zeros((U, U))
    for i in range(U):
        agn = pops.copy()
        agn[i] -= 1.0
        agn /= (n - 1) if n > 1 else 1.0
        if w > 0.0:
            aw = pops * h
            aw[i] -= h[i]
            tot = aw.sum()
            aware = aw / tot if tot > 0.0 else agn
        else:
            aware = agn
        beta[i] = w * aware + (1.0 - w) * agn
    return beta


def source_class_weights(s: Scenario) -> np.ndarray:
    """Probability that the source's pick lands in each class (full mesh)."""
    U = len(s.classes)
    pops = np.array(s.populations, dtype=np.float64)
    uniform = pops / pops.sum()
    sp = s.source.policy
    if sp.kind == "class-targeted":
        w = np.zeros(U)
        w[sp.target_class - 1] = 1.0
        return w
    if sp.kind == "aware" and sp.weight_kind == "bandwidth-aware":
        h = np.array([c.upload_capacity for c in s.classes])
        aw = pops * h
        tot = aw.sum()
        aware = aw / tot if tot > 0 else uniform
        wa = sp.awareness or 0.0
        return wa * aware + (1.0 - wa) * uniform
    return uniform


def sample_initial_conditions(s: Scenario, count: int, t_init: float,
                              seed: int) -> list[InitialCondition]:
    """Exact stochastic early diffusions of one tagged chunk, sampled ``count`` times.

    Full-mesh, peer-level simulation restricted to the tagged chunk: the
    source uploads copies serially while the tagged chunk is its freshest
    (send starts strictly before one chunk period); every holder relays the
    chunk serially from the moment of receipt; a copy landing on an existing
    holder is wasted.  The prefix covers [0, T_init]; transfers still in
    flight at T_init (source transfers included) become pending-mass seeds.
    """
    if not s.validated:
        s = validate_scenario(s)
    if count < 1:
        raise ValueError("need at least one initial condition")
    U = len(s.classes)
    pops = list(s.populations)
    t_chunk = s.stream.chunk_period
    t_source = s.stream.chunk_size / s.source.upload_capacity
    periods = [
        (s.stream.chunk_size / c.upload_capacity) if c.upload_capacity > 0 else None
        for c in s.classes
    ]
    beta_cum = np.cumsum(class_beta(s), axis=1)
    src_cum = np.cumsum(source_class_weights(s))
    rng = random.Random(seed)

    out: list[InitialCondition] = []
    for _ in range(count):
        holders = [0] * U
        receipts: list[tuple[float, int]] = []
        pending: list[tuple[int, float]] = []
        exchanges = 0
        # heap entries: (completion time, sequence, sender kind)
        heap: list[tuple[float, int, int]] = []
        seq = 0
        start = 0.0
        while start < t_chunk - _EPS and start < t_init - _EPS or start == 0.0:
            heapq.heappush(heap, (start + t_source, seq, SOURCE))
            seq += 1
            start += t_source
            if start >= t_chunk - _EPS or start >= t_init - _EPS:
                break

        while heap and heap[0][0] <= t_init + _EPS:
            done, _, kind = heapq.heappop(heap)
            x = rng.random()
            if kind == SOURCE:
                k = int(np.searchsorted(src_cum, x * src_cum[-1], side="right"))
            else:
                row = beta_cum[kind]
                k = int(np.searchsorted(row, x * row[-1], side="right"))
            k = min(k, U - 1)
            exchanges += 1
            # the target is uniform within its class: a hit on one of the
            # existing holders is a wasted copy
            if pops[k] > 0 and rng.random() * pops[k] >= holders[k]:
                holders[k] += 1
                receipts.append((done, k))
                if periods[k] is not None:
                    # the receiver is serving some other chunk when the copy
                    # lands; its first relay waits out the residual slot time
                    residual = rng.random() * periods[k]
                    heapq.heappush(heap, (done + residual + periods[k], seq, k))
                    seq += 1
            if kind != SOURCE:
                heapq.heappush(heap, (done + periods[kind], seq, kind))
                seq += 1

        while heap:
            done, _, kind = heapq.heappop(heap)
            period = t_source if kind == SOURCE else periods[kind]
            # Only transfers already in flight at T_init seed the recursion;
            # later relays belong to holders the recursion already schedules.
            if done - period <= t_init + _EPS:
                pending.append((kind, done))

        fr = np.array([holders[i] / pops[i] if pops[i] else 0.0 for i in range(U)])
        receipts.sort()
        pending.sort(key=lambda e: e[1])
        out.append(InitialCondition(
            t_init=t_init, fractions=fr, receipts=receipts,
            pending=pending, exchanges=exchanges,
        ))
    return out


def _timeline_links(timeline: EventTimeline):
    """Per-event index of the next event of the same class, plus per-class firsts."""
    E = len(timeline)
    tags = timeline.tags
    next_same = [-1] * E
    last_seen: dict[int, int] = {}
    for idx in range(E - 1, -1, -1):
        tag = tags[idx]
        if tag == GENERATION:
            continue
        next_same[idx] = last_seen.get(tag, -1)
        last_seen[tag] = idx
    return next_same


def _first_class_event_after(timeline: EventTimeline, cid: int, t: float) -> int:
    for idx, (tt, tag) in enumerate(timeline.events()):
        if tag == cid and tt > t + _EPS:
            return idx
    return -1


def _first_upload_event_at_or_after(timeline: EventTimeline, t: float) -> int:
    for idx, (tt, tag) in enumerate(timeline.events()):
        if tag != GENERATION and tt > t - _EPS:
            return idx
    return -1


def recursion_pass(
    timeline: EventTimeline,
    beta: np.ndarray,
    populations: tuple[int, ...],
    initial: InitialCondition,
    r_bar_at_generations: np.ndarray,
    source_weights: np.ndarray | None = None,
    age_based_product: bool = False,
    r_bar_full: np.ndarray | None = None,
) -> DiffusionCurve:
    """One deterministic recursion over the timeline from one initial condition."""
    return _recursion_passes(
        timeline, beta, populations, [initial], r_bar_at_generations,
        source_weights, age_based_product, r_bar_full,
    )[0]


def _recursion_passes(
    timeline: EventTimeline,
    beta: np.ndarray,
    populations: tuple[int, ...],
    initials: list[InitialCondition],
    r_bar_at_generations: np.ndarray,
    source_weights: np.ndarray | None = None,
    age_based_product: bool = False,
    r_bar_full: np.ndarray | None = None,
) -> list[DiffusionCurve]:
    """Vectorized recursion across initial conditions sharing one timeline."""
    U = beta.shape[0]
    J = len(initials)
    pops = np.array(populations, dtype=np.float64)
    n = pops.sum()
    alpha = pops / n
    spread = beta * (n / pops)[None, :]   # per-target-peer exponent factor
    if source_weights is not None:
        src_spread = source_weights * (n / pops)
    else:
        src_spread = np.ones(U)  # uniform source: every peer equally likely

    times = timeline.times
    tags = timeline.tags
    E = len(times)
    next_same = _timeline_links(timeline)
    t_init = initials[0].t_init

    r = np.zeros((J, U))
    delay_mass = np.zeros((J, U))
    for j, ic in enumerate(initials):
        r[j] = ic.fractions
        for t_rcpt, k in ic.receipts:
            delay_mass[j, k] += t_rcpt / pops[k]

    pend = np.zeros((J, E))              # class-event mass, consumed at its event
    src_pend = np.zeros((J, E))          # source mass, consumed at snapped event
    for j, ic in enumerate(initials):
        for kind, completion in ic.pending:
            if kind == SOURCE:
                idx = _first_upload_event_at_or_after(timeline, completion)
                if idx >= 0:
                    src_pend[j, idx] += 1.0 / n
            else:
                idx = _first_class_event_after(timeline, kind + 1, ic.t_init)
                if idx >= 0:
                    pend[j, idx] += 1.0 / n

    t_chunk = timeline.chunk_period
    gen_seen = 0
    run_prod = np.ones((J, U))           # literal freshness product per class
    r_hist = np.zeros((E, J, U))
    p_hist = np.zeros((E, J))

    for idx in range(E):
        t = times[idx]
        tag = tags[idx]
        if tag == GENERATION:
            run_prod *= (1.0 - r_bar_at_generations[gen_seen])[None, :]
            gen_seen += 1
            r_hist[idx] = r
            continue
        if t <= t_init + _EPS:
            r_hist[idx] = r
            continue
        i = tag - 1
        mass = pend[:, idx]
        p_hist[idx] = mass
        own_gain = np.zeros(J)
        if mass.any():
            expo = mass[:, None] * spread[i][None, :]
            gain = -np.expm1(-expo) * (1.0 - r)
            r = r + gain
            delay_mass += gain * t
            own_gain = gain[:, i]
        smass = src_pend[:, idx]
        if smass.any():
            expo = smass[:, None] * src_spread[None, :]
            gain = -np.expm1(-expo) * (1.0 - r)
            r = r + gain
            delay_mass += gain * t
            own_gain = own_gain + gain[:, i]
        # Schedule the class's next uploads (Poisson mass for t + T_i).  Peers
        # that received the chunk at this very event are mid-slot on average,
        # so only half of them make the upload completing at t + T_i; the
        # other half joins the pool at the next event.
        if age_based_product:
            prod = _age_product(r_bar_full, times, t, t_chunk, i)
            add = alpha[i] * (r[:, i] - 0.5 * own_gain) * prod
        else:
            add = alpha[i] * (r[:, i] - 0.5 * own_gain) * run_prod[:, i]
        nxt = next_same[idx]
        if nxt >= 0:
            pend[:, nxt] += add
        r_hist[idx] = r

    rate = r.copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_delay = np.where(rate > 0, delay_mass / np.maximum(rate, 1e-300), np.nan)

    tarr = np.array(times)
    return [
        DiffusionCurve(times=tarr, r=r_hist[:, j, :], p=p_hist[:, j],
                       rate=rate[j], mean_delay=mean_delay[j])
        for j in range(J)
    ]


def _age_product(r_bar_full: np.ndarray | None, times, t: float,
                 t_chunk: float, i: int) -> float:
    """Freshness product evaluated at chunk ages t - g*t_chunk (variant form)."""
    if r_bar_full is None:
        return 1.0
    m = math.floor(t / t_chunk + 1e-9)
    prod = 1.0
    tarr = np.asarray(times)
    for g in range(1, m + 1):
        age = t - g * t_chunk
        pos = int(np.searchsorted(tarr, age + _EPS)) - 1
        val = r_bar_full[pos, i] if pos >= 0 else 0.0
        prod *= 1.0 - val
    return prod


def solve(
    s: Scenario,
    j_count: int = 1000,
    t_init: float | None = None,
    horizon: float | None = None,
    tol: float = 1e-4,
    max_iter: int = 20,
    seed: int | None = None,
    age_based_product: bool = False,
) -> SolveResult:
    """Fixed-point solution of the recursion averaged over sampled prefixes.

    Starts from rbar = 0, recomputes every per-condition curve against the
    previous average, and stops when the sup-norm change of the average
    drops below ``tol`` (non-convergence after ``max_iter`` is flagged, the
    best iterate is returned).  Requires a complete overlay and a static
    weight kind.
    """
    if not s.validated:
        s = validate_scenario(s)
    if s.edge_probability != "complete":
        raise ValueError("analytic solver assumes a complete overlay")
    U = len(s.classes)
    t_chunk = s.stream.chunk_period
    if t_init is None:
        t_init = t_chunk
    if horizon is None:
        horizon = s.buffer_deadline
    periods = {
        c.id: (s.stream.chunk_size / c.upload_capacity if c.upload_capacity > 0 else None)
        for c in s.classes
    }
    timeline = build_timeline(periods, t_chunk, horizon)
    beta = class_beta(s)
    src_w = source_class_weights(s)
    conditions = sample_initial_conditions(
        s, j_count, t_init, seed if seed is not None else s.seed)

    n_gen = sum(1 for tag in timeline.tags if tag == GENERATION)
    r_bar_gen = np.zeros((n_gen, U))
    r_bar_full = np.zeros((len(timeline), U))
    converged = False
    iterations = 0
    curves: list[DiffusionCurve] = []
    for it in range(1, max_iter + 1):
        iterations = it
        curves = _recursion_passes(
            timeline, beta, s.populations, conditions, r_bar_gen,
            src_w, age_based_product, r_bar_full if age_based_product else None,
        )
        full = np.mean([c.r for c in curves], axis=0)
        delta = float(np.max(np.abs(full - r_bar_full))) if full.size else 0.0
        r_bar_full = full
        r_bar_gen = _average_at_generation_times(timeline, conditions, full, s.populations)
        if delta < tol:
            converged = True
            break

    rates = np.stack([c.rate for c in curves])
    delays = np.stack([c.mean_delay for c in curves])
    mean_rate = rates.mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        num = np.nansum(np.where(np.isnan(delays), 0.0, delays) * rates, axis=0)
        den = rates.sum(axis=0)
        mean_delay = np.where(den > 0, num / np.maximum(den, 1e-300), np.nan)

    return SolveResult(
        curves_rate=rates,
        curves_delay=delays,
        r_bar=r_bar_full,
        timeline=timeline,
        iterations=iterations,
        converged=converged,
        rate=mean_rate,
        mean_delay=mean_delay,
    )


def _average_at_generation_times(timeline: EventTimeline,
                                 conditions: list[InitialCondition],
                                 full: np.ndarray,
                                 populations: tuple[int, ...]) -> np.ndarray:
    """Averaged curve sampled at generation times.

    Inside the exact prefix (t <= T_init) the recursion state is frozen, so
    the average there is taken from the sampled receipts directly.
    """
    U = full.shape[1]
    J = len(conditions)
    t_init = conditions[0].t_init
    pops = np.array(populations, dtype=np.float64)
    rows = []
    for idx, (t, tag) in enumerate(timeline.events()):
        if tag != GENERATION:
            continue
        if t > t_init + _EPS:
            rows.append(full[idx])
        else:
            acc = np.zeros(U)
            for ic in conditions:
                for t_rcpt, k in ic.receipts:
                    if t_rcpt <= t + _EPS:
                        acc[k] += 1.0
            rows.append(acc / (J * pops))
    return np.array(rows) if rows else np.zeros((0, U))
