"""Discrete-event simulation of chunk diffusion over the overlay.

Model semantics
---------------
The source creates chunk k at k * T_SR and uploads copies serially, each
taking T_S = c / u_S.  A peer uploads serially as well (one outgoing transfer
at a time, T_i = c / u_i per copy); receivers are never busy because download
capacity is unconstrained.  Links are lossless: every started transfer
arrives.

Whenever an upload slot frees, the sender samples ONE target through the
aware/agnostic mixture and picks a chunk by the configured chunk policy:

* latest-useful: the sender knows the target's holdings, including chunks
  already scheduled for it by other senders, and sends the freshest eligible
  chunk the target still needs.  If the sampled target needs nothing, the
  slot is wasted: the sender retries after its upload time.  A chunk can
  therefore be missed even with spare capacity, when nobody happens to
  schedule it for a peer before the deadline.
* latest-blind: the sender transmits its freshest eligible chunk to the
  sampled target without any knowledge of the target's state; a duplicate
  arrival wastes the whole transfer.

Peers whose eligible collection is empty idle and re-awaken on their next
useful chunk receipt; the idle source re-awakens on chunk creation.  Chunks
older than the diffusion deadline D are never selected for sending; arrivals
later than creation + D are logged as useless and count as misses.  An
arrival exactly at the deadline still counts.  Uploads (or slot retries)
that would end after the run never start, so the log is closed: every send
has its arrival.

Equal-time events are ordered chunk-creation < epoch-boundary <
upload-completion (then by sender id), so a chunk created at time t is
visible to uploads scheduled at t.  When a completion triggers both sides,
the receiver's wake-up is processed before the sender's next pick.  All
randomness flows from one seeded generator in a fixed order, which makes
runs bit-reproducible.

Implementation note: chunk collections are big-int bitmasks over chunk ids
relative to a rolling base, so "freshest useful chunk" is a couple of
bitwise operations instead of a scan.
"""

from __future__ import annotations

import hashlib
import math
import random
from array import array
from bisect import bisect_right
from dataclasses import dataclass, field
from heapq import heappop, heappush

from .domain import Scenario, class_of_peer, derive_timing, validate_scenario
from .overlay import Overlay
from .policies import TftHistory

# Rebase bitmasks once the dead zone below the eligibility cutoff reaches
# this many bits.
_REBASE_SLACK = 512

_TIME_EPS = 1e-9


@dataclass
class PeerState:
    """Final per-peer snapshot returned by a run."""

    peer: int
    class_id: int
    chunks: set[int]                 # still-eligible collection at end of run
    receipt_times: dict[int, float]  # receipt time of the eligible chunks
    copies_sent: int
    busy_time: float
    tft: TftHistory | None = None


class TransmissionLog:
    """Append-only columnar record of every completed transfer.

    Useful arrivals get per-chunk copy ordinals 1, 2, ... in arrival order;
    useless arrivals (duplicate or past the deadline) carry ordinal 0.
    """

    __slots__ = ("chunk_id", "sender", "receiver", "send_start", "arrival",
                 "useful", "copy_ordinal")

    def __init__(self):
        self.chunk_id = array("i")
        self.sender = array("i")
        self.receiver = array("i")
        self.send_start = array("d")
        self.arrival = array("d")
        self.useful = array("b")
        self.copy_ordinal = array("i")

    def __len__(self) -> int:
        return len(self.chunk_id)

    def records(self):
        """Iterate rows as tuples (intended for small logs and tests)."""
        for i in range(len(self)):
            yield (self.chunk_id[i], self.sender[i], self.receiver[i],
                   self.send_start[i], self.arrival[i],
                   bool(self.useful[i]), self.copy_ordinal[i])

    def sha256(self) -> str:
        h = hashlib.sha256()
        for col in (self.chunk_id, self.sender, self.receiver,
                    self.send_start, self.arrival, self.useful, self.copy_ordinal):
            h.update(col.tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("chunk_id,sender,receiver,send_start,arrival,useful,copy_ordinal\n")
            for i in range(len(self)):
                fh.write(f"{self.chunk_id[i]},{self.sender[i]},{self.receiver[i]},"
                         f"{self.send_start[i]:.6f},{self.arrival[i]:.6f},"
                         f"{self.useful[i]},{self.copy_ordinal[i]}\n")


@dataclass
class RunResult:
    log: TransmissionLog
    peers: list[PeerState]
    scenario: Scenario
    epoch_rolls: int = 0
    source_widenings: int = 0          # class-targeted picks without a class neighbor
    wasted_slots: int = 0              # upload slots consumed without a transfer
    overlay_warnings: tuple[str, ...] = field(default=())


def _cumulative(weights: list[float]) -> list[float] | None:
    """Cumulative weights for bisect sampling; None when all weights are zero."""
    total = math.fsum(weights)
    if total <= 0.0:
        return None
    acc = 0.0
    out = []
    for w in weights:
        acc += w
        out.append(acc)
    return out


def run(scenario: Scenario, overlay: Overlay, collect_states: bool = True) -> RunResult:
    """Simulate the scenario over [0, duration] and return the transfer log.

    The scenario must validate; the overlay must span n+1 nodes.  Identical
    (scenario, overlay, seed) inputs produce bit-identical logs.
    """
    s = scenario if scenario.validated else validate_scenario(scenario)
    n = s.n
    if overlay.node_count != n + 1:
        raise ValueError(f"overlay has {overlay.node_count} nodes, scenario needs {n + 1}")

    timing = derive_timing(s)
    t_chunk = timing.chunk_period
    t_source = timing.source_upload_time
    duration = s.duration
    deadline = s.buffer_deadline
    chunk_mb = s.stream.chunk_size

    cls = class_of_peer(s.populations)          # node id -> class id (0 = source)
    cap = [s.source.upload_capacity] + [0.0] * n
    upload_time: list[float] = [t_source] + [0.0] * n
    for pid in range(1, n + 1):
        c = s.classes[cls[pid] - 1]
        cap[pid] = c.upload_capacity
        upload_time[pid] = (chunk_mb / c.upload_capacity) if c.upload_capacity > 0 else math.inf

    nbrs = overlay.adjacency
    scheme = s.scheme
    use_lu = scheme.chunk_policy == "latest-useful"
    weight_kind = scheme.weight_kind
    awareness = scheme.awareness_probability
    tft = weight_kind == "tit-for-tat"
    data_driven = weight_kind in ("most-deprived", "proportional-deprived")
    ba_mode = weight_kind == "bandwidth-aware"
    epoch_len = scheme.epoch_length if tft else None

    rng = random.Random(s.seed)
    rng_random = rng.random

    # Chunk collections as bitmasks over ids relative to a rolling base.
    # ``pending`` holds chunks currently in flight toward a peer; the
    # latest-useful pick consults mask | pending (scheduled-aware buffer map).
    mask: list[int] = [0] * (n + 1)
    pending: list[int] = [0] * (n + 1)
    receipt: list[dict[int, float]] = [dict() for _ in range(n + 1)]
    copies_sent = [0] * (n + 1)
    busy_time = [0.0] * (n + 1)
    idle = bytearray([1] * (n + 1))

    histories: list[TftHistory] = [TftHistory() for _ in range(n + 1)] if tft else []
    tft_current: list[dict[int, float]] = [h.current for h in histories]
    tft_cum: list[list[float] | None] = [None] * (n + 1)   # per-epoch cache
    tft_dirty = bytearray([1] * (n + 1))

    ba_cum: list[list[float] | None] = [None] * (n + 1)
    if ba_mode and awareness > 0.0:
        for u in range(1, n + 1):
            if nbrs[u]:
                ba_cum[u] = _cumulative([cap[v] for v in nbrs[u]])

    sp = s.source.policy
    source_widenings = 0
    wasted_slots = 0
    src_w = 0.0
    src_cum: list[float] | None = None
    source_class_ids: tuple[int, ...] = ()
    if sp.kind == "aware":
        src_w = sp.awareness or 0.0
        if sp.weight_kind == "bandwidth-aware" and nbrs[0]:
            src_cum = _cumulative([cap[v] for v in nbrs[0]])
        # tit-for-tat source weights degenerate to uniform: the source
        # downloads nothing, so its aware branch never has history.
    elif sp.kind == "class-targeted":
        source_class_ids = tuple(v for v in nbrs[0] if cls[v] == sp.target_class)
        if not source_class_ids:
            source_widenings += 1  # no neighbor of the targeted class: uniform fallback

    log = TransmissionLog()
    lg_chunk = log.chunk_id.append
    lg_sender = log.sender.append
    lg_recv = log.receiver.append
    lg_start = log.send_start.append
    lg_arr = log.arrival.append
    lg_useful = log.useful.append
    lg_ordn = log.copy_ordinal.append
    ordinal: dict[int, int] = {}

    last_created = -1
    base = 0          # bit 0 of every mask is chunk id `base`
    cur_low = 0       # smallest chunk id eligible for sending at current time
    low_deadline = deadline  # time at which chunk cur_low expires

    # --- weight helpers ------------------------------------------------------

    def tft_cumulative(sender: int) -> list[float] | None:
        hist = histories[sender].last
        cumw = _cumulative([hist.get(v, 0.0) for v in nbrs[sender]])
        tft_cum[sender] = cumw
        tft_dirty[sender] = 0
        return cumw

    def deprived_cumulative(sender: int) -> list[float] | None:
        elig = -1 << (cur_low - base)
        mine = mask[sender] & elig
        ids = nbrs[sender]
        counts = [float((mine & ~mask[v]).bit_count()) if v != 0 else 0.0 for v in ids]
        if weight_kind == "most-deprived":
            top = max(counts) if counts else 0.0
            counts = [1.0 if c == top and top > 0.0 else 0.0 for c in counts]
        return _cumulative(counts)

    # --- upload initiation ----------------------------------------------------
    # Heap entries: (event_time, sender, receiver, chunk, send_start).
    # receiver -1 marks a wasted-slot retry, not a transfer.
    in_flight: list[tuple[float, int, int, int, float]] = []

    def try_start_peer(sender: int, now: float) -> None:
        """Sample one target, pick a chunk, and schedule the transfer.

        A sampled target that needs nothing consumes the slot: the sender
        retries one upload time later.  Only a peer with no eligible chunk
        idles (it re-awakens on receipt).
        """
        nonlocal wasted_slots
        t_up = upload_time[sender]
        if t_up == math.inf or now + t_up > duration + _TIME_EPS:
            idle[sender] = 1
            return
        elig = -1 << (cur_low - base)
        mine = mask[sender] & elig
        if not mine:
            idle[sender] = 1
            return
        ids = nbrs[sender]
        deg = len(ids)
        if deg == 0:
            idle[sender] = 1
            return

        # One draw from the aware/agnostic mixture.
        v = -1
        if awareness > 0.0 and rng_random() < awareness:
            if ba_mode:
                cumw = ba_cum[sender]
            elif tft:
                cumw = tft_cum[sender] if not tft_dirty[sender] else tft_cumulative(sender)
            else:
                cumw = deprived_cumulative(sender) if data_driven else None
            if cumw is not None:
                i = bisect_right(cumw, rng_random() * cumw[-1])
                v = ids[i if i < deg else deg - 1]
        if v < 0:
            v = ids[int(rng_random() * deg)]

        if v != 0:  # the source needs nothing
            if use_lu:
                avail = mine & ~(mask[v] | pending[v])
                if avail:
                    chunk = avail.bit_length() - 1 + base
                    idle[sender] = 0
                    pending[v] |= 1 << (chunk - base)
                    heappush(in_flight, (now + t_up, sender, v, chunk, now))
                    return
            else:
                chunk = mine.bit_length() - 1 + base
                idle[sender] = 0
                heappush(in_flight, (now + t_up, sender, v, chunk, now))
                return
        # Wasted slot: retry after one upload time.
        wasted_slots += 1
        idle[sender] = 0
        heappush(in_flight, (now + t_up, sender, -1, -1, now))

    def try_start_source(now: float) -> None:
        nonlocal wasted_slots
        if last_created < 0 or now + t_source > duration + _TIME_EPS:
            idle[0] = 1
            return
        ids = nbrs[0]
        deg = len(ids)
        if deg == 0 or last_created < cur_low:
            idle[0] = 1
            return
        # Source collection: every created chunk, restricted to eligible ids.
        mine = ((1 << (last_created - base + 1)) - 1) & (-1 << (cur_low - base))

        if sp.kind == "class-targeted" and source_class_ids:
            pool = source_class_ids
            v = pool[int(rng_random() * len(pool))]
        elif src_w > 0.0 and src_cum is not None and rng_random() < src_w:
            i = bisect_right(src_cum, rng_random() * src_cum[-1])
            v = ids[i if i < deg else deg - 1]
        else:
            v = ids[int(rng_random() * deg)]

        if use_lu:
            avail = mine & ~(mask[v] | pending[v])
            if avail:
                chunk = avail.bit_length() - 1 + base
                idle[0] = 0
                pending[v] |= 1 << (chunk - base)
                heappush(in_flight, (now + t_source, 0, v, chunk, now))
                return
        else:
            chunk = mine.bit_length() - 1 + base
            idle[0] = 0
            heappush(in_flight, (now + t_source, 0, v, chunk, now))
            return
        wasted_slots += 1
        idle[0] = 0
        heappush(in_flight, (now + t_source, 0, -1, -1, now))

    # --- main loop --------------------------------------------------------
    # Chunk creations and epoch boundaries are strictly periodic, so they are
    # merged with the completion heap by scalar comparison instead of being
    # queued.  <= comparisons give the tie order creation < epoch < completion.
    next_creation = 0.0
    next_chunk_id = 0
    next_epoch = epoch_len if epoch_len else math.inf
    epoch_rolls = 0

    while True:
        t_flight = in_flight[0][0] if in_flight else math.inf
        t_next = next_creation if next_creation <= next_epoch else next_epoch
        if t_flight < t_next:
            t_next = t_flight
        if t_next == math.inf or t_next > duration + _TIME_EPS:
            break

        # Advance the eligibility cutoff: chunk cur_low expires at
        # cur_low * t_chunk + deadline (closed interval).
        while t_next > low_deadline + _TIME_EPS:
            cur_low += 1
            low_deadline = cur_low * t_chunk + deadline

        if next_creation <= t_next:
            now = next_creation
            last_created = next_chunk_id
            next_chunk_id += 1
            next_creation = next_chunk_id * t_chunk
            if next_creation >= duration:  # no chunk is created at t = duration
                next_creation = math.inf
            if cur_low - base >= _REBASE_SLACK:
                shift = cur_low - base
                for i in range(n + 1):
                    mask[i] >>= shift
                    pending[i] >>= shift
                    rec = receipt[i]
                    if rec:
                        receipt[i] = {c: t for c, t in rec.items() if c >= cur_low}
                base = cur_low
            if idle[0]:
                try_start_source(now)
            continue

        if next_epoch <= t_next:
            for h in histories:
                h.roll_epoch()
            tft_current = [h.current for h in histories]
            for i in range(n + 1):
                tft_dirty[i] = 1
            epoch_rolls += 1
            next_epoch = (epoch_rolls + 1) * epoch_len
            if next_epoch > duration + _TIME_EPS:
                next_epoch = math.inf
            continue

        arrival, sender, recv, chunk, start = heappop(in_flight)
        now = arrival
        if recv < 0:
            # Wasted slot elapsed; the sender tries again.
            if sender == 0:
                try_start_source(now)
            else:
                try_start_peer(sender, now)
            continue

        copies_sent[sender] += 1
        busy_time[sender] += arrival - start

        late = arrival > chunk * t_chunk + deadline + _TIME_EPS
        bit = chunk - base
        if bit >= 0:
            pending[recv] &= ~(1 << bit)
        if late:
            useful = False
        else:
            useful = not (mask[recv] >> bit) & 1
        if useful:
            ordn = ordinal.get(chunk, 0) + 1
            ordinal[chunk] = ordn
            mask[recv] |= 1 << bit
            receipt[recv][chunk] = arrival
        else:
            ordn = 0
        lg_chunk(chunk)
        lg_sender(sender)
        lg_recv(recv)
        lg_start(start)
        lg_arr(arrival)
        lg_useful(1 if useful else 0)
        lg_ordn(ordn)
        if tft:
            d = tft_current[recv]
            d[sender] = d.get(sender, 0.0) + chunk_mb

        if useful and idle[recv]:
            try_start_peer(recv, now)
        if sender == 0:
            try_start_source(now)
        else:
            try_start_peer(sender, now)

    peers: list[PeerState] = []
    if collect_states:
        for pid in range(1, n + 1):
            chunks = _mask_to_ids(mask[pid], base)
            evict_expired_ids(chunks, duration, deadline, t_chunk)
            rec = {c: t for c, t in receipt[pid].items() if c in chunks}
            peers.append(PeerState(
                peer=pid,
                class_id=cls[pid],
                chunks=chunks,
                receipt_times=rec,
                copies_sent=copies_sent[pid],
                busy_time=busy_time[pid],
                tft=histories[pid] if tft else None,
            ))

    return RunResult(
        log=log,
        peers=peers,
        scenario=s,
        epoch_rolls=epoch_rolls,
        source_widenings=source_widenings,
        wasted_slots=wasted_slots,
        overlay_warnings=overlay.warnings,
    )


def _mask_to_ids(m: int, base: int) -> set[int]:
    out = set()
    while m:
        low = m & -m
        out.add(low.bit_length() - 1 + base)
        m ^= low
    return out


def evict_expired_ids(chunks: set[int], now: float, deadline: float, chunk_period: float) -> list[int]:
    """Drop chunks older than the deadline from a collection; return their ids.

    A chunk created at c * chunk_period is still eligible at exactly
    creation + deadline (closed interval).
    """
    expired = sorted(c for c in chunks if c * chunk_period < now - deadline - _TIME_EPS)
    for c in expired:
        chunks.discard(c)
    return expired
