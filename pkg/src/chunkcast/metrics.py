"""Performance measures over transmission logs.

Scoring window: only chunks created in [warmup, duration - deadline] are
scored, so every scored chunk had its full deadline window observed.  A
(chunk, peer) pair counts as delivered iff a useful arrival happened within
the deadline; delays are measured from chunk creation.  Late arrivals count
as misses but stay in the raw log for diagnostics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .domain import Scenario
from .engine import TransmissionLog

# Convergence detection constants: tumbling windows over chunk-creation time,
# relative tolerance against the tail mean, tail = last quarter of the run.
# The absolute floors keep near-zero miss series from chasing noise.
CONV_WINDOW = 10.0
CONV_TOL = 0.05
CONV_TAIL_FRACTION = 0.25
CONV_MISS_FLOOR = 0.01
CONV_DELAY_FLOOR = 0.05


@dataclass
class ClassStats:
    class_id: int | None           # None = all peers
    population: int
    rate: float
    miss_ratio: float
    mean_delay: float | None       # None when nothing was delivered
    delay_variance: float | None   # across chunks, of the per-chunk mean delay
    miss_variance: float | None    # across chunks, of the per-chunk miss fraction
    convergence_time: float | None


@dataclass
class MetricsReport:
    scenario_seed: int
    scored_chunks: int
    first_scored_chunk: int
    per_class: dict[int, ClassStats]
    overall: ClassStats
    # Per scored chunk, per class (column U = all classes): delivered fraction
    # and mean delay (NaN when the chunk reached nobody in the class).
    chunk_rate: np.ndarray = field(repr=False, default=None)
    chunk_delay: np.ndarray = field(repr=False, default=None)
    chunk_delay_p95: np.ndarray = field(repr=False, default=None)

    def to_summary_dict(self) -> dict:
        def stats_dict(st: ClassStats) -> dict:
            return {
                "population": st.population,
                "rate": st.rate,
                "miss_ratio": st.miss_ratio,
                "mean_delay": st.mean_delay,
                "delay_variance": st.delay_variance,
                "miss_variance": st.miss_variance,
                "convergence_time": st.convergence_time,
            }

        return {
            "seed": self.scenario_seed,
            "scored_chunks": self.scored_chunks,
            "per_class": {str(cid): stats_dict(st) for cid, st in self.per_class.items()},
            "overall": stats_dict(self.overall),
        }

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_summary_dict(), fh, indent=2)
            fh.write("\n")

    def write_per_chunk_csv(self, path) -> None:
        """CSV `chunk_id,class,delivered_fraction,mean_delay,p95_delay` (class 0 = all)."""
        n_cls = self.chunk_rate.shape[1] - 1
        with open(path, "w") as fh:
            fh.write("chunk_id,class,delivered_fraction,mean_delay,p95_delay\n")
            for row, chunk in enumerate(range(self.first_scored_chunk,
                                              self.first_scored_chunk + self.scored_chunks)):
                for col in range(n_cls + 1):
                    label = 0 if col == n_cls else col + 1
                    d = self.chunk_delay[row, col]
                    p = self.chunk_delay_p95[row, col]
                    fh.write(f"{chunk},{label},{self.chunk_rate[row, col]:.6f},"
                             f"{'' if math.isnan(d) else f'{d:.6f}'},"
                             f"{'' if math.isnan(p) else f'{p:.6f}'}\n")

    def write_cdf_csv(self, path) -> None:
        """CSV `metric,class,x,F`: empirical CDFs of per-chunk rate and mean delay."""
        n_cls = self.chunk_rate.shape[1] - 1
        with open(path, "w") as fh:
            fh.write("metric,class,x,F\n")
            for metric, table in (("rate", self.chunk_rate), ("mean_delay", self.chunk_delay)):
                for col in range(n_cls + 1):
                    label = 0 if col == n_cls else col + 1
                    vals = table[:, col]
                    vals = np.sort(vals[~np.isnan(vals)])
                    if len(vals) == 0:
                        continue
                    frac = np.arange(1, len(vals) + 1) / len(vals)
                    for x, f in zip(vals, frac):
                        fh.write(f"{metric},{label},{x:.6f},{f:.6f}\n")


def _log_arrays(log: TransmissionLog):
    chunk = np.frombuffer(log.chunk_id, dtype=np.int32)
    recv = np.frombuffer(log.receiver, dtype=np.int32)
    arrival = np.frombuffer(log.arrival, dtype=np.float64)
    useful = np.frombuffer(log.useful, dtype=np.int8)
    return chunk, recv, arrival, useful


def summarize(log: TransmissionLog, s: Scenario) -> MetricsReport:
    """Reduce a completed run's log to the performance report.

    Pure function of (log, scenario): repeated calls agree bit-exactly.
    """
    if not s.validated:
        raise ValueError("scenario must be validated")
    t_chunk = s.stream.chunk_period
    deadline = s.buffer_deadline
    lo_t, hi_t = s.warmup, s.duration - deadline
    first = math.ceil(lo_t / t_chunk - 1e-9)
    last = math.floor(hi_t / t_chunk + 1e-9)
    n_chunks = last - first + 1
    if n_chunks <= 0:
        raise ValueError("duration too short for warmup + deadline: no chunk is scored")

    pops = list(s.populations)
    n_cls = len(pops)
    n = s.n
    # peer id -> class column (0-based)
    cls_col = np.zeros(n + 1, dtype=np.int64)
    pid = 1
    for ci, p in enumerate(pops):
        cls_col[pid:pid + p] = ci
        pid += p

    chunk, recv, arrival, useful = _log_arrays(log)
    mask = (useful == 1) & (chunk >= first) & (chunk <= last)
    c_sel = chunk[mask].astype(np.int64) - first
    r_sel = recv[mask]
    delays = arrival[mask] - (c_sel + first) * t_chunk
    cols = cls_col[r_sel]

    # delivered counts and delay sums per (chunk, class)
    idx = c_sel * n_cls + cols
    counts = np.bincount(idx, minlength=n_chunks * n_cls).reshape(n_chunks, n_cls)
    delay_sum = np.bincount(idx, weights=delays, minlength=n_chunks * n_cls).reshape(n_chunks, n_cls)

    pops_arr = np.array(pops, dtype=np.float64)
    chunk_rate = np.empty((n_chunks, n_cls + 1))
    chunk_rate[:, :n_cls] = counts / pops_arr
    chunk_rate[:, n_cls] = counts.sum(axis=1) / n

    with np.errstate(invalid="ignore", divide="ignore"):
        chunk_delay = np.empty((n_chunks, n_cls + 1))
        chunk_delay[:, :n_cls] = np.where(counts > 0, delay_sum / np.maximum(counts, 1), np.nan)
        tot = counts.sum(axis=1)
        chunk_delay[:, n_cls] = np.where(tot > 0, delay_sum.sum(axis=1) / np.maximum(tot, 1), np.nan)

    # p95 delay per chunk (global and per class) via sorting one chunk at a time
    chunk_p95 = np.full((n_chunks, n_cls + 1), np.nan)
    order = np.argsort(c_sel, kind="stable")
    c_ord, d_ord, col_ord = c_sel[order], delays[order], cols[order]
    bounds = np.searchsorted(c_ord, np.arange(n_chunks + 1))
    for row in range(n_chunks):
        a, b = bounds[row], bounds[row + 1]
        if b > a:
            dd = d_ord[a:b]
            cc = col_ord[a:b]
            chunk_p95[row, n_cls] = np.percentile(dd, 95)
            for ci in range(n_cls):
                sub = dd[cc == ci]
                if len(sub):
                    chunk_p95[row, ci] = np.percentile(sub, 95)

    # Convergence series over the whole run (the transient is the point).
    conv = _convergence_all(log, s, cls_col, n_cls)

    per_class: dict[int, ClassStats] = {}
    for ci in range(n_cls):
        delivered = counts[:, ci].sum()
        possible = pops[ci] * n_chunks
        rate = delivered / possible if possible else 0.0
        mean_delay = float(delay_sum[:, ci].sum() / delivered) if delivered else None
        dcol = chunk_delay[:, ci]
        dvals = dcol[~np.isnan(dcol)]
        per_class[ci + 1] = ClassStats(
            class_id=ci + 1,
            population=pops[ci],
            rate=float(rate),
            miss_ratio=float(1.0 - rate),
            mean_delay=mean_delay,
            delay_variance=float(np.var(dvals)) if len(dvals) else None,
            miss_variance=float(np.var(1.0 - chunk_rate[:, ci])),
            convergence_time=conv[ci],
        )

    delivered = counts.sum()
    possible = n * n_chunks
    rate = delivered / possible
    dcol = chunk_delay[:, n_cls]
    dvals = dcol[~np.isnan(dcol)]
    overall = ClassStats(
        class_id=None,
        population=n,
        rate=float(rate),
        miss_ratio=float(1.0 - rate),
        mean_delay=float(delay_sum.sum() / delivered) if delivered else None,
        delay_variance=float(np.var(dvals)) if len(dvals) else None,
        miss_variance=float(np.var(1.0 - chunk_rate[:, n_cls])),
        convergence_time=conv[n_cls],
    )

    return MetricsReport(
        scenario_seed=s.seed,
        scored_chunks=n_chunks,
        first_scored_chunk=first,
        per_class=per_class,
        overall=overall,
        chunk_rate=chunk_rate,
        chunk_delay=chunk_delay,
        chunk_delay_p95=chunk_p95,
    )


def _convergence_all(log, s, cls_col, n_cls) -> list[float | None]:
    """Convergence time per class plus overall (last list entry)."""
    t_chunk = s.stream.chunk_period
    deadline = s.buffer_deadline
    last = math.floor((s.duration - deadline) / t_chunk + 1e-9)
    if last < 0:
        return [None] * (n_cls + 1)

    chunk, recv, arrival, useful = _log_arrays(log)
    mask = (useful == 1) & (chunk <= last)
    c_sel = chunk[mask].astype(np.int64)
    delays = arrival[mask] - c_sel * t_chunk
    cols = cls_col[recv[mask]]

    n_windows = int(math.floor((last * t_chunk) / CONV_WINDOW)) + 1
    win = np.minimum((c_sel * t_chunk / CONV_WINDOW).astype(np.int64), n_windows - 1)
    chunks_per_window = np.bincount(
        np.minimum((np.arange(last + 1) * t_chunk / CONV_WINDOW).astype(np.int64), n_windows - 1),
        minlength=n_windows,
    )

    pops = list(s.populations) + [s.n]
    out: list[float | None] = []
    for ci in range(n_cls + 1):
        m = np.ones(len(cols), dtype=bool) if ci == n_cls else (cols == ci)
        wsel = win[m]
        delivered = np.bincount(wsel, minlength=n_windows)
        dsum = np.bincount(wsel, weights=delays[m], minlength=n_windows)
        possible = chunks_per_window * pops[ci]
        with np.errstate(invalid="ignore", divide="ignore"):
            miss = 1.0 - delivered / np.maximum(possible, 1)
            delay = np.where(delivered > 0, dsum / np.maximum(delivered, 1), np.nan)
        out.append(convergence_time(delay, miss))
    return out


def convergence_time(
    delay_series: np.ndarray,
    miss_series: np.ndarray,
    tol: float = CONV_TOL,
    window: float = CONV_WINDOW,
) -> float | None:
    """Earliest window start after which both series stay near their tail mean.

    "Near" means within tol * max(|tail mean|, floor) for the remainder of the
    run; the tail mean is taken over the last quarter of the windows.  Returns
    None when the series never stabilize (or a tail window is empty).
    """
    n = len(delay_series)
    if n == 0 or len(miss_series) != n:
        return None
    tail_start = max(0, n - max(1, int(math.ceil(n * CONV_TAIL_FRACTION))))
    tail_delay = delay_series[tail_start:]
    tail_miss = miss_series[tail_start:]
    if np.isnan(tail_delay).any() or np.isnan(tail_miss).any():
        return None
    m_delay = float(np.mean(tail_delay))
    m_miss = float(np.mean(tail_miss))
    band_delay = tol * max(abs(m_delay), CONV_DELAY_FLOOR)
    band_miss = tol * max(abs(m_miss), CONV_MISS_FLOOR)

    ok = np.zeros(n, dtype=bool)
    for i in range(n):
        d, ms = delay_series[i], miss_series[i]
        ok[i] = (not math.isnan(d)) and (not math.isnan(ms)) \
            and abs(d - m_delay) <= band_delay and abs(ms - m_miss) <= band_miss
    # earliest index w such that ok[w:] is all True
    idx = n
    for i in range(n - 1, -1, -1):
        if ok[i]:
            idx = i
        else:
            break
    if idx == n:
        return None
    return idx * window


@dataclass
class KthCopyPartition:
    class_id: int
    chunks: int
    rate_mean: float
    rate_ci95: float
    delay_mean: float | None
    delay_ci95: float | None


@dataclass
class KthCopyReport:
    k: int
    partitions: dict[int, KthCopyPartition]
    excluded_chunks: int              # scored chunks with fewer than k copies


def kth_copy_conditional(log: TransmissionLog, s: Scenario, k: int) -> KthCopyReport:
    """Final rate/delay of each chunk conditioned on who got its k-th copy.

    Scored chunks are partitioned by the class of the receiver of their k-th
    useful arrival; chunks with fewer than k copies are excluded and counted.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rep = summarize(log, s)
    first, n_chunks = rep.first_scored_chunk, rep.scored_chunks
    n_cls = len(s.populations)
    cls_col = np.zeros(s.n + 1, dtype=np.int64)
    pid = 1
    for ci, p in enumerate(s.populations):
        cls_col[pid:pid + p] = ci
        pid += p

    chunk, recv, arrival, useful = _log_arrays(log)
    ordn = np.frombuffer(log.copy_ordinal, dtype=np.int32)
    mask = (useful == 1) & (ordn == k) & (chunk >= first) & (chunk < first + n_chunks)
    kth_class = np.full(n_chunks, -1, dtype=np.int64)
    kth_class[chunk[mask].astype(np.int64) - first] = cls_col[recv[mask]]

    partitions: dict[int, KthCopyPartition] = {}
    for ci in range(n_cls):
        sel = kth_class == ci
        cnt = int(sel.sum())
        if cnt == 0:
            continue
        rates = rep.chunk_rate[sel, n_cls]
        delays = rep.chunk_delay[sel, n_cls]
        delays = delays[~np.isnan(delays)]
        rate_sd = float(np.std(rates, ddof=1)) if cnt > 1 else 0.0
        delay_mean = float(np.mean(delays)) if len(delays) else None
        delay_ci = 1.96 * float(np.std(delays, ddof=1)) / math.sqrt(len(delays)) if len(delays) > 1 else None
        partitions[ci + 1] = KthCopyPartition(
            class_id=ci + 1,
            chunks=cnt,
            rate_mean=float(np.mean(rates)),
            rate_ci95=1.96 * rate_sd / math.sqrt(cnt) if cnt > 1 else 0.0,
            delay_mean=delay_mean,
            delay_ci95=delay_ci,
        )
    return KthCopyReport(k=k, partitions=partitions, excluded_chunks=int((kth_class < 0).sum()))
