"""Deterministic constant-QPS serving simulation.

One accelerator serves every query. Prefills run one at a time in FIFO
order and take priority: while a prefill is running, no decoding happens.
Whenever the accelerator is free of prefill work, all queries in their decode
phase advance together (one batched decode step moves every active query by
one token). This reproduces the three regimes seen when sweeping offered load:

1. flat: each query finishes before the next arrives;
2. rising: prefills still keep pace, but they increasingly starve decoding;
3. timeout: arrivals outpace prefill and the queue grows until queries time out.

Since the accelerator can only keep up with prefill while ``qps * ttft < 1``,
the largest sustainable QPS scales as ``1 / ttft``.
"""

from __future__ import annotations

import heapq
import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .analytic import flops_profile
from .config import LLAMA_70B, ModelConfig, get_preset
from .errors import ConfigError

H200_NODE_FLOPS = 428.2e12
_EPS = 1e-9


@dataclass(frozen=True)
class CostModel:
    """Per-query service costs.

    TTFT is the base model's prefill MACs times ``flops_per_mac``, divided by
    ``throughput_flops`` and multiplied by ``ttft_scale`` (use
    :meth:`with_speculation` to apply a ``r + alpha`` factor).
    """

    model: ModelConfig = LLAMA_70B
    prompt_len: int = 8192
    throughput_flops: float = H200_NODE_FLOPS
    flops_per_mac: float = 2.0
    ttft_scale: float = 1.0
    per_decode_token_seconds: float = 0.025
    decode_tokens_per_query: int = 64
    prompt_len_jitter: float = 0.0

    def __post_init__(self):
        if self.prompt_len < 1 or self.decode_tokens_per_query < 0:
            raise ConfigError("prompt_len must be >= 1 and decode_tokens_per_query >= 0")
        if not (self.throughput_flops > 0 and self.flops_per_mac > 0 and self.ttft_scale > 0):
            raise ConfigError("throughput, flops_per_mac and ttft_scale must be positive")
        if self.per_decode_token_seconds < 0:
            raise ConfigError("per_decode_token_seconds must be >= 0")
        if not 0 <= self.prompt_len_jitter < 1:
            raise ConfigError("prompt_len_jitter must be in [0, 1)")

    def ttft_seconds(self, prompt_len: int | None = None) -> float:
        s = self.prompt_len if prompt_len is None else int(prompt_len)
        macs = flops_profile(self.model, 1, s).total
        return self.ttft_scale * macs * self.flops_per_mac / self.throughput_flops

    def decode_seconds(self) -> float:
        return self.per_decode_token_seconds * self.decode_tokens_per_query

    def service_seconds(self, prompt_len: int | None = None) -> float:
        """Latency of a query that never waits."""
        return self.ttft_seconds(prompt_len) + self.decode_seconds()

    def min_prompt_len(self) -> int:
        return max(1, int(math.floor(self.prompt_len * (1 - self.prompt_len_jitter))))

    def scaled(self, factor: float) -> "CostModel":
        """Same costs with TTFT multiplied by ``factor``."""
        return replace(self, ttft_scale=self.ttft_scale * factor)

    def with_speculation(self, r: float, alpha: float) -> "CostModel":
        return self.scaled(r + alpha)

    @classmethod
    def from_dict(cls, data: dict) -> "CostModel":
        data = dict(data)
        model = data.pop("model", None)
        if isinstance(model, str):
            data["model"] = get_preset(model)
        elif isinstance(model, dict):
            data["model"] = ModelConfig.from_dict(model)
        elif model is not None:
            raise ConfigError("model must be a preset name or a config mapping")
        if "throughput_tflops" in data:
            data["throughput_flops"] = float(data.pop("throughput_tflops")) * 1e12
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown cost model fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class QueryRecord:
    arrival: float
    service_start: float | None = None
    finish_time: float | None = None
    completed: bool = False

    @property
    def latency(self) -> float:
        return self.finish_time - self.arrival


@dataclass
class SimTrace:
    qps: float
    timeout: float
    records: list[QueryRecord] = field(default_factory=list)

    @property
    def num_completed(self) -> int:
        return sum(r.completed for r in self.records)

    @property
    def num_timed_out(self) -> int:
        return len(self.records) - self.num_completed

    @property
    def completion_fraction(self) -> float:
        return self.num_completed / len(self.records)

    @property
    def mean_latency(self) -> float:
        """Mean over completed queries; NaN if none completed."""
        lat = [r.latency for r in self.records if r.completed]
        return float(np.mean(lat)) if lat else float("nan")


def _prompt_lengths(cost: CostModel, n: int, seed) -> np.ndarray:
    if cost.prompt_len_jitter == 0:
        return np.full(n, cost.prompt_len, dtype=np.int64)
    rng = np.random.default_rng(seed)
    lo = cost.min_prompt_len()
    hi = int(math.ceil(cost.prompt_len * (1 + cost.prompt_len_jitter)))
    return rng.integers(lo, hi + 1, size=n)


def simulate(qps: float, num_queries: int, cost: CostModel, timeout: float, seed: int = 0,
             timeout_grace: float = 0.0) -> SimTrace:
    """Replay ``num_queries`` arrivals spaced exactly ``1/qps`` apart.

    A query still unfinished at ``arrival + timeout + timeout_grace`` is
    aborted at that instant and its remaining work dropped. A query counts as
    completed only if it finished within ``timeout`` of its arrival.
    ``seed`` only matters when the cost model jitters prompt lengths.
    """
    if not qps > 0:
        raise ConfigError("qps must be positive")
    if num_queries < 1:
        raise ConfigError("num_queries must be >= 1")
    n = int(num_queries)
    arrivals = np.arange(n) / qps
    lengths = _prompt_lengths(cost, n, seed)
    per_len = {int(p): cost.ttft_seconds(int(p)) for p in np.unique(lengths)}
    ttft = np.array([per_len[int(p)] for p in lengths])
    dec = cost.decode_seconds()
    abort_after = timeout + timeout_grace
    records = [QueryRecord(float(a)) for a in arrivals]

    t = 0.0
    vclock = 0.0  # accumulated decode progress
    nxt = 0
    queue: deque[int] = deque()
    running: int | None = None
    run_end = 0.0
    # query -> vclock value at which it finishes; insertion order is arrival order
    decoding: OrderedDict[int, float] = OrderedDict()
    heap: list[tuple[float, int]] = []
    resolved = 0

    def finish(i, when, ok):
        nonlocal resolved
        records[i].finish_time = when
        records[i].completed = ok
        resolved += 1

    while resolved < n:
        cands = []
        if nxt < n:
            cands.append(arrivals[nxt])
        if running is not None:
            cands.append(run_end)
            cands.append(arrivals[running] + abort_after)
        elif decoding:
            while heap and heap[0][1] not in decoding:
                heapq.heappop(heap)
            cands.append(t + max(0.0, heap[0][0] - vclock))
        if queue:
            cands.append(arrivals[queue[0]] + abort_after)
        if decoding:
            cands.append(arrivals[next(iter(decoding))] + abort_after)
        t_next = max(t, min(cands))
        if running is None:
            vclock += t_next - t
        t = t_next

        # completions before deadlines: finishing exactly at the deadline counts
        if running is not None and run_end <= t + _EPS:
            i, running = running, None
            if dec == 0:
                finish(i, t, t - arrivals[i] <= timeout + _EPS)
            else:
                decoding[i] = vclock + dec
                heapq.heappush(heap, (vclock + dec, i))
        while heap and (heap[0][1] not in decoding or heap[0][0] <= vclock + _EPS):
            _, i = heapq.heappop(heap)
            if decoding.pop(i, None) is not None:
                finish(i, t, t - arrivals[i] <= timeout + _EPS)

        if running is not None and arrivals[running] + abort_after <= t + _EPS:
            finish(running, t, False)
            running = None
        while queue and arrivals[queue[0]] + abort_after <= t + _EPS:
            finish(queue.popleft(), t, False)
        while decoding and arrivals[next(iter(decoding))] + abort_after <= t + _EPS:
            i, _ = decoding.popitem(last=False)
            finish(i, t, False)

        while nxt < n and arrivals[nxt] <= t + _EPS:
            queue.append(nxt)
            nxt += 1
        if running is None and queue:
            running = queue.popleft()
            records[running].service_start = t
            run_end = t + ttft[running]

    return SimTrace(qps=float(qps), timeout=float(timeout), records=records)


@dataclass
class SweepPoint:
    qps: float
    mean_latency: float
    completion_fraction: float
    stage: str = ""


@dataclass
class SweepResult:
    points: list[SweepPoint]
    flat_end: float | None
    timeout_start: float | None

    @property
    def stages(self) -> list[str]:
        return [p.stage for p in self.points]


def sweep_qps(qps_grid: Sequence[float], cost: CostModel, timeout: float,
              num_queries: int = 600, seed: int = 0, flat_tolerance: float = 1e-3) -> SweepResult:
    """Latency curve over an ascending QPS grid, labelled flat / rising / timeout.

    A point is ``flat`` while its latency stays within ``flat_tolerance``
    (relative) of the lowest completed latency, ``timeout`` once any query
    times out, and ``rising`` in between. Boundaries are only reported for
    grids of two or more points.
    """
    grid = [float(q) for q in qps_grid]
    if not grid:
        raise ConfigError("empty qps grid")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("qps grid must be strictly ascending")
    points = []
    for q in grid:
        tr = simulate(q, num_queries, cost, timeout, seed=seed)
        points.append(SweepPoint(q, tr.mean_latency, tr.completion_fraction))

    done = [p.mean_latency for p in points if p.completion_fraction == 1.0]
    floor = min(done) if done else float("nan")
    for p in points:
        if p.completion_fraction < 1.0:
            p.stage = "timeout"
        elif p.mean_latency <= floor * (1 + flat_tolerance):
            p.stage = "flat"
        else:
            p.stage = "rising"

    if len(points) < 2:
        return SweepResult(points, None, None)
    flat_end = None
    for p in points:
        if p.stage != "flat":
            break
        flat_end = p.qps
    timeout_start = next((p.qps for p in points if p.stage == "timeout"), None)
    return SweepResult(points, flat_end, timeout_start)


def max_qps(cost: CostModel, timeout: float, tolerance: float = 1e-3,
            horizon_seconds: float | None = None, seed: int = 0) -> float:
    """Largest QPS at which every query in a fixed time horizon completes.

    Found by bisection to ``tolerance`` relative precision. The horizon
    defaults to 50 timeouts, long enough that the transient backlog allowed
    by the timeout is small next to the steady-state load. Returns 0 when a
    lone query cannot finish within the timeout.
    """
    if not tolerance > 0:
        raise ConfigError("tolerance must be positive")
    if cost.service_seconds(cost.min_prompt_len()) > timeout:
        return 0.0
    horizon = 50.0 * timeout if horizon_seconds is None else float(horizon_seconds)

    def ok(q):
        n = max(1, int(math.ceil(q * horizon)))
        return simulate(q, n, cost, timeout, seed=seed).completion_fraction == 1.0

    worst = max(cost.service_seconds(p) for p in (cost.min_prompt_len(), cost.prompt_len))
    lo = 0.5 / worst
    if not ok(lo):
        # backlog-free spacing already fails: only possible with heavy jitter
        return 0.0
    hi = 2.0 * lo
    while ok(hi):
        lo, hi = hi, 2.0 * hi
    while (hi - lo) > tolerance * lo:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def default_qps_grid(cost: CostModel, points: int = 40) -> np.ndarray:
    """Grid spanning all three regimes, up to twice the prefill-bound rate."""
    cap = 1.0 / cost.ttft_seconds()
    return np.linspace(cap / points * 2, 2 * cap, points)
