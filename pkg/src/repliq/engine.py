"""Deterministic seeded discrete-event simulator of the central-queue
replication system.

One run is strictly sequential: events are processed in (time, kind, order)
order with departures before cancellation-window ends before arrivals, and
assignable servers are offered to the policy in ascending index order once
all events at a timestamp have been handled.  Identical (config, policy,
seed) triples therefore reproduce identical trajectories bit for bit.
"""

import hashlib
import heapq
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import PolicyError
from .policies import Decision, JobView, Observation, Policy

INF = float("inf")

_IDLE, _BUSY, _CANCEL = 0, 1, 2
_DEPART, _CANCEL_END, _ARRIVE = 0, 1, 2

_WARMUP_FRACTION = 0.01
_N_BATCHES = 20
_UNSTABLE_QUEUE_FACTOR = 10.0


@dataclass(frozen=True)
class SystemConfig:
    """Server service-time laws plus the shared cancellation delay."""

    servers: tuple
    delta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "servers", tuple(self.servers))
        if not self.servers:
            raise ValueError("need at least one server")
        if self.delta < 0:
            raise ValueError(f"cancellation delay must be >= 0, got {self.delta}")

    @property
    def k(self) -> int:
        return len(self.servers)

    def digest(self) -> str:
        text = ";".join(str(d) for d in self.servers) + f"|delta={self.delta!r}"
        return hashlib.sha256(text.encode()).hexdigest()[:12]


class _Job:
    __slots__ = ("id", "arrival", "servers", "starts", "origin", "departed")

    def __init__(self, job_id, arrival):
        self.id = job_id
        self.arrival = arrival
        self.servers = []
        self.starts = []
        self.origin = -1
        self.departed = False


@dataclass(frozen=True)
class RunResult:
    """Outcome of one simulation (or one averaged batch of runs)."""

    mode: str
    policy: str
    params: str
    lam: float
    n_jobs: int
    n_runs: int
    seed: int
    throughput: float
    throughput_stderr: float
    mean_computing: float
    mean_response: float
    response_stderr: float
    unstable: bool
    config_digest: str
    batches: tuple = ()
    max_idle_gap: float = 0.0
    queue_growth: float = 0.0

    def work_conservation(self, k: int):
        """(throughput x mean computing time, stderr of that product).

        For a work-conserving policy on a saturated queue the product is k.
        """
        ratios = [
            sum_c / dur for (_, dur, sum_c) in self.batches if dur > 0
        ]
        if not ratios:
            return self.throughput * self.mean_computing, 0.0
        mean = float(np.mean(ratios))
        err = float(np.std(ratios, ddof=1) / math.sqrt(len(ratios))) if len(ratios) > 1 else 0.0
        return mean, err


class _Sim:
    def __init__(self, config: SystemConfig, policy: Policy, rng, trace=None):
        self.config = config
        self.dists = config.servers
        self.k = config.k
        self.delta = config.delta
        self.policy = policy
        self.rng = rng
        self.trace = trace
        self.status = [_IDLE] * self.k
        self.server_job = [None] * self.k
        self.idle_since = [0.0] * self.k
        self.heap = []
        self.seq = 0
        self.jobs = {}
        self.next_job_id = 0
        self.queue = deque()
        self.saturated = True
        self.dep_times = []
        self.dep_cost = []
        self.dep_resp = []
        self.max_idle_gap = 0.0
        self.arrivals_seen = 0
        self.q_mid = 0
        self.q_end = 0
        self.served_at_horizon = 0

    # -- event plumbing ------------------------------------------------------

    def _push(self, time, kind, a, b):
        self.seq += 1
        heapq.heappush(self.heap, (time, kind, self.seq, a, b))

    def _log(self, time, event, job_id, server, detail):
        if self.trace is not None:
            self.trace.append((time, event, job_id, server, detail))

    # -- decisions -------------------------------------------------------------

    def _observation(self, server, now):
        views = []
        for job_id in sorted(self.jobs):
            job = self.jobs[job_id]
            elapsed = tuple(now - st for st in job.starts)
            views.append(
                JobView(
                    job_id=job_id,
                    origin=job.origin,
                    servers=tuple(job.servers),
                    elapsed=elapsed,
                    elapsed_original=elapsed[0],
                    history=tuple(job.servers),
                )
            )
        idle = tuple(i for i in range(self.k) if self.status[i] == _IDLE)
        cancelling = ()
        if self.delta > 0:
            cancelling = tuple(
                (i, self._cancel_until[i] - now)
                for i in range(self.k)
                if self.status[i] == _CANCEL
            )
        return Observation(
            server=server,
            idle_servers=idle,
            jobs=tuple(views),
            can_new=self.saturated or bool(self.queue),
            dists=self.dists,
            delta=self.delta,
            cancelling=cancelling,
        )

    def _scan(self, now):
        while True:
            acted = False
            for s in range(self.k):
                if self.status[s] != _IDLE:
                    continue
                if not self.saturated and not self.queue and not self.jobs:
                    return
                obs = self._observation(s, now)
                dec = self.policy.decide(obs)
                if dec.kind == "wait":
                    continue
                self._apply(dec, s, now)
                acted = True
            if not acted:
                return

    def _apply(self, dec: Decision, offered, now):
        if dec.kind == "plan":
            for group, target in dec.plan:
                if target == "new":
                    self._start_new(tuple(sorted(group)), now)
                else:
                    self._add_replicas(target, tuple(sorted(group)), now)
            return
        if dec.kind == "new":
            servers = tuple(sorted(dec.servers or (offered,)))
            if offered not in servers:
                raise PolicyError(f"new-job decision omits the offered server {offered}")
            self._start_new(servers, now)
            return
        if dec.kind == "rep":
            self._add_replicas(dec.job_id, dec.servers or (offered,), now)
            return
        raise PolicyError(f"unknown decision kind {dec.kind!r}")

    def _start_new(self, servers, now):
        if self.saturated:
            job = _Job(self.next_job_id, now)
            self.next_job_id += 1
        else:
            if not self.queue:
                raise PolicyError("new-job decision with an empty queue")
            job_id, arrival = self.queue.popleft()
            job = _Job(job_id, arrival)
        job.origin = servers[0]
        self.jobs[job.id] = job
        for s in servers:
            self._launch(job, s, now)

    def _add_replicas(self, job_id, servers, now):
        job = self.jobs.get(job_id)
        if job is None:
            raise PolicyError(f"replication target job {job_id} has no active copies")
        for s in servers:
            if s in job.servers:
                raise PolicyError(f"job {job_id} already runs on server {s}")
            self._launch(job, s, now)

    def _launch(self, job, s, now):
        if self.status[s] != _IDLE:
            raise PolicyError(f"server {s} is not idle")
        if self.saturated:
            gap = now - self.idle_since[s]
            if gap > self.max_idle_gap:
                self.max_idle_gap = gap
        draw = self.dists[s].sample(self.rng)
        self.status[s] = _BUSY
        self.server_job[s] = job
        job.servers.append(s)
        job.starts.append(now)
        self._push(now + draw, _DEPART, job, s)
        self._log(now, "start", job.id, s, len(job.servers))

    # -- events ---------------------------------------------------------------

    def _depart(self, job, finisher, now):
        if job.departed:
            return False
        job.departed = True
        ncopies = len(job.servers)
        cost = len(job.starts) * now - math.fsum(job.starts)
        if ncopies >= 2:
            cost += self.delta * ncopies
            for s in job.servers:
                if self.delta > 0:
                    self.status[s] = _CANCEL
                    self._cancel_until[s] = now + self.delta
                    self._push(now + self.delta, _CANCEL_END, s, job.id)
                else:
                    self._free(s, now)
        else:
            self._free(finisher, now)
        del self.jobs[job.id]
        self.dep_times.append(now)
        self.dep_cost.append(cost)
        self.dep_resp.append(now - job.arrival)
        self._log(now, "depart", job.id, finisher, ncopies)
        return True

    def _free(self, s, now):
        self.status[s] = _IDLE
        self.server_job[s] = None
        self.idle_since[s] = now

    # -- main loops -------------------------------------------------------------

    def run_saturated(self, n_jobs, horizon=None):
        self.saturated = True
        self._cancel_until = [0.0] * self.k
        self._scan(0.0)
        while self.heap:
            t = self.heap[0][0]
            if horizon is not None and t > horizon:
                break
            while self.heap and self.heap[0][0] == t:
                _, kind, _, a, b = heapq.heappop(self.heap)
                if kind == _DEPART:
                    self._depart(a, b, t)
                elif kind == _CANCEL_END:
                    self._free(a, t)
                    self._log(t, "cancel_end", b, a, self.delta)
                if len(self.dep_times) >= n_jobs:
                    return
            self._scan(t)

    def run_poisson(self, lam, n_jobs, horizon=None):
        self.saturated = False
        self._cancel_until = [0.0] * self.k
        self._push(self.rng.exponential(1.0 / lam), _ARRIVE, None, 0)
        while self.heap:
            t = self.heap[0][0]
            if horizon is not None and t > horizon:
                break
            while self.heap and self.heap[0][0] == t:
                _, kind, _, a, b = heapq.heappop(self.heap)
                if kind == _DEPART:
                    self._depart(a, b, t)
                elif kind == _CANCEL_END:
                    self._free(a, t)
                    self._log(t, "cancel_end", b, a, self.delta)
                elif kind == _ARRIVE:
                    self.arrivals_seen += 1
                    self.queue.append((self.next_job_id, t))
                    self._log(t, "arrive", self.next_job_id, -1, len(self.queue))
                    self.next_job_id += 1
                    if self.arrivals_seen == max(1, n_jobs // 2):
                        self.q_mid = len(self.queue)
                    if self.arrivals_seen < n_jobs:
                        self._push(t + self.rng.exponential(1.0 / lam), _ARRIVE, None, 0)
                    else:
                        self.q_end = len(self.queue)
                        self.served_at_horizon = len(self.dep_times)
            self._scan(t)
            if self.arrivals_seen >= n_jobs and len(self.dep_times) >= n_jobs:
                return


def run_saturated(config: SystemConfig, policy: Policy, n_jobs: int, seed: int) -> RunResult:
    """Simulate the never-empty queue for n_jobs departures.

    Throughput and mean computing time are taken after a warm-up of the
    first 1% of jobs; their standard errors come from 20 batch means.
    """
    if n_jobs < 1:
        raise ValueError(f"need n_jobs >= 1, got {n_jobs}")
    rng = np.random.default_rng(seed)
    sim = _Sim(config, policy, rng)
    sim.run_saturated(n_jobs)
    times, costs = sim.dep_times, sim.dep_cost
    n = len(times)
    warm = max(1, int(n * _WARMUP_FRACTION)) if n > 1 else 0
    t0 = times[warm - 1] if warm else 0.0
    post_t = times[warm:]
    post_c = costs[warm:]
    span = post_t[-1] - t0
    throughput = len(post_t) / span if span > 0 else INF
    mean_c = math.fsum(post_c) / len(post_c)
    batches = _batch_stats(post_t, post_c, t0)
    rates = [nb / dur for nb, dur, _ in batches if dur > 0]
    tp_err = (
        float(np.std(rates, ddof=1) / math.sqrt(len(rates))) if len(rates) > 1 else 0.0
    )
    return RunResult(
        mode="saturated",
        policy=policy.name,
        params=policy.params_str(),
        lam=0.0,
        n_jobs=n_jobs,
        n_runs=1,
        seed=seed,
        throughput=throughput,
        throughput_stderr=tp_err,
        mean_computing=mean_c,
        mean_response=0.0,
        response_stderr=0.0,
        unstable=False,
        config_digest=config.digest(),
        batches=tuple(batches),
        max_idle_gap=sim.max_idle_gap,
    )


def _batch_stats(times, costs, t_start):
    n = len(times)
    n_batches = min(_N_BATCHES, n)
    size = n // n_batches
    batches = []
    prev_t = t_start
    for b in range(n_batches):
        lo = b * size
        hi = n if b == n_batches - 1 else (b + 1) * size
        dur = times[hi - 1] - prev_t
        batches.append((hi - lo, dur, math.fsum(costs[lo:hi])))
        prev_t = times[hi - 1]
    return batches


def run_poisson(
    config: SystemConfig,
    policy: Policy,
    lam: float,
    n_jobs: int = 1000,
    n_runs: int = 100,
    seed: int = 0,
) -> RunResult:
    """Poisson arrivals at rate lam; servers idle when the queue is empty.

    Each of n_runs independent runs draws n_jobs arrivals and serves them
    to completion; the reported response time is the mean of per-run means
    with its across-run standard error.  The unstable flag fires when the
    backlog at the end of arrivals dwarfs the jobs served, or when the
    backlog keeps growing between the middle and the end of the arrival
    stream (the signature of lam at or above the policy's capacity).
    """
    if lam <= 0:
        raise ValueError(f"need lam > 0, got {lam}")
    run_means, growths, q_ends, serveds = [], [], [], []
    throughputs = []
    for i in range(n_runs):
        rng = np.random.default_rng([seed, i])
        sim = _Sim(config, policy, rng)
        sim.run_poisson(lam, n_jobs)
        run_means.append(math.fsum(sim.dep_resp) / len(sim.dep_resp))
        growths.append(sim.q_end - sim.q_mid)
        q_ends.append(sim.q_end)
        serveds.append(max(1, sim.served_at_horizon))
        throughputs.append(len(sim.dep_times) / sim.dep_times[-1])
    mean_resp = float(np.mean(run_means))
    resp_err = (
        float(np.std(run_means, ddof=1) / math.sqrt(n_runs)) if n_runs > 1 else 0.0
    )
    growth = float(np.mean(growths))
    growth_err = (
        float(np.std(growths, ddof=1) / math.sqrt(n_runs)) if n_runs > 1 else 0.0
    )
    k = config.k
    unstable = float(np.mean(q_ends)) > _UNSTABLE_QUEUE_FACTOR * float(
        np.mean(serveds)
    ) or growth > max(2.0 * k, 3.0 * growth_err)
    return RunResult(
        mode="poisson",
        policy=policy.name,
        params=policy.params_str(),
        lam=lam,
        n_jobs=n_jobs,
        n_runs=n_runs,
        seed=seed,
        throughput=float(np.mean(throughputs)),
        throughput_stderr=0.0,
        mean_computing=0.0,
        mean_response=mean_resp,
        response_stderr=resp_err,
        unstable=bool(unstable),
        config_digest=config.digest(),
        queue_growth=growth,
    )


def event_trace(
    config: SystemConfig,
    policy: Policy,
    horizon: float,
    seed: int,
    lam: float = 0.0,
):
    """Replay a run up to the time horizon, returning ordered event rows
    (time, event, job_id, server, detail).  Bit-identical across repeated
    invocations with the same arguments."""
    rng = np.random.default_rng(seed)
    trace = []
    sim = _Sim(config, policy, rng, trace=trace)
    if lam > 0:
        sim.run_poisson(lam, n_jobs=10**9, horizon=horizon)
    else:
        sim.run_saturated(n_jobs=10**9, horizon=horizon)
    return [row for row in trace if row[0] <= horizon]
