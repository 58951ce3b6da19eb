"""Replication decision rules.

A policy is asked for a decision whenever a server is assignable and
either a queued job or a replication candidate exists.  The observation
carries the offered server, the set of currently assignable servers, a
view of every in-flight job, and whether a new job is available.  All
policies are immutable and decide() is a pure function of the observation.
"""

import re
from dataclasses import dataclass
from functools import lru_cache

from .analytic import Partition
from .distributions import min_expectation
from .errors import InconsistentObservationError, PolicyError

INF = float("inf")


@dataclass(frozen=True)
class JobView:
    """Read-only snapshot of one in-flight job."""

    job_id: int
    origin: int
    servers: tuple
    elapsed: tuple
    elapsed_original: float
    history: tuple


@dataclass(frozen=True)
class Observation:
    server: int
    idle_servers: tuple
    jobs: tuple
    can_new: bool
    dists: tuple
    delta: float
    cancelling: tuple = ()

    def validate(self):
        for jv in self.jobs:
            if self.server in jv.servers:
                raise InconsistentObservationError(
                    f"offered server {self.server} already runs job {jv.job_id}"
                )
            if any(e < 0 for e in jv.elapsed):
                raise InconsistentObservationError(
                    f"negative elapsed time on job {jv.job_id}"
                )
        if self.server not in self.idle_servers:
            raise InconsistentObservationError(
                f"offered server {self.server} not in idle set {self.idle_servers}"
            )


@dataclass(frozen=True)
class Decision:
    """What to do with the offered server.

    kind "new": start the next queued job on every server in ``servers``
    (which must include the offered one).  kind "rep": add a replica of
    job ``job_id`` on ``servers``.  kind "plan": apply a complete refill
    of all assignable servers at once.  kind "wait": leave the server idle.
    """

    kind: str
    servers: tuple = ()
    job_id: int = -1
    plan: tuple = ()


WAIT = Decision("wait")


class Policy:
    name = "policy"

    def params_str(self) -> str:
        return ""

    def decide(self, obs: Observation) -> Decision:
        raise NotImplementedError

    def spec(self) -> str:
        p = self.params_str()
        return f"{self.name}:{p}" if p else self.name


class NoRep(Policy):
    """Every job runs on exactly one server: the first one offered."""

    name = "norep"

    def decide(self, obs):
        if obs.can_new:
            return Decision("new", servers=(obs.server,))
        return WAIT


class FullRep(Policy):
    """Each job is replicated on all servers; acts only when all are idle."""

    name = "fullrep"

    def decide(self, obs):
        k = len(obs.dists)
        if obs.can_new and len(obs.idle_servers) == k and not obs.jobs:
            return Decision("new", servers=tuple(range(k)))
        return WAIT


@dataclass(frozen=True)
class UpfrontRep(Policy):
    """Static partition into super-servers; a job occupies one whole group."""

    partition: Partition
    name = "upfront"

    def params_str(self):
        return str(self.partition)

    def decide(self, obs):
        group = tuple(sorted(self.partition.group_of(obs.server)))
        if obs.can_new and all(s in obs.idle_servers for s in group):
            return Decision("new", servers=group)
        return WAIT


@dataclass(frozen=True)
class MaxRate(Policy):
    """Greedy choice of the action that maximizes the instantaneous
    departure rate, the sum over jobs of one over the expected remaining
    time to departure.

    include_cancel_delay controls whether the cancellation window is added
    to the expected departure time of multi-replica jobs.
    """

    include_cancel_delay: bool = True
    name = "maxrate"

    def params_str(self):
        return "" if self.include_cancel_delay else "nodelta"

    def decide(self, obs):
        candidates = []
        if obs.can_new:
            candidates.append(Decision("new", servers=(obs.server,)))
        elif obs.jobs:
            candidates.append(WAIT)
        for jv in obs.jobs:
            candidates.append(Decision("rep", servers=(obs.server,), job_id=jv.job_id))
        if not candidates:
            return WAIT
        best = candidates[0]
        best_rate = instantaneous_rate(obs, best, self.include_cancel_delay)
        for cand in candidates[1:]:
            rate = instantaneous_rate(obs, cand, self.include_cancel_delay)
            if rate > best_rate * (1.0 + 1e-12):
                best, best_rate = cand, rate
        return best


@dataclass(frozen=True)
class AdaRep(Policy):
    """Threshold replication: replicate a job once its original copy has
    been in service at least the configured threshold and a server frees up.

    thresholds: mapping (origin server, target server) -> threshold for the
    heterogeneous form, used regardless of how often the job was already
    replicated.  homogeneous: nondecreasing per-extra-replica thresholds
    (tau_1, ..., tau_{K-1}); a job holding r copies needs elapsed >= tau_r
    for the next one.
    """

    thresholds: tuple = ()
    homogeneous: tuple = ()
    name = "adarep"

    def __post_init__(self):
        if self.homogeneous:
            taus = tuple(float(t) for t in self.homogeneous)
            if any(t < 0 for t in taus):
                raise ValueError(f"thresholds must be >= 0, got {taus}")
            if any(a > b for a, b in zip(taus, taus[1:])):
                raise ValueError(f"homogeneous thresholds must be nondecreasing, got {taus}")
            object.__setattr__(self, "homogeneous", taus)
        raw = self.thresholds
        items = raw.items() if isinstance(raw, dict) else [((o, t), v) for o, t, v in raw]
        table = tuple(sorted((int(o), int(t), float(v)) for (o, t), v in items))
        if any(v < 0 for _, _, v in table):
            raise ValueError("thresholds must be >= 0")
        object.__setattr__(self, "thresholds", table)

    def params_str(self):
        if self.homogeneous:
            return "[" + ",".join(_fmt_time(t) for t in self.homogeneous) + "]"
        items = ",".join(
            f"{o + 1}->{t + 1}:{_fmt_time(v)}" for o, t, v in self.thresholds
        )
        return "{" + items + "}"

    def _threshold(self, jv: JobView, target: int) -> float:
        if self.homogeneous:
            idx = len(jv.servers) - 1
            if idx >= len(self.homogeneous):
                return INF
            return self.homogeneous[idx]
        for o, t, v in self.thresholds:
            if o == jv.origin and t == target:
                return v
        return INF

    def decide(self, obs):
        best = None
        for jv in obs.jobs:
            thr = self._threshold(jv, obs.server)
            if jv.elapsed_original >= thr:
                key = (-jv.elapsed_original, jv.job_id)
                if best is None or key < best[0]:
                    best = (key, jv.job_id)
        if best is not None:
            return Decision("rep", servers=(obs.server,), job_id=best[1])
        if obs.can_new:
            return Decision("new", servers=(obs.server,))
        return WAIT


@dataclass(frozen=True)
class TabularPolicy(Policy):
    """Policy given as an explicit state -> refill-plan table.

    State keys are (job server-sets, per-server elapsed, per-server
    cancelling remaining); plans list (server group, "new" | job server-set)
    pairs covering every assignable server.
    """

    table: tuple
    name = "tabular"

    def __post_init__(self):
        object.__setattr__(self, "_lookup", dict(self.table))

    def params_str(self):
        return f"{len(self._lookup)}states"

    def decide(self, obs):
        key = observation_state_key(obs)
        plan = self._lookup.get(key)
        if plan is None:
            raise PolicyError(f"no action tabulated for state {key}")
        by_servers = {jv.servers: jv.job_id for jv in obs.jobs}
        resolved = []
        for group, target in plan:
            if target == "new":
                resolved.append((tuple(group), "new"))
            else:
                job_id = by_servers.get(tuple(sorted(target)))
                if job_id is None:
                    raise PolicyError(f"plan references missing job on servers {target}")
                resolved.append((tuple(group), job_id))
        return Decision("plan", plan=tuple(resolved))


def observation_state_key(obs: Observation):
    """Canonical (jobs, elapsed, cancelling) key matching the decision process."""
    k = len(obs.dists)
    elapsed = [0.0] * k
    for jv in obs.jobs:
        for s, e in zip(jv.servers, jv.elapsed):
            elapsed[s] = round(e, 9)
    cancel = [0.0] * k
    for s, rem in obs.cancelling:
        cancel[s] = round(rem, 9)
    jobs = tuple(sorted(tuple(sorted(jv.servers)) for jv in obs.jobs))
    return (jobs, tuple(elapsed), tuple(cancel))


def decide(policy: Policy, obs: Observation) -> Decision:
    """Validate the observation, then ask the policy."""
    obs.validate()
    return policy.decide(obs)


def instantaneous_rate(obs: Observation, action: Decision, include_cancel_delay=True) -> float:
    """Sum over jobs (after hypothetically applying the action) of
    1 / E[remaining time to departure], assuming no further replication.

    A multi-replica job's expected departure time includes the cancellation
    window unless include_cancel_delay is false.
    """
    delta = obs.delta if include_cancel_delay else 0.0
    rate = 0.0
    for jv in obs.jobs:
        extra = (obs.server,) if action.kind == "rep" and action.job_id == jv.job_id else ()
        rate += 1.0 / _expected_departure(
            tuple(zip(jv.servers, jv.elapsed)) + tuple((s, 0.0) for s in extra),
            obs.dists,
            delta,
        )
    if action.kind == "new":
        rate += 1.0 / _expected_departure(
            tuple((s, 0.0) for s in action.servers), obs.dists, delta
        )
    return rate


@lru_cache(maxsize=200_000)
def _expected_departure(replicas, dists, delta):
    laws = [dists[s].residual(e) if e > 0 else dists[s] for s, e in replicas]
    expected = min_expectation(laws)
    if len(replicas) >= 2:
        expected += delta
    return expected


def _fmt_time(t):
    if t == INF:
        return "inf"
    if t == int(t):
        return str(int(t))
    return repr(t)


# ---------------------------------------------------------------------------
# Policy literal grammar: norep | fullrep | upfront:[[1,2],[3]] | maxrate |
# adarep:{1->2:inf, 2->1:1.0} | adarep-hom:[0.1,0.2].  Server indices in
# literals are 1-based.

_ADAREP_ITEM = re.compile(r"^\s*(\d+)\s*->\s*(\d+)\s*:\s*(inf|[-+0-9.eE]+)\s*$")


def parse_policy(text: str) -> Policy:
    text = text.strip()
    head, _, args = text.partition(":")
    head = head.strip().lower()
    if head == "norep":
        return NoRep()
    if head == "fullrep":
        return FullRep()
    if head == "maxrate":
        return MaxRate(include_cancel_delay=args.strip() != "nodelta")
    if head == "upfront":
        groups = _parse_nested_ints(args)
        return UpfrontRep(Partition(tuple(frozenset(s - 1 for s in g) for g in groups)))
    if head == "adarep":
        body = args.strip()
        if not (body.startswith("{") and body.endswith("}")):
            raise ValueError(f"adarep thresholds must be {{o->t:value,...}}, got {args!r}")
        table = {}
        for item in body[1:-1].split(","):
            if not item.strip():
                continue
            m = _ADAREP_ITEM.match(item)
            if not m:
                raise ValueError(f"bad adarep threshold item {item!r}")
            o, t, v = int(m.group(1)) - 1, int(m.group(2)) - 1, m.group(3)
            table[(o, t)] = INF if v == "inf" else float(v)
        return AdaRep(thresholds=table)
    if head == "adarep-hom":
        vals = args.strip()
        if not (vals.startswith("[") and vals.endswith("]")):
            raise ValueError(f"adarep-hom thresholds must be [t1,t2,...], got {args!r}")
        taus = tuple(
            INF if v.strip() == "inf" else float(v)
            for v in vals[1:-1].split(",")
            if v.strip()
        )
        return AdaRep(homogeneous=taus)
    raise ValueError(f"unknown policy literal {text!r}")


def _parse_nested_ints(text):
    import ast as _ast

    value = _ast.literal_eval(text.strip())
    if not isinstance(value, list) or not all(isinstance(g, list) for g in value):
        raise ValueError(f"expected [[...],...], got {text!r}")
    return value
