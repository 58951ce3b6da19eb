"""Average-cost decision process for throughput-optimal replication.

For atomic (finite-support) service laws, the system observed at
server-release epochs is a finite Markov decision process: a state holds
the server sets of in-flight jobs, each server's elapsed service time,
each server's remaining cancellation window, and a counter of departures
still to be emitted when several jobs finish together.  Actions are
complete refill plans for the assignable servers (each group of freed
servers starts a fresh job or joins an existing one).  The cost of a
transition is K times the time it spans, so minimizing average cost per
departure maximizes throughput: rate = K / gain.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    MultichainError,
    NoConvergenceError,
    NonLatticeDeltaError,
    StateExplosionError,
)
from .policies import TabularPolicy

INF = float("inf")

_ROUND = 9

STATE_CAP = 1_000_000


@dataclass
class MdpKernel:
    states: list
    index: dict
    actions: list
    k: int
    delta: float

    @property
    def n_states(self):
        return len(self.states)


@dataclass
class MdpSolution:
    gain: float
    throughput: float
    choices: list
    iterations: int
    method: str


def build_mdp(ds, delta: float = 0.0, state_cap: int = STATE_CAP) -> MdpKernel:
    """Breadth-first reachable kernel from the all-idle state.

    Requires every service law to be atomic; the cancellation delay must
    sit on the lattice spanned by the atom values so elapsed times stay on
    a finite grid.
    """
    ds = tuple(ds)
    atom_lists = []
    for d in ds:
        atoms = d._atoms()
        if atoms is None:
            raise ValueError(
                f"decision process needs finite-support laws, got {d}"
            )
        atom_lists.append(atoms)
    _check_delta_lattice(atom_lists, delta)
    k = len(ds)
    start = ((), (0.0,) * k, (0.0,) * k, 0)
    states = [start]
    index = {start: 0}
    actions = []
    frontier = 0
    while frontier < len(states):
        state = states[frontier]
        acts = []
        for label, occupancy in _enumerate_actions(state, k):
            if occupancy is None:  # null step of a multi-departure chain
                jobs, elapsed, cancel, pending = state
                nxt = (jobs, elapsed, cancel, pending - 1)
                idx = _intern(nxt, states, index, state_cap)
                acts.append((label, ((idx, 1.0, 0.0, 1),)))
                continue
            groups = {}
            for combo_state, prob, cost, departs in _step(ds, occupancy, delta, k):
                key = (combo_state, departs)
                agg = groups.setdefault(key, [0.0, 0.0])
                agg[0] += prob
                agg[1] += prob * cost
            trans = []
            for (nxt, departs), (p, c) in sorted(groups.items()):
                idx = _intern(nxt, states, index, state_cap)
                trans.append((idx, p, c / p, departs))
            acts.append((label, tuple(trans)))
        actions.append(acts)
        frontier += 1
    return MdpKernel(states=states, index=index, actions=actions, k=k, delta=delta)


def _intern(state, states, index, cap):
    idx = index.get(state)
    if idx is None:
        if len(states) >= cap:
            raise StateExplosionError(f"more than {cap} reachable states")
        idx = len(states)
        index[state] = idx
        states.append(state)
    return idx


def _check_delta_lattice(atom_lists, delta):
    if delta < 0:
        raise NonLatticeDeltaError(f"cancellation delay must be >= 0, got {delta}")
    if delta == 0:
        return
    scale = 10**6
    scaled = []
    for atoms in atom_lists:
        for v, _ in atoms:
            s = v * scale
            if abs(s - round(s)) > 1e-3:
                raise NonLatticeDeltaError(f"atom {v} not on the 1e-6 value grid")
            scaled.append(int(round(s)))
    g = 0
    for s in scaled:
        g = math.gcd(g, s)
    sd = delta * scale
    if abs(sd - round(sd)) > 1e-3 or (g > 0 and int(round(sd)) % g != 0):
        raise NonLatticeDeltaError(
            f"delta {delta} is not a lattice multiple of the atom values"
        )


def _enumerate_actions(state, k):
    """(label, occupancy) pairs; occupancy None marks the null step."""
    jobs, elapsed, cancel, pending = state
    if pending > 0:
        return [("null", None)]
    busy = {s for job in jobs for s in job}
    assignable = tuple(
        s for s in range(k) if s not in busy and cancel[s] == 0.0
    )
    if not assignable:
        return [("advance", (jobs, elapsed, cancel))]
    out = []
    for plan in _refill_plans(assignable, jobs):
        new_jobs = list(jobs)
        new_elapsed = list(elapsed)
        for group, target in plan:
            if target == "new":
                new_jobs.append(tuple(sorted(group)))
            else:
                i = new_jobs.index(target)
                new_jobs[i] = tuple(sorted(target + tuple(group)))
            for s in group:
                new_elapsed[s] = 0.0
        out.append(
            (_plan_label(plan), (tuple(sorted(new_jobs)), tuple(new_elapsed), cancel))
        )
    return sorted(out)


def _refill_plans(assignable, jobs):
    plans = []
    for parts in _set_partitions(list(assignable)):
        def extend(i, used, acc):
            if i == len(parts):
                plans.append(tuple(acc))
                return
            extend(i + 1, used, acc + [(tuple(parts[i]), "new")])
            for job in jobs:
                if job in used:
                    continue
                extend(i + 1, used | {job}, acc + [(tuple(parts[i]), job)])

        extend(0, frozenset(), [])
    return plans


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for sub in _set_partitions(rest):
        for i in range(len(sub)):
            yield sub[:i] + [[first] + sub[i]] + sub[i + 1 :]
        yield [[first]] + sub


def _plan_label(plan):
    parts = []
    for group, target in sorted(plan):
        g = ",".join(str(s + 1) for s in group)
        if target == "new":
            parts.append(f"new[{g}]")
        else:
            t = ",".join(str(s + 1) for s in target)
            parts.append(f"rep[{g}]->[{t}]")
    return "+".join(parts)


def _step(ds, occupancy, delta, k):
    """Joint outcomes until the next server-release epoch.

    Yields (next_state, probability, cost, departures-flag) per outcome of
    the conditional service laws of the busy servers.
    """
    jobs, elapsed, cancel = occupancy
    busy = sorted({s for job in jobs for s in job})
    residual_atoms = []
    for s in busy:
        d = ds[s]
        law = d if elapsed[s] == 0 else d.residual(elapsed[s])
        residual_atoms.append(law._atoms())
    cancel_releases = [c for c in cancel if c > 0]
    for combo in itertools.product(*residual_atoms):
        prob = 1.0
        draw = {}
        for s, (v, p) in zip(busy, combo):
            prob *= p
            draw[s] = round(v, _ROUND)
        completion = {job: min(draw[s] for s in job) for job in jobs}
        release = {
            job: round(c + (delta if len(job) >= 2 else 0.0), _ROUND)
            for job, c in completion.items()
        }
        tau = min(
            min(release.values(), default=INF),
            min(cancel_releases, default=INF),
        )
        finished = [job for job in jobs if completion[job] <= tau]
        survivors = [job for job in jobs if completion[job] > tau]
        nxt_elapsed = [0.0] * k
        nxt_cancel = [0.0] * k
        for job in survivors:
            for s in job:
                nxt_elapsed[s] = round(elapsed[s] + tau, _ROUND)
        for job in finished:
            rem = round(release[job] - tau, _ROUND)
            if rem > 0:
                for s in job:
                    nxt_cancel[s] = rem
        for s, c in enumerate(cancel):
            if c > 0:
                rem = round(c - tau, _ROUND)
                if rem > 0:
                    nxt_cancel[s] = rem
        h = len(finished)
        nxt = (
            tuple(sorted(survivors)),
            tuple(nxt_elapsed),
            tuple(nxt_cancel),
            max(0, h - 1),
        )
        yield nxt, prob, k * tau, (1 if h >= 1 else 0)


# ---------------------------------------------------------------------------
# Solvers.


def solve_average_cost(kernel: MdpKernel, tol: float = 1e-9, max_iters: int = 200_000) -> MdpSolution:
    """Minimize the long-run cost per departure; throughput is K / gain.

    When every transition emits one departure (no cancellation windows, so
    release epochs coincide with departures), relative value iteration with
    an aperiodicity damping step and span-seminorm stopping solves the
    standard per-step problem directly.  Otherwise zero-departure epochs
    make the horizon a transition-dependent count; the optimal cost per
    departure is then the root of g -> (minimal per-step average of
    cost - g * departures), a decreasing function, found by bisection with
    the same iteration inside.  The chain induced by the returned policy is
    verified to have a single recurrent class.
    """
    uniform_departures = all(
        d == 1
        for acts in kernel.actions
        for _, trans in acts
        for _, _, _, d in trans
    )
    if uniform_departures:
        gain, choices, iters = _rvi_per_step(kernel, 0.0, tol, max_iters)
        solution = MdpSolution(
            gain=float(gain),
            throughput=float(kernel.k / gain),
            choices=choices,
            iterations=iters,
            method="rvi",
        )
    else:
        solution = _solve_with_departure_gaps(kernel, tol, max_iters)
    _verify_unichain(kernel, solution.choices)
    return solution


def _rvi_per_step(kernel, departure_charge, tol, max_iters, damping=0.5):
    """Relative value iteration on per-transition costs c - charge * d.

    Returns (per-step average cost under the optimal policy, greedy
    choices, iterations).  The damped update keeps periodic chains
    contracting in the span seminorm.
    """
    n = kernel.n_states
    h = np.zeros(n)
    choices = [0] * n
    span = INF
    for it in range(1, max_iters + 1):
        w = np.empty(n)
        for s in range(n):
            best = INF
            best_a = 0
            for a, (_, trans) in enumerate(kernel.actions[s]):
                val = 0.0
                for j, p, c, d in trans:
                    val += p * (c - departure_charge * d + h[j])
                if val < best - 1e-15:
                    best, best_a = val, a
            w[s] = best
            choices[s] = best_a
        diff = w - h
        span = diff.max() - diff.min()
        if span < tol:
            return float(0.5 * (diff.max() + diff.min())), list(choices), it
        h = damping * (w - w[0]) + (1.0 - damping) * h
    raise NoConvergenceError(f"span {span:.3e} after {max_iters} iterations")


def _solve_with_departure_gaps(kernel, tol, max_iters):
    inner_tol = min(tol, 1e-10)

    def phi(g):
        return _rvi_per_step(kernel, g, inner_tol, max_iters)

    lo, hi = 0.0, 1.0
    iters = 0
    value, choices, it = phi(hi)
    iters += it
    while value > 0.0:
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            raise NoConvergenceError("cost per departure appears unbounded")
        value, choices, it = phi(hi)
        iters += it
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        value, choices, it = phi(mid)
        iters += it
        if abs(value) < tol or (hi - lo) < tol * max(1.0, mid):
            return MdpSolution(
                gain=mid,
                throughput=kernel.k / mid,
                choices=choices,
                iterations=iters,
                method="bisection-rvi",
            )
        if value > 0.0:
            lo = mid
        else:
            hi = mid
    raise NoConvergenceError("bisection on the departure charge did not close")


def _evaluate(kernel, choices, ref=0):
    n = kernel.n_states
    a = np.zeros((n + 1, n + 1))
    b = np.zeros(n + 1)
    for s in range(n):
        _, trans = kernel.actions[s][choices[s]]
        a[s, s] += 1.0
        for j, p, c, d in trans:
            a[s, j] -= p
            a[s, n] += p * d
            b[s] += p * c
    a[n, ref] = 1.0
    sol, residual, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < n + 1:
        raise MultichainError("policy evaluation system is singular")
    return sol[n], sol[:n]


def _verify_unichain(kernel, choices, start=0):
    """One recurrent class among the states the solved policy can visit."""
    n = kernel.n_states
    adj = [
        [j for j, p, _, _ in kernel.actions[s][choices[s]][1] if p > 0]
        for s in range(n)
    ]
    reachable = {start}
    stack = [start]
    while stack:
        for j in adj[stack.pop()]:
            if j not in reachable:
                reachable.add(j)
                stack.append(j)
    sccs = _strongly_connected(adj, reachable)
    comp = {}
    for ci, scc in enumerate(sccs):
        for s in scc:
            comp[s] = ci
    closed = set(range(len(sccs)))
    for s in reachable:
        for j in adj[s]:
            if comp[j] != comp[s]:
                closed.discard(comp[s])
    if len(closed) != 1:
        raise MultichainError(f"{len(closed)} recurrent classes under the solved policy")


def _strongly_connected(adj, nodes=None):
    n = len(adj)
    if nodes is None:
        nodes = range(n)
    keep = set(nodes)
    adj = [[j for j in out if j in keep] if s in keep else [] for s, out in enumerate(adj)]
    order = []
    seen = [s not in keep for s in range(n)]
    for root in nodes:
        if seen[root]:
            continue
        stack = [(root, iter(adj[root]))]
        seen[root] = True
        while stack:
            node, it = stack[-1]
            advanced = False
            for j in it:
                if not seen[j]:
                    seen[j] = True
                    stack.append((j, iter(adj[j])))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
    radj = [[] for _ in range(n)]
    for s in range(n):
        for j in adj[s]:
            radj[j].append(s)
    seen = [False] * n
    sccs = []
    for node in reversed(order):
        if seen[node]:
            continue
        scc = []
        stack = [node]
        seen[node] = True
        while stack:
            v = stack.pop()
            scc.append(v)
            for j in radj[v]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        sccs.append(scc)
    return sccs


# ---------------------------------------------------------------------------
# Exporting the solved policy.


def state_string(state) -> str:
    jobs, elapsed, cancel, pending = state
    js = "[" + ";".join("[" + ",".join(str(s + 1) for s in job) + "]" for job in jobs) + "]"
    ts = ",".join(_num(t) for t in elapsed)
    cs = ",".join(_num(c) for c in cancel)
    return f"jobs={js}|t={ts}|c={cs}|dr={pending}"


def _num(x):
    return str(int(x)) if x == int(x) else repr(x)


def policy_rows(kernel: MdpKernel, solution: MdpSolution):
    """(state, action) rows for every decision state of the solved policy."""
    rows = []
    for s, state in enumerate(kernel.states):
        label, _ = kernel.actions[s][solution.choices[s]]
        rows.append((state_string(state), label))
    return rows


def as_tabular_policy(kernel: MdpKernel, solution: MdpSolution) -> TabularPolicy:
    """Wrap the solved policy so the event-driven simulator can replay it."""
    table = []
    for s, state in enumerate(kernel.states):
        jobs, elapsed, cancel, pending = state
        if pending > 0:
            continue
        label, _ = kernel.actions[s][solution.choices[s]]
        if label == "advance":
            continue
        plan = _plan_from_label(label)
        table.append(((jobs, elapsed, cancel), plan))
    return TabularPolicy(table=tuple(table))


def _plan_from_label(label):
    plan = []
    for part in label.split("+"):
        if part.startswith("new["):
            group = tuple(int(x) - 1 for x in part[4:-1].split(","))
            plan.append((group, "new"))
        else:
            left, right = part.split("->")
            group = tuple(int(x) - 1 for x in left[4:-1].split(","))
            target = tuple(int(x) - 1 for x in right[1:-1].split(","))
            plan.append((group, target))
    return tuple(plan)
