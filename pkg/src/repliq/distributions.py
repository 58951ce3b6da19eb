"""Service-time distribution algebra.

Every throughput formula in the toolkit consumes the same handful of
quantities: the mean, the tail P(X > x), the truncated mean E[min(X, t)],
the residual law (X - t | X > t), and expectations of minima of independent
service times.  This module provides them in closed form per variant and
falls back to breakpoint-aware quadrature only where no closed form exists
(products of heterogeneous tails).

Conventions: tail(x) = P(X > x) and equals 1 for any x below the support;
``float('inf')`` is an admissible threshold/age everywhere it makes sense.
"""

import ast
import bisect
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import InfiniteMeanError, ZeroSupportError

INF = float("inf")

_QUAD_OPTS = dict(epsabs=1e-13, epsrel=1e-11, limit=400)


class ServiceDistribution:
    """Immutable law of one server's service time; safe to share across threads."""

    __slots__ = ()

    def mean(self) -> float:
        raise NotImplementedError

    def tail(self, x: float) -> float:
        """P(X > x)."""
        raise NotImplementedError

    def truncated_mean(self, t: float) -> float:
        """E[min(X, t)] = integral of the tail over [0, t]."""
        raise NotImplementedError

    def quantile(self, p: float) -> float:
        """Smallest x with P(X <= x) >= p, for p in [0, 1)."""
        raise NotImplementedError

    def residual(self, t: float) -> "ServiceDistribution":
        """Law of (X - t) given X > t; raises ZeroSupportError if tail(t) = 0."""
        if t == 0:
            return self
        if self.tail(t) <= 0.0:
            raise ZeroSupportError(f"no mass beyond t={t} for {self}")
        return self._residual(t)

    def _residual(self, t: float) -> "ServiceDistribution":
        return Residual(self, t)

    def sample(self, rng) -> float:
        """One draw by inverse transform; deterministic given the generator state."""
        return self.quantile(rng.random())

    def sample_array(self, rng, n: int) -> np.ndarray:
        return np.array([self.sample(rng) for _ in range(n)])

    # -- integration protocol -------------------------------------------------
    # _support_upper: sup of the support (inf when unbounded).
    # _breakpoints: x values where the tail jumps or kinks.
    # _decay: ("bounded",) | ("exp",) | ("poly", alpha) asymptotic tail class.
    # _atoms: [(value, prob), ...] for purely atomic laws, else None.

    def _support_upper(self) -> float:
        return INF

    def _breakpoints(self) -> tuple:
        return ()

    def _decay(self) -> tuple:
        return ("exp",)

    def _atoms(self):
        return None


@dataclass(frozen=True)
class Deterministic(ServiceDistribution):
    """Constant service time."""

    value: float

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"deterministic value must be >= 0, got {self.value}")

    def mean(self):
        return self.value

    def tail(self, x):
        return 1.0 if x < self.value else 0.0

    def truncated_mean(self, t):
        return min(self.value, t)

    def quantile(self, p):
        return self.value

    def _residual(self, t):
        return Deterministic(self.value - t)

    def sample(self, rng):
        return self.value

    def sample_array(self, rng, n):
        return np.full(n, self.value)

    def _support_upper(self):
        return self.value

    def _breakpoints(self):
        return (self.value,)

    def _decay(self):
        return ("bounded",)

    def _atoms(self):
        return ((self.value, 1.0),)

    def __str__(self):
        return f"det({_fmt(self.value)})"


@dataclass(frozen=True)
class Exponential(ServiceDistribution):
    """Memoryless service time with the given rate."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be > 0, got {self.rate}")

    def mean(self):
        return 1.0 / self.rate

    def tail(self, x):
        if x <= 0:
            return 1.0
        return math.exp(-self.rate * x)

    def truncated_mean(self, t):
        if t == INF:
            return self.mean()
        return -math.expm1(-self.rate * t) / self.rate

    def quantile(self, p):
        return -math.log1p(-p) / self.rate

    def _residual(self, t):
        return self

    def sample_array(self, rng, n):
        return -np.log1p(-rng.random(n)) / self.rate

    def __str__(self):
        return f"exp({_fmt(self.rate)})"


@dataclass(frozen=True)
class Shifted(ServiceDistribution):
    """A fixed delay followed by the inner service time."""

    shift: float
    inner: ServiceDistribution

    def __post_init__(self):
        if not self.shift >= 0:
            raise ValueError(f"shift must be >= 0, got {self.shift}")

    def mean(self):
        return self.shift + self.inner.mean()

    def tail(self, x):
        return self.inner.tail(x - self.shift)

    def truncated_mean(self, t):
        if t <= self.shift:
            return t
        return self.shift + self.inner.truncated_mean(t - self.shift)

    def quantile(self, p):
        return self.shift + self.inner.quantile(p)

    def _residual(self, t):
        if t < self.shift:
            return Shifted(self.shift - t, self.inner)
        return self.inner.residual(t - self.shift)

    def sample(self, rng):
        return self.shift + self.inner.sample(rng)

    def sample_array(self, rng, n):
        return self.shift + self.inner.sample_array(rng, n)

    def _support_upper(self):
        return self.shift + self.inner._support_upper()

    def _breakpoints(self):
        return (self.shift,) + tuple(self.shift + b for b in self.inner._breakpoints())

    def _decay(self):
        return self.inner._decay()

    def _atoms(self):
        inner = self.inner._atoms()
        if inner is None:
            return None
        return tuple((self.shift + v, p) for v, p in inner)

    def __str__(self):
        if isinstance(self.inner, Exponential):
            return f"shiftexp({_fmt(self.shift)},{_fmt(self.inner.rate)})"
        return f"shift({_fmt(self.shift)}, {self.inner})"


@dataclass(frozen=True)
class HyperExp(ServiceDistribution):
    """Mixture of two exponentials: rate2 with probability p2, else rate1."""

    rate1: float
    rate2: float
    p2: float

    def __post_init__(self):
        if not (self.rate1 > 0 and self.rate2 > 0):
            raise ValueError("hyperexponential rates must be > 0")
        if not 0.0 <= self.p2 <= 1.0:
            raise ValueError(f"p2 must be in [0, 1], got {self.p2}")

    def mean(self):
        return (1.0 - self.p2) / self.rate1 + self.p2 / self.rate2

    def tail(self, x):
        if x <= 0:
            return 1.0
        return (1.0 - self.p2) * math.exp(-self.rate1 * x) + self.p2 * math.exp(
            -self.rate2 * x
        )

    def truncated_mean(self, t):
        if t == INF:
            return self.mean()
        return (1.0 - self.p2) * -math.expm1(-self.rate1 * t) / self.rate1 + (
            self.p2 * -math.expm1(-self.rate2 * t) / self.rate2
        )

    def quantile(self, p):
        if p <= 0:
            return 0.0
        target = 1.0 - p
        hi = 1.0
        while self.tail(hi) > target:
            hi *= 2.0
        return brentq(lambda x: self.tail(x) - target, 0.0, hi, xtol=1e-13, rtol=1e-13)

    def _residual(self, t):
        # conditioning re-weights the mixture; each branch stays memoryless
        tail = self.tail(t)
        p2 = self.p2 * math.exp(-self.rate2 * t) / tail
        return HyperExp(self.rate1, self.rate2, min(1.0, max(0.0, p2)))

    def sample(self, rng):
        branch_rate = self.rate2 if rng.random() < self.p2 else self.rate1
        return -math.log1p(-rng.random()) / branch_rate

    def sample_array(self, rng, n):
        branch = rng.random(n) < self.p2
        u = rng.random(n)
        rates = np.where(branch, self.rate2, self.rate1)
        return -np.log1p(-u) / rates

    def __str__(self):
        return f"hyperexp({_fmt(self.rate1)},{_fmt(self.rate2)},{_fmt(self.p2)})"


@dataclass(frozen=True)
class Pareto(ServiceDistribution):
    """Heavy-tailed law with minimum xm and shape alpha; mean exists iff alpha > 1."""

    xm: float
    alpha: float

    def __post_init__(self):
        if not self.xm > 0:
            raise ValueError(f"scale xm must be > 0, got {self.xm}")
        if not self.alpha > 0:
            raise ValueError(f"shape alpha must be > 0, got {self.alpha}")

    def mean(self):
        if self.alpha <= 1.0:
            raise InfiniteMeanError(f"{self} has no finite mean (alpha <= 1)")
        return self.alpha * self.xm / (self.alpha - 1.0)

    def tail(self, x):
        if x <= self.xm:
            return 1.0
        return (self.xm / x) ** self.alpha

    def truncated_mean(self, t):
        if t == INF:
            return self.mean()
        if t <= self.xm:
            return t
        if self.alpha == 1.0:
            return self.xm * (1.0 + math.log(t / self.xm))
        a = self.alpha
        return self.xm + self.xm**a * (t ** (1.0 - a) - self.xm ** (1.0 - a)) / (1.0 - a)

    def quantile(self, p):
        return self.xm * (1.0 - p) ** (-1.0 / self.alpha)

    def sample_array(self, rng, n):
        return self.xm * (1.0 - rng.random(n)) ** (-1.0 / self.alpha)

    def _breakpoints(self):
        return (self.xm,)

    def _decay(self):
        return ("poly", self.alpha)

    def __str__(self):
        return f"pareto({_fmt(self.xm)},{_fmt(self.alpha)})"


@dataclass(frozen=True)
class FiniteSupport(ServiceDistribution):
    """Law on finitely many nonnegative atoms."""

    atoms: tuple

    def __post_init__(self):
        atoms = tuple(sorted((float(v), float(p)) for v, p in self.atoms if p > 0))
        if not atoms:
            raise ValueError("finite-support law needs at least one atom")
        values = [v for v, _ in atoms]
        if len(set(values)) != len(values):
            raise ValueError(f"atom values must be distinct, got {values}")
        if any(v < 0 for v in values):
            raise ValueError(f"atom values must be >= 0, got {values}")
        if any(not 0 < p <= 1 for _, p in atoms):
            raise ValueError("atom probabilities must be in (0, 1]")
        total = math.fsum(p for _, p in atoms)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"atom probabilities must sum to 1, got {total}")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "_values", tuple(values))
        cum = np.cumsum([p for _, p in atoms])
        cum[-1] = 1.0
        object.__setattr__(self, "_cum", cum)

    def mean(self):
        return math.fsum(v * p for v, p in self.atoms)

    def tail(self, x):
        # mass strictly above x
        i = bisect.bisect_right(self._values, x)
        return math.fsum(p for _, p in self.atoms[i:])

    def truncated_mean(self, t):
        return math.fsum(min(v, t) * p for v, p in self.atoms)

    def quantile(self, p):
        i = int(np.searchsorted(self._cum, p, side="right"))
        return self._values[min(i, len(self._values) - 1)]

    def _residual(self, t):
        tail = self.tail(t)
        return FiniteSupport(
            tuple((v - t, p / tail) for v, p in self.atoms if v > t)
        )

    def sample_array(self, rng, n):
        idx = np.searchsorted(self._cum, rng.random(n), side="right")
        return np.asarray(self._values)[np.minimum(idx, len(self._values) - 1)]

    def _support_upper(self):
        return self._values[-1]

    def _breakpoints(self):
        return self._values

    def _decay(self):
        return ("bounded",)

    def _atoms(self):
        return self.atoms

    def __str__(self):
        inner = ",".join(f"({_fmt(v)},{_fmt(p)})" for v, p in self.atoms)
        return f"finite([{inner}])"


@dataclass(frozen=True)
class Residual(ServiceDistribution):
    """Tail-ratio wrapper for residual laws with no closed-form variant.

    tail(x) = base.tail(age + x) / base.tail(age), exactly.
    """

    base: ServiceDistribution
    age: float

    def __post_init__(self):
        if not self.age >= 0:
            raise ValueError(f"age must be >= 0, got {self.age}")
        object.__setattr__(self, "_tail_at_age", self.base.tail(self.age))
        if self._tail_at_age <= 0:
            raise ZeroSupportError(f"no mass beyond t={self.age} for {self.base}")

    def mean(self):
        return (self.base.mean() - self.base.truncated_mean(self.age)) / self._tail_at_age

    def tail(self, x):
        if x <= 0:
            return 1.0
        return self.base.tail(self.age + x) / self._tail_at_age

    def truncated_mean(self, t):
        if t == INF:
            return self.mean()
        top = self.base.truncated_mean(self.age + t) - self.base.truncated_mean(self.age)
        return top / self._tail_at_age

    def quantile(self, p):
        return self.base.quantile(1.0 - self._tail_at_age * (1.0 - p)) - self.age

    def _residual(self, t):
        return self.base.residual(self.age + t)

    def _support_upper(self):
        return self.base._support_upper() - self.age

    def _breakpoints(self):
        return tuple(b - self.age for b in self.base._breakpoints() if b > self.age)

    def _decay(self):
        return self.base._decay()

    def __str__(self):
        return f"residual({self.base}, {_fmt(self.age)})"


def _fmt(x: float) -> str:
    if x == INF:
        return "inf"
    if x == int(x):
        return str(int(x))
    return repr(x)


# ---------------------------------------------------------------------------
# Expectations of minima via the integral of the product of tails.


def min_expectation(ds) -> float:
    """E[min over the given laws] = integral over [0, inf) of the product of tails.

    Exact for purely atomic inputs and for all-exponential inputs; adaptive
    quadrature (relative error ~1e-9) otherwise.
    """
    ds = list(ds)
    if not ds:
        raise ValueError("min_expectation needs at least one distribution")
    return product_tail_integral([(d, 0.0, 1) for d in ds], lower=0.0)


def min_expectation_iid(d: ServiceDistribution, r: int) -> float:
    """E[minimum of r independent copies of d]."""
    if r < 1:
        raise ValueError(f"need r >= 1, got {r}")
    return product_tail_integral([(d, 0.0, r)], lower=0.0)


def product_tail_integral(components, lower: float = 0.0) -> float:
    """Integral over [lower, inf) of the product over components of
    tail_i(x - offset_i) ** power_i.

    ``components`` is an iterable of (distribution, offset, power).  This is
    the workhorse behind minima expectations and expected overshoots
    E[(min_k(X_k + o_k) - a)^+].
    """
    comps = _normalize_components(components)
    upper = min(off + d._support_upper() for d, off, _ in comps)
    if upper <= lower:
        return 0.0

    if all(d._atoms() is not None for d, _, _ in comps):
        return _atomic_integral(comps, lower, upper)
    if all(isinstance(d, Exponential) for d, _, _ in comps):
        return _exponential_integral(comps, lower)

    def f(x):
        out = 1.0
        for d, off, pw in comps:
            t = d.tail(x - off)
            if t == 0.0:
                return 0.0
            out *= t**pw
        return out

    breakpoints = sorted(
        {off + b for d, off, _ in comps for b in d._breakpoints()}
        | {off for _, off, _ in comps if off > lower}
    )
    if upper < INF:
        pts = [b for b in breakpoints if lower < b < upper]
        val, _ = quad(f, lower, upper, points=pts or None, **_QUAD_OPTS)
        return val

    decays = [d._decay() for d, _, _ in comps]
    has_exp = any(dec[0] == "exp" for dec in decays)
    if not has_exp:
        total_alpha = sum(dec[1] * pw for dec, (_, _, pw) in zip(decays, comps))
        if total_alpha <= 1.0 + 1e-12:
            raise InfiniteMeanError(
                f"product tail decays like x^-{total_alpha:g}; integral diverges"
            )

    base = max([lower, 1.0] + breakpoints + [off for _, off, _ in comps])
    if has_exp:
        cut = base if base > 0 else 1.0
        while f(cut) > 1e-17 and cut < 1e12:
            cut *= 2.0
        pts = [b for b in breakpoints if lower < b < cut]
        val, _ = quad(f, lower, cut, points=pts or None, **_QUAD_OPTS)
        if f(cut) <= 1e-17:
            return val
    else:
        cut = 4.0 * base + 1.0
        pts = [b for b in breakpoints if lower < b < cut]
        val, _ = quad(f, lower, cut, points=pts or None, **_QUAD_OPTS)
    # remainder via x = cut/u, mapping [cut, inf) to (0, 1]
    rem, _ = quad(lambda u: f(cut / u) * cut / (u * u), 0.0, 1.0, **_QUAD_OPTS)
    return val + rem


def _normalize_components(components):
    """Unwrap shift layers into offsets and merge duplicate components."""
    merged = {}
    for d, off, pw in components:
        while isinstance(d, Shifted):
            off = off + d.shift
            d = d.inner
        key = (d, off)
        merged[key] = merged.get(key, 0) + pw
    return [(d, off, pw) for (d, off), pw in merged.items()]


def _atomic_integral(comps, lower, upper):
    # the product of tails is a right-continuous step function; sum the steps
    points = sorted(
        {lower, upper}
        | {off + v for d, off, _ in comps for v, _ in d._atoms() if lower < off + v < upper}
    )
    total = 0.0
    for x0, x1 in zip(points, points[1:]):
        prod = 1.0
        for d, off, pw in comps:
            prod *= d.tail(x0 - off) ** pw
        total += (x1 - x0) * prod
    return total


def _exponential_integral(comps, lower):
    # piecewise-exponential product: exact on each segment between offsets
    edges = sorted({lower} | {off for _, off, _ in comps if off > lower})
    total = 0.0
    for i, a in enumerate(edges):
        b = edges[i + 1] if i + 1 < len(edges) else INF
        active = [(d, off, pw) for d, off, pw in comps if off <= a]
        rate = sum(d.rate * pw for d, _, pw in active)
        if rate == 0.0:
            if b == INF:
                raise InfiniteMeanError("constant tail with unbounded support")
            total += b - a
            continue
        scale = math.exp(sum(d.rate * pw * off for d, off, pw in active))
        upper_term = 0.0 if b == INF else math.exp(-rate * b)
        total += scale * (math.exp(-rate * a) - upper_term) / rate
    return total


# ---------------------------------------------------------------------------
# Literal grammar used in config files: det(2), exp(1), shiftexp(0.5,1),
# hyperexp(0.5,0.1,0.4), pareto(0.5,1.2), finite([(1,0.9),(20,0.1)]),
# shift(0.5, exp(1)).

_CONSTRUCTORS = {
    "det": lambda c: Deterministic(c),
    "exp": lambda rate: Exponential(rate),
    "shiftexp": lambda shift, rate: Shifted(shift, Exponential(rate)),
    "hyperexp": lambda r1, r2, p2: HyperExp(r1, r2, p2),
    "pareto": lambda xm, alpha: Pareto(xm, alpha),
    "finite": lambda atoms: FiniteSupport(tuple(atoms)),
    "shift": lambda c, inner: Shifted(c, inner),
}

_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


def parse_distribution(text: str) -> ServiceDistribution:
    """Parse a distribution literal; raises ValueError on anything else."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
        value = _eval_node(tree.body)
    except (SyntaxError, TypeError, KeyError, ValueError) as exc:
        raise ValueError(f"bad distribution literal {text!r}: {exc}") from exc
    if not isinstance(value, ServiceDistribution):
        raise ValueError(f"{text!r} is not a distribution literal")
    return value


def _eval_node(node):
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _CONSTRUCTORS:
            raise ValueError(f"unknown constructor {ast.dump(node.func)}")
        args = [_eval_node(a) for a in node.args]
        return _CONSTRUCTORS[node.func.id](*args)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id == "inf":
        return INF
    if isinstance(node, (ast.List, ast.Tuple)):
        return [_eval_node(e) for e in node.elts]
    if isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
        left, right = _eval_node(node.left), _eval_node(node.right)
        ops = {
            ast.Add: lambda a, b: a + b,
            ast.Sub: lambda a, b: a - b,
            ast.Mult: lambda a, b: a * b,
            ast.Div: lambda a, b: a / b,
            ast.Pow: lambda a, b: a**b,
        }
        return ops[type(node.op)](left, right)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_node(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    raise ValueError(f"unsupported syntax: {ast.dump(node)}")
