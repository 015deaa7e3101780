"""Brute-force exactness laboratory for interleaving patterns.

Holds explicit joint distributions over tiny token grids, computes exact
conditionals by marginalization, walks a pattern to enumerate the exact law of
the grids a per-step-independent sampler would generate, and measures the
total variation distance between the two. Everything is exhaustive
enumeration; nothing is sampled.

Grid outcomes are indexed by flattening positions (t, k) row-major, i.e. axis
a = (t-1)*K + (k-1) of an (M,)*N table with N = T*K.

A sampler that factorizes within a step can produce grids outside the joint's
support; the next step then conditions on a probability-zero prefix, which the
exact conditional leaves undefined. induced_distribution adopts the
maximum-entropy convention there: the per-position conditional falls back to
uniform over M. true_conditional, by contrast, treats a zero-probability
reveal as a caller error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import GuardError, ValidationError
from .patterns import Coord, Pattern, PatternKind, TokenGrid, step_counts, validate_pattern
from .rvq import LatentFrames, RVQConfig, rvq_encode, train_codebooks

MAX_TABLE_ENTRIES = 10**6
MAX_DIM = 4
MASS_TOL = 1e-12

JOINT_FAMILIES = ("product", "diagonal", "markov_residual")


def _check_dims(T: int, K: int, M: int) -> int:
    if min(T, K, M) < 1:
        raise ValidationError("T, K, M must all be >= 1")
    if max(T, K, M) > MAX_DIM:
        raise ValidationError(f"oracle grids are capped at T, K, M <= {MAX_DIM}")
    size = M ** (T * K)
    if size > MAX_TABLE_ENTRIES:
        raise GuardError(f"joint table would hold {size} entries (guard {MAX_TABLE_ENTRIES})")
    return size


@dataclass(frozen=True)
class JointDistribution:
    """Explicit law of a T x K grid of tokens in 1..M."""

    T: int
    K: int
    M: int
    probs: np.ndarray  # flat, length M**(T*K)
    family: str | None = None

    def __post_init__(self) -> None:
        size = _check_dims(self.T, self.K, self.M)
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (size,):
            raise ValidationError(f"probability table must be flat with {size} entries")
        if p.min() < 0:
            raise ValidationError("probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > MASS_TOL:
            raise ValidationError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    @property
    def n_positions(self) -> int:
        return self.T * self.K

    def table(self) -> np.ndarray:
        """View of the table with one axis per grid position."""
        return self.probs.reshape((self.M,) * self.n_positions)


@dataclass(frozen=True)
class InducedDistribution:
    """Law of the generated grid when a pattern is walked with exact
    per-position conditionals and within-step independence."""

    T: int
    K: int
    M: int
    probs: np.ndarray
    pattern_kind: PatternKind | None = None

    def __post_init__(self) -> None:
        size = _check_dims(self.T, self.K, self.M)
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (size,):
            raise ValidationError(f"probability table must be flat with {size} entries")
        if p.min() < 0:
            raise ValidationError("probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > MASS_TOL:
            raise ValidationError(f"induced mass is {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)


def _axis(T: int, K: int, coord: Coord) -> int:
    t, k = coord
    if not (1 <= t <= T and 1 <= k <= K):
        raise ValidationError(f"coordinate {(t, k)} out of range for a {T}x{K} grid")
    return (t - 1) * K + (k - 1)


def grid_index(grid: TokenGrid) -> int:
    """Flat table index of a full grid assignment."""
    digits = (grid.tokens - 1).reshape(-1)
    idx = 0
    for d in digits:
        idx = idx * grid.M + int(d)
    return idx


def make_joint(family: str, T: int, K: int, M: int, seed: int = 0) -> JointDistribution:
    """Construct a test joint.

    product: independent uniform tokens at every position.
    diagonal: all K codebooks equal per timestep, uniform over M, independent
      across timesteps; maximal within-step dependence.
    markov_residual: law of the grid produced by residual-quantizing a
      discretized AR(1) latent chain, built by exhaustive path enumeration.
    """
    size = _check_dims(T, K, M)
    if family == "product":
        probs = np.full(size, 1.0 / size)
        probs /= probs.sum()
        return JointDistribution(T=T, K=K, M=M, probs=probs, family=family)
    if family == "diagonal":
        probs = np.zeros(size)
        table = probs.reshape((M,) * (T * K))
        for tokens in np.ndindex(*(M,) * T):
            idx = tuple(np.repeat(tokens, K))
            table[idx] = M ** (-float(T))
        probs = table.reshape(-1)
        probs /= probs.sum()
        return JointDistribution(T=T, K=K, M=M, probs=probs, family=family)
    if family == "markov_residual":
        return _markov_residual_joint(T, K, M, seed)
    raise ValidationError(f"unknown joint family {family!r}; expected one of {JOINT_FAMILIES}")


_CHAIN_STATES = 8
_CHAIN_COEFF = 0.8
_CHAIN_FIT_LEN = 4096


def _markov_residual_joint(T: int, K: int, M: int, seed: int) -> JointDistribution:
    values = np.linspace(-2.0, 2.0, _CHAIN_STATES)
    var = 1.0 - _CHAIN_COEFF**2
    trans = np.exp(-((values[None, :] - _CHAIN_COEFF * values[:, None]) ** 2) / (2 * var))
    trans /= trans.sum(axis=1, keepdims=True)
    init = np.exp(-(values**2) / 2.0)
    init /= init.sum()

    # fit the quantizer cascade on one long sampled path of the same chain
    rng = np.random.default_rng(seed)
    path = np.empty(_CHAIN_FIT_LEN, dtype=np.int64)
    path[0] = rng.choice(_CHAIN_STATES, p=init)
    for t in range(1, _CHAIN_FIT_LEN):
        path[t] = rng.choice(_CHAIN_STATES, p=trans[path[t - 1]])
    fit_frames = LatentFrames(frames=values[path][:, None])
    books = train_codebooks(fit_frames, RVQConfig(K=K, M=M, d_latent=1), iterations=30, seed=seed)

    probs = np.zeros(M ** (T * K))
    for states in np.ndindex(*(_CHAIN_STATES,) * T):
        p = init[states[0]]
        for a, b in zip(states, states[1:]):
            p *= trans[a, b]
        frames = LatentFrames(frames=values[list(states)][:, None])
        grid = rvq_encode(frames, books)
        probs[grid_index(grid)] += p
    probs /= probs.sum()
    return JointDistribution(T=T, K=K, M=M, probs=probs, family="markov_residual")


def _conditional(
    table: np.ndarray,
    revealed_axes: Sequence[int],
    revealed_values: Sequence[int],
    target_axis: int,
) -> np.ndarray | None:
    """Exact conditional of one position given revealed ones, or None when the
    revealed assignment has probability zero. Values here are 0-based."""
    idx: list[object] = [slice(None)] * table.ndim
    for a, v in zip(revealed_axes, revealed_values):
        idx[a] = v
    sub = table[tuple(idx)]
    # axes of sub correspond to unrevealed positions in ascending axis order
    remaining = [a for a in range(table.ndim) if a not in revealed_axes]
    keep = remaining.index(target_axis)
    sum_axes = tuple(i for i in range(sub.ndim) if i != keep)
    marg = sub.sum(axis=sum_axes) if sum_axes else sub
    total = marg.sum()
    if total <= 0.0:
        return None
    return marg / total


def true_conditional(
    joint: JointDistribution,
    revealed: Mapping[Coord | tuple[int, int], int],
    targets: Sequence[Coord | tuple[int, int]],
) -> np.ndarray:
    """Exact joint conditional over the target positions, marginalizing all
    other unrevealed positions. Shape is (M,)*len(targets), 0-based token axes
    ordered as the targets were given."""
    if not targets:
        raise ValidationError("need at least one target position")
    rev_axes, rev_vals = [], []
    for coord, token in revealed.items():
        if not 1 <= token <= joint.M:
            raise ValidationError(f"revealed token {token} out of range 1..{joint.M}")
        rev_axes.append(_axis(joint.T, joint.K, Coord(*coord)))
        rev_vals.append(token - 1)
    tgt_axes = [_axis(joint.T, joint.K, Coord(*c)) for c in targets]
    if len(set(tgt_axes)) != len(tgt_axes):
        raise ValidationError("target positions must be distinct")
    if set(tgt_axes) & set(rev_axes):
        raise ValidationError("revealed and target positions must be disjoint")

    table = joint.table()
    idx: list[object] = [slice(None)] * table.ndim
    for a, v in zip(rev_axes, rev_vals):
        idx[a] = v
    sub = table[tuple(idx)]
    remaining = [a for a in range(table.ndim) if a not in rev_axes]
    keep = [remaining.index(a) for a in tgt_axes]
    sum_axes = tuple(i for i in range(sub.ndim) if i not in keep)
    marg = sub.sum(axis=sum_axes) if sum_axes else sub
    marg = np.moveaxis(marg, [sorted(keep).index(i) for i in keep], range(len(keep)))
    total = marg.sum()
    if total <= 0.0:
        raise ValidationError("revealed assignment has probability zero under the joint")
    return marg / total


def induced_distribution(joint: JointDistribution, pattern: Pattern) -> InducedDistribution:
    """Exact law of the grid generated by walking the pattern with true
    per-position conditionals, positions within a step drawn independently.

    Full branch enumeration: every reachable partial assignment is carried with
    its exact probability, zero-probability token choices are pruned, and a
    zero-probability prefix falls back to the uniform conditional.
    """
    if (pattern.T, pattern.K) != (joint.T, joint.K):
        raise ValidationError(
            f"pattern is {pattern.T}x{pattern.K} but joint is {joint.T}x{joint.K}"
        )
    report = validate_pattern(pattern)
    if not report.ok:
        raise ValidationError(f"pattern is invalid: {report.violations[0]}")

    M = joint.M
    table = joint.table()
    uniform = np.full(M, 1.0 / M)
    n = joint.n_positions

    # branch key: tuple of 0-based tokens with -1 marking unassigned positions
    branches: dict[tuple[int, ...], float] = {(-1,) * n: 1.0}
    for step in pattern.steps[1:]:
        axes = sorted(_axis(joint.T, joint.K, c) for c in step.coords)
        new_branches: dict[tuple[int, ...], float] = {}
        for key, mass in branches.items():
            rev_axes = [a for a, v in enumerate(key) if v >= 0]
            rev_vals = [key[a] for a in rev_axes]
            conds = []
            for axis in axes:
                cond = _conditional(table, rev_axes, rev_vals, axis)
                conds.append(uniform if cond is None else cond)
            # cartesian product over the positive-support choices of this step
            partial = [(key, mass)]
            for axis, cond in zip(axes, conds):
                grown = []
                for k2, m2 in partial:
                    for v in np.flatnonzero(cond > 0.0):
                        nk = list(k2)
                        nk[axis] = int(v)
                        grown.append((tuple(nk), m2 * float(cond[v])))
                partial = grown
            for k2, m2 in partial:
                new_branches[k2] = new_branches.get(k2, 0.0) + m2
            if len(new_branches) > MAX_TABLE_ENTRIES:
                raise GuardError("branch enumeration exceeded the table guard")
        branches = new_branches

    probs = np.zeros(M**n)
    for key, mass in branches.items():
        idx = 0
        for v in key:
            idx = idx * M + v
        probs[idx] += mass
    return InducedDistribution(T=joint.T, K=joint.K, M=M, probs=probs, pattern_kind=pattern.kind)


def tv_distance(p, q) -> float:
    """Total variation distance 0.5 * sum |p - q| over a shared index space.

    Accepts the distribution dataclasses (dims are cross-checked) or bare
    probability arrays of equal shape.
    """
    if hasattr(p, "probs") and hasattr(q, "probs"):
        for attr in ("T", "K", "M"):
            if getattr(p, attr) != getattr(q, attr):
                raise ValidationError(f"distributions disagree on {attr}")
    pa = p.probs if hasattr(p, "probs") else np.asarray(p, dtype=np.float64)
    qa = q.probs if hasattr(q, "probs") else np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape:
        raise ValidationError("distributions live on different index spaces")
    return float(0.5 * np.abs(pa - qa).sum())


@dataclass(frozen=True)
class ExactnessRow:
    kind: str
    steps_exact: int
    steps_nominal: int
    tv: float


def exactness_report(joint: JointDistribution, patterns: Iterable[Pattern]) -> list[ExactnessRow]:
    """One row per pattern: step counts plus TV between the induced law and
    the joint. The flatten row is exact by construction (TV at float zero)."""
    rows = []
    for pattern in patterns:
        counts = step_counts(pattern)
        tv = tv_distance(joint, induced_distribution(joint, pattern))
        kind = pattern.kind.value if pattern.kind is not None else "custom"
        rows.append(ExactnessRow(kind=kind, steps_exact=counts.exact, steps_nominal=counts.nominal, tv=tv))
    return rows
