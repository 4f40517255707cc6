"""Exponential-cost reference semantics for the histogram filter.

Everything here enumerates the full set of ``(reset, action)`` branch
sequences, ``6**T`` of them, and is meant for tests and the ``oracle-check``
command only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_STEPS = 12

# action index -> displacement
_ACTION_DELTA = np.array([1, -1, 0], dtype=np.int64)  # incr, decr, keep


@dataclass(frozen=True)
class GateStep:
    """Plain-float gate probabilities for one step."""

    reset: float
    incr: float
    decr: float
    keep: float


@dataclass
class PathSpec:
    deltas: tuple[int, ...]
    resets: tuple[int, ...]

    def __post_init__(self):
        if len(self.deltas) != len(self.resets):
            raise ValueError("deltas and resets must have equal length")

    @property
    def length(self) -> int:
        return len(self.deltas)


class DisplacementPMF(dict):
    """Mapping ``offset -> probability`` over signed displacements."""

    def total(self) -> float:
        return float(sum(self.values()))

    def as_array(self, max_offset: int) -> np.ndarray:
        """Dense vector indexed by ``offset + max_offset``."""
        out = np.zeros(2 * max_offset + 1)
        for d, p in self.items():
            out[d + max_offset] += p
        return out


def as_gate_steps(gates) -> list[GateStep]:
    out = []
    for g in gates:
        if isinstance(g, GateStep):
            out.append(g)
        else:
            out.append(GateStep(float(g.reset), float(g.incr), float(g.decr), float(g.keep)))
    return out


def path_indicator_displacement(path: PathSpec) -> int:
    """Net displacement counting only steps at or after the last reset."""
    total = 0
    for t, delta in enumerate(path.deltas):
        if all(r == 0 for r in path.resets[t + 1:]):
            total += delta
    return total


def _enumerate(T: int):
    """All branch sequences as arrays ``(resets, actions)`` of shape ``(6**T, T)``."""
    idx = np.arange(6 ** T, dtype=np.int64)[:, None]
    place = 6 ** np.arange(T - 1, -1, -1, dtype=np.int64)
    branches = (idx // place) % 6
    return branches // 3, branches % 3


def _path_weights(steps: Sequence[GateStep], resets: np.ndarray, actions: np.ndarray) -> np.ndarray:
    w = np.ones(resets.shape[0])
    for t, g in enumerate(steps):
        p_r = np.where(resets[:, t] == 1, g.reset, 1.0 - g.reset)
        p_a = np.choose(actions[:, t], [g.incr, g.decr, g.keep])
        w *= p_r * p_a
    return w


def _check_len(T: int) -> None:
    if T > MAX_STEPS:
        raise ValueError(f"path enumeration is capped at {MAX_STEPS} steps (6**T paths), got {T}")


def displacement_pmf_bruteforce(gates, with_resets: bool = True) -> DisplacementPMF:
    """Signed-displacement PMF by summing over every branch sequence.

    With ``with_resets`` each path contributes its displacement after the last
    reset (the path indicator); without, reset draws are ignored and every
    step's shift counts.
    """
    steps = as_gate_steps(gates)
    T = len(steps)
    _check_len(T)
    if T == 0:
        return DisplacementPMF({0: 1.0})
    if not with_resets:
        steps = [GateStep(0.0, g.incr, g.decr, g.keep) for g in steps]
    resets, actions = _enumerate(T)
    w = _path_weights(steps, resets, actions)
    deltas = _ACTION_DELTA[actions]
    # later[:, t] = number of resets strictly after step t
    later = np.flip(np.cumsum(np.flip(resets, axis=1), axis=1), axis=1) - resets
    disp = (deltas * (later == 0)).sum(axis=1)
    keys, inv = np.unique(disp, return_inverse=True)
    mass = np.zeros(len(keys))
    np.add.at(mass, inv, w)
    return DisplacementPMF({int(k): float(m) for k, m in zip(keys, mass) if m != 0.0})


def position_pmf_bruteforce(gates, P: int, start: int = 0) -> np.ndarray:
    """Distribution of the cursor's absolute cell after simulating every path.

    Each path is played forward with the filter's own semantics: a reset moves
    the cursor to cell 0 and the action then applies; shifts clamp at cells 0
    and ``P - 1``.
    """
    steps = as_gate_steps(gates)
    T = len(steps)
    _check_len(T)
    out = np.zeros(P)
    if T == 0:
        out[start] = 1.0
        return out
    resets, actions = _enumerate(T)
    w = _path_weights(steps, resets, actions)
    pos = np.full(resets.shape[0], start, dtype=np.int64)
    for t in range(T):
        pos = np.where(resets[:, t] == 1, 0, pos)
        pos = np.clip(pos + _ACTION_DELTA[actions[:, t]], 0, P - 1)
    np.add.at(out, pos, w)
    return out


def displacement_pmf_crosscorr(h_k, h_l) -> DisplacementPMF:
    """``Pr(D = d) = sum_i h_k[i] * h_l[i + d]`` with out-of-range terms dropped."""
    a = np.asarray(h_k, dtype=np.float64)
    b = np.asarray(h_l, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"histograms must share one support, got {a.shape} and {b.shape}")
    P = a.shape[0]
    out = DisplacementPMF()
    for d in range(-(P - 1), P):
        lo, hi = max(0, -d), min(P, P - d)
        v = float(np.dot(a[lo:hi], b[lo + d:hi + d]))
        if v != 0.0:
            out[d] = v
    return out


def random_gate_steps(rng: np.random.Generator, T: int, with_resets: bool = True) -> list[GateStep]:
    steps = []
    for _ in range(T):
        a = rng.dirichlet(np.ones(3))
        r = float(rng.uniform()) if with_resets else 0.0
        steps.append(GateStep(r, float(a[0]), float(a[1]), float(a[2])))
    return steps
