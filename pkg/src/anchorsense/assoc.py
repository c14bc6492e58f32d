"""Data association for networked multi-BS sensing.

Each BS reports an unlabeled set of ranges.  A hypothesis assigns every
measurement at every BS to a target; the first BS's order defines the
target labels.  A hypothesis is feasible when every target's ranges are
consistent with a single point (trilateration residue at most epsilon).
Wrong but feasible hypotheses produce ghost targets.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .scene import Position, distance
from .trilateration import gauss_newton, linearized_init

ENUMERATION_CAP = 10**7


class EnumerationCapError(ValueError):
    """The hypothesis space is too large for exhaustive search."""


@dataclass(frozen=True)
class DistanceProfile:
    bs_id: str
    ranges: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple(float(r) for r in self.ranges))
        if not self.ranges:
            raise ValueError(f"profile of {self.bs_id!r} is empty")
        if any(not r >= 0 for r in self.ranges):
            raise ValueError(f"profile of {self.bs_id!r} has negative ranges")


@dataclass(frozen=True, order=True)
class AssociationHypothesis:
    """``assignment[m][j]`` is the target that produced measurement ``j`` at BS ``m``."""

    assignment: tuple[tuple[int, ...], ...]

    def chain(self, target: int) -> tuple[int, ...]:
        """Measurement index used for ``target`` at each BS."""
        return tuple(perm.index(target) for perm in self.assignment)

    @classmethod
    def from_chains(cls, chains) -> AssociationHypothesis:
        num_bs = len(chains[0])
        k = len(chains)
        assignment = []
        for m in range(num_bs):
            perm = [0] * k
            for target, chain in enumerate(chains):
                perm[chain[m]] = target
            assignment.append(tuple(perm))
        return cls(tuple(assignment))


@dataclass(frozen=True)
class AssociationSolution:
    hypothesis: AssociationHypothesis
    positions: tuple[Position, ...]
    residues: tuple[float, ...]

    @property
    def total_residue(self) -> float:
        return float(sum(self.residues))


@dataclass(frozen=True)
class GhostPartition:
    true_detections: tuple[Position, ...]
    ghosts: tuple[Position, ...]


def hypothesis_count(num_bs: int, num_targets: int) -> int:
    return math.factorial(num_targets) ** (num_bs - 1)


def enumerate_hypotheses(num_bs: int, num_targets: int, cap: int = ENUMERATION_CAP):
    """Lazily yield all ``(K!)^(M-1)`` hypotheses in lexicographic order."""
    if num_bs < 3 or num_targets < 1:
        raise ValueError(f"need M >= 3 and K >= 1, got M={num_bs}, K={num_targets}")
    total = hypothesis_count(num_bs, num_targets)
    if total > cap:
        raise EnumerationCapError(f"{total} hypotheses exceed the enumeration cap {cap}")
    identity = tuple(range(num_targets))
    perms = list(itertools.permutations(range(num_targets)))
    return (AssociationHypothesis((identity,) + rest) for rest in itertools.product(perms, repeat=num_bs - 1))


def _check_inputs(profiles, bs_positions):
    if len(profiles) < 3:
        raise ValueError(f"need at least 3 BSs, got {len(profiles)}")
    if len(profiles) != len(bs_positions):
        raise ValueError("one BS position per profile is required")
    k = len(profiles[0].ranges)
    if any(len(p.ranges) != k for p in profiles):
        raise ValueError("all distance profiles must have the same length")
    anchors = np.asarray(bs_positions, dtype=float)
    ranges = np.array([p.ranges for p in profiles], dtype=float)  # (M, K)
    return anchors, ranges, k


class _ChainSolver:
    """Trilateration of measurement chains, cached by chain.

    Brute force and branch-and-bound both evaluate full chains through
    this class so that they see bit-identical positions and residues.
    """

    def __init__(self, anchors: np.ndarray, ranges: np.ndarray):
        self.anchors = anchors
        self.ranges = ranges
        self.cache: dict[tuple[int, ...], tuple[Position, float]] = {}

    def partial(self, chains: np.ndarray, epsilon: float) -> np.ndarray:
        """Feasibility mask of a batch of (possibly partial) chains, shape (B, m)."""
        b, m = chains.shape
        anchors = np.broadcast_to(self.anchors[:m], (b, m, 2))
        ranges = self.ranges[np.arange(m)[None, :], chains]
        weights = np.ones_like(ranges)
        x0, _ = linearized_init(anchors, ranges, weights)
        _, res, _, _ = gauss_newton(anchors, ranges, weights, x0, stop_below=epsilon)
        return res <= epsilon

    def evaluate(self, chains) -> None:
        """Trilaterate full chains in one batch and cache the results."""
        todo = sorted({tuple(c) for c in chains} - self.cache.keys())
        if not todo:
            return
        arr = np.array(todo, dtype=int)
        b, m = arr.shape
        anchors = np.broadcast_to(self.anchors[:m], (b, m, 2))
        ranges = self.ranges[np.arange(m)[None, :], arr]
        weights = np.ones_like(ranges)
        x0, _ = linearized_init(anchors, ranges, weights)
        x, res, _, _ = gauss_newton(anchors, ranges, weights, x0)
        for chain, (px, py), r in zip(todo, x.tolist(), res.tolist()):
            self.cache[chain] = (Position(px, py), r)

    def full(self, chain: tuple[int, ...]) -> tuple[Position, float]:
        if chain not in self.cache:
            self.evaluate([chain])
        return self.cache[chain]


def _sorted_solutions(solutions: list[AssociationSolution]) -> list[AssociationSolution]:
    return sorted(solutions, key=lambda s: (s.total_residue, s.hypothesis))


def solve_association(profiles, bs_positions, epsilon: float, cap: int = ENUMERATION_CAP) -> list[AssociationSolution]:
    """Exhaustive search over every hypothesis."""
    anchors, ranges, k = _check_inputs(profiles, bs_positions)
    solver = _ChainSolver(anchors, ranges)
    hypotheses = list(enumerate_hypotheses(len(profiles), k, cap))
    solver.evaluate(hyp.chain(t) for hyp in hypotheses for t in range(k))
    out = []
    for hyp in hypotheses:
        positions, residues = [], []
        for target in range(k):
            pos, res = solver.full(hyp.chain(target))
            if res > epsilon:
                break
            positions.append(pos)
            residues.append(res)
        else:
            out.append(AssociationSolution(hyp, tuple(positions), tuple(residues)))
    return _sorted_solutions(out)


def _grow_chains(solver: _ChainSolver, num_bs: int, k: int, epsilon: float):
    """Per target, all full measurement chains whose residue is within epsilon.

    Chains grow one BS at a time, breadth first, with every partial chain
    trilaterated in one vectorized batch.  Dropping an anchor can only
    lower the minimized residue, so a partial chain above epsilon cannot
    be completed into a feasible one and is pruned.
    """
    grid = np.array(list(itertools.product(range(k), repeat=3)), dtype=int)
    chains = grid
    for level in range(3, num_bs + 1):
        if level > 3:
            ext = np.repeat(chains, k, axis=0)
            col = np.tile(np.arange(k), chains.shape[0])
            chains = np.column_stack([ext, col])
        if chains.size == 0:
            break
        keep = solver.partial(chains, epsilon)
        chains = chains[keep]
    out: dict[int, list[tuple[int, ...]]] = {t: [] for t in range(k)}
    survivors = [tuple(row) for row in chains.tolist()]
    # final verdict through the same path the exhaustive search uses
    solver.evaluate(survivors)
    for chain in survivors:
        if solver.full(chain)[1] <= epsilon:
            out[chain[0]].append(chain)
    return out


def solve_association_pruned(profiles, bs_positions, epsilon: float) -> list[AssociationSolution]:
    """Branch-and-bound search returning the same set as :func:`solve_association`."""
    anchors, ranges, k = _check_inputs(profiles, bs_positions)
    num_bs = len(profiles)
    solver = _ChainSolver(anchors, ranges)
    per_target = _grow_chains(solver, num_bs, k, epsilon)

    out = []
    used = [set() for _ in range(num_bs)]
    picked: list[tuple[int, ...]] = []

    def descend(target: int):
        if target == k:
            hyp = AssociationHypothesis.from_chains(picked)
            results = [solver.full(c) for c in picked]
            out.append(AssociationSolution(hyp, tuple(p for p, _ in results), tuple(r for _, r in results)))
            return
        for chain in per_target[target]:
            if any(chain[m] in used[m] for m in range(1, num_bs)):
                continue
            for m in range(1, num_bs):
                used[m].add(chain[m])
            picked.append(chain)
            descend(target + 1)
            picked.pop()
            for m in range(1, num_bs):
                used[m].discard(chain[m])

    descend(0)
    return _sorted_solutions(out)


def greedy_match(estimates, truths, radius: float) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """One-to-one nearest-first matching within ``radius``.

    Returns matched (estimate, truth) index pairs, unmatched estimates and
    unmatched truths.
    """
    pairs = []
    for i, e in enumerate(estimates):
        for j, t in enumerate(truths):
            d = distance(e, t)
            if d <= radius:
                pairs.append((d, i, j))
    pairs.sort()
    used_e, used_t, matched = set(), set(), []
    for _, i, j in pairs:
        if i in used_e or j in used_t:
            continue
        used_e.add(i)
        used_t.add(j)
        matched.append((i, j))
    return (
        matched,
        [i for i in range(len(estimates)) if i not in used_e],
        [j for j in range(len(truths)) if j not in used_t],
    )


def classify_ghosts(solutions, true_positions, radius: float = 1.0) -> GhostPartition:
    """Split solved positions into true detections and ghosts.

    Matching is done inside each solution; positions repeated across
    solutions are reported once.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    true_det: list[Position] = []
    ghosts: list[Position] = []

    def add(bucket, p):
        if not any(distance(p, q) <= 1e-9 for q in bucket):
            bucket.append(p)

    for sol in solutions:
        matched, unmatched, _ = greedy_match(sol.positions, true_positions, radius)
        for i, _ in matched:
            add(true_det, sol.positions[i])
        for i in unmatched:
            add(ghosts, sol.positions[i])
    return GhostPartition(tuple(true_det), tuple(ghosts))
