"""Two-stage assignment of latent region masks to ground-truth components:
optimal bipartite matching covers every component, then the remaining
regions are matched greedily by ascending cost up to the active budget.

Costs are focal + rho*dice between each soft mask and each binary component
mask, evaluated on detached values; gradients flow only through the losses
applied after matching.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .losses import DICE_EPS, PROB_FLOOR


@dataclass
class Assignment:
    """Many-to-one map from region indices to component indices."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    num_regions: int = 0
    num_components: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def matched_regions(self):
        return {r for r, _ in self.pairs}

    @property
    def covered_components(self):
        return {c for _, c in self.pairs}

    def validate(self):
        regions = [r for r, _ in self.pairs]
        assert len(regions) == len(set(regions)), "region matched twice"
        for r, c in self.pairs:
            assert 0 <= r < self.num_regions and 0 <= c < self.num_components


def build_cost_matrix(p, components, rho=1.0, focal_gamma=2.0):
    """Cost[i, j] = focal(P_i, M_j) + rho * dice(P_i, M_j), vectorized over
    all region/component pairs. `p` is (W, H, K) soft masks; values are
    detached (plain numpy) so no gradient reaches the assignment."""
    if rho < 0:
        raise ValueError("build_cost_matrix: rho must be >= 0")
    if not components:
        raise ValueError("build_cost_matrix: empty component set")
    data = np.asarray(getattr(p, "data", p), dtype=np.float64)
    w_dim, h_dim, num_regions = data.shape
    n = w_dim * h_dim
    pm = np.clip(data.reshape(n, num_regions).T, PROB_FLOOR, 1.0 - PROB_FLOOR)  # (K, WH)
    mm = np.stack([c.mask.reshape(n).astype(np.float64) for c in components])  # (C, WH)

    pos = -((1.0 - pm) ** focal_gamma) * np.log(pm)   # per-pixel focal if target = 1
    neg = -(pm ** focal_gamma) * np.log(1.0 - pm)     # per-pixel focal if target = 0
    focal = (pos @ mm.T + neg @ (1.0 - mm).T) / n

    inter = pm @ mm.T
    sum_p2 = (pm * pm).sum(axis=1)
    area = mm.sum(axis=1)
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (sum_p2[:, None] + area[None, :] + DICE_EPS)

    return focal + rho * dice


def hungarian_match(cost):
    """Optimal one-to-one assignment covering every column of a K'xC cost
    matrix with K' >= C; returns (region, component) pairs sorted by
    component."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] < cost.shape[1]:
        raise ValueError(f"hungarian_match: need rows >= cols, got {cost.shape}")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])


def greedy_extend(cost, base, limit):
    """Add the globally cheapest remaining (region, component) entries, one
    region at most once, until min(limit, K) regions are matched. Ties break
    on lowest region index, then lowest component index."""
    cost = np.asarray(cost, dtype=np.float64)
    num_regions, num_components = cost.shape
    pairs = list(base.pairs)
    used = {r for r, _ in pairs}
    if limit < len(base.covered_components):
        warnings.warn(
            f"active budget {limit} below component count {num_components}; "
            "keeping one region per component", stacklevel=2)
    target = min(limit, num_regions)
    if len(pairs) < target:
        entries = sorted(
            (cost[r, c], r, c)
            for r in range(num_regions) if r not in used
            for c in range(num_components)
        )
        for _, r, c in entries:
            if len(pairs) >= target:
                break
            if r in used:
                continue
            pairs.append((r, c))
            used.add(r)
    out = Assignment(pairs, num_regions, num_components, list(base.flags))
    out.validate()
    return out


def match_regions(p, components, rho=1.0, max_active=None, focal_gamma=2.0):
    """Full two-stage matching: cost matrix, Hungarian cover, greedy fill.

    With no components the assignment is empty and flagged. If there are
    more components than regions every region is matched and the shortfall
    flagged; if the active budget is below the component count the cover is
    kept intact and no greedy matches are added.
    """
    data = np.asarray(getattr(p, "data", p), dtype=np.float64)
    num_regions = data.shape[2]
    num_components = len(components)
    if num_components == 0:
        warnings.warn("match_regions: no components to match", stacklevel=2)
        return Assignment([], num_regions, 0, ["no-components"])
    cost = build_cost_matrix(data, components, rho=rho, focal_gamma=focal_gamma)
    if max_active is None:
        max_active = num_regions
    if num_regions < num_components:
        # transpose so the optimal cover matches every region instead
        pairs = [(r, c) for c, r in hungarian_match(cost.T)]
        warnings.warn(
            f"match_regions: {num_components - num_regions} components left "
            "uncovered (fewer regions than components)", stacklevel=2)
        out = Assignment(sorted(pairs), num_regions, num_components, ["component-shortfall"])
        out.validate()
        return out
    base = Assignment(hungarian_match(cost), num_regions, num_components)
    return greedy_extend(cost, base, max_active)
