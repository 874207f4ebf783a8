"""Coreset utility of a data-center selection, computed from probed gradients.

The score rewards selections whose gradients sit close (in Euclidean norm) to
every center's gradient: U = b - sum_j min_{i in K} ||g_j - g_i||. An empty
selection scores b - 2 N max_i ||g_i||, which acts like an always-open phantom
facility at distance 2 max||g|| from everyone and keeps the function monotone
submodular on the whole lattice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fleet import Selection


@dataclass(frozen=True)
class GradientSnapshot:
    """One slot's probed gradients, one vector per center (N x d).

    The pairwise distance matrix and per-center norms are computed once at
    construction; selection scoring then costs O(N * |K|) per call.
    """

    gradients: np.ndarray
    model_tag: str = ""

    def __post_init__(self):
        arr = np.asarray(self.gradients, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"gradients must be N x d, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("need at least one center gradient")
        if not np.all(np.isfinite(arr)):
            raise ValueError("gradients must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        diff = arr[:, None, :] - arr[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        dist.setflags(write=False)
        norms = np.linalg.norm(arr, axis=1)
        norms.setflags(write=False)
        object.__setattr__(self, "gradients", arr)
        object.__setattr__(self, "_distances", dist)
        object.__setattr__(self, "_norms", norms)

    @property
    def n_centers(self) -> int:
        return self.gradients.shape[0]

    @property
    def dim(self) -> int:
        return self.gradients.shape[1]

    @property
    def distances(self) -> np.ndarray:
        """Pairwise Euclidean distances between center gradients (N x N)."""
        return self._distances

    @property
    def norms(self) -> np.ndarray:
        return self._norms

    @property
    def max_norm(self) -> float:
        return float(self._norms.max())


@dataclass(frozen=True)
class UtilityConfig:
    """Offset constant b and the configured gradient-norm cap it is sized against.

    b >= 2 * N * gradient_norm_cap keeps the utility non-negative for every
    selection (including the empty one) as long as observed norms stay below
    the cap; the cap is enforced at evaluation time.
    """

    b: float
    gradient_norm_cap: float = 10.0

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"b must be positive, got {self.b}")
        if not self.gradient_norm_cap > 0:
            raise ValueError(
                f"gradient_norm_cap must be positive, got {self.gradient_norm_cap}"
            )

    @classmethod
    def for_fleet(
        cls, n_centers: int, gradient_norm_cap: float = 10.0, b: float | None = None
    ) -> "UtilityConfig":
        """Config with the default offset b = 2 N cap (the tightest non-negative choice)."""
        if b is None:
            b = 2.0 * n_centers * gradient_norm_cap
        cfg = cls(b=float(b), gradient_norm_cap=float(gradient_norm_cap))
        cfg.validate_for(n_centers)
        return cfg

    def validate_for(self, n_centers: int) -> None:
        floor = 2.0 * n_centers * self.gradient_norm_cap
        if self.b < floor:
            raise ValueError(
                f"b={self.b} is below 2*N*cap={floor}; utility could go negative"
            )


def utility(snapshot: GradientSnapshot, selection: Selection, cfg: UtilityConfig) -> float:
    """Coreset score of a selection under one slot's probed gradients."""
    n = snapshot.n_centers
    if selection.n_centers != n:
        raise ValueError(
            f"selection covers {selection.n_centers} centers, snapshot has {n}"
        )
    cfg.validate_for(n)
    max_norm = snapshot.max_norm
    if max_norm > cfg.gradient_norm_cap:
        raise ValueError(
            f"observed gradient norm {max_norm:.6g} exceeds configured cap "
            f"{cfg.gradient_norm_cap:.6g}; raise the cap (and b) or rescale the task"
        )
    mask = selection.as_array()
    if not mask.any():
        return cfg.b - 2.0 * n * max_norm
    coverage = snapshot.distances[:, mask].min(axis=1).sum()
    return cfg.b - float(coverage)


def empirical_gradient_bound(snapshots: Sequence[GradientSnapshot]) -> float:
    """Largest gradient norm observed across snapshots (the empirical G)."""
    if len(snapshots) == 0:
        raise ValueError("need at least one snapshot")
    return max(s.max_norm for s in snapshots)


def empirical_divergence(snapshot: GradientSnapshot) -> float:
    """Largest distance from any center's gradient to the fleet mean (the empirical delta)."""
    mean = snapshot.gradients.mean(axis=0)
    return float(np.linalg.norm(snapshot.gradients - mean, axis=1).max())
