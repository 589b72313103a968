"""Masked adaptive density control: densify/prune, opacity resets, and
disconnected-splat removal on a fixed iteration calendar.

Face-masked splats are load-bearing (they carry the template correspondence),
so every operation here partitions the cloud into a protected masked set that
is copied through bit-identically and an unmasked set that may be cloned,
split, pruned, or clamped. Each structural event reports which old rows
survived and how many rows were appended so optimizer state can be remapped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .rasterizer import quat_to_rotmat
from .splats import SplatCloud, SplatGradients, inverse_sigmoid

SPLIT_SCALE_FACTOR = 1.6


@dataclass(frozen=True)
class AdaptiveConfig:
    densify_start_iter: int = 1000
    densify_interval: int = 500
    densify_end_iter: int = 5000
    opacity_reset_interval: int = 1000
    final_phase_start: int = 5000
    disconnected_prune_interval: int = 100
    targeted_prune_interval: int = 200
    grad_threshold: float = 2e-4
    size_split_threshold: float = 0.02
    prune_opacity_threshold: float = 0.005
    prune_size_threshold: float = 0.5
    opacity_reset_ceiling: float = 0.01
    disconnected_knn: int = 8
    disconnected_radius: float | None = None  # None: 10x median NN distance

    def __post_init__(self):
        intervals = {
            "densify_interval": self.densify_interval,
            "opacity_reset_interval": self.opacity_reset_interval,
            "disconnected_prune_interval": self.disconnected_prune_interval,
            "targeted_prune_interval": self.targeted_prune_interval,
        }
        for name, value in intervals.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1", **{name: value})
        thresholds = {
            "grad_threshold": self.grad_threshold,
            "size_split_threshold": self.size_split_threshold,
            "prune_opacity_threshold": self.prune_opacity_threshold,
            "prune_size_threshold": self.prune_size_threshold,
        }
        for name, value in thresholds.items():
            if not value > 0.0:
                raise ConfigError(f"{name} must be positive", **{name: value})
        if not 0.0 < self.opacity_reset_ceiling < 1.0:
            raise ConfigError("opacity_reset_ceiling must be in (0, 1)",
                              ceiling=self.opacity_reset_ceiling)
        if self.densify_start_iter > self.densify_end_iter:
            raise ConfigError("densify window is empty",
                              start=self.densify_start_iter,
                              end=self.densify_end_iter)
        if self.disconnected_knn < 1:
            raise ConfigError("disconnected_knn must be >= 1",
                              knn=self.disconnected_knn)
        if self.disconnected_radius is not None and not self.disconnected_radius > 0:
            raise ConfigError("disconnected_radius must be positive",
                              radius=self.disconnected_radius)


def should_fire(iteration: int, cfg: AdaptiveConfig) -> set[str]:
    """Deterministic event set for one iteration of the calendar."""
    if iteration < 0:
        raise ConfigError("iteration must be nonnegative", iteration=iteration)
    events: set[str] = set()
    in_window = cfg.densify_start_iter <= iteration <= cfg.densify_end_iter
    if in_window and iteration % cfg.densify_interval == 0:
        events.add("densify_prune")
    if in_window and iteration % cfg.opacity_reset_interval == 0:
        events.add("opacity_reset")
    past = iteration - cfg.final_phase_start
    if past > 0:
        if past % cfg.disconnected_prune_interval == 0:
            events.add("disconnected_prune")
        if past % cfg.targeted_prune_interval == 0:
            events.add("targeted_prune")
    return events


@dataclass
class AdaptiveEvent:
    """Structural outcome of one event, enough to remap optimizer state."""

    kind: str
    n_before: int
    n_after: int
    kept_rows: np.ndarray     # old-cloud indices surviving, in output order
    n_appended: int           # fresh rows following the kept block
    details: dict = field(default_factory=dict)

    def to_record(self, iteration: int) -> dict:
        rec = {"iteration": iteration, "event": self.kind,
               "n_before": self.n_before, "n_after": self.n_after}
        rec.update(self.details)
        return rec


class GradAccumulator:
    """Per-splat mean of screen-space positional gradient norms across views."""

    def __init__(self, n: int):
        self.grad_sum = np.zeros(n)
        self.seen = np.zeros(n, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.grad_sum.shape[0]

    def add(self, grads: SplatGradients) -> None:
        if grads.screen_grad_norm.shape[0] != self.n:
            raise ConfigError("accumulator size mismatch",
                              expected=self.n,
                              actual=int(grads.screen_grad_norm.shape[0]))
        vis = grads.visible
        self.grad_sum[vis] += grads.screen_grad_norm[vis]
        self.seen[vis] += 1

    def mean(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.seen, 1)

    def remap(self, event: AdaptiveEvent) -> None:
        """Follow a structural event: keep rows, zero the appended ones."""
        fresh = GradAccumulator(event.n_after)
        fresh.grad_sum[:event.kept_rows.size] = self.grad_sum[event.kept_rows]
        fresh.seen[:event.kept_rows.size] = self.seen[event.kept_rows]
        self.grad_sum = fresh.grad_sum
        self.seen = fresh.seen

    def reset(self) -> None:
        self.grad_sum[:] = 0.0
        self.seen[:] = 0


def _concat_clouds(base: SplatCloud, rows: np.ndarray,
                   extra: dict[str, np.ndarray]) -> SplatCloud:
    return SplatCloud(
        positions=np.concatenate([base.positions[rows], extra["positions"]]),
        rotations=np.concatenate([base.rotations[rows], extra["rotations"]]),
        log_scales=np.concatenate([base.log_scales[rows], extra["log_scales"]]),
        opacity_logits=np.concatenate(
            [base.opacity_logits[rows], extra["opacity_logits"]]),
        colors=np.concatenate([base.colors[rows], extra["colors"]]),
        face_mask=np.concatenate(
            [base.face_mask[rows], np.zeros(extra["positions"].shape[0], bool)]),
        correspondence=np.concatenate(
            [base.correspondence[rows],
             np.full(extra["positions"].shape[0], -1, dtype=np.int64)]),
    )


def densify_and_prune(cloud: SplatCloud, acc: GradAccumulator,
                      cfg: AdaptiveConfig,
                      rng: np.random.Generator) -> tuple[SplatCloud, AdaptiveEvent]:
    """One clone/split/prune event over the unmasked splats.

    Decisions are all taken on the input state: low-opacity/oversized splats
    are pruned; among the survivors, high-gradient splats are cloned when
    small or replaced by two down-scaled children sampled from the parent
    Gaussian when large. Output row order is kept survivors, then clones,
    then split children. Accumulators are the caller's to remap and reset.
    """
    if acc.n != cloud.n:
        raise ConfigError("accumulator does not match cloud",
                          expected=cloud.n, actual=acc.n)
    free = ~cloud.face_mask
    extent = cloud.scales.max(axis=1)
    opac = cloud.opacities

    prune = free & ((opac < cfg.prune_opacity_threshold)
                    | (extent > cfg.prune_size_threshold))
    hot = free & ~prune & (acc.mean() > cfg.grad_threshold)
    split = hot & (extent > cfg.size_split_threshold)
    clone = hot & ~split

    kept = np.where(~prune & ~split)[0]
    clone_rows = np.where(clone)[0]
    split_rows = np.where(split)[0]

    extra = {
        "positions": cloud.positions[clone_rows],
        "rotations": cloud.rotations[clone_rows],
        "log_scales": cloud.log_scales[clone_rows],
        "opacity_logits": cloud.opacity_logits[clone_rows],
        "colors": cloud.colors[clone_rows],
    }
    if split_rows.size:
        parents = np.repeat(split_rows, 2)
        quats = cloud.rotations[parents]
        quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
        rot = quat_to_rotmat(quats)
        local = rng.standard_normal((parents.size, 3)) * cloud.scales[parents]
        child_pos = cloud.positions[parents] + np.einsum("mij,mj->mi", rot, local)
        extra = {
            "positions": np.concatenate([extra["positions"], child_pos]),
            "rotations": np.concatenate([extra["rotations"],
                                         cloud.rotations[parents]]),
            "log_scales": np.concatenate(
                [extra["log_scales"],
                 cloud.log_scales[parents] - np.log(SPLIT_SCALE_FACTOR)]),
            "opacity_logits": np.concatenate(
                [extra["opacity_logits"], cloud.opacity_logits[parents]]),
            "colors": np.concatenate([extra["colors"], cloud.colors[parents]]),
        }

    out = _concat_clouds(cloud, kept, extra)
    event = AdaptiveEvent(
        kind="densify_prune", n_before=cloud.n, n_after=out.n,
        kept_rows=kept, n_appended=out.n - kept.size,
        details={"cloned": int(clone_rows.size), "split": int(split_rows.size),
                 "pruned": int(prune.sum())},
    )
    return out, event


def prune_splats(cloud: SplatCloud,
                 cfg: AdaptiveConfig) -> tuple[SplatCloud, AdaptiveEvent]:
    """Targeted opacity/size pruning of unmasked splats (final-phase event)."""
    free = ~cloud.face_mask
    extent = cloud.scales.max(axis=1)
    prune = free & ((cloud.opacities < cfg.prune_opacity_threshold)
                    | (extent > cfg.prune_size_threshold))
    kept = np.where(~prune)[0]
    event = AdaptiveEvent(
        kind="targeted_prune", n_before=cloud.n, n_after=kept.size,
        kept_rows=kept, n_appended=0, details={"pruned": int(prune.sum())})
    return cloud.take(kept), event


def reset_opacity(cloud: SplatCloud, ceiling: float) -> SplatCloud:
    """Clamp unmasked opacities to at most ``ceiling``; masked rows untouched."""
    if not 0.0 < ceiling < 1.0:
        raise ConfigError("ceiling must be in (0, 1)", ceiling=ceiling)
    out = cloud.copy()
    cap = float(inverse_sigmoid(ceiling))
    free = ~out.face_mask
    out.opacity_logits[free] = np.minimum(out.opacity_logits[free], cap)
    return out


def disconnected_radius(cloud: SplatCloud, cfg: AdaptiveConfig) -> float:
    """Configured radius, or 10x the median nearest-neighbor distance."""
    if cfg.disconnected_radius is not None:
        return float(cfg.disconnected_radius)
    if cloud.n < 2:
        return np.inf
    tree = cKDTree(cloud.positions)
    dist, _ = tree.query(cloud.positions, k=2)
    return 10.0 * float(np.median(dist[:, 1]))


def prune_disconnected(cloud: SplatCloud,
                       cfg: AdaptiveConfig) -> tuple[SplatCloud, AdaptiveEvent]:
    """Remove unmasked splats whose k-th nearest neighbor is too far away."""
    if cloud.n == 0:
        raise ConfigError("cloud is empty")
    k = cfg.disconnected_knn
    if cloud.n <= k:  # not enough neighbors to judge isolation
        kept = np.arange(cloud.n)
        event = AdaptiveEvent("disconnected_prune", cloud.n, cloud.n, kept, 0,
                              details={"pruned": 0})
        return cloud.take(kept), event
    radius = disconnected_radius(cloud, cfg)
    tree = cKDTree(cloud.positions)
    dist, _ = tree.query(cloud.positions, k=k + 1)  # first hit is the point itself
    isolated = dist[:, k] > radius
    kept = np.where(cloud.face_mask | ~isolated)[0]
    event = AdaptiveEvent(
        kind="disconnected_prune", n_before=cloud.n, n_after=kept.size,
        kept_rows=kept, n_appended=0,
        details={"pruned": cloud.n - int(kept.size), "radius": float(radius)})
    return cloud.take(kept), event
