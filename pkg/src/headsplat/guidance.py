"""Per-view guidance gradients for the splat optimizer.

Two families share one calling convention (a gradient image the same shape as
the render):

* photometric: L1 against a fixed target image;
* score distillation over an abstract denoiser: the classic noised-sample
  residual, and the interval variant that anchors both noise predictions on a
  deterministic DDIM inversion of the current render.

The denoiser is a contract, not a network: anything exposing
``predict_noise(x, t, schedule, condition)`` works. The built-in analytic
point-mass model makes every distillation identity exactly checkable, which
the test suite leans on heavily. Gradients here are with respect to the
rendered image; the caller chains them through the rasterizer backward pass.

All operations are space-agnostic: they apply unchanged whether ``x0`` is a
pixel image or an autoencoder latent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import ConfigError, GuidanceError, ShapeMismatchError

log = logging.getLogger(__name__)

EMBEDDING_KINDS = ("identity", "view", "blended")
VIEW_FRONT_CUT = 45.0
VIEW_BACK_CUT = 135.0
IDENTITY_BLEND = 0.85


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative signal levels ᾱ_t for t = 0..T plus the weighting rule.

    ᾱ_0 is slightly below 1 (it absorbs the first noise increment), which
    keeps timestep 0 invertible: deterministic round trips through t = 0
    recover the input rather than collapsing to the model's reconstruction.
    """

    total_steps: int
    alphas_bar: np.ndarray      # (T+1,), decreasing, in (0, 1)
    weighting: str = "one_minus_alpha_bar"

    def __post_init__(self):
        object.__setattr__(self, "alphas_bar",
                           np.ascontiguousarray(self.alphas_bar, np.float64))
        ab = self.alphas_bar
        if ab.shape != (self.total_steps + 1,):
            raise ConfigError("alphas_bar must have T+1 entries",
                              total_steps=self.total_steps,
                              actual=list(ab.shape))
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ConfigError("alphas_bar must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ConfigError("alphas_bar must be strictly decreasing")
        if self.weighting not in ("one_minus_alpha_bar", "uniform"):
            raise ConfigError("unknown weighting rule", weighting=self.weighting)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise ConfigError("timestep out of range", t=int(t),
                              total_steps=self.total_steps)
        return float(self.alphas_bar[t])

    def signal_noise(self, t: int) -> tuple[float, float]:
        """(√ᾱ_t, √(1−ᾱ_t))."""
        ab = self.alpha_bar(t)
        return np.sqrt(ab), np.sqrt(1.0 - ab)

    def weight(self, t: int) -> float:
        if self.weighting == "uniform":
            return 1.0
        return 1.0 - self.alpha_bar(t)


def linear_schedule(total_steps: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 0.02,
                    weighting: str = "one_minus_alpha_bar") -> DiffusionSchedule:
    """Linear-beta schedule over timesteps 0..T (ᾱ_0 = 1 − beta_start)."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1", total_steps=total_steps)
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError("need 0 < beta_start <= beta_end < 1",
                          beta_start=beta_start, beta_end=beta_end)
    betas = np.linspace(beta_start, beta_end, total_steps + 1)
    return DiffusionSchedule(total_steps, np.cumprod(1.0 - betas), weighting)


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionEmbedding:
    vector: np.ndarray
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "vector",
                           np.ascontiguousarray(self.vector, np.float64).reshape(-1))
        if self.kind not in EMBEDDING_KINDS:
            raise ConfigError("unknown embedding kind", kind=self.kind)
        if not np.isfinite(self.vector).all():
            raise ConfigError("embedding vector must be finite", kind=self.kind)

    @property
    def dimension(self) -> int:
        return self.vector.shape[0]


def save_embedding(path, embedding: ConditionEmbedding, name: str) -> None:
    """float32 vector in ``path`` plus a ``path``.json manifest."""
    path = Path(path)
    path.write_bytes(embedding.vector.astype("<f4").tobytes())
    manifest = {"name": name, "dimension": embedding.dimension,
                "kind": embedding.kind}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest))


def load_embedding(path) -> tuple[ConditionEmbedding, str]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    vector = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    if vector.shape[0] != int(manifest["dimension"]):
        raise ShapeMismatchError(
            "embedding length disagrees with manifest",
            expected=int(manifest["dimension"]), actual=int(vector.shape[0]),
            file=str(path))
    return ConditionEmbedding(vector, manifest["kind"]), str(manifest["name"])


def blend_condition(c_identity: ConditionEmbedding, c_view: ConditionEmbedding,
                    b: float = IDENTITY_BLEND) -> ConditionEmbedding:
    """b·identity + (1−b)·view."""
    if not 0.0 <= b <= 1.0:
        raise ConfigError("blend factor must be in [0, 1]", b=b)
    if c_identity.dimension != c_view.dimension:
        raise ShapeMismatchError("embedding dimensions differ",
                                 expected=c_identity.dimension,
                                 actual=c_view.dimension)
    return ConditionEmbedding(b * c_identity.vector + (1.0 - b) * c_view.vector,
                              kind="blended")


def bucket_view(azimuth_deg: float, front_cut: float = VIEW_FRONT_CUT,
                back_cut: float = VIEW_BACK_CUT) -> str:
    """front / side / back label for a camera azimuth in [-180, 180]."""
    if not -180.0 <= azimuth_deg <= 180.0:
        raise ConfigError("azimuth outside [-180, 180]", azimuth=azimuth_deg)
    mag = abs(azimuth_deg)
    if mag <= front_cut:
        return "front"
    if mag >= back_cut:
        return "back"
    return "side"


# ---------------------------------------------------------------------------
# denoiser contract
# ---------------------------------------------------------------------------

@runtime_checkable
class DenoiserModel(Protocol):
    """Noise predictor: deterministic, shape-preserving.

    ``condition_dim`` declares the expected embedding length (None accepts
    anything, including no condition).
    """

    condition_dim: int | None

    def predict_noise(self, x: np.ndarray, t: int, schedule: DiffusionSchedule,
                      condition: ConditionEmbedding | None = None) -> np.ndarray:
        ...


class AnalyticPointMassDenoiser:
    """Exact score model of a point mass at ``target``.

    ε̂(x, t) = (x − √ᾱ_t·target) / max(√(1−ᾱ_t), 1e-6); conditions ignored.
    Under this model every distillation identity in this module has a closed
    form, which the tests exploit.
    """

    condition_dim = None

    def __init__(self, target: np.ndarray):
        target = np.asarray(target, dtype=np.float64)
        if not np.isfinite(target).all():
            raise ConfigError("denoiser target must be finite")
        self.target = target

    def predict_noise(self, x, t, schedule, condition=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.target.shape:
            raise ShapeMismatchError("latent shape mismatch",
                                     expected=list(self.target.shape),
                                     actual=list(x.shape))
        sqrt_ab, sqrt_1ab = schedule.signal_noise(t)
        return (x - sqrt_ab * self.target) / max(sqrt_1ab, 1e-6)


def make_analytic_denoiser(target: np.ndarray) -> AnalyticPointMassDenoiser:
    return AnalyticPointMassDenoiser(target)


def _mixed_prediction(denoiser: DenoiserModel, x: np.ndarray, t: int,
                      schedule: DiffusionSchedule,
                      condition: ConditionEmbedding | None,
                      guidance_scale: float) -> np.ndarray:
    """Single conditional call at scale 1; classifier-free mix otherwise."""
    if guidance_scale == 1.0:
        return denoiser.predict_noise(x, t, schedule, condition)
    uncond = denoiser.predict_noise(x, t, schedule, None)
    cond = denoiser.predict_noise(x, t, schedule, condition)
    return uncond + guidance_scale * (cond - uncond)


# ---------------------------------------------------------------------------
# DDIM inversion / denoising
# ---------------------------------------------------------------------------

@dataclass
class DdimTrajectory:
    timesteps: np.ndarray   # (K,), increasing, starts at 0
    latents: np.ndarray     # (K, *latent shape)

    @property
    def final(self) -> np.ndarray:
        return self.latents[-1]

    def at(self, t: int) -> np.ndarray:
        hits = np.where(self.timesteps == t)[0]
        if hits.size == 0:
            raise ConfigError("timestep not on the trajectory grid", t=int(t))
        return self.latents[int(hits[0])]


def _time_grid(t_target: int, steps: int) -> np.ndarray:
    grid = np.round(np.linspace(0.0, float(t_target), steps + 1)).astype(np.int64)
    return np.unique(grid)


def ddim_invert(x0: np.ndarray, steps: int, schedule: DiffusionSchedule,
                denoiser: DenoiserModel, t_target: int) -> DdimTrajectory:
    """Deterministic inversion of x0 up to t_target via unconditional hops.

    Each hop s→t re-noises the one-step reconstruction at the source step:
    x_t = √ᾱ_t·x̂0(x_s) + √(1−ᾱ_t)·ε̂(x_s, s, ∅).
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1", steps=steps)
    if not 0 <= t_target <= schedule.total_steps:
        raise ConfigError("t_target out of range", t_target=int(t_target),
                          total_steps=schedule.total_steps)
    x0 = np.asarray(x0, dtype=np.float64)
    grid = _time_grid(t_target, steps)
    latents = np.empty((grid.size,) + x0.shape)
    latents[0] = x0
    x = x0
    for k in range(grid.size - 1):
        s, t = int(grid[k]), int(grid[k + 1])
        eps = denoiser.predict_noise(x, s, schedule, None)
        sa_s, sn_s = schedule.signal_noise(s)
        sa_t, sn_t = schedule.signal_noise(t)
        with np.errstate(invalid="ignore", over="ignore"):
            x0_hat = (x - sn_s * eps) / sa_s
            x = sa_t * x0_hat + sn_t * eps
        if not np.isfinite(x).all():
            raise GuidanceError("non-finite latent during inversion",
                                step=k + 1, timestep=t)
        latents[k + 1] = x
    return DdimTrajectory(timesteps=grid, latents=latents)


def ddim_denoise(x_t: np.ndarray, t_start: int, steps: int,
                 schedule: DiffusionSchedule, denoiser: DenoiserModel,
                 condition: ConditionEmbedding | None = None,
                 guidance_scale: float = 1.0) -> DdimTrajectory:
    """Deterministic DDIM walk from t_start down to 0 on the same grid."""
    if steps < 1:
        raise ConfigError("steps must be >= 1", steps=steps)
    grid = _time_grid(t_start, steps)[::-1]  # t_start ... 0
    x = np.asarray(x_t, dtype=np.float64)
    latents = np.empty((grid.size,) + x.shape)
    latents[0] = x
    for k in range(grid.size - 1):
        t, s = int(grid[k]), int(grid[k + 1])
        eps = _mixed_prediction(denoiser, x, t, schedule, condition,
                                guidance_scale)
        sa_t, sn_t = schedule.signal_noise(t)
        sa_s, sn_s = schedule.signal_noise(s)
        x0_hat = (x - sn_t * eps) / sa_t
        x = sa_s * x0_hat + sn_s * eps
        if not np.isfinite(x).all():
            raise GuidanceError("non-finite latent during denoising",
                                step=k + 1, timestep=s)
        latents[k + 1] = x
    return DdimTrajectory(timesteps=grid[::-1].copy(),
                          latents=latents[::-1].copy())


# ---------------------------------------------------------------------------
# guidance gradients
# ---------------------------------------------------------------------------

def photometric_gradient(rendered: np.ndarray,
                         target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean L1 over all elements; gradient = sign(rendered − target)/count."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatchError("rendered/target shapes differ",
                                 expected=list(target.shape),
                                 actual=list(rendered.shape))
    diff = rendered - target
    loss = float(np.abs(diff).mean())
    return loss, np.sign(diff) / diff.size


def sds_gradient(x0: np.ndarray, condition: ConditionEmbedding | None,
                 schedule: DiffusionSchedule, denoiser: DenoiserModel,
                 rng: np.random.Generator, *, guidance_scale: float = 1.0,
                 t_range: tuple[int, int] = (20, 980)) -> np.ndarray:
    """Score-distillation residual w(t)·(ε̂(x_t, t, y) − ε) at a random t."""
    if guidance_scale < 0.0:
        raise ConfigError("guidance_scale must be >= 0", scale=guidance_scale)
    lo, hi = int(t_range[0]), int(t_range[1])
    if not 1 <= lo <= hi <= schedule.total_steps:
        raise ConfigError("bad timestep range", t_range=[lo, hi],
                          total_steps=schedule.total_steps)
    x0 = np.asarray(x0, dtype=np.float64)
    t = int(rng.integers(lo, hi + 1))
    noise = rng.standard_normal(x0.shape)
    sa, sn = schedule.signal_noise(t)
    x_t = sa * x0 + sn * noise
    eps = _mixed_prediction(denoiser, x_t, t, schedule, condition,
                            guidance_scale)
    return schedule.weight(t) * (eps - noise)


def ism_gradient(x0: np.ndarray, condition: ConditionEmbedding | None,
                 schedule: DiffusionSchedule, denoiser: DenoiserModel,
                 rng: np.random.Generator | None = None, *,
                 delta_t: int = 40, delta_s: int = 20,
                 inversion_steps: int = 20, guidance_scale: float = 1.0,
                 s_band: tuple[int, int] = (100, 600),
                 s: int | None = None) -> np.ndarray:
    """Interval residual w(t)·(ε̂(x_t, t, y) − ε̂(x_s, s, ∅)).

    x_s comes from deterministic DDIM inversion of the current render; x_t
    re-noises the render itself with the source-step prediction, so the
    residual vanishes exactly when the render already sits at the model's
    mode and otherwise points along the one-step reconstruction error.
    """
    if not delta_t > delta_s >= 0:
        raise ConfigError("need delta_t > delta_s >= 0",
                          delta_t=delta_t, delta_s=delta_s)
    if guidance_scale < 0.0:
        raise ConfigError("guidance_scale must be >= 0", scale=guidance_scale)
    if s is None:
        if rng is None:
            raise ConfigError("either s or rng must be provided")
        lo, hi = int(s_band[0]), int(s_band[1])
        if not 1 <= lo <= hi <= schedule.total_steps:
            raise ConfigError("bad source band", s_band=[lo, hi],
                              total_steps=schedule.total_steps)
        s = int(rng.integers(lo, hi + 1))
    if not 1 <= s <= schedule.total_steps:
        raise ConfigError("source timestep out of range", s=int(s),
                          total_steps=schedule.total_steps)
    t = s + int(delta_t)
    if t > schedule.total_steps:
        log.warning("interval target %d past schedule end %d; clamping",
                    t, schedule.total_steps)
        t = schedule.total_steps

    x0 = np.asarray(x0, dtype=np.float64)
    trajectory = ddim_invert(x0, inversion_steps, schedule, denoiser, s)
    x_s = trajectory.final
    eps_src = denoiser.predict_noise(x_s, s, schedule, None)
    sa_t, sn_t = schedule.signal_noise(t)
    x_t = sa_t * x0 + sn_t * eps_src
    eps_tgt = _mixed_prediction(denoiser, x_t, t, schedule, condition,
                                guidance_scale)
    return schedule.weight(t) * (eps_tgt - eps_src)
