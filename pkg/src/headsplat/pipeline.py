"""Optimization programs and their shared machinery.

Three entry points: ``fit_mean_texture`` (photometric fit of the face splats to
the template's mean colors, run once and reused across identities),
``generate`` (two-phase identity optimization under a pluggable guidance
backend), and ``express`` (blendshape deformation with optional refinement).
They share an Adam optimizer with delayed exponential learning-rate decay,
template-proximity regularizers, and JSON-lines run logs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptive import (
    AdaptiveConfig,
    GradAccumulator,
    densify_and_prune,
    prune_disconnected,
    prune_splats,
    reset_opacity,
    should_fire,
)
from .errors import ConfigError, ShapeMismatchError, TrainingError
from .guidance import (
    ConditionEmbedding,
    blend_condition,
    ism_gradient,
    linear_schedule,
    make_analytic_denoiser,
    photometric_gradient,
    sds_gradient,
)
from .rasterizer import render, render_backward
from .sampler import CameraRanges, relax, sample_batch
from .splats import SplatCloud, SplatGradients, deform_by_template, parameter_view
from .template import TemplateMesh, apply_blendshapes, face_laplacian, render_mesh_target

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")
VIEW_BUCKETS = ("front", "side", "back")


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    """Exponential decay from lr_init to lr_final with a sine-ramped delay."""

    lr_init: float
    lr_final: float
    total_steps: int
    delay_steps: int = 0
    delay_mult: float = 1.0

    def __post_init__(self):
        if self.lr_init <= 0 or self.lr_final <= 0:
            raise ConfigError("learning rates must be positive",
                              lr_init=self.lr_init, lr_final=self.lr_final)
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1",
                              total_steps=self.total_steps)
        if not 0.0 < self.delay_mult <= 1.0:
            raise ConfigError("delay_mult must be in (0, 1]",
                              delay_mult=self.delay_mult)
        if self.delay_steps < 0:
            raise ConfigError("delay_steps must be >= 0",
                              delay_steps=self.delay_steps)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a step; out-of-range steps clamp to the endpoints."""
    step = min(max(step, 0), schedule.total_steps)
    if schedule.delay_steps > 0:
        ramp = min(step / schedule.delay_steps, 1.0)
        delay = schedule.delay_mult + (1.0 - schedule.delay_mult) * np.sin(
            0.5 * np.pi * ramp)
    else:
        delay = 1.0
    tau = step / schedule.total_steps
    if tau <= 0.0:
        base = schedule.lr_init
    elif tau >= 1.0:
        base = schedule.lr_final
    else:
        base = float(np.exp((1.0 - tau) * np.log(schedule.lr_init)
                            + tau * np.log(schedule.lr_final)))
    return float(delay * base)


@dataclass(frozen=True)
class LrSpec:
    """Per-group schedule parameters; total_steps is bound at run start."""

    lr_init: float
    lr_final: float
    delay_steps: int = 0
    delay_mult: float = 1.0

    def schedule(self, total_steps: int) -> LrSchedule:
        return LrSchedule(self.lr_init, self.lr_final, total_steps,
                          self.delay_steps, self.delay_mult)


def default_lr_specs() -> dict[str, LrSpec]:
    return {
        "positions": LrSpec(1.6e-4, 1.6e-6, delay_steps=500, delay_mult=0.01),
        "rotations": LrSpec(1e-3, 2e-4),
        "log_scales": LrSpec(5e-3, 1e-3),
        "opacity_logits": LrSpec(5e-2, 5e-2),
        "colors": LrSpec(5e-3, 3e-3),
    }


# ---------------------------------------------------------------------------
# template regularizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularizerConfig:
    l2_weight: float = 1e8
    laplacian_weight: float = 1e8

    def __post_init__(self):
        if self.l2_weight < 0 or self.laplacian_weight < 0:
            raise ConfigError("regularizer weights must be nonnegative",
                              l2=self.l2_weight, laplacian=self.laplacian_weight)


def regularizer_gradients(cloud: SplatCloud, template: TemplateMesh,
                          cfg: RegularizerConfig
                          ) -> tuple[float, SplatGradients]:
    """Quadratic pull of face splats toward their template vertices.

    loss = l2_weight * sum ||mu_i - v_i||^2
         + laplacian_weight * ||L (mu - v)||^2_F
    with L the face-submesh graph Laplacian. Gradients flow into positions
    only; non-face splats receive zero.
    """
    grads = SplatGradients.zeros(cloud.n)
    rows = np.where(cloud.face_mask)[0]
    if rows.size == 0 or (cfg.l2_weight == 0.0 and cfg.laplacian_weight == 0.0):
        return 0.0, grads
    verts = cloud.correspondence[rows]
    diff = cloud.positions[rows] - template.vertices[verts]
    loss = cfg.l2_weight * float((diff * diff).sum())
    g = 2.0 * cfg.l2_weight * diff
    if cfg.laplacian_weight > 0.0:
        region = template.face_vertex_indices
        order = np.argsort(verts)
        if not np.array_equal(verts[order], region):
            raise ShapeMismatchError(
                "face-splat correspondence does not cover the face region",
                face_splats=int(rows.size), region=int(region.size))
        lap = face_laplacian(template)
        resid = lap @ diff[order]
        loss += cfg.laplacian_weight * float((resid * resid).sum())
        g[order] += 2.0 * cfg.laplacian_weight * (lap.T @ resid)
    grads.positions[rows] = g
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamOptimizer:
    """Adam over the five parameter groups with row-remappable moments.

    Learning rates come from per-group schedules evaluated at the training
    iteration the caller passes in; bias correction uses the optimizer's own
    global step count. Adaptive-control events remap moment rows so surviving
    splats keep their state and appended splats start from zero.
    """

    def __init__(self, n: int, schedules: dict[str, LrSchedule],
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        missing = set(PARAM_GROUPS) - set(schedules)
        if missing:
            raise ConfigError("missing learning-rate schedules",
                              groups=sorted(missing))
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0 and eps > 0.0):
            raise ConfigError("invalid Adam hyperparameters",
                              beta1=beta1, beta2=beta2, eps=eps)
        self.schedules = dict(schedules)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        shapes = {"positions": (n, 3), "rotations": (n, 4),
                  "log_scales": (n, 3), "opacity_logits": (n,),
                  "colors": (n, 3)}
        self.m = {g: np.zeros(shapes[g]) for g in PARAM_GROUPS}
        self.v = {g: np.zeros(shapes[g]) for g in PARAM_GROUPS}

    def learning_rates(self, iteration: int) -> dict[str, float]:
        return {g: lr_at(self.schedules[g], iteration) for g in PARAM_GROUPS}

    def step(self, cloud: SplatCloud, grads: SplatGradients, iteration: int,
             rows: np.ndarray | None = None) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        if rows is None:
            rows = np.arange(cloud.n)
        for group in PARAM_GROUPS:
            if rows.size == 0:
                continue
            lr = lr_at(self.schedules[group], iteration)
            g = getattr(grads, group)[rows]
            m = self.m[group]
            v = self.v[group]
            m[rows] = self.beta1 * m[rows] + (1.0 - self.beta1) * g
            v[rows] = self.beta2 * v[rows] + (1.0 - self.beta2) * g * g
            update = lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + self.eps)
            param = getattr(cloud, group)
            param[rows] -= update
        # keep quaternions unit after every step
        q = cloud.rotations[rows]
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        cloud.rotations[rows] = q / np.maximum(norms, 1e-12)

    def remap(self, event) -> None:
        kept = event.kept_rows
        for group in PARAM_GROUPS:
            for store in (self.m, self.v):
                old = store[group]
                tail = np.zeros((event.n_appended,) + old.shape[1:])
                store[group] = np.concatenate([old[kept], tail], axis=0)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.asarray(self.step_count)}
        for group in PARAM_GROUPS:
            out[f"m_{group}"] = self.m[group]
            out[f"v_{group}"] = self.v[group]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step_count"])
        for group in PARAM_GROUPS:
            m = np.asarray(state[f"m_{group}"], dtype=np.float64)
            v = np.asarray(state[f"v_{group}"], dtype=np.float64)
            if m.shape != self.m[group].shape or v.shape != self.v[group].shape:
                raise ShapeMismatchError(
                    "optimizer state does not match the cloud",
                    group=group, expected=list(self.m[group].shape),
                    actual=list(m.shape))
            self.m[group] = m
            self.v[group] = v


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything one optimization run needs, serializable to a JSON file."""

    width: int = 512
    height: int = 512
    batch: int = 4
    mean_fit_iters: int = 1000
    face_only_iters: int = 500
    total_iters: int = 6000
    refine_iters: int = 500
    seed: int = 0
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    power_cutoff: float = 12.0
    early_stop: float = 1e-4
    guidance_backend: str = "photometric"
    distill_mode: str = "ism"
    guidance_scale: float = 1.0
    schedule_steps: int = 1000
    delta_t: int = 40
    delta_s: int = 20
    inversion_steps: int = 20
    s_band: tuple[int, int] = (100, 600)
    t_range: tuple[int, int] = (20, 980)
    identity_blend: float = 0.85
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    lr: dict[str, LrSpec] = field(default_factory=default_lr_specs)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    camera: CameraRanges = field(default_factory=CameraRanges)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive",
                              width=self.width, height=self.height)
        if self.batch < 1:
            raise ConfigError("batch must be >= 1", batch=self.batch)
        for name in ("mean_fit_iters", "face_only_iters", "total_iters",
                     "refine_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0",
                                  **{name: getattr(self, name)})
        if self.face_only_iters > self.total_iters:
            raise ConfigError("phase boundary exceeds the run length",
                              face_only_iters=self.face_only_iters,
                              total_iters=self.total_iters)
        if self.distill_mode not in ("ism", "sds"):
            raise ConfigError("distill_mode must be ism or sds",
                              distill_mode=self.distill_mode)
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be >= 0",
                              guidance_scale=self.guidance_scale)
        if self.schedule_steps < 1:
            raise ConfigError("schedule_steps must be >= 1",
                              schedule_steps=self.schedule_steps)
        if not 0.0 <= self.identity_blend <= 1.0:
            raise ConfigError("identity_blend must be in [0, 1]",
                              identity_blend=self.identity_blend)
        self.background = tuple(float(c) for c in self.background)
        if len(self.background) != 3 or any(
                not 0.0 <= c <= 1.0 for c in self.background):
            raise ConfigError("background must be 3 channels in [0, 1]",
                              background=list(self.background))
        self.s_band = (int(self.s_band[0]), int(self.s_band[1]))
        self.t_range = (int(self.t_range[0]), int(self.t_range[1]))
        missing = set(PARAM_GROUPS) - set(self.lr)
        extra = set(self.lr) - set(PARAM_GROUPS)
        if missing or extra:
            raise ConfigError("lr table must name exactly the parameter groups",
                              missing=sorted(missing), extra=sorted(extra))

    def schedules(self, total_steps: int) -> dict[str, LrSchedule]:
        return {g: spec.schedule(total_steps) for g, spec in self.lr.items()}

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lr"] = {g: dataclasses.asdict(s) for g, s in self.lr.items()}
        return out


def _from_mapping(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object", actual=type(data).__name__)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys", keys=sorted(unknown))
    return cls(**data)


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object",
                          actual=type(data).__name__)
    data = dict(data)
    nested = {}
    if "lr" in data:
        table = data.pop("lr")
        if not isinstance(table, dict):
            raise ConfigError("lr must map group names to schedules")
        nested["lr"] = {g: _from_mapping(LrSpec, spec, f"lr.{g}")
                        for g, spec in table.items()}
    for key, cls in (("adaptive", AdaptiveConfig), ("camera", CameraRanges),
                     ("regularizer", RegularizerConfig)):
        if key in data:
            nested[key] = _from_mapping(cls, data.pop(key), key)
    cfg = _from_mapping(RunConfig, data, "run config")
    return dataclasses.replace(cfg, **nested) if nested else cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError("run config is not valid JSON", path=str(path),
                          detail=str(err)) from None
    except OSError as err:
        raise ConfigError("cannot read run config", path=str(path),
                          detail=str(err)) from None
    return run_config_from_dict(data)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
                          + "\n")


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# guidance backends
# ---------------------------------------------------------------------------

class PhotometricBackend:
    """L1 against a per-pose target image; bypasses diffusion entirely."""

    name = "photometric"

    def __init__(self, target_fn):
        self.target_fn = target_fn

    def gradient(self, rendered, pose, bucket, condition, rng):
        target = self.target_fn(pose)
        return photometric_gradient(rendered, target)


class PointMassDistillationBackend:
    """Score distillation against the analytic point-mass denoiser.

    The per-pose target image defines the point mass; the residual then has a
    closed form, which makes this backend the end-to-end oracle for the
    distillation path. The reported loss is the diagnostic L1 to the target,
    not the distillation objective itself.
    """

    name = "analytic-pointmass"

    def __init__(self, target_fn, cfg: RunConfig):
        self.target_fn = target_fn
        self.schedule = linear_schedule(cfg.schedule_steps)
        self.mode = cfg.distill_mode
        self.guidance_scale = cfg.guidance_scale
        self.delta_t = cfg.delta_t
        self.delta_s = cfg.delta_s
        self.inversion_steps = cfg.inversion_steps
        self.s_band = cfg.s_band
        self.t_range = cfg.t_range

    def gradient(self, rendered, pose, bucket, condition, rng):
        target = self.target_fn(pose)
        denoiser = make_analytic_denoiser(target)
        if self.mode == "ism":
            grad = ism_gradient(
                rendered, condition, self.schedule, denoiser, rng,
                delta_t=self.delta_t, delta_s=self.delta_s,
                inversion_steps=self.inversion_steps,
                guidance_scale=self.guidance_scale, s_band=self.s_band)
        else:
            grad = sds_gradient(
                rendered, condition, self.schedule, denoiser, rng,
                guidance_scale=self.guidance_scale, t_range=self.t_range)
        loss = float(np.abs(rendered - target).mean())
        return loss, grad


GUIDANCE_BACKENDS = {
    "photometric": lambda target_fn, cfg: PhotometricBackend(target_fn),
    "analytic-pointmass": PointMassDistillationBackend,
}


def build_backend(name: str, target_fn, cfg: RunConfig):
    try:
        factory = GUIDANCE_BACKENDS[name]
    except KeyError:
        raise ConfigError("unknown guidance backend", backend=name,
                          known=sorted(GUIDANCE_BACKENDS)) from None
    return factory(target_fn, cfg)


# ---------------------------------------------------------------------------
# logging and checkpoints
# ---------------------------------------------------------------------------

class RunLog:
    """Collects JSON-lines records, optionally mirroring them to a file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def save_checkpoint(prefix: str | Path, cloud: SplatCloud,
                    optimizer: AdamOptimizer, cfg: RunConfig,
                    iteration: int) -> None:
    """PLY for the cloud plus an npz with optimizer moments and config hash."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    from .splats import save_splat_ply

    save_splat_ply(cloud, prefix.with_suffix(".ply"))
    state = optimizer.state_dict()
    np.savez(prefix.with_suffix(".opt.npz"), iteration=np.asarray(iteration),
             config_hash=np.asarray(config_hash(cfg)), **state)


def load_checkpoint(prefix: str | Path, cfg: RunConfig
                    ) -> tuple[SplatCloud, dict, int]:
    """Restore a checkpoint; refuses to resume under a different config."""
    prefix = Path(prefix)
    from .splats import load_splat_ply

    cloud = load_splat_ply(prefix.with_suffix(".ply"))
    with np.load(prefix.with_suffix(".opt.npz")) as data:
        state = {k: data[k] for k in data.files}
    stored = str(state.pop("config_hash"))
    if stored != config_hash(cfg):
        raise ConfigError("checkpoint was written under a different config",
                          stored=stored[:12], current=config_hash(cfg)[:12])
    iteration = int(state.pop("iteration"))
    return cloud, state, iteration


# ---------------------------------------------------------------------------
# shared step machinery
# ---------------------------------------------------------------------------

def _guard_finite(cloud: SplatCloud, iteration: int, phase: str) -> None:
    for group in PARAM_GROUPS:
        if not np.isfinite(getattr(cloud, group)).all():
            raise TrainingError("non-finite parameters", iteration=iteration,
                                phase=phase, group=group)


def _render_and_guide(cloud, views, conditions, backend, cfg, rng,
                      region="all"):
    """Render each view, query guidance, and backprop to parameter space."""
    grads = SplatGradients.zeros(cloud.n)
    loss_sum = 0.0
    for pose, bucket in views:
        res = render(cloud, pose, region=region, background=cfg.background,
                     power_cutoff=cfg.power_cutoff, early_stop=cfg.early_stop)
        condition = conditions[bucket] if conditions is not None else None
        loss, grad_img = backend.gradient(res.rgb, pose, bucket, condition, rng)
        grads.add_(render_backward(res.cache, grad_img))
        loss_sum += float(loss)
    return loss_sum / len(views), grads


def _record(log: RunLog, *, iteration, phase, loss, reg_loss, cloud,
            optimizer, events) -> None:
    log.write({
        "iter": int(iteration),
        "phase": phase,
        "loss": float(loss),
        "reg_loss": float(reg_loss),
        "n_splats": int(cloud.n),
        "n_face": int(cloud.face_mask.sum()),
        "lr": {g: float(v)
               for g, v in optimizer.learning_rates(iteration).items()},
        "events": events,
    })


# ---------------------------------------------------------------------------
# programs
# ---------------------------------------------------------------------------

def fit_mean_texture(template: TemplateMesh, cloud: SplatCloud,
                     cfg: RunConfig, *, log_path=None
                     ) -> tuple[SplatCloud, list[dict]]:
    """Photometric fit of the face splats to the template's mean colors.

    Face-phase cameras, face-region renders against face-submesh mesh targets,
    Adam steps restricted to face parameters, template regularizers on. The
    result is subject-independent and shared across identities.
    """
    if template.mean_colors is None:
        raise ConfigError("template has no mean colors to fit against")
    rng = np.random.default_rng(cfg.seed)
    cloud = cloud.copy()
    optimizer = AdamOptimizer(
        cloud.n, cfg.schedules(max(cfg.mean_fit_iters, 1)),
        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rows = parameter_view(cloud, face_only=True)
    log = RunLog(log_path)

    def mesh_target(pose):
        img, _ = render_mesh_target(template, pose, region="face",
                                    background=cfg.background)
        return img

    backend = PhotometricBackend(mesh_target)
    for it in range(cfg.mean_fit_iters):
        views = sample_batch(cfg.camera, cfg.batch, rng, "face_only",
                             width=cfg.width, height=cfg.height)
        loss, grads = _render_and_guide(cloud, views, None, backend, cfg, rng,
                                        region="face")
        if not np.isfinite(loss):
            raise TrainingError("loss diverged", iteration=it,
                                phase="mean_fit")
        reg_loss, reg_grads = regularizer_gradients(cloud, template,
                                                    cfg.regularizer)
        grads.add_(reg_grads)
        optimizer.step(cloud, grads, it, rows=rows)
        _guard_finite(cloud, it, "mean_fit")
        _record(log, iteration=it, phase="mean_fit", loss=loss,
                reg_loss=reg_loss, cloud=cloud, optimizer=optimizer,
                events=[])
    return cloud, log.records


def _blended_conditions(identity: ConditionEmbedding | None,
                        view_embeddings: dict | None,
                        blend: float) -> dict | None:
    if identity is None:
        return None
    missing = set(VIEW_BUCKETS) - set(view_embeddings or {})
    if missing:
        raise ConfigError(
            "view embeddings must cover front, side, and back",
            missing=sorted(missing),
            provided=sorted(view_embeddings) if view_embeddings else [])
    return {bucket: blend_condition(identity, view_embeddings[bucket], blend)
            for bucket in VIEW_BUCKETS}


def generate(identity_embedding: ConditionEmbedding | None,
             view_embeddings: dict | None, template: TemplateMesh,
             cloud_init: SplatCloud, cfg: RunConfig, *,
             backend=None, target_fn=None, log_path=None,
             checkpoint_prefix=None, checkpoint_interval=0
             ) -> tuple[SplatCloud, list[dict]]:
    """Two-phase identity optimization.

    Phase 1 (face_only_iters): face-phase cameras, face parameters only, no
    adaptive events. Phase 2 (to total_iters): full camera sampling with range
    relaxation, all parameters, the adaptive calendar, and regularizers
    keeping face splats on the template. Per-view conditions blend the
    identity embedding with the view-bucket embedding.
    """
    if backend is None:
        if target_fn is None:
            raise ConfigError("generate needs a guidance backend or target_fn")
        backend = build_backend(cfg.guidance_backend, target_fn, cfg)
    conditions = _blended_conditions(identity_embedding, view_embeddings,
                                     cfg.identity_blend)
    rng = np.random.default_rng(cfg.seed)
    cloud = cloud_init.copy()
    optimizer = AdamOptimizer(
        cloud.n, cfg.schedules(max(cfg.total_iters, 1)),
        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    acc = GradAccumulator(cloud.n)
    ranges = cfg.camera
    log = RunLog(log_path)

    for it in range(cfg.total_iters):
        face_phase = it < cfg.face_only_iters
        if face_phase:
            views = sample_batch(ranges, cfg.batch, rng, "face_only",
                                 width=cfg.width, height=cfg.height)
            rows = parameter_view(cloud, face_only=True)
        else:
            ranges = relax(ranges, it, rng)
            views = sample_batch(ranges, cfg.batch, rng, "full",
                                 width=cfg.width, height=cfg.height)
            rows = parameter_view(cloud)
        loss, grads = _render_and_guide(cloud, views, conditions, backend,
                                        cfg, rng)
        if not np.isfinite(loss):
            raise TrainingError("loss diverged", iteration=it,
                                phase="face" if face_phase else "full")
        reg_loss, reg_grads = regularizer_gradients(cloud, template,
                                                    cfg.regularizer)
        grads.add_(reg_grads)
        optimizer.step(cloud, grads, it, rows=rows)
        _guard_finite(cloud, it, "face" if face_phase else "full")

        events = []
        if not face_phase:
            acc.add(grads)
            fired = should_fire(it, cfg.adaptive)
            if "densify_prune" in fired:
                cloud, event = densify_and_prune(cloud, acc, cfg.adaptive, rng)
                optimizer.remap(event)
                acc.remap(event)
                acc.reset()
                events.append(event.to_record(it))
            if "opacity_reset" in fired:
                cloud = reset_opacity(cloud,
                                      cfg.adaptive.opacity_reset_ceiling)
                events.append({"iteration": int(it), "event": "opacity_reset",
                               "n_before": int(cloud.n),
                               "n_after": int(cloud.n)})
            if "targeted_prune" in fired:
                cloud, event = prune_splats(cloud, cfg.adaptive)
                optimizer.remap(event)
                acc.remap(event)
                events.append(event.to_record(it))
            if "disconnected_prune" in fired:
                cloud, event = prune_disconnected(cloud, cfg.adaptive)
                optimizer.remap(event)
                acc.remap(event)
                events.append(event.to_record(it))
        _record(log, iteration=it, phase="face" if face_phase else "full",
                loss=loss, reg_loss=reg_loss, cloud=cloud,
                optimizer=optimizer, events=events)
        if checkpoint_prefix is not None and checkpoint_interval > 0 \
                and (it + 1) % checkpoint_interval == 0:
            save_checkpoint(Path(f"{checkpoint_prefix}.{it + 1:06d}"),
                            cloud, optimizer, cfg, it + 1)
    return cloud, log.records


def express(cloud: SplatCloud, template: TemplateMesh,
            coefficients: np.ndarray, refine: bool, cfg: RunConfig, *,
            backend=None, target_fn=None, log_path=None
            ) -> tuple[SplatCloud, list[dict]]:
    """Expression transfer: blendshape deformation plus optional refinement.

    Refinement runs refine_iters guidance steps on all parameters with the
    template regularizers and adaptive events disabled (the deformed cloud is
    the sole geometry prior), using face-phase cameras.
    """
    deformed_vertices = apply_blendshapes(template, coefficients)
    out = deform_by_template(cloud, template.vertices, deformed_vertices)
    if not refine:
        return out, []
    if backend is None:
        if target_fn is None:
            raise ConfigError("refinement needs a guidance backend or target_fn")
        backend = build_backend(cfg.guidance_backend, target_fn, cfg)
    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamOptimizer(
        out.n, cfg.schedules(max(cfg.refine_iters, 1)),
        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rows = parameter_view(out)
    log = RunLog(log_path)
    for it in range(cfg.refine_iters):
        views = sample_batch(cfg.camera, cfg.batch, rng, "face_only",
                             width=cfg.width, height=cfg.height)
        loss, grads = _render_and_guide(out, views, None, backend, cfg, rng)
        if not np.isfinite(loss):
            raise TrainingError("loss diverged", iteration=it, phase="refine")
        optimizer.step(out, grads, it, rows=rows)
        _guard_finite(out, it, "refine")
        _record(log, iteration=it, phase="refine", loss=loss, reg_loss=0.0,
                cloud=out, optimizer=optimizer, events=[])
    return out, log.records
