"""Command line interface.

Exit codes: 0 on success, 2 for input or configuration validation failures,
3 for runtime failures. Every failure writes one JSON object to stderr with
``code``, ``message``, and ``context`` keys.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, HeadsplatError
from .guidance import load_embedding
from .imgio import write_png
from .pipeline import (RunConfig, express, fit_mean_texture, generate,
                       load_run_config)
from .rasterizer import render
from .scenes import load_identity, load_pose_list, make_target_fn, \
    turntable_poses
from .splats import init_from_template, load_splat_ply, save_splat_ply
from .template import load_template, load_template_bundle, \
    save_template_bundle, subdivide_partitioned

VIEW_EMBEDDING_BUCKETS = ("front", "side", "back")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the JSON envelope."""

    def error(self, message):
        raise ConfigError(message)


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} not found", path=str(path))
    return path


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"{what} not found", path=str(path))
    return path


def _out_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> RunConfig:
    cfg = load_run_config(_require_file(args.config, "config file"))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _load_cloud(path):
    return load_splat_ply(_require_file(path, "splat cloud"))


def _scene_target(args, cfg):
    directory = _require_dir(args.scene, "scene directory")
    mesh, _ = load_identity(directory)
    return make_target_fn(mesh, cfg.background)


def _render_rgb(cloud, pose, cfg: RunConfig) -> np.ndarray:
    return render(cloud, pose, background=cfg.background,
                  power_cutoff=cfg.power_cutoff,
                  early_stop=cfg.early_stop).rgb


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def cmd_prepare_template(args) -> int:
    mesh_file = _require_file(args.mesh, "mesh file")
    blend_file = _require_file(args.blendshapes, "blendshape file") \
        if args.blendshapes else None
    mask_file = _require_file(args.face_mask, "face mask file")
    if args.rounds_face < 0 or args.rounds_head < 0:
        raise ConfigError("subdivision rounds must be >= 0",
                          rounds_face=args.rounds_face,
                          rounds_head=args.rounds_head)
    mesh = load_template(mesh_file, blend_file, mask_file)
    mesh, report = subdivide_partitioned(mesh, args.rounds_face,
                                         args.rounds_head)
    out = _out_dir(args.out)
    save_template_bundle(out / "template.npz", mesh)
    (out / "subdivision_report.json").write_text(report.to_json() + "\n")
    _emit({"template": str(out / "template.npz"),
           "v_before": report.v_before, "v_after": report.v_after,
           "v_face": report.v_face, "v_head": report.v_head})
    return 0


def cmd_fit_mean(args) -> int:
    cfg = _load_config(args)
    template = load_template_bundle(_require_file(args.template,
                                                  "template bundle"))
    cloud = init_from_template(template)
    out = _out_dir(args.out)
    cloud, records = fit_mean_texture(template, cloud, cfg,
                                      log_path=out / "fit_log.jsonl")
    save_splat_ply(cloud, out / "mean_fit.ply")
    _emit({"ply": str(out / "mean_fit.ply"), "n_splats": cloud.n,
           "iterations": len(records)})
    return 0


def _load_view_embeddings(directory):
    directory = _require_dir(directory, "view embedding directory")
    out = {}
    for bucket in VIEW_EMBEDDING_BUCKETS:
        path = _require_file(directory / f"{bucket}.bin",
                             f"{bucket} view embedding")
        out[bucket], _ = load_embedding(path)
    return out


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    template = load_template_bundle(_require_file(args.template,
                                                  "template bundle"))
    target_fn = _scene_target(args, cfg)
    identity = None
    if args.identity_embedding:
        identity, _ = load_embedding(
            _require_file(args.identity_embedding, "identity embedding"))
    views = _load_view_embeddings(args.view_embeddings) \
        if args.view_embeddings else None
    cloud = _load_cloud(args.init) if args.init else init_from_template(template)

    out = _out_dir(args.out)
    cloud, records = generate(identity, views, template, cloud, cfg,
                              target_fn=target_fn,
                              log_path=out / "train_log.jsonl")
    save_splat_ply(cloud, out / "avatar.ply")

    poses = turntable_poses(12, width=cfg.width, height=cfg.height)
    strip = np.concatenate([_render_rgb(cloud, p, cfg) for p in poses], axis=1)
    write_png(out / "turntable.png", strip)
    _emit({"ply": str(out / "avatar.ply"), "n_splats": cloud.n,
           "iterations": len(records),
           "turntable": str(out / "turntable.png")})
    return 0


def _parse_coefficients(spec: str) -> np.ndarray:
    path = Path(spec)
    if path.is_file():
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("coefficient file is not valid JSON",
                              path=spec) from exc
        if isinstance(data, dict):
            data = data.get("coefficients")
        if not isinstance(data, list):
            raise ConfigError("coefficient file must hold a JSON array",
                              path=spec)
        values = data
    else:
        values = spec.split(",")
    try:
        out = np.asarray([float(v) for v in values], dtype=np.float64)
    except (TypeError, ValueError):
        raise ConfigError("coefficients must be numbers", value=spec) from None
    if out.size == 0:
        raise ConfigError("at least one coefficient is required", value=spec)
    return out


def cmd_express(args) -> int:
    cfg = _load_config(args)
    template = load_template_bundle(_require_file(args.template,
                                                  "template bundle"))
    coefficients = _parse_coefficients(args.coefficients)
    cloud = _load_cloud(args.cloud)
    target_fn = None
    if args.refine:
        if not args.scene:
            raise ConfigError("--refine needs --scene for guidance targets")
        target_fn = _scene_target(args, cfg)

    out = _out_dir(args.out)
    log_path = out / "refine_log.jsonl" if args.refine else None
    cloud, records = express(cloud, template, coefficients, args.refine, cfg,
                             target_fn=target_fn, log_path=log_path)
    save_splat_ply(cloud, out / "expression.ply")
    payload = {"ply": str(out / "expression.ply"), "n_splats": cloud.n,
               "refined": bool(args.refine)}
    if args.refine:
        payload["iterations"] = len(records)
    _emit(payload)
    return 0


def cmd_render(args) -> int:
    cfg = _load_config(args) if args.config else RunConfig()
    cloud = _load_cloud(args.cloud)
    if args.poses:
        poses = load_pose_list(_require_file(args.poses, "pose list"))
    else:
        poses = turntable_poses(args.turntable, width=cfg.width,
                                height=cfg.height)
    out = _out_dir(args.out)
    written = []
    for i, pose in enumerate(poses):
        path = out / f"frame_{i:03d}.png"
        write_png(path, _render_rgb(cloud, pose, cfg))
        written.append(str(path))
    _emit({"frames": written})
    return 0


def cmd_export(args) -> int:
    cloud = _load_cloud(args.cloud)
    if args.format != "ply":
        raise ConfigError("unsupported export format", format=args.format)
    out = Path(args.out)
    if out.parent and not out.parent.is_dir():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_splat_ply(cloud, out)
    sidecar = out.with_suffix(out.suffix + ".correspondence.json")
    sidecar.unlink(missing_ok=True)  # plain viewer-compatible PLY only
    _emit({"ply": str(out), "n_splats": cloud.n})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="headsplat",
                     description="Template-anchored Gaussian head avatars")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("prepare-template",
                       help="subdivide a marked mesh into a template bundle")
    p.add_argument("--mesh", required=True)
    p.add_argument("--blendshapes")
    p.add_argument("--face-mask", required=True)
    p.add_argument("--rounds-face", type=int, default=2)
    p.add_argument("--rounds-head", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_prepare_template)

    p = sub.add_parser("fit-mean",
                       help="fit template splats to the mean texture")
    p.add_argument("--config", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_fit_mean)

    p = sub.add_parser("generate", help="optimize an identity avatar")
    p.add_argument("--config", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--scene", required=True,
                   help="identity directory with ground-truth targets")
    p.add_argument("--identity-embedding")
    p.add_argument("--view-embeddings",
                   help="directory holding front.bin/side.bin/back.bin")
    p.add_argument("--init", help="warm-start splat PLY")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_generate)

    p = sub.add_parser("express", help="apply blendshape coefficients")
    p.add_argument("--cloud", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--coefficients", required=True,
                   help="comma list or JSON file")
    p.add_argument("--refine", action="store_true")
    p.add_argument("--scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_express)

    p = sub.add_parser("render", help="render a splat cloud to PNG frames")
    p.add_argument("--cloud", required=True)
    p.add_argument("--poses", help="JSON pose list")
    p.add_argument("--turntable", type=int, default=12)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_render)

    p = sub.add_parser("export", help="write a viewer-compatible PLY")
    p.add_argument("--cloud", required=True)
    p.add_argument("--format", default="ply")
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "run", None):
            raise ConfigError("a command is required",
                              commands=["prepare-template", "fit-mean",
                                        "generate", "express", "render",
                                        "export"])
        return args.run(args)
    except HeadsplatError as err:
        sys.stderr.write(json.dumps(err.envelope(), sort_keys=True) + "\n")
        return err.exit_code
    except Exception as exc:  # pragma: no cover - last-resort guard
        sys.stderr.write(json.dumps(
            {"code": "internal", "message": str(exc),
             "context": {"type": type(exc).__name__}}) + "\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
