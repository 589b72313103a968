"""Procedural synthetic head scenes for desk-scale end-to-end runs.

Three identities share a single icosphere head template (facial cap on +z)
and differ only in painted vertex colors plus a small low-frequency radial
bump outside the facial region, so the template's face geometry matches
every identity exactly. Each identity directory holds the ground-truth mesh
bundle, a deterministic identity embedding, and a 64-view reference panel
rendered on a fixed azimuth/elevation grid.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError, MeshParseError
from .guidance import ConditionEmbedding, load_embedding, save_embedding
from .imgio import read_png, write_png
from .rasterizer import CameraPose
from .template import (TemplateMesh, load_template_bundle, render_mesh_target,
                       save_template_bundle, subdivide_partitioned)

N_IDENTITIES = 3
FACE_CAP_Z = 0.35
EMBEDDING_DIM = 8

SCENE_WIDTH = 64
SCENE_HEIGHT = 64
SCENE_RADIUS = 5.0
SCENE_FOV = 0.55

# Feature centers as unit directions on the head sphere.
MOUTH_DIRECTION = (0.0, -0.398, 0.9174)
BROW_DIRECTION = (0.0, 0.45, 0.893)
EYE_DIRECTIONS = ((-0.34, 0.22, 0.9144), (0.34, 0.22, 0.9144))

SKIN_TONES = ((0.80, 0.64, 0.54), (0.62, 0.47, 0.40), (0.75, 0.60, 0.63))
HAIR_COLORS = ((0.13, 0.10, 0.08), (0.32, 0.28, 0.24), (0.55, 0.42, 0.20))
MOUTH_COLORS = ((0.58, 0.18, 0.20), (0.48, 0.14, 0.18), (0.66, 0.26, 0.30))
EYE_COLOR = (0.08, 0.10, 0.13)

_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
    [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
    [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
], dtype=np.float64)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _subdivide_sphere(vertices: np.ndarray, faces: np.ndarray):
    """One midpoint round with every new vertex pushed back to the sphere."""
    edge_key = {}
    verts = [v for v in vertices]

    def midpoint(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        idx = edge_key.get(key)
        if idx is None:
            idx = len(verts)
            edge_key[key] = idx
            m = 0.5 * (vertices[a] + vertices[b])
            verts.append(m / np.linalg.norm(m))
        return idx

    out = np.empty((faces.shape[0] * 4, 3), dtype=np.int64)
    for i, (a, b, c) in enumerate(faces):
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out[4 * i:4 * i + 4] = [[a, ab, ca], [b, bc, ab],
                                [c, ca, bc], [ab, bc, ca]]
    return np.asarray(verts, dtype=np.float64), out


def icosphere(rounds: int):
    """Unit icosphere as (vertices, faces)."""
    if rounds < 0:
        raise ConfigError("subdivision rounds must be >= 0", rounds=rounds)
    vertices, faces = _unit(_ICO_VERTS), _ICO_FACES
    for _ in range(rounds):
        vertices, faces = _subdivide_sphere(vertices, faces)
    return vertices, faces


def _angular_window(directions: np.ndarray, center, radius: float,
                    soft: float = 0.4) -> np.ndarray:
    """1 inside the cap, smoothstep to 0 at angular distance ``radius``."""
    cosang = np.clip(directions @ _unit(np.asarray(center, np.float64)), -1, 1)
    theta = np.arccos(cosang)
    t = np.clip((radius - theta) / (soft * radius), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def make_head_template(sphere_rounds: int = 3,
                       extra_face_rounds: int = 1) -> TemplateMesh:
    """Neutral icosphere head with a +z facial cap and two blendshapes.

    The facial region gets ``extra_face_rounds`` more midpoint rounds than
    the rest of the head, mirroring how a capture template is prepared.
    """
    vertices, faces = icosphere(sphere_rounds)
    region = vertices[:, 2] > FACE_CAP_Z

    shade = 0.82 + 0.18 * (0.5 * (vertices[:, 2] + 1.0))
    colors = np.clip(shade[:, None] * np.array([[0.74, 0.62, 0.55]]), 0, 1)

    mouth_w = _angular_window(vertices, MOUTH_DIRECTION, 0.5)
    brow_w = _angular_window(vertices, BROW_DIRECTION, 0.45)
    mouth_open = mouth_w[:, None] * np.array([[0.0, -0.14, -0.05]])
    brow_raise = brow_w[:, None] * np.array([[0.0, 0.07, 0.03]])
    blend = np.stack([mouth_open.reshape(-1), brow_raise.reshape(-1)], axis=1)

    mesh = TemplateMesh(vertices, faces, region, mean_colors=colors,
                        blendshapes=blend,
                        blendshape_names=["mouth_open", "brow_raise"])
    if extra_face_rounds:
        mesh, _ = subdivide_partitioned(mesh, extra_face_rounds, 0)
    return mesh


def _head_weight(directions: np.ndarray) -> np.ndarray:
    """1 far from the facial cap, 0 on and just outside it."""
    t = np.clip(((FACE_CAP_Z - 0.05) - directions[:, 2]) / 0.16, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def paint_identity(template: TemplateMesh, index: int) -> TemplateMesh:
    """Ground-truth identity: painted features plus a non-face head bump."""
    if not 0 <= index < N_IDENTITIES:
        raise ConfigError("identity index out of range", index=index,
                          available=N_IDENTITIES)
    u = _unit(template.vertices)

    shade = 0.80 + 0.20 * (0.5 * (u[:, 2] + 1.0))
    colors = shade[:, None] * np.asarray(SKIN_TONES[index])

    def paint(weight, color):
        return weight[:, None] * np.asarray(color) + \
            (1.0 - weight[:, None]) * colors

    hair_t = np.clip((u[:, 1] - 0.45) / 0.25, 0.0, 1.0)
    hair_t = np.maximum(hair_t, np.clip((-0.55 - u[:, 2]) / 0.25, 0.0, 1.0))
    colors = paint(hair_t * hair_t * (3 - 2 * hair_t), HAIR_COLORS[index])
    eye_radius = 0.15 + 0.02 * index
    for center in EYE_DIRECTIONS:
        colors = paint(_angular_window(u, center, eye_radius), EYE_COLOR)
    colors = paint(_angular_window(u, MOUTH_DIRECTION, 0.20),
                   MOUTH_COLORS[index])

    rng = np.random.default_rng(1000 + index)
    head_w = _head_weight(u)
    mottle = np.zeros(u.shape[0])
    bump = np.zeros(u.shape[0])
    for _ in range(3):
        axis = _unit(rng.standard_normal(3))
        freq = rng.uniform(2.0, 4.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(freq * (u @ axis) + phase)
        mottle += rng.uniform(0.01, 0.03) * wave
        bump += rng.uniform(0.008, 0.014) * wave
    colors = np.clip(colors + (head_w * mottle)[:, None], 0.0, 1.0)
    vertices = template.vertices * (1.0 + head_w * bump)[:, None]

    return TemplateMesh(vertices, template.faces, template.face_region,
                        mean_colors=colors, blendshapes=template.blendshapes,
                        blendshape_names=template.blendshape_names)


def identity_embedding(index: int, dim: int = EMBEDDING_DIM) -> ConditionEmbedding:
    if not 0 <= index < N_IDENTITIES:
        raise ConfigError("identity index out of range", index=index,
                          available=N_IDENTITIES)
    rng = np.random.default_rng(7000 + index)
    return ConditionEmbedding(rng.standard_normal(dim), "identity")


def view_embedding_set(dim: int = EMBEDDING_DIM) -> dict[str, ConditionEmbedding]:
    out = {}
    for i, bucket in enumerate(("front", "side", "back")):
        rng = np.random.default_rng(7100 + i)
        out[bucket] = ConditionEmbedding(rng.standard_normal(dim), "view")
    return out


def held_out_poses(width: int = SCENE_WIDTH,
                   height: int = SCENE_HEIGHT) -> list[CameraPose]:
    """Eight fixed novel-view poses used for PSNR evaluation."""
    poses = []
    for i, azimuth in enumerate((-150, -105, -60, -15, 30, 75, 120, 165)):
        poses.append(CameraPose(radius=SCENE_RADIUS, azimuth_deg=float(azimuth),
                                elevation_deg=72.0 if i % 2 == 0 else 88.0,
                                fov=SCENE_FOV, width=width, height=height))
    return poses


def reference_view_poses(width: int = SCENE_WIDTH,
                         height: int = SCENE_HEIGHT) -> list[CameraPose]:
    """The fixed 16 azimuth x 4 elevation panel shipped with each identity."""
    poses = []
    for elevation in (60.0, 75.0, 90.0, 105.0):
        for k in range(16):
            poses.append(CameraPose(radius=SCENE_RADIUS,
                                    azimuth_deg=-180.0 + 22.5 * k,
                                    elevation_deg=elevation, fov=SCENE_FOV,
                                    width=width, height=height))
    return poses


def turntable_poses(count: int = 12, *, width: int = SCENE_WIDTH,
                    height: int = SCENE_HEIGHT, elevation: float = 80.0,
                    radius: float = SCENE_RADIUS,
                    fov: float = SCENE_FOV) -> list[CameraPose]:
    if count < 1:
        raise ConfigError("turntable needs at least one view", count=count)
    return [CameraPose(radius=radius, azimuth_deg=-180.0 + 360.0 * k / count,
                       elevation_deg=elevation, fov=fov,
                       width=width, height=height)
            for k in range(count)]


def make_target_fn(mesh: TemplateMesh, background=(1.0, 1.0, 1.0)):
    """pose -> ground-truth RGB closure for the photometric/distillation backends."""
    def target(pose: CameraPose) -> np.ndarray:
        rgb, _ = render_mesh_target(mesh, pose, background=background)
        return rgb
    return target


def mouth_crop_bounds(pose: CameraPose, pad: float = 2.4):
    """Pixel box (r0, r1, c0, c1) around the projected mouth patch."""
    center = np.asarray(MOUTH_DIRECTION, np.float64)
    cam = pose.rotation @ (center - pose.camera_center)
    if cam[2] <= 0:
        raise ConfigError("mouth is behind the camera",
                          azimuth=pose.azimuth_deg)
    focal = 0.5 * pose.width / math.tan(0.5 * pose.fov)
    col = focal * cam[0] / cam[2] + 0.5 * pose.width
    row = focal * cam[1] / cam[2] + 0.5 * pose.height
    half = pad * 0.20 * focal / cam[2]
    r0 = max(0, int(math.floor(row - half)))
    r1 = min(pose.height, int(math.ceil(row + half)))
    c0 = max(0, int(math.floor(col - half)))
    c1 = min(pose.width, int(math.ceil(col + half)))
    if r1 <= r0 or c1 <= c0:
        raise ConfigError("mouth crop is off screen", azimuth=pose.azimuth_deg)
    return r0, r1, c0, c1


def mouth_crop(image: np.ndarray, pose: CameraPose) -> np.ndarray:
    r0, r1, c0, c1 = mouth_crop_bounds(pose)
    return image[r0:r1, c0:c1]


def _pose_record(pose: CameraPose) -> dict:
    return {"radius": pose.radius, "azimuth_deg": pose.azimuth_deg,
            "elevation_deg": pose.elevation_deg, "fov": pose.fov,
            "width": pose.width, "height": pose.height,
            "look_at": list(pose.look_at)}


def pose_from_record(record: dict) -> CameraPose:
    try:
        return CameraPose(radius=float(record["radius"]),
                          azimuth_deg=float(record["azimuth_deg"]),
                          elevation_deg=float(record["elevation_deg"]),
                          fov=float(record["fov"]),
                          width=int(record["width"]),
                          height=int(record["height"]),
                          look_at=tuple(record.get("look_at", (0, 0, 0))))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("malformed pose record", record=record) from exc


def save_pose_list(path, poses: list[CameraPose]) -> None:
    Path(path).write_text(json.dumps([_pose_record(p) for p in poses],
                                     indent=2, sort_keys=True))


def load_pose_list(path) -> list[CameraPose]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("pose list not found", path=str(path))
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("pose list is not valid JSON",
                          path=str(path)) from exc
    if not isinstance(records, list) or not records:
        raise ConfigError("pose list must be a non-empty JSON array",
                          path=str(path))
    return [pose_from_record(r) for r in records]


def asset_root() -> Path:
    """Shipped identity assets (source checkout layout)."""
    return Path(__file__).resolve().parents[2] / "assets" / "identities"


def write_identity_assets(root, index: int, *, width: int = SCENE_WIDTH,
                          height: int = SCENE_HEIGHT) -> Path:
    """Materialize one identity directory: mesh bundle, embedding, views."""
    directory = Path(root) / f"identity_{index}"
    directory.mkdir(parents=True, exist_ok=True)
    mesh = paint_identity(make_head_template(), index)
    save_template_bundle(directory / "gt_mesh.npz", mesh)
    save_embedding(directory / "embedding.bin", identity_embedding(index),
                   f"identity_{index}")

    poses = reference_view_poses(width, height)
    views = directory / "views"
    views.mkdir(exist_ok=True)
    for i, pose in enumerate(poses):
        rgb, _ = render_mesh_target(mesh, pose)
        write_png(views / f"view_{i:02d}.png", rgb)
    save_pose_list(directory / "poses.json", poses)
    (directory / "manifest.json").write_text(json.dumps(
        {"identity": index, "n_views": len(poses),
         "width": width, "height": height}, indent=2, sort_keys=True))
    return directory


def load_identity(directory) -> tuple[TemplateMesh, ConditionEmbedding]:
    directory = Path(directory)
    bundle = directory / "gt_mesh.npz"
    if not bundle.is_file():
        raise MeshParseError("identity bundle not found", path=str(bundle))
    mesh = load_template_bundle(bundle)
    embedding, _ = load_embedding(directory / "embedding.bin")
    return mesh, embedding


def load_reference_views(directory):
    """(poses, images) for one identity's shipped view panel."""
    directory = Path(directory)
    poses = load_pose_list(directory / "poses.json")
    images = []
    for i in range(len(poses)):
        png = directory / "views" / f"view_{i:02d}.png"
        if not png.is_file():
            raise ConfigError("reference view missing", path=str(png))
        images.append(read_png(png))
    return poses, np.stack(images)
