"""Splat cloud parameterization, template binding, and the interchange PLY format.

A cloud stores raw optimizable parameters: positions, quaternion rotations
(scalar-first, kept unit-norm), log scales, opacity logits, and view-independent
RGB. Activations (exp / sigmoid / normalize) are applied by consumers. Face
splats carry a template-vertex correspondence that adaptive density control is
required to preserve verbatim.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MeshParseError, ShapeMismatchError

# degree-0 spherical harmonic basis constant; RGB <-> DC coefficient conversion
SH_C0 = 0.28209479177387814

_PLY_FIELDS = (
    "x", "y", "z", "nx", "ny", "nz",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p: np.ndarray | float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class SplatCloud:
    """One record per splat; all arrays share the leading dimension."""

    positions: np.ndarray      # (N, 3)
    rotations: np.ndarray      # (N, 4) unit quaternions, scalar first
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3) RGB
    face_mask: np.ndarray | None = None       # (N,) bool
    correspondence: np.ndarray | None = None  # (N,) template vertex for face splats, -1 otherwise

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        count = self.positions.shape[0] if self.positions.ndim == 2 else 0
        if self.face_mask is None:
            self.face_mask = np.zeros(count, dtype=bool)
        if self.correspondence is None:
            self.correspondence = np.where(self.face_mask, 0, -1).astype(np.int64)
            self.correspondence[self.face_mask] = np.arange(int(self.face_mask.sum()))
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        self.face_mask = np.ascontiguousarray(self.face_mask, dtype=bool)
        self.correspondence = np.ascontiguousarray(self.correspondence, dtype=np.int64)
        n = self.positions.shape[0]
        shapes = {
            "positions": (n, 3), "rotations": (n, 4), "log_scales": (n, 3),
            "opacity_logits": (n,), "colors": (n, 3), "face_mask": (n,),
            "correspondence": (n,),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ShapeMismatchError(
                    f"splat field {name} has shape {got}, expected {want}",
                    field=name, expected=list(want), actual=list(got),
                )
        has_vertex = self.correspondence >= 0
        if not np.array_equal(has_vertex, self.face_mask):
            raise ShapeMismatchError(
                "face mask and correspondence disagree",
                masked=int(self.face_mask.sum()), mapped=int(has_vertex.sum()),
            )
        mapped = self.correspondence[self.face_mask]
        if mapped.size != np.unique(mapped).size:
            raise ShapeMismatchError(
                "correspondence is not injective over face splats",
                mapped=int(mapped.size), unique=int(np.unique(mapped).size),
            )

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def copy(self) -> "SplatCloud":
        return SplatCloud(
            self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.colors.copy(), self.face_mask.copy(),
            self.correspondence.copy(),
        )

    def take(self, rows: np.ndarray) -> "SplatCloud":
        """Row subset in the given order (bitwise copies of kept parameters)."""
        return SplatCloud(
            self.positions[rows], self.rotations[rows], self.log_scales[rows],
            self.opacity_logits[rows], self.colors[rows], self.face_mask[rows],
            self.correspondence[rows],
        )


@dataclass
class SplatGradients:
    """Per-parameter-group gradients for one rendered view."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    # norm of the per-view screen-space (NDC-scaled) positional gradient
    screen_grad_norm: np.ndarray
    visible: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(
            np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
            np.zeros(n), np.zeros((n, 3)), np.zeros(n), np.zeros(n, dtype=bool),
        )

    def add_(self, other: "SplatGradients") -> "SplatGradients":
        self.positions += other.positions
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.colors += other.colors
        self.screen_grad_norm += other.screen_grad_norm
        self.visible |= other.visible
        return self


def vertex_neighbor_distance(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Mean edge length around each vertex; NaN where a vertex has no neighbors."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    pairs = np.sort(pairs, axis=1)
    pairs = np.unique(pairs, axis=0) if pairs.size else pairs.reshape(0, 2)
    total = np.zeros(v.shape[0])
    count = np.zeros(v.shape[0])
    if pairs.size:
        d = np.linalg.norm(v[pairs[:, 0]] - v[pairs[:, 1]], axis=1)
        np.add.at(total, pairs[:, 0], d)
        np.add.at(total, pairs[:, 1], d)
        np.add.at(count, pairs[:, 0], 1.0)
        np.add.at(count, pairs[:, 1], 1.0)
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1.0), np.nan)


def init_from_template(template, head_scale_offset: float = 0.0, *,
                       initial_opacity: float = 0.1,
                       default_scale: float = 0.01) -> SplatCloud:
    """One isotropic splat per template vertex.

    The standard deviation is the mean distance to topological neighbors;
    vertices without neighbors fall back to ``default_scale``. Colors come from
    the template's mean colors when present, mid-gray otherwise. Splats outside
    the face region get ``head_scale_offset`` added to their log scales (the
    head is typically subdivided less, so its splats may need to start fatter).
    """
    v = template.vertices
    n = v.shape[0]
    if n == 0:
        raise ConfigError("template has no vertices")
    sigma = vertex_neighbor_distance(v, template.faces)
    sigma = np.where(np.isnan(sigma), default_scale, sigma)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    colors = template.mean_colors
    if colors is None:
        colors = np.full((n, 3), 0.5)
    mask = template.face_region.copy()
    corr = np.where(mask, np.arange(n, dtype=np.int64), -1)
    log_scales = np.log(sigma)[:, None].repeat(3, axis=1)
    log_scales[~mask] += head_scale_offset
    return SplatCloud(
        positions=v.copy(),
        rotations=rot,
        log_scales=log_scales,
        opacity_logits=np.full(n, float(inverse_sigmoid(initial_opacity))),
        colors=np.asarray(colors, dtype=np.float64).copy(),
        face_mask=mask,
        correspondence=corr,
    )


def deform_by_template(cloud: SplatCloud, base_vertices: np.ndarray,
                       deformed_vertices: np.ndarray) -> SplatCloud:
    """Translate face splats by their corresponding vertex displacement."""
    base = np.asarray(base_vertices, dtype=np.float64)
    deformed = np.asarray(deformed_vertices, dtype=np.float64)
    if base.shape != deformed.shape:
        raise ShapeMismatchError(
            "template vertex arrays differ in shape",
            base=list(base.shape), deformed=list(deformed.shape),
        )
    rows = np.where(cloud.face_mask)[0]
    verts = cloud.correspondence[rows]
    if verts.size and verts.max() >= base.shape[0]:
        raise ShapeMismatchError(
            "correspondence exceeds template vertex count",
            vertices=int(base.shape[0]), max_index=int(verts.max()),
        )
    out = cloud.copy()
    out.positions[rows] += deformed[verts] - base[verts]
    return out


def parameter_view(cloud: SplatCloud, face_only: bool = False) -> np.ndarray:
    """Row indices whose parameters an optimizer may touch."""
    if face_only:
        return np.where(cloud.face_mask)[0]
    return np.arange(cloud.n, dtype=np.int64)


def save_splat_ply(cloud: SplatCloud, path: str | Path) -> None:
    """Write the interchange PLY layout plus a mask/correspondence sidecar."""
    path = Path(path)
    n = cloud.n
    rec = np.zeros(n, dtype=[(name, "<f4") for name in _PLY_FIELDS])
    rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype(np.float32)
    for i in range(3):
        rec[f"f_dc_{i}"] = ((cloud.colors[:, i] - 0.5) / SH_C0).astype(np.float32)
        rec[f"scale_{i}"] = cloud.log_scales[:, i].astype(np.float32)
    rec["opacity"] = cloud.opacity_logits.astype(np.float32)
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotations[:, i].astype(np.float32)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
    sidecar = {
        "face_splat_indices": np.where(cloud.face_mask)[0].tolist(),
        "template_vertex_indices": cloud.correspondence[cloud.face_mask].tolist(),
    }
    path.with_suffix(path.suffix + ".correspondence.json").write_text(
        json.dumps(sidecar))


def load_splat_ply(path: str | Path) -> SplatCloud:
    """Read the interchange PLY; the sidecar restores mask and correspondence."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise MeshParseError("not a PLY file", path=str(path))
        fmt = fh.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise MeshParseError(
                "unsupported PLY format for splat clouds",
                path=str(path), format=fmt.decode("ascii", "replace"),
            )
        n = None
        names: list[str] = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshParseError("unterminated PLY header", path=str(path))
            parts = line.decode("ascii", "replace").strip().split()
            if not parts:
                continue
            if parts[0] == "element":
                if parts[1] != "vertex":
                    raise MeshParseError(
                        "unexpected PLY element in splat cloud",
                        path=str(path), element=parts[1],
                    )
                n = int(parts[2])
            elif parts[0] == "property":
                if parts[1] != "float":
                    raise MeshParseError(
                        "splat PLY properties must be float32",
                        path=str(path), property=parts[-1], type=parts[1],
                    )
                names.append(parts[2])
            elif parts[0] == "end_header":
                break
        if n is None:
            raise MeshParseError("PLY header lacks a vertex element", path=str(path))
        missing = [f for f in _PLY_FIELDS if f not in names]
        if missing:
            raise MeshParseError(
                "splat PLY is missing required properties",
                path=str(path), missing=missing,
            )
        payload = fh.read()
        try:
            raw = np.frombuffer(payload, dtype=[(name, "<f4") for name in names])
        except ValueError:
            raise MeshParseError(
                "PLY payload is not a whole number of records",
                path=str(path), bytes=len(payload), properties=len(names),
            ) from None
    if raw.size != n:
        raise MeshParseError(
            "PLY payload does not match vertex count",
            path=str(path), expected=n, actual=int(raw.size),
        )
    positions = np.stack([raw["x"], raw["y"], raw["z"]], axis=1).astype(np.float64)
    colors = np.stack(
        [raw[f"f_dc_{i}"].astype(np.float64) * SH_C0 + 0.5 for i in range(3)], axis=1)
    log_scales = np.stack(
        [raw[f"scale_{i}"].astype(np.float64) for i in range(3)], axis=1)
    rotations = np.stack(
        [raw[f"rot_{i}"].astype(np.float64) for i in range(4)], axis=1)
    mask = np.zeros(n, dtype=bool)
    corr = np.full(n, -1, dtype=np.int64)
    sidecar = path.with_suffix(path.suffix + ".correspondence.json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        rows = np.asarray(meta.get("face_splat_indices", []), dtype=np.int64)
        verts = np.asarray(meta.get("template_vertex_indices", []), dtype=np.int64)
        if rows.shape != verts.shape:
            raise MeshParseError(
                "correspondence sidecar arrays differ in length",
                path=str(sidecar), splats=int(rows.size), vertices=int(verts.size),
            )
        mask[rows] = True
        corr[rows] = verts
    return SplatCloud(
        positions=positions,
        rotations=rotations,
        log_scales=log_scales,
        opacity_logits=raw["opacity"].astype(np.float64),
        colors=colors,
        face_mask=mask,
        correspondence=corr,
    )
