"""Head-template mesh: loading, region-partitioned midpoint subdivision,
uniform graph Laplacians, blendshape deformation, and mean-texture target
rendering.

Subdivision is the classic midpoint scheme, but the facial region and the rest
of the head can be refined a different number of rounds. Edges on the seam
between the two regions follow the face schedule on both sides, and triangles
with a partially split edge set are re-triangulated so the result never
contains T-junctions. Every round is a sparse row-stochastic linear operator
(identity rows for surviving vertices, half/half rows for midpoints); the
composite operator is returned so any per-vertex field (positions, colors,
blendshape offsets) can be pushed through the same refinement.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .errors import ConfigError, MeshParseError, ShapeMismatchError, TopologyError
from .rasterizer import CameraPose, project_points


@dataclass
class TemplateMesh:
    """Triangle mesh with a marked facial region and optional vertex fields.

    ``blendshapes`` is a (3V, K) matrix: column k holds the xyz offsets of
    expression k, flattened row-major per vertex. After subdivision the matrix
    is the original pushed through the subdivision operator, so its row count
    tracks the current vertex count.
    """

    vertices: np.ndarray         # (V, 3)
    faces: np.ndarray            # (F, 3)
    face_region: np.ndarray      # (V,) bool
    mean_colors: np.ndarray | None = None   # (V, 3) in [0, 1]
    blendshapes: np.ndarray | None = None   # (3V, K)
    blendshape_names: list[str] | None = None
    laplacian: sp.csr_matrix | None = None
    subdivision_operator: sp.csr_matrix | None = None  # load-time verts -> current

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.face_region = np.ascontiguousarray(self.face_region, dtype=bool)
        v = self.vertices.shape[0]
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ShapeMismatchError("vertices must be (V, 3)",
                                     actual=list(self.vertices.shape))
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ShapeMismatchError("faces must be (F, 3)",
                                     actual=list(self.faces.shape))
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ShapeMismatchError(
                "face index out of range", vertices=v,
                max_index=int(self.faces.max()), min_index=int(self.faces.min()))
        if self.face_region.shape != (v,):
            raise ShapeMismatchError("face_region must be (V,)", vertices=v,
                                     actual=list(self.face_region.shape))
        if self.mean_colors is not None:
            self.mean_colors = np.ascontiguousarray(self.mean_colors,
                                                    dtype=np.float64)
            if self.mean_colors.shape != (v, 3):
                raise ShapeMismatchError("mean_colors must be (V, 3)",
                                         vertices=v,
                                         actual=list(self.mean_colors.shape))
        if self.blendshapes is not None:
            self.blendshapes = np.ascontiguousarray(self.blendshapes,
                                                    dtype=np.float64)
            if self.blendshapes.ndim != 2 or self.blendshapes.shape[0] != 3 * v:
                raise ShapeMismatchError(
                    "blendshape rows must equal 3 x vertex count",
                    expected=3 * v, actual=int(self.blendshapes.shape[0]))
            k = self.blendshapes.shape[1]
            if self.blendshape_names is None:
                self.blendshape_names = [f"blend_{i:02d}" for i in range(k)]
            elif len(self.blendshape_names) != k:
                raise ShapeMismatchError(
                    "blendshape name count mismatch",
                    expected=k, actual=len(self.blendshape_names))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_blendshapes(self) -> int:
        return 0 if self.blendshapes is None else self.blendshapes.shape[1]

    @property
    def face_vertex_indices(self) -> np.ndarray:
        """Sorted indices of the facial region."""
        return np.where(self.face_region)[0]


@dataclass
class SubdivisionReport:
    v_before: int
    v_after: int
    v_face: int
    v_head: int
    subdivision_operator: sp.csr_matrix

    def to_json(self) -> str:
        op = self.subdivision_operator
        return json.dumps({
            "v_before": self.v_before, "v_after": self.v_after,
            "v_face": self.v_face, "v_head": self.v_head,
            "operator_shape": list(op.shape), "operator_nnz": int(op.nnz),
        })


# ---------------------------------------------------------------------------
# mesh file parsing
# ---------------------------------------------------------------------------

def _parse_obj(path: Path):
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshParseError("vertex line needs 3 coordinates",
                                     file=str(path), line=lineno)
            try:
                vertices.append([float(parts[1]), float(parts[2]),
                                 float(parts[3])])
            except ValueError:
                raise MeshParseError("bad vertex coordinate",
                                     file=str(path), line=lineno) from None
        elif parts[0] == "f":
            if len(parts) < 4:
                raise MeshParseError("face line needs at least 3 vertices",
                                     file=str(path), line=lineno)
            idx = []
            for token in parts[1:]:
                head = token.split("/")[0]
                try:
                    k = int(head)
                except ValueError:
                    raise MeshParseError("bad face index",
                                         file=str(path), line=lineno) from None
                if k == 0:
                    raise MeshParseError("face index 0 (OBJ is 1-based)",
                                         file=str(path), line=lineno)
                idx.append(k - 1 if k > 0 else len(vertices) + k)
            for a, b in zip(idx[1:-1], idx[2:]):  # fan triangulation
                faces.append([idx[0], a, b])
    if not vertices:
        raise MeshParseError("no vertices found", file=str(path), line=0)
    return np.asarray(vertices), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


_PLY_SIZES = {"char": 1, "uchar": 1, "int8": 1, "uint8": 1,
              "short": 2, "ushort": 2, "int16": 2, "uint16": 2,
              "int": 4, "uint": 4, "int32": 4, "uint32": 4,
              "float": 4, "float32": 4, "double": 8, "float64": 8}
_PLY_STRUCT = {"char": "b", "uchar": "B", "int8": "b", "uint8": "B",
               "short": "h", "ushort": "H", "int16": "h", "uint16": "H",
               "int": "i", "uint": "I", "int32": "i", "uint32": "I",
               "float": "f", "float32": "f", "double": "d", "float64": "d"}


def _parse_ply(path: Path):
    blob = path.read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise MeshParseError("not a PLY file", file=str(path), offset=0)
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    offset = end + len(b"end_header\n")

    fmt = next((h.split()[1] for h in header if h.startswith("format ")), None)
    if fmt != "binary_little_endian":
        raise MeshParseError(
            f"unsupported PLY format {fmt!r} (need binary_little_endian)",
            file=str(path), offset=0)

    elements = []  # (name, count, [(prop_kind, ...)])
    for h in header:
        parts = h.split()
        if not parts:
            continue
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append(("scalar", parts[1], parts[2]))

    vertices = None
    faces: list[list[int]] = []
    for name, count, props in elements:
        if name == "vertex":
            if any(p[0] == "list" for p in props):
                raise MeshParseError("list property on vertices unsupported",
                                     file=str(path), offset=offset)
            stride = sum(_PLY_SIZES[p[1]] for p in props)
            names = [p[2] for p in props]
            missing = {"x", "y", "z"} - set(names)
            if missing:
                raise MeshParseError(f"vertex element lacks {sorted(missing)}",
                                     file=str(path), offset=offset)
            need = count * stride
            if len(blob) - offset < need:
                raise MeshParseError("truncated vertex data", file=str(path),
                                     offset=len(blob))
            fmt_str = "<" + "".join(_PLY_STRUCT[p[1]] for p in props)
            rows = struct.iter_unpack(fmt_str, blob[offset:offset + need])
            cols = {n: i for i, n in enumerate(names)}
            vertices = np.array(
                [[r[cols["x"]], r[cols["y"]], r[cols["z"]]] for r in rows])
            offset += need
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MeshParseError("face element must be a single list",
                                     file=str(path), offset=offset)
            _, count_type, index_type, _ = props[0]
            csz, isz = _PLY_SIZES[count_type], _PLY_SIZES[index_type]
            cfmt = "<" + _PLY_STRUCT[count_type]
            ifmt = "<" + _PLY_STRUCT[index_type]
            for _ in range(count):
                if len(blob) - offset < csz:
                    raise MeshParseError("truncated face data", file=str(path),
                                         offset=offset)
                (n,) = struct.unpack_from(cfmt, blob, offset)
                offset += csz
                if len(blob) - offset < n * isz:
                    raise MeshParseError("truncated face data", file=str(path),
                                         offset=offset)
                idx = [struct.unpack_from(ifmt, blob, offset + i * isz)[0]
                       for i in range(n)]
                offset += n * isz
                if n < 3:
                    raise MeshParseError("face with fewer than 3 vertices",
                                         file=str(path), offset=offset)
                for a, b in zip(idx[1:-1], idx[2:]):
                    faces.append([idx[0], a, b])
        else:  # skip unknown fixed-stride elements
            if any(p[0] == "list" for p in props):
                raise MeshParseError(
                    f"cannot skip list element {name!r}", file=str(path),
                    offset=offset)
            offset += count * sum(_PLY_SIZES[p[1]] for p in props)

    if vertices is None:
        raise MeshParseError("no vertex element", file=str(path), offset=0)
    return vertices, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangles from an OBJ or binary little-endian PLY file."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _parse_obj(path)
    if suffix == ".ply":
        return _parse_ply(path)
    raise MeshParseError(f"unsupported mesh format {suffix!r}", file=str(path))


def load_face_mask(path, n_vertices: int) -> np.ndarray:
    """Newline-separated vertex indices to a boolean region mask."""
    mask = np.zeros(n_vertices, dtype=bool)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#")[0].strip()
        if not line:
            continue
        try:
            idx = int(line)
        except ValueError:
            raise MeshParseError("bad vertex index", file=str(path),
                                 line=lineno) from None
        if not 0 <= idx < n_vertices:
            raise MeshParseError(
                f"vertex index {idx} out of range (V={n_vertices})",
                file=str(path), line=lineno)
        mask[idx] = True
    return mask


def load_blendshapes(path, n_vertices: int):
    """(3V, K) offset matrix plus names from the optional JSON sidecar."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        matrix = np.load(path, allow_pickle=False)
    else:
        try:
            matrix = np.loadtxt(path, dtype=np.float64, ndmin=2)
        except ValueError as err:
            raise MeshParseError(f"bad blendshape matrix: {err}",
                                 file=str(path)) from None
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if matrix.shape[0] != 3 * n_vertices:
        raise ShapeMismatchError(
            "blendshape rows must equal 3 x vertex count",
            expected=3 * n_vertices, actual=int(matrix.shape[0]))
    names = None
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        names = [str(n) for n in meta.get("names", [])]
        if len(names) != matrix.shape[1]:
            raise ShapeMismatchError(
                "sidecar name count mismatch",
                expected=int(matrix.shape[1]), actual=len(names))
    return matrix, names


def save_blendshapes(path, matrix: np.ndarray, names: list[str]) -> None:
    path = Path(path)
    np.save(path, np.asarray(matrix, dtype=np.float64))
    saved = path if path.suffix == ".npy" else path.with_suffix(path.suffix + ".npy")
    sidecar = saved.with_suffix(saved.suffix + ".json")
    sidecar.write_text(json.dumps({"names": list(names)}))


def load_template(mesh_file, blendshape_file=None, face_mask_file=None) -> TemplateMesh:
    """Assemble a TemplateMesh from disk; not yet subdivided, no Laplacian."""
    vertices, faces = load_mesh_file(mesh_file)
    v = vertices.shape[0]
    if faces.size and faces.max() >= v:
        raise MeshParseError(
            f"face index {int(faces.max())} out of range (V={v})",
            file=str(mesh_file))
    mask = (load_face_mask(face_mask_file, v) if face_mask_file is not None
            else np.zeros(v, dtype=bool))
    blend, names = (load_blendshapes(blendshape_file, v)
                    if blendshape_file is not None else (None, None))
    return TemplateMesh(vertices=vertices, faces=faces, face_region=mask,
                        blendshapes=blend, blendshape_names=names)


# ---------------------------------------------------------------------------
# subdivision
# ---------------------------------------------------------------------------

def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges as sorted (E, 2) pairs."""
    if faces.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def _edge_incidence(faces: np.ndarray):
    """Map sorted edge pair -> list of incident triangle indices."""
    inc: dict[tuple[int, int], list[int]] = {}
    for t in range(faces.shape[0]):
        a, b, c = faces[t]
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            inc.setdefault(key, []).append(t)
    return inc


def _subdivide_round(vertices, faces, face_region, split_face: bool,
                     split_head: bool):
    """One conforming round; returns (vertices, faces, region, operator)."""
    v_old = vertices.shape[0]
    tri_face = face_region[faces].all(axis=1)

    incidence = _edge_incidence(faces)
    split: dict[tuple[int, int], int] = {}
    for key, tris in incidence.items():
        if len(tris) > 2:
            raise TopologyError(
                "edge shared by more than two triangles",
                edge=[int(key[0]), int(key[1])], triangles=len(tris))
        classes = {bool(tri_face[t]) for t in tris}
        if classes == {True}:
            do = split_face
        elif classes == {False}:
            do = split_head
        else:  # seam: the face schedule wins on both sides
            do = split_face
        if do:
            split[key] = v_old + len(split)

    if not split:
        op = sp.identity(v_old, format="csr")
        return vertices, faces, face_region, op

    mids = np.array(list(split.keys()), dtype=np.int64)
    new_vertices = np.concatenate(
        [vertices, 0.5 * (vertices[mids[:, 0]] + vertices[mids[:, 1]])])
    new_region = np.concatenate(
        [face_region, face_region[mids[:, 0]] & face_region[mids[:, 1]]])

    data = np.concatenate([np.ones(v_old), np.full(2 * mids.shape[0], 0.5)])
    row = np.concatenate([np.arange(v_old),
                          np.repeat(np.arange(v_old, v_old + mids.shape[0]), 2)])
    col = np.concatenate([np.arange(v_old), mids.reshape(-1)])
    op = sp.csr_matrix((data, (row, col)),
                       shape=(v_old + mids.shape[0], v_old))

    def mid(u, v):
        return split.get((u, v) if u < v else (v, u))

    new_faces = []
    for a, b, c in faces:
        corners = (int(a), int(b), int(c))
        marks = (mid(corners[0], corners[1]), mid(corners[1], corners[2]),
                 mid(corners[2], corners[0]))
        k = sum(m is not None for m in marks)
        if k == 0:
            new_faces.append(corners)
        elif k == 3:
            mab, mbc, mca = marks
            new_faces.extend([
                (corners[0], mab, mca), (mab, corners[1], mbc),
                (mca, mbc, corners[2]), (mab, mbc, mca),
            ])
        else:
            # rotate so the split pattern starts at edge (a, b)
            for _ in range(3):
                if (k == 1 and marks[0] is not None and marks[1] is None
                        and marks[2] is None) or \
                   (k == 2 and marks[0] is not None and marks[1] is not None):
                    break
                corners = (corners[1], corners[2], corners[0])
                marks = (marks[1], marks[2], marks[0])
            a2, b2, c2 = corners
            if k == 1:
                m = marks[0]
                new_faces.extend([(m, b2, c2), (a2, m, c2)])
            else:
                m1, m2 = marks[0], marks[1]
                new_faces.extend([(m1, b2, m2), (a2, m1, m2), (a2, m2, c2)])
    return (new_vertices, np.asarray(new_faces, dtype=np.int64),
            new_region, op)


def subdivide_partitioned(mesh: TemplateMesh, rounds_face: int,
                          rounds_head: int):
    """Refine the face and head regions independently without T-junctions.

    Returns (subdivided mesh, SubdivisionReport). All per-vertex fields and
    the stored blendshape matrix are pushed through the composite operator;
    the Laplacian is rebuilt from the new connectivity.
    """
    if rounds_face < 0 or rounds_head < 0:
        raise ConfigError("subdivision rounds must be nonnegative",
                          rounds_face=rounds_face, rounds_head=rounds_head)
    if rounds_face != rounds_head and not mesh.face_region.any():
        raise ConfigError(
            "partitioned rounds need a nonempty face region",
            rounds_face=rounds_face, rounds_head=rounds_head)

    vertices = mesh.vertices
    faces = mesh.faces
    region = mesh.face_region
    op = sp.identity(mesh.n_vertices, format="csr")
    for r in range(max(rounds_face, rounds_head)):
        vertices, faces, region, step = _subdivide_round(
            vertices, faces, region,
            split_face=r < rounds_face, split_head=r < rounds_head)
        op = (step @ op).tocsr()

    colors = None if mesh.mean_colors is None else op @ mesh.mean_colors
    blend = None
    if mesh.blendshapes is not None:
        k = mesh.blendshapes.shape[1]
        blend = np.stack([
            op @ mesh.blendshapes[:, i].reshape(-1, 3) for i in range(k)
        ], axis=2).reshape(3 * vertices.shape[0], k)

    total_op = op if mesh.subdivision_operator is None \
        else (op @ mesh.subdivision_operator).tocsr()
    out = TemplateMesh(
        vertices=vertices, faces=faces, face_region=region,
        mean_colors=colors, blendshapes=blend,
        blendshape_names=None if blend is None else list(mesh.blendshape_names),
        subdivision_operator=total_op,
    )
    out.laplacian = graph_laplacian(out)
    report = SubdivisionReport(
        v_before=mesh.n_vertices, v_after=out.n_vertices,
        v_face=int(region.sum()), v_head=int((~region).sum()),
        subdivision_operator=op.tocsr(),
    )
    return out, report


# ---------------------------------------------------------------------------
# Laplacian, blendshapes, target rendering
# ---------------------------------------------------------------------------

def _uniform_laplacian(n: int, edges: np.ndarray) -> sp.csr_matrix:
    deg = np.zeros(n)
    np.add.at(deg, edges[:, 0], 1.0)
    np.add.at(deg, edges[:, 1], 1.0)
    isolated = np.where(deg == 0)[0]
    if isolated.size:
        warnings.warn(
            f"{isolated.size} isolated vertices have zero Laplacian rows "
            f"(first: {isolated[:8].tolist()})", stacklevel=3)
    inv = np.zeros(n)
    inv[deg > 0] = 1.0 / deg[deg > 0]
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.where(deg > 0)[0]])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.where(deg > 0)[0]])
    vals = np.concatenate([-inv[edges[:, 0]], -inv[edges[:, 1]],
                           np.ones(int((deg > 0).sum()))])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def graph_laplacian(mesh: TemplateMesh) -> sp.csr_matrix:
    """Uniform-weight Laplacian: L_ii = 1, L_ij = -1/deg(i) per neighbor."""
    return _uniform_laplacian(mesh.n_vertices, mesh_edges(mesh.faces))


def face_laplacian(mesh: TemplateMesh) -> sp.csr_matrix:
    """Laplacian of the face-region subgraph, rows in sorted region order."""
    idx = mesh.face_vertex_indices
    if idx.size == 0:
        raise ConfigError("face region is empty")
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[idx] = np.arange(idx.size)
    edges = mesh_edges(mesh.faces)
    both = mesh.face_region[edges[:, 0]] & mesh.face_region[edges[:, 1]]
    return _uniform_laplacian(idx.size, remap[edges[both]])


def apply_blendshapes(mesh: TemplateMesh, coefficients) -> np.ndarray:
    """Deformed vertex positions for the given expression coefficients."""
    w = np.asarray(coefficients, dtype=np.float64).reshape(-1)
    if mesh.blendshapes is None:
        if w.size == 0:
            return mesh.vertices.copy()
        raise ShapeMismatchError("mesh has no blendshapes",
                                 expected=0, actual=int(w.size))
    if w.size != mesh.n_blendshapes:
        raise ShapeMismatchError("coefficient count mismatch",
                                 expected=mesh.n_blendshapes,
                                 actual=int(w.size))
    offsets = (mesh.blendshapes @ w).reshape(mesh.n_vertices, 3)
    return mesh.vertices + offsets


def face_submesh(mesh: TemplateMesh):
    """(vertex indices, vertices, reindexed faces) of the facial region."""
    idx = mesh.face_vertex_indices
    tri_face = mesh.face_region[mesh.faces].all(axis=1)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[idx] = np.arange(idx.size)
    return idx, mesh.vertices[idx], remap[mesh.faces[tri_face]]


def render_mesh_target(mesh: TemplateMesh, pose: CameraPose, *,
                       region: str = "all", background=(1.0, 1.0, 1.0),
                       near: float = 0.01):
    """Fixed (non-differentiable) Gouraud render of the mean-textured mesh.

    Returns (rgb, coverage_mask). Used to produce photometric targets; the
    optimization differentiates only through the splat renderer.
    """
    if mesh.mean_colors is None:
        raise ConfigError("mesh has no mean colors to render")
    if region == "all":
        vertices, faces, colors = mesh.vertices, mesh.faces, mesh.mean_colors
    elif region == "face":
        idx, vertices, faces = face_submesh(mesh)
        if faces.shape[0] == 0:
            raise ConfigError("face region has no triangles")
        colors = mesh.mean_colors[idx]
    else:
        raise ConfigError("unknown region", region=region)
    pts2d, depth = project_points(pose, vertices)
    pts2d = np.nan_to_num(pts2d, nan=-1e9, posinf=1e9, neginf=-1e9)
    img, zbuf = _kernels.mesh_forward(
        np.ascontiguousarray(pts2d), np.ascontiguousarray(depth),
        np.ascontiguousarray(colors), np.ascontiguousarray(faces),
        pose.width, pose.height,
        np.asarray(background, dtype=np.float64).reshape(3), near)
    return img, np.isfinite(zbuf)


# ---------------------------------------------------------------------------
# prepared-template bundles
# ---------------------------------------------------------------------------

def save_template_bundle(path, mesh: TemplateMesh) -> None:
    """One .npz artifact holding every field needed to resume later stages."""
    payload = {
        "vertices": mesh.vertices, "faces": mesh.faces,
        "face_region": mesh.face_region,
    }
    if mesh.mean_colors is not None:
        payload["mean_colors"] = mesh.mean_colors
    if mesh.blendshapes is not None:
        payload["blendshapes"] = mesh.blendshapes
        payload["blendshape_names"] = np.asarray(mesh.blendshape_names)
    if mesh.subdivision_operator is not None:
        op = mesh.subdivision_operator.tocsr()
        payload["op_data"] = op.data
        payload["op_indices"] = op.indices
        payload["op_indptr"] = op.indptr
        payload["op_shape"] = np.asarray(op.shape, dtype=np.int64)
    np.savez_compressed(path, **payload)


def load_template_bundle(path) -> TemplateMesh:
    with np.load(path, allow_pickle=False) as data:
        names = None
        if "blendshape_names" in data:
            names = [str(n) for n in data["blendshape_names"]]
        op = None
        if "op_data" in data:
            op = sp.csr_matrix(
                (data["op_data"], data["op_indices"], data["op_indptr"]),
                shape=tuple(data["op_shape"]))
        mesh = TemplateMesh(
            vertices=data["vertices"], faces=data["faces"],
            face_region=data["face_region"],
            mean_colors=data["mean_colors"] if "mean_colors" in data else None,
            blendshapes=data["blendshapes"] if "blendshapes" in data else None,
            blendshape_names=names, subdivision_operator=op,
        )
    mesh.laplacian = graph_laplacian(mesh)
    return mesh
