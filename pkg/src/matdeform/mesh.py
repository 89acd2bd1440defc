"""
Triangle mesh I/O and point-set preparation.

Reads and writes binary/ASCII STL, welds triangle soup into an indexed
mesh, lumps triangle area onto vertices and thins point clouds with a
box grid filter.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

_HEADER_SIZE = 80
_RECORD = np.dtype(
    [("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attr", "<u2")]
)
assert _RECORD.itemsize == 50


class StlError(ValueError):
    """Raised for unreadable or malformed STL data."""


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle surface.

    Parameters
    ----------
    vertices : (n, D) float array, D in {2, 3}
    triangles : (t, 3) int array of vertex indices
    normals : optional (t, 3) float array, as stored in an STL file
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise ValueError(f"vertices must be (n, 2) or (n, 3), got {v.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.normals is not None:
            n = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            n.flags.writeable = False
            object.__setattr__(self, "normals", n)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        e1, e2 = b - a, c - a
        if self.dim == 2:
            return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(np.ptp(self.vertices, axis=0)))

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.triangles)


# ---------------------------------------------------------------------------
# STL


def read_stl(data) -> TriangleMesh:
    """Parse binary or ASCII STL bytes into an un-welded triangle soup.

    A file is treated as ASCII when it starts with ``solid`` and parses as
    ASCII; otherwise it is read as binary. Binary normals are kept as stored.
    """
    if isinstance(data, str):
        data = data.encode("ascii")
    data = bytes(data)
    if data.lstrip()[:5].lower() == b"solid":
        try:
            normals, tris = _parse_ascii(data)
        except StlError:
            if not _binary_size_matches(data):
                raise
            normals, tris = _parse_binary(data)
    else:
        normals, tris = _parse_binary(data)
    if len(tris) == 0:
        raise StlError("STL contains zero triangles")
    n = len(tris)
    vertices = tris.reshape(-1, 3).astype(np.float64)
    triangles = np.arange(3 * n, dtype=np.int64).reshape(n, 3)
    return TriangleMesh(vertices, triangles, normals.astype(np.float64))


def _binary_size_matches(data: bytes) -> bool:
    if len(data) < _HEADER_SIZE + 4:
        return False
    (count,) = struct.unpack_from("<I", data, _HEADER_SIZE)
    return len(data) >= _HEADER_SIZE + 4 + 50 * count


def _parse_binary(data: bytes):
    if len(data) < _HEADER_SIZE + 4:
        raise StlError(f"binary STL too short ({len(data)} bytes)")
    (count,) = struct.unpack_from("<I", data, _HEADER_SIZE)
    need = _HEADER_SIZE + 4 + 50 * count
    if len(data) < need:
        raise StlError(
            f"truncated binary STL: header declares {count} triangles "
            f"({need} bytes) but only {len(data)} bytes present"
        )
    rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=_HEADER_SIZE + 4)
    return rec["normal"].copy(), rec["vertices"].copy()


def _parse_ascii(data: bytes):
    try:
        tokens = data.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise StlError("not an ASCII STL") from exc
    normals, tris = [], []
    pos = 0
    ntok = len(tokens)

    def expect(word):
        nonlocal pos
        if pos >= ntok or tokens[pos].lower() != word:
            got = tokens[pos] if pos < ntok else "<eof>"
            raise StlError(f"ASCII STL: expected {word!r} at token {pos}, got {got!r}")
        pos += 1

    def floats(k):
        nonlocal pos
        if pos + k > ntok:
            raise StlError("ASCII STL: unexpected end of file")
        try:
            out = [float(s) for s in tokens[pos : pos + k]]
        except ValueError as exc:
            raise StlError(f"ASCII STL: bad number near token {pos}") from exc
        pos += k
        return out

    expect("solid")
    # optional solid name: skip until first facet/endsolid
    while pos < ntok and tokens[pos].lower() not in ("facet", "endsolid"):
        pos += 1
    while True:
        if pos >= ntok:
            raise StlError("ASCII STL: missing 'endsolid'")
        word = tokens[pos].lower()
        if word == "endsolid":
            break
        expect("facet")
        expect("normal")
        normals.append(floats(3))
        expect("outer")
        expect("loop")
        tri = []
        for _ in range(3):
            expect("vertex")
            tri.append(floats(3))
        expect("endloop")
        expect("endfacet")
        tris.append(tri)
    normals = np.array(normals, dtype=np.float32).reshape(-1, 3)
    tris = np.array(tris, dtype=np.float32).reshape(-1, 3, 3)
    return normals, tris


def face_normals(tris32: np.ndarray) -> np.ndarray:
    """Unit normals (float32) from right-hand vertex order of (t, 3, 3) triangles."""
    t = tris32.astype(np.float64)
    n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(norm > 0, n / norm, 0.0)
    return n.astype(np.float32)


def write_stl(mesh: TriangleMesh, format: str = "binary", header: bytes = b"") -> bytes:
    """Serialize ``mesh`` as STL; normals are recomputed from vertex order."""
    if mesh.dim != 3:
        raise ValueError("STL output requires 3-D vertices")
    if mesh.n_triangles == 0:
        raise ValueError("refusing to write an STL with zero triangles")
    tris = mesh.vertices[mesh.triangles].astype(np.float32)
    normals = face_normals(tris)
    if format == "binary":
        rec = np.zeros(len(tris), dtype=_RECORD)
        rec["normal"] = normals
        rec["vertices"] = tris
        head = (header or b"matdeform binary STL")[:_HEADER_SIZE].ljust(_HEADER_SIZE, b" ")
        return head + struct.pack("<I", len(tris)) + rec.tobytes()
    if format == "ascii":
        out = io.StringIO()
        out.write("solid matdeform\n")
        for nrm, tri in zip(normals, tris):
            out.write("  facet normal %.9g %.9g %.9g\n" % tuple(nrm))
            out.write("    outer loop\n")
            for v in tri:
                out.write("      vertex %.9g %.9g %.9g\n" % tuple(v))
            out.write("    endloop\n  endfacet\n")
        out.write("endsolid matdeform\n")
        return out.getvalue().encode("ascii")
    raise ValueError(f"unknown STL format {format!r}")


def load_stl(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        return read_stl(fh.read())


def save_stl(path, mesh: TriangleMesh, format: str = "binary") -> None:
    with open(path, "wb") as fh:
        fh.write(write_stl(mesh, format))


# ---------------------------------------------------------------------------
# welding and weights


def default_weld_tol(mesh: TriangleMesh) -> float:
    return 1e-6 * mesh.bbox_diagonal()


def weld_vertices(soup: TriangleMesh, tol: Optional[float] = None) -> TriangleMesh:
    """Merge vertices closer than ``tol`` and drop triangles that collapse.

    Clusters are the connected components of the "within tol" graph, so
    merging is transitive. Each cluster is represented by its lowest-index
    vertex and output vertices keep first-occurrence order, which makes the
    operation idempotent.
    """
    if tol is None:
        tol = default_weld_tol(soup)
    if tol < 0:
        raise ValueError("weld tolerance must be >= 0")
    v = soup.vertices
    n = len(v)
    if n == 0:
        return TriangleMesh(v, soup.triangles)
    if tol == 0:
        _, first, labels = np.unique(v, axis=0, return_index=True, return_inverse=True)
        labels = labels.reshape(-1)
        rep_of_label = first
    else:
        pairs = cKDTree(v).query_pairs(tol, output_type="ndarray")
        graph = coo_matrix(
            (np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
        )
        _, labels = connected_components(graph, directed=False)
        rep_of_label = np.full(labels.max() + 1, n, dtype=np.int64)
        np.minimum.at(rep_of_label, labels, np.arange(n))
    rep = rep_of_label[labels]  # representative original index per vertex
    keep = np.unique(rep)  # sorted => first-occurrence order
    new_index = np.empty(n, dtype=np.int64)
    new_index[keep] = np.arange(len(keep))
    tri = new_index[rep[soup.triangles]]
    ok = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
    return TriangleMesh(v[keep], tri[ok])


def remove_unreferenced(mesh: TriangleMesh) -> TriangleMesh:
    """Drop vertices that no triangle uses, preserving vertex order."""
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.triangles.ravel()] = True
    if used.all():
        return mesh
    remap = np.cumsum(used) - 1
    return TriangleMesh(mesh.vertices[used], remap[mesh.triangles])


def vertex_area_weights(mesh: TriangleMesh) -> np.ndarray:
    """Per-vertex area weights with mean 1.

    Each triangle hands one third of its area to each of its corners.

    Raises
    ------
    ValueError
        If some vertex ends up with zero area.
    """
    areas = mesh.triangle_areas()
    raw = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(raw, mesh.triangles[:, k], areas / 3.0)
    bad = np.flatnonzero(raw <= 0)
    if bad.size:
        raise ValueError(
            f"vertex {bad[0]} has zero incident triangle area"
            + (f" ({bad.size} such vertices)" if bad.size > 1 else "")
        )
    return raw / raw.mean()


def box_grid_downsample(points, weights=None, cell: float = 1.0, seed=0):
    """Keep one randomly chosen point per occupied axis-aligned cell.

    Cells are ``floor(p / cell)`` on a grid anchored at the origin.

    Returns
    -------
    points : (k, D) array of selected input points
    weights : (k,) array or None
        Summed weights of each cell's members, renormalized to mean 1.
    index : (k,) int array
        Source index of every selected point, ascending.
    """
    if cell <= 0:
        raise ValueError("cell size must be positive")
    pts = np.asarray(points, dtype=np.float64)
    keys = np.floor(pts / cell).astype(np.int64)
    _, labels = np.unique(keys, axis=0, return_inverse=True)
    labels = labels.reshape(-1)
    rng = np.random.default_rng(seed)
    draw = rng.random(len(pts))
    # per cell, the member with the smallest draw wins: a uniform choice
    order = np.lexsort((draw, labels))
    first = np.ones(len(order), dtype=bool)
    first[1:] = labels[order][1:] != labels[order][:-1]
    chosen_by_label = order[first]
    index = np.sort(chosen_by_label)
    out_w = None
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        cell_sum = np.bincount(labels, weights=w)
        out_w = cell_sum[labels[index]]
        out_w = out_w / out_w.mean()
    return pts[index], out_w, index
