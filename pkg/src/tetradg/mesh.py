"""Conforming unstructured tetrahedral meshes.

Connectivity, face adjacency with neighbor-face and orientation indices,
geometry (volumes, face frames, insphere diameters), boundary tagging, and
per-element materials.  Meshes arrive prebuilt: the file interface is a
Gmsh MSH 4.1 ASCII subset (nodes, 4-node tets, 3-node boundary triangles in
physical groups named ``free-surface`` / ``outflow``) plus a sidecar CSV
``elem_id, rho, vp, vs, qp, qs``.

The built-in generators (single tet, glued pairs, Kuhn-subdivided cubes,
graded cubes, a star of one interior tet with four neighbors) exist for
tests and small studies; the cube generator can stitch opposite boundary
faces into periodic adjacency, which is a generator feature only and not
expressible in the file format.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .basis import FACE_VERTICES
from .equations import (
    BND_FREE_SURFACE,
    BND_INTERIOR,
    BND_OUTFLOW,
    GeometryError,
    Material,
)

BOUNDARY_CODES = {"free-surface": BND_FREE_SURFACE, "outflow": BND_OUTFLOW}
BOUNDARY_NAMES = {v: k for k, v in BOUNDARY_CODES.items()}


class MeshError(ValueError):
    pass


@dataclass
class TetMesh:
    """Tetrahedral mesh with adjacency resolved at construction."""

    vertices: np.ndarray  # (V, 3)
    elements: np.ndarray  # (K, 4) vertex ids, positively oriented
    materials: list[Material]
    neighbor: np.ndarray = field(default=None)  # (K, 4) element id or -1
    neighbor_face: np.ndarray = field(default=None)  # (K, 4) j in 0..3, -1 on boundary
    neighbor_orient: np.ndarray = field(default=None)  # (K, 4) h in 1..3, 0 on boundary
    boundary: np.ndarray = field(default=None)  # (K, 4) BND_* code

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    def interior_faces(self):
        """Unique interior faces as (k, i, k_neighbor, j, h) with k < neighbor order."""
        out = []
        for k in range(self.num_elements):
            for i in range(4):
                kn = self.neighbor[k, i]
                if kn >= 0 and (kn, self.neighbor_face[k, i]) > (k, i):
                    out.append((k, i, kn, self.neighbor_face[k, i], self.neighbor_orient[k, i]))
        return out


def _canonical_orientation(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Swap vertices so every signed volume is positive; error on degenerate."""
    elems = elements.copy()
    v = vertices[elems]
    det = np.linalg.det(np.transpose(v[:, 1:] - v[:, :1], (0, 2, 1)))
    flip = det < 0
    elems[flip, 2], elems[flip, 3] = elements[flip, 3], elements[flip, 2]
    bad = np.nonzero(det == 0)[0]
    if bad.size:
        raise MeshError(f"degenerate (zero-volume) element(s): {bad.tolist()}")
    return elems


def build_adjacency(vertices: np.ndarray, elements: np.ndarray):
    """Face adjacency by hashing vertex-id triples.

    Returns (neighbor, neighbor_face, neighbor_orient, interior_mask); the
    orientation index h-1 locates the local face's first vertex within the
    neighbor's ordered face tuple.
    """
    K = elements.shape[0]
    keys = np.arange(vertices.shape[0])
    face_map: dict[tuple, list[tuple[int, int]]] = {}
    for k in range(K):
        for i in range(4):
            tri = tuple(sorted(keys[elements[k, list(FACE_VERTICES[i])]].tolist()))
            face_map.setdefault(tri, []).append((k, i))
    neighbor = np.full((K, 4), -1, dtype=int)
    neighbor_face = np.full((K, 4), -1, dtype=int)
    neighbor_orient = np.zeros((K, 4), dtype=int)
    for tri, owners in face_map.items():
        if len(owners) > 2:
            raise MeshError(f"nonconforming mesh: face {tri} shared by {owners}")
        if len(owners) < 2:
            continue
        (ka, ia), (kb, ib) = owners
        tup_a = keys[elements[ka, list(FACE_VERTICES[ia])]]
        tup_b = keys[elements[kb, list(FACE_VERTICES[ib])]]
        for k, i, kn, j, me, other in (
            (ka, ia, kb, ib, tup_a, tup_b),
            (kb, ib, ka, ia, tup_b, tup_a),
        ):
            pos = int(np.nonzero(other == me[0])[0][0])
            # reversed traversal: opposite outward normals
            if not (other[(pos - 1) % 3] == me[1] and other[(pos - 2) % 3] == me[2]):
                raise MeshError(
                    f"face orientation mismatch between elements {k} and {kn}"
                )
            neighbor[k, i] = kn
            neighbor_face[k, i] = j
            neighbor_orient[k, i] = pos + 1
    return neighbor, neighbor_face, neighbor_orient, neighbor >= 0


def make_mesh(
    vertices: np.ndarray,
    elements: np.ndarray,
    materials: list[Material] | Material,
    boundary_tags: dict | None = None,
    default_boundary: str | None = None,
) -> TetMesh:
    """Assemble a TetMesh: canonical orientation, adjacency, boundary codes.

    boundary_tags maps a sorted vertex-id triple to a tag name; faces without
    a neighbor fall back to default_boundary, or raise if none is given.
    """
    vertices = np.asarray(vertices, dtype=float)
    elements = _canonical_orientation(vertices, np.asarray(elements, dtype=int))
    if isinstance(materials, Material):
        materials = [materials] * elements.shape[0]
    if len(materials) != elements.shape[0]:
        raise MeshError("one material per element required")
    neighbor, nface, norient, interior = build_adjacency(vertices, elements)
    boundary = np.zeros_like(neighbor)
    for k in range(elements.shape[0]):
        for i in range(4):
            if interior[k, i]:
                continue
            tri = tuple(sorted(elements[k, list(FACE_VERTICES[i])].tolist()))
            tag = (boundary_tags or {}).get(tri, default_boundary)
            if tag is None:
                raise MeshError(f"untagged boundary face {i} of element {k}")
            if tag not in BOUNDARY_CODES:
                raise MeshError(f"unknown boundary tag {tag!r} on element {k} face {i}")
            boundary[k, i] = BOUNDARY_CODES[tag]
    return TetMesh(vertices, elements, list(materials), neighbor, nface, norient, boundary)


@dataclass
class MeshGeometry:
    elem_verts: np.ndarray  # (K, 4, 3)
    volume: np.ndarray  # (K,)
    face_area: np.ndarray  # (K, 4)
    face_normal: np.ndarray  # (K, 4, 3) outward unit
    face_tangent_s: np.ndarray  # (K, 4, 3)
    face_tangent_t: np.ndarray  # (K, 4, 3)
    insphere: np.ndarray  # (K,) insphere diameter


def compute_geometry(mesh: TetMesh) -> MeshGeometry:
    ev = mesh.vertices[mesh.elements]
    K = ev.shape[0]
    vol = np.abs(np.linalg.det(np.transpose(ev[:, 1:] - ev[:, :1], (0, 2, 1)))) / 6.0
    if np.any(vol <= 0):
        raise GeometryError("zero-volume element")
    area = np.empty((K, 4))
    normal = np.empty((K, 4, 3))
    tan_s = np.empty((K, 4, 3))
    tan_t = np.empty((K, 4, 3))
    for i, fv in enumerate(FACE_VERTICES):
        p = ev[:, list(fv)]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        cr = np.cross(e1, e2)
        nrm = np.linalg.norm(cr, axis=1)
        area[:, i] = nrm / 2.0
        normal[:, i] = cr / nrm[:, None]
        tan_s[:, i] = e1 / np.linalg.norm(e1, axis=1)[:, None]
        tan_t[:, i] = np.cross(normal[:, i], tan_s[:, i])
    insphere = 2.0 * 3.0 * vol / area.sum(axis=1)
    return MeshGeometry(ev, vol, area, normal, tan_s, tan_t, insphere)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

# Kuhn subdivision: six tets per box, all sharing the main diagonal; the
# induced face triangulations agree between adjacent boxes.
_KUHN_PATHS = [
    (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0),
]


def reference_tet_mesh(material: Material, boundary: str = "free-surface") -> TetMesh:
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    return make_mesh(verts, [[0, 1, 2, 3]], material, default_boundary=boundary)


def two_tet_mesh(
    materials: list[Material] | Material, boundary: str = "free-surface"
) -> TetMesh:
    """Two tets glued on the slanted face of the reference tet."""
    verts = np.array(
        [[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [2 / 3, 2 / 3, 2 / 3]]
    )
    return make_mesh(verts, [[0, 1, 2, 3], [4, 1, 2, 3]], materials, default_boundary=boundary)


def star_mesh(material: Material, boundary: str = "outflow") -> TetMesh:
    """One interior tet whose four face-neighbors are its face reflections."""
    base = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    verts = [base[0], base[1], base[2], base[3]]
    elems = [[0, 1, 2, 3]]
    for fv in FACE_VERTICES:
        opposite = ({0, 1, 2, 3} - set(fv)).pop()
        a, b, c = base[list(fv)]
        n = np.cross(b - a, c - a)
        n = n / np.linalg.norm(n)
        p = base[opposite]
        mirrored = p - 2.0 * np.dot(p - a, n) * n
        verts.append(mirrored)
        elems.append([len(verts) - 1, *fv])
    return make_mesh(np.array(verts), elems, material, default_boundary=boundary)


def _boxes_to_mesh(xs, ys, zs, materials, boundary, periodic):
    nx, ny, nz = len(xs) - 1, len(ys) - 1, len(zs) - 1
    vid = lambda i, j, k: (i * (ny + 1) + j) * (nz + 1) + k  # noqa: E731
    verts = np.array([[xs[i], ys[j], zs[k]]
                      for i in range(nx + 1) for j in range(ny + 1) for k in range(nz + 1)])
    elems = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                corner = np.array([i, j, k])
                for path in _KUHN_PATHS:
                    nodes = [corner.copy()]
                    for ax in path:
                        nxt = nodes[-1].copy()
                        nxt[ax] += 1
                        nodes.append(nxt)
                    elems.append([vid(*n) for n in nodes])
    mesh = make_mesh(
        verts, np.array(elems), materials, default_boundary=boundary or "free-surface"
    )
    if periodic:
        stitch_periodic(
            mesh, (xs[0], ys[0], zs[0]), (xs[-1] - xs[0], ys[-1] - ys[0], zs[-1] - zs[0])
        )
    return mesh


def stitch_periodic(mesh: TetMesh, origin, lengths) -> None:
    """Turn all boundary faces of a box mesh into periodic interior faces.

    Each boundary face lies in exactly one boundary plane of the box; its
    partner is the face translated by one full period along that axis.
    Adjacency indices (neighbor, j, h) are filled from the translated vertex
    correspondence; the periodic links live only in the adjacency, boundary
    codes are cleared.
    """
    qk = lambda p: tuple(np.round(p, 9))  # noqa: E731
    pending: dict[tuple, tuple[int, int, np.ndarray]] = {}
    for k in range(mesh.num_elements):
        for i in range(4):
            if mesh.neighbor[k, i] >= 0:
                continue
            pos = mesh.vertices[mesh.elements[k, list(FACE_VERTICES[i])]]
            axis = None
            for ax in range(3):
                if np.allclose(pos[:, ax], origin[ax]):
                    axis, shift = ax, lengths[ax]
                elif np.allclose(pos[:, ax], origin[ax] + lengths[ax]):
                    axis, shift = ax, -lengths[ax]
            if axis is None:
                raise MeshError(f"element {k} face {i}: not on a box boundary plane")
            shifted = pos.copy()
            shifted[:, axis] += shift
            key = tuple(sorted(qk(p) for p in (pos if shift < 0 else shifted)))
            mine = pos if shift < 0 else shifted
            if key not in pending:
                pending[key] = (k, i, mine)
                continue
            kn, j, theirs = pending.pop(key)
            for (ka, ia, pa), (kb, ib, pb) in (
                ((k, i, mine), (kn, j, theirs)),
                ((kn, j, theirs), (k, i, mine)),
            ):
                pos_first = [qk(p) for p in pb].index(qk(pa[0]))
                if not (
                    qk(pb[(pos_first - 1) % 3]) == qk(pa[1])
                    and qk(pb[(pos_first - 2) % 3]) == qk(pa[2])
                ):
                    raise MeshError(f"periodic faces {ka}/{kb} traversal mismatch")
                mesh.neighbor[ka, ia] = kb
                mesh.neighbor_face[ka, ia] = ib
                mesh.neighbor_orient[ka, ia] = pos_first + 1
                mesh.boundary[ka, ia] = BND_INTERIOR
    if pending:
        raise MeshError(f"{len(pending)} periodic faces unmatched")


def cube_mesh(
    n: int,
    material: Material,
    size: float = 1.0,
    boundary: str = "free-surface",
    periodic: bool = False,
) -> TetMesh:
    """Unit-like cube split into n^3 boxes of 6 Kuhn tets each."""
    grid = np.linspace(0.0, size, n + 1)
    return _boxes_to_mesh(grid, grid, grid, material, boundary, periodic)


def graded_cube_mesh(
    n_fine: int,
    n_coarse: int,
    material: Material,
    ratio: float = 2.05,
    boundary: str = "outflow",
) -> TetMesh:
    """Box grid graded along x: fine cells on the left, cells ~ratio larger right."""
    h_fine = 1.0
    xs = np.concatenate(
        [
            h_fine * np.arange(n_fine + 1),
            h_fine * n_fine + ratio * h_fine * np.arange(1, n_coarse + 1),
        ]
    )
    width = xs[-1]
    ys = np.arange(0, int(np.ceil(width / (ratio * h_fine))) + 1) * ratio * h_fine
    return _boxes_to_mesh(xs, ys, ys, material, boundary, periodic=False)


def layered_cube_mesh(
    n: int,
    mat_slow: Material,
    mat_fast: Material,
    size: float = 1.0,
    split: float = 0.5,
    boundary: str = "free-surface",
) -> TetMesh:
    """Uniform cube with a fast-material layer for x < split*size.

    The wave-speed contrast grades the CFL timesteps (fast layer steps
    smaller) on a geometrically uniform mesh, the layer-over-halfspace way of
    producing a clean rate-2 cluster split.
    """
    return banded_cube_mesh(n, [mat_fast, mat_slow], size=size,
                            splits=[split], boundary=boundary)


def banded_cube_mesh(
    n: int,
    materials: list[Material],
    size: float = 1.0,
    splits: list[float] | None = None,
    boundary: str = "free-surface",
) -> TetMesh:
    """Uniform cube with material bands along x (band i below splits[i]*size)."""
    if splits is None:
        splits = [(i + 1) / len(materials) for i in range(len(materials) - 1)]
    if len(splits) != len(materials) - 1:
        raise MeshError("need one split per band boundary")
    mesh = cube_mesh(n, materials[0], size=size, boundary=boundary)
    centers = mesh.vertices[mesh.elements].mean(axis=1)
    bands = np.searchsorted(np.asarray(splits) * size, centers[:, 0], side="right")
    mesh.materials = [materials[b] for b in bands]
    return mesh


# ---------------------------------------------------------------------------
# MSH 4.1 ASCII subset + material sidecar
# ---------------------------------------------------------------------------


def load_mesh(msh_path, materials_path) -> TetMesh:
    """Read the MSH 4.1 ASCII subset plus the per-element material CSV."""
    sections = _split_sections(msh_path)
    phys_names = _parse_physical_names(sections.get("PhysicalNames", []))
    surf_phys = _parse_entities(sections.get("Entities", []))
    node_ids, coords = _parse_nodes(sections["Nodes"])
    tets, boundary_tris = _parse_elements(sections["Elements"], surf_phys, phys_names, msh_path)

    id_map = {nid: idx for idx, nid in enumerate(node_ids)}
    elements = np.array([[id_map[v] for v in tet] for tet in tets], dtype=int)
    tags = {}
    for tri, name in boundary_tris:
        tags[tuple(sorted(id_map[v] for v in tri))] = name
    materials = _load_materials(materials_path, len(elements))
    return make_mesh(coords, elements, materials, boundary_tags=tags)


def _split_sections(path) -> dict[str, list[str]]:
    sections = {}
    current = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("$End"):
                current = None
            elif line.startswith("$"):
                current = line[1:]
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
    fmt = sections.get("MeshFormat", [""])[0].split()
    if not fmt or not fmt[0].startswith("4."):
        raise MeshError(f"unsupported MSH format {fmt!r}; need 4.1 ASCII")
    return sections


def _parse_physical_names(lines):
    names = {}
    for line in lines[1:]:
        dim, tag, name = line.split(maxsplit=2)
        names[(int(dim), int(tag))] = name.strip().strip('"')
    return names


def _parse_entities(lines):
    """Map surface entity tag -> physical tag (subset: only surfaces matter)."""
    if not lines:
        return {}
    npt, ncv, nsf, _ = (int(x) for x in lines[0].split())
    surf_phys = {}
    idx = 1 + npt + ncv
    for line in lines[idx : idx + nsf]:
        parts = line.split()
        tag = int(parts[0])
        nphys = int(parts[7])
        if nphys:
            surf_phys[tag] = int(parts[8])
    return surf_phys


def _parse_nodes(lines):
    header = lines[0].split()
    n_blocks = int(header[0])
    pos = 1
    ids, coords = [], []
    for _ in range(n_blocks):
        _, _, _, n_in_block = (int(x) for x in lines[pos].split())
        pos += 1
        block_ids = [int(lines[pos + i]) for i in range(n_in_block)]
        pos += n_in_block
        for i in range(n_in_block):
            coords.append([float(x) for x in lines[pos + i].split()[:3]])
        pos += n_in_block
        ids.extend(block_ids)
    return ids, np.array(coords)


def _parse_elements(lines, surf_phys, phys_names, path):
    header = lines[0].split()
    n_blocks = int(header[0])
    pos = 1
    tets, tris = [], []
    for _ in range(n_blocks):
        dim, etag, etype, n_in_block = (int(x) for x in lines[pos].split())
        pos += 1
        for i in range(n_in_block):
            parts = [int(x) for x in lines[pos + i].split()]
            if etype == 4:
                tets.append(parts[1:5])
            elif etype == 2:
                phys = surf_phys.get(etag)
                name = phys_names.get((2, phys)) if phys is not None else None
                if name not in BOUNDARY_CODES:
                    raise MeshError(
                        f"{path}: boundary triangle {parts[0]} has unknown tag {name!r}"
                    )
                tris.append((parts[1:4], name))
            else:
                raise MeshError(f"{path}: unsupported element type {etype}")
        pos += n_in_block
    if not tets:
        raise MeshError(f"{path}: no tetrahedra found")
    return tets, tris


def _load_materials(path, num_elements) -> list[Material]:
    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#") or not _is_number(rec[0]):
                continue
            eid = int(rec[0])
            rho, vp, vs, qp, qs = (float(x) for x in rec[1:6])
            rows[eid] = Material.from_velocities(rho=rho, vp=vp, vs=vs, qp=qp, qs=qs)
    missing = [k for k in range(num_elements) if k not in rows]
    if missing:
        raise MeshError(f"material sidecar missing elements {missing[:5]}...")
    return [rows[k] for k in range(num_elements)]


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def write_msh(mesh: TetMesh, msh_path, materials_path) -> None:
    """Write the mesh in the supported MSH subset plus the material sidecar."""
    used_tags = sorted(
        {int(b) for b in mesh.boundary.ravel() if b != BND_INTERIOR}
    )
    tag_to_phys = {code: idx + 1 for idx, code in enumerate(used_tags)}
    with open(msh_path, "w") as fh:
        fh.write("$MeshFormat\n4.1 0 8\n$EndMeshFormat\n")
        if used_tags:
            fh.write("$PhysicalNames\n%d\n" % len(used_tags))
            for code, phys in tag_to_phys.items():
                fh.write(f'2 {phys} "{BOUNDARY_NAMES[code]}"\n')
            fh.write("$EndPhysicalNames\n")
        fh.write("$Entities\n")
        fh.write(f"0 0 {len(used_tags)} 1\n")
        for code, phys in tag_to_phys.items():
            fh.write(f"{phys} 0 0 0 1 1 1 1 {phys} 0\n")
        fh.write("1 0 0 0 1 1 1 0 0\n")
        fh.write("$EndEntities\n")
        fh.write("$Nodes\n")
        nv = mesh.vertices.shape[0]
        fh.write(f"1 {nv} 1 {nv}\n")
        fh.write(f"3 1 0 {nv}\n")
        for i in range(nv):
            fh.write(f"{i + 1}\n")
        for p in mesh.vertices:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        fh.write("$EndNodes\n")
        fh.write("$Elements\n")
        tris = []
        for k in range(mesh.num_elements):
            for i in range(4):
                code = mesh.boundary[k, i]
                if code != BND_INTERIOR:
                    tri = mesh.elements[k, list(FACE_VERTICES[i])] + 1
                    tris.append((code, tri))
        n_blocks = len(used_tags) + 1
        total = len(tris) + mesh.num_elements
        fh.write(f"{n_blocks} {total} 1 {total}\n")
        eid = 1
        for code in used_tags:
            mine = [t for c, t in tris if c == code]
            fh.write(f"2 {tag_to_phys[code]} 2 {len(mine)}\n")
            for tri in mine:
                fh.write(f"{eid} {tri[0]} {tri[1]} {tri[2]}\n")
                eid += 1
        fh.write(f"3 1 4 {mesh.num_elements}\n")
        for tet in mesh.elements + 1:
            fh.write(f"{eid} {tet[0]} {tet[1]} {tet[2]} {tet[3]}\n")
            eid += 1
        fh.write("$EndElements\n")
    with open(materials_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["elem_id", "rho", "vp", "vs", "qp", "qs"])
        for k, m in enumerate(mesh.materials):
            w.writerow([k, m.rho, m.vp, m.vs, m.qp, m.qs])
