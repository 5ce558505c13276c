"""Animation skeletons and the text rig file format.

Rig files are line records: ``mesh <relative-path>`` (optional companion
mesh), ``joint <name> <x> <y> <z>``, ``root <name>``,
``bone <parent-name> <child-name>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, load_mesh, normalize_mesh


class RigError(ValueError):
    pass


@dataclass
class Skeleton:
    names: list                     # joint names
    positions: np.ndarray           # (n, 3) float64
    edges: list                     # (parent index, child index) tuples
    root: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.validate()

    @property
    def n_joints(self):
        return len(self.names)

    def validate(self):
        n = self.n_joints
        if n < 1:
            raise RigError("skeleton needs at least one joint")
        if not np.all(np.isfinite(self.positions)):
            raise RigError("non-finite joint positions")
        if not 0 <= self.root < n:
            raise RigError("root index out of range")
        # connected + acyclic via union-find
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        has_parent = [False] * n
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise RigError("edge index out of range")
            ra, rb = find(a), find(b)
            if ra == rb:
                raise RigError("skeleton edges contain a cycle")
            parent[ra] = rb
            if has_parent[b]:
                raise RigError(f"joint {self.names[b]} has two parents")
            has_parent[b] = True
        if len(self.edges) != n - 1:
            raise RigError(f"tree needs {n - 1} edges, got {len(self.edges)}")
        if has_parent[self.root]:
            raise RigError("root joint has a parent")

    def children(self, i):
        return [b for a, b in self.edges if a == i]

    def parent_of(self, i):
        for a, b in self.edges:
            if b == i:
                return a
        return None

    def subtree(self, i):
        """Indices of i and all of its descendants."""
        out = [i]
        stack = [i]
        while stack:
            j = stack.pop()
            for c in self.children(j):
                out.append(c)
                stack.append(c)
        return out

    def bone_segments(self):
        """(m, 2, 3) array of bone endpoint positions."""
        segs = np.empty((len(self.edges), 2, 3))
        for e, (a, b) in enumerate(self.edges):
            segs[e, 0] = self.positions[a]
            segs[e, 1] = self.positions[b]
        return segs

    def transformed(self, fn):
        return Skeleton(list(self.names), fn(self.positions), list(self.edges), self.root)


@dataclass
class RiggedCharacter:
    mesh: TriangleMesh
    skeleton: Skeleton
    name: str = "character"


def save_rig(skeleton: Skeleton, path, mesh_path: str | None = None):
    path = Path(path)
    with open(path, "w") as f:
        if mesh_path is not None:
            f.write(f"mesh {mesh_path}\n")
        for name, p in zip(skeleton.names, skeleton.positions):
            f.write(f"joint {name} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        f.write(f"root {skeleton.names[skeleton.root]}\n")
        for a, b in skeleton.edges:
            f.write(f"bone {skeleton.names[a]} {skeleton.names[b]}\n")


def parse_rig(path):
    """Returns (skeleton, mesh relative path or None). Does not normalize."""
    path = Path(path)
    names = []
    positions = []
    edges = []
    root_name = None
    mesh_rel = None
    with open(path) as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "mesh":
                    mesh_rel = parts[1]
                elif parts[0] == "joint":
                    names.append(parts[1])
                    positions.append([float(x) for x in parts[2:5]])
                elif parts[0] == "root":
                    root_name = parts[1]
                elif parts[0] == "bone":
                    edges.append((parts[1], parts[2]))
                else:
                    raise ValueError(f"unknown record {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise RigError(f"{path}:{line_no}: {exc}") from exc
    if not names:
        raise RigError(f"{path}: no joints")
    index = {n: i for i, n in enumerate(names)}
    if len(index) != len(names):
        raise RigError(f"{path}: duplicate joint names")
    if root_name is None:
        raise RigError(f"{path}: missing root record")
    try:
        edge_idx = [(index[a], index[b]) for a, b in edges]
    except KeyError as exc:
        raise RigError(f"{path}: bone references unknown joint {exc}") from exc
    skel = Skeleton(names, np.asarray(positions), edge_idx, index[root_name])
    return skel, mesh_rel


def load_rig(path) -> RiggedCharacter:
    """Load a rig file plus its companion mesh; both are normalized into the
    canonical frame (same transform applied to mesh and joints)."""
    path = Path(path)
    skel, mesh_rel = parse_rig(path)
    if mesh_rel is None:
        raise RigError(f"{path}: rig file has no companion mesh record")
    mesh = load_mesh(path.parent / mesh_rel)
    mesh, xform = normalize_mesh(mesh)
    skel = skel.transformed(xform.apply)
    if skel.n_joints < 2:
        raise RigError("rigged character needs at least 2 joints")
    return RiggedCharacter(mesh, skel, name=path.stem)
