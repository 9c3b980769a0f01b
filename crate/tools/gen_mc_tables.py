#!/usr/bin/env python3
"""Generate the 256-case marching-cubes triangle table as Rust source.

Runs the classic (Lorensen) extractor from scikit-image on every single-cell
sign configuration and records, per case, the triangle list as cube-edge ids.
Corner / edge numbering written out here must match mesh/tables.rs consumers.

Usage: python3 tools/gen_mc_tables.py > crates/core/src/mesh/tables.rs
"""

import sys

import numpy as np
from skimage.measure import marching_cubes

# Corner i sits at CORNERS[i] in cell-local (x, y, z); bottom ring then top ring.
CORNERS = [
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
]
EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
]


def edge_midpoints():
    mids = []
    for a, b in EDGES:
        pa, pb = np.array(CORNERS[a], float), np.array(CORNERS[b], float)
        mids.append((pa + pb) / 2.0)
    return mids


def case_triangles(case):
    vol = np.empty((2, 2, 2), dtype=np.float64)
    for i, (x, y, z) in enumerate(CORNERS):
        # bit set => corner is inside => negative value
        vol[x, y, z] = -1.0 if (case >> i) & 1 else 1.0
    if vol.min() > 0 or vol.max() < 0:
        return []
    verts, faces, _, _ = marching_cubes(vol, level=0.0, method="lorensen")
    mids = edge_midpoints()
    vert_edge = []
    for v in verts:
        hits = [i for i, m in enumerate(mids) if np.allclose(v, m, atol=1e-9)]
        assert len(hits) == 1, f"case {case}: vertex {v} not on a unique edge"
        vert_edge.append(hits[0])
    tris = []
    for f in faces:
        tris.extend(vert_edge[i] for i in f)
    return tris


def main():
    out = sys.stdout
    out.write("//! Classic 256-case marching-cubes triangle table.\n")
    out.write("//!\n")
    out.write("//! Generated by tools/gen_mc_tables.py; do not edit by hand.\n\n")
    out.write("/// Cell-local (x, y, z) offset of each cube corner; bottom ring then top ring.\n")
    out.write("pub const CORNER_OFFSETS: [[usize; 3]; 8] = [\n")
    for x, y, z in CORNERS:
        out.write(f"    [{x}, {y}, {z}],\n")
    out.write("];\n\n")
    out.write("/// Corner index pair bounding each of the 12 cube edges.\n")
    out.write("pub const EDGE_ENDPOINTS: [(usize, usize); 12] = [\n")
    for a, b in EDGES:
        out.write(f"    ({a}, {b}),\n")
    out.write("];\n\n")
    out.write("/// Per sign-configuration triangle fan, three edge ids per triangle.\n")
    out.write("/// Bit i of the case index is set when corner i is inside (value < iso).\n")
    out.write("pub static TRI_TABLE: [&[u8]; 256] = [\n")
    for case in range(256):
        tris = case_triangles(case)
        body = ", ".join(str(t) for t in tris)
        out.write(f"    &[{body}],\n")
    out.write("];\n")


if __name__ == "__main__":
    main()
