"""Pure numpy implementations of the geometry kernels.

Used when the compiled ``_kernels`` extension is unavailable; both backends
return identical results up to floating-point reassociation.
"""

import numpy as np

def _closest_on_triangle(p, a, b, c):
    """Closest point on triangle ``abc`` to each row of ``p`` (Voronoi-region classification)."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = ap @ ab, ap @ ac
    d3, d4 = bp @ ab, bp @ ac
    d5, d6 = cp @ ab, cp @ ac
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    n = len(p)
    choices = [
        np.broadcast_to(a, (n, 3)),
        np.broadcast_to(b, (n, 3)),
        a + t_ab[:, None] * ab,
        np.broadcast_to(c, (n, 3)),
        a + t_ac[:, None] * ac,
        b + t_bc[:, None] * (c - b),
    ]
    inside = a + v_in[:, None] * ab + w_in[:, None] * ac
    out = inside.copy()
    taken = np.zeros(n, dtype=bool)
    for cond, choice in zip(conds, choices):
        sel = cond & ~taken
        out[sel] = choice[sel]
        taken |= sel
    return out


def point_triangle_distances(points, triangles):
    """Distance from each point to the nearest of ``triangles`` (shape ``(F, 3, 3)``)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.float64)
    best = np.full(len(points), np.inf)
    for a, b, c in triangles:
        q = _closest_on_triangle(points, a, b, c)
        best = np.minimum(best, np.sqrt(((points - q) ** 2).sum(axis=1)))
    return best


def min_distances(queries, points):
    """For each query row, the distance to its nearest row of ``points`` (inf if empty)."""
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    best = np.full(len(queries), np.inf)
    rows = max(1, 4_000_000 // max(1, queries.size))
    for lo in range(0, len(points), rows):
        chunk = points[lo:lo + rows]
        d2 = ((queries[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=2)
        best = np.minimum(best, np.sqrt(d2.min(axis=1)))
    return best


def mean_pairwise_distance(a, b):
    """Mean Euclidean distance over all ``len(a) * len(b)`` pairs."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    total = 0.0
    rows = max(1, 4_000_000 // max(1, b.size))
    for lo in range(0, len(a), rows):
        chunk = a[lo:lo + rows]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        total += np.sqrt(d2).sum()
    return total / (len(a) * len(b))
