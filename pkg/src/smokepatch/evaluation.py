"""Recall-over-rank evaluation of descriptor methods.

An evaluation set holds N coarse and N fine descriptors with a bijective
ground truth (the i'th coarse vector's only relevant partner is the i'th
fine vector). Recall at cut-off k is the fraction of coarse queries whose
partner appears among their k nearest fine vectors by L2 distance; ties
break by insertion index, so curves are reproducible.
"""

import numpy as np

from .kdtree import KDTree
from .net import simple_descriptor


class EvalSet:
    def __init__(self, coarse_descriptors, fine_descriptors):
        c = np.asarray(coarse_descriptors, dtype=np.float64)
        f = np.asarray(fine_descriptors, dtype=np.float64)
        if c.shape != f.shape or c.ndim != 2 or len(c) == 0:
            raise ValueError(
                f"need matching (N, dim) arrays, got {c.shape} / {f.shape}")
        self.coarse = c
        self.fine = f

    def __len__(self):
        return len(self.coarse)

    def partner_ranks(self):
        """1-based rank of each query's true partner in the full ordering."""
        tree = KDTree(self.fine)
        n = len(self)
        ranks = np.empty(n, dtype=np.int64)
        for i in range(n):
            idx, _ = tree.query(self.coarse[i], n)
            ranks[i] = int(np.where(idx == i)[0][0]) + 1
        return ranks


def recall_at_k(eval_set, k):
    """Fraction of queries whose partner is among the k nearest retrieved."""
    n = len(eval_set)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    return float(np.mean(eval_set.partner_ranks() <= k))


def recall_curve(eval_set, k_max=None):
    """Recall for every cut-off 1..k_max (non-decreasing, 1.0 at k = N)."""
    n = len(eval_set)
    k_max = n if k_max is None else min(k_max, n)
    ranks = eval_set.partner_ranks()
    hits = np.bincount(ranks, minlength=n + 1)[1:k_max + 1]
    return np.cumsum(hits) / n


def mean_recall(curve, lo, hi):
    """Mean recall over ranks lo..hi (1-based, inclusive)."""
    return float(np.mean(np.asarray(curve)[lo - 1:hi]))


# ---------------------------------------------------------------------------
# descriptor extraction for the compared methods

def cnn_descriptors(blocks, den_net, mot_net=None, w_m=0.6):
    """Descriptors for stacked blocks (N, C, spatial...).

    Density-only when ``mot_net`` is None; otherwise the combined
    density + vorticity descriptor.
    """
    from .net import combine_descriptors

    blocks = np.asarray(blocks, dtype=np.float64)
    d_den = den_net.descriptors(blocks[:, :1])
    if mot_net is None:
        return d_den
    d_mot = mot_net.descriptors(blocks[:, 1:])
    return combine_descriptors(d_den, d_mot, w_m)


def simple_descriptors(blocks):
    blocks = np.asarray(blocks, dtype=np.float64)
    return np.stack([simple_descriptor(b[0], b[1:]) for b in blocks])


# ---------------------------------------------------------------------------
# output files

def write_recall_csv(path, curves):
    """Columns: k plus one recall column per method."""
    names = list(curves)
    k_max = max(len(c) for c in curves.values())
    with open(path, "w") as f:
        f.write(",".join(["k"] + names) + "\n")
        for k in range(1, k_max + 1):
            row = [str(k)]
            for name in names:
                c = curves[name]
                row.append(f"{c[k - 1]:.6f}" if k <= len(c) else "")
            f.write(",".join(row) + "\n")


_SVG_COLORS = ["#d95f02", "#7570b3", "#1b9e77", "#e7298a", "#66a61e"]


def write_recall_svg(path, curves, width=640, height=420):
    """Minimal standalone line chart of recall over rank."""
    pad = 50
    k_max = max(len(c) for c in curves.values())
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']

    def sx(k):
        return pad + (k - 1) / max(k_max - 1, 1) * (width - 2 * pad)

    def sy(r):
        return height - pad - r * (height - 2 * pad)

    parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
                 f'y2="{height - pad}" stroke="black"/>')
    parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{pad}" '
                 f'y2="{pad}" stroke="black"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(f'<text x="{pad - 8}" y="{y + 4}" font-size="11" '
                     f'text-anchor="end">{frac:.2f}</text>')
        parts.append(f'<line x1="{pad - 4}" y1="{y}" x2="{pad}" y2="{y}" '
                     f'stroke="black"/>')
    parts.append(f'<text x="{width / 2}" y="{height - 12}" font-size="12" '
                 f'text-anchor="middle">rank k</text>')
    for i, (name, curve) in enumerate(curves.items()):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(k + 1):.1f},{sy(r):.1f}"
                       for k, r in enumerate(curve))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        y = pad + 16 * i
        parts.append(f'<line x1="{width - pad - 130}" y1="{y}" '
                     f'x2="{width - pad - 105}" y2="{y}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{width - pad - 100}" y="{y + 4}" '
                     f'font-size="11">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
