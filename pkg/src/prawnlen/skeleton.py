"""Zhang-Suen thinning and centreline extraction.

The thinning pass reduces an instance mask to a one-pixel-wide skeleton;
the centreline is then the longest geodesic path between two skeleton
endpoints, which resolves tail splits and spurs deterministically.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import EmptyMask
from .validation import check_mask

logger = logging.getLogger(__name__)

# Neighbour order P2..P9, clockwise from north, as (dy, dx).
NEIGHBOUR_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
_EIGHT = np.ones((3, 3), dtype=bool)


def _deletable(code, first_pass):
    p = [(code >> i) & 1 for i in range(8)]
    p2, p3, p4, p5, p6, p7, p8, p9 = p
    b = sum(p)
    a = sum(1 for i in range(8) if p[i] == 0 and p[(i + 1) % 8] == 1)
    if not (3 <= b <= 6 and a == 1):
        return False
    if first_pass:
        return p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
    return p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0


_LUT_FIRST = np.array([_deletable(c, True) for c in range(256)], dtype=bool)
_LUT_SECOND = np.array([_deletable(c, False) for c in range(256)], dtype=bool)


def _neighbour_codes(padded):
    inner = padded[1:-1, 1:-1]
    code = np.zeros(inner.shape, dtype=np.uint8)
    h, w = inner.shape
    for bit, (dy, dx) in enumerate(NEIGHBOUR_OFFSETS):
        code |= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] << bit
    return code


def thin(bits):
    """Zhang-Suen thinning of a boolean array, returned as a new boolean array.

    Two sub-iterations alternate until neither deletes a pixel. A pixel is
    deleted when it has 3-6 set neighbours, exactly one 0->1 transition in
    the clockwise neighbour sequence, and the directional condition of the
    current sub-iteration holds. The lower bound of 3 (rather than the
    classic 2) stops two-pixel-thick diagonal limbs from being eaten away
    from their tips. When all four pixels of a 2x2 block qualify at once,
    the south-east one is kept so that small components are not erased.
    """
    bits = np.asarray(bits, dtype=bool)
    padded = np.pad(bits, 1).astype(np.uint8)
    inner = padded[1:-1, 1:-1]
    while True:
        changed = False
        for lut in (_LUT_FIRST, _LUT_SECOND):
            kill = lut[_neighbour_codes(padded)] & (inner == 1)
            # a 2x2 block whose four pixels all qualify keeps its south-east one
            block = kill[:-1, :-1] & kill[:-1, 1:] & kill[1:, :-1] & kill[1:, 1:]
            kill[1:, 1:] &= ~block
            if kill.any():
                inner[kill] = 0
                changed = True
        if not changed:
            return inner.astype(bool)


@dataclass(frozen=True)
class Skeleton:
    pixels: frozenset
    width: int
    height: int

    def to_array(self):
        out = np.zeros((self.height, self.width), dtype=bool)
        for x, y in self.pixels:
            out[y, x] = True
        return out

    @classmethod
    def from_array(cls, bits):
        ys, xs = np.nonzero(bits)
        return cls(frozenset(zip(xs.tolist(), ys.tolist())), bits.shape[1], bits.shape[0])


def skeletonize(mask):
    """Thin an instance mask to its skeleton.

    Raises
    ------
    EmptyMask
        If the mask has no set pixels.
    """
    bits = check_mask(mask)
    ys, xs = np.nonzero(bits)
    if len(xs) == 0:
        raise EmptyMask("cannot skeletonize an empty mask")
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    crop = thin(bits[y0:y1, x0:x1])
    cy, cx = np.nonzero(crop)
    pixels = frozenset(zip((cx + x0).tolist(), (cy + y0).tolist()))
    return Skeleton(pixels, bits.shape[1], bits.shape[0])


@dataclass(frozen=True)
class SkeletonGraph:
    """8-adjacency graph over skeleton pixels (nodes are ``(x, y)`` tuples)."""

    adjacency: dict

    @property
    def nodes(self):
        return sorted(self.adjacency)

    @property
    def edges(self):
        return sorted((a, b) for a, nbrs in self.adjacency.items() for b in nbrs if a < b)

    def degree(self, node):
        return len(self.adjacency[node])

    @property
    def endpoints(self):
        return [n for n in self.nodes if len(self.adjacency[n]) <= 1]

    @property
    def junctions(self):
        return [n for n in self.nodes if len(self.adjacency[n]) >= 3]

    def components(self):
        """Connected components as sorted node lists, largest first."""
        seen, comps = set(), []
        for start in self.nodes:
            if start in seen:
                continue
            seen.add(start)
            comp, stack = [], [start]
            while stack:
                n = stack.pop()
                comp.append(n)
                for m in self.adjacency[n]:
                    if m not in seen:
                        seen.add(m)
                        stack.append(m)
            comps.append(sorted(comp))
        comps.sort(key=lambda c: (-len(c), c[0]))
        return comps


def build_graph(sk):
    pixels = sk.pixels if isinstance(sk, Skeleton) else frozenset(sk)
    adjacency = {}
    for x, y in pixels:
        nbrs = []
        for dy, dx in NEIGHBOUR_OFFSETS:
            q = (x + dx, y + dy)
            if q in pixels:
                nbrs.append(q)
        adjacency[(x, y)] = tuple(sorted(nbrs))
    return SkeletonGraph(adjacency)


@dataclass(frozen=True)
class Centreline:
    path: tuple

    def __post_init__(self):
        object.__setattr__(self, "path", tuple((int(x), int(y)) for x, y in self.path))
        if not self.path:
            raise ValueError("a centreline needs at least one pixel")

    def __len__(self):
        return len(self.path)

    def as_array(self):
        return np.asarray(self.path, dtype=np.float64).reshape(-1, 2)

    def pixel_length(self):
        """Sum of step lengths along the path (1 or sqrt(2) per step)."""
        a = self.as_array()
        return float(np.hypot(*np.diff(a, axis=0).T).sum()) if len(a) > 1 else 0.0


def _bfs(adjacency, start, skip_edge=None):
    dist = {start: 0}
    parent = {start: None}
    queue = deque([start])
    while queue:
        n = queue.popleft()
        for m in adjacency[n]:
            if m in dist or (skip_edge is not None and {n, m} == skip_edge):
                continue
            dist[m] = dist[n] + 1
            parent[m] = n
            queue.append(m)
    return dist, parent


def _trace(parent, end):
    path = []
    while end is not None:
        path.append(end)
        end = parent[end]
    return path[::-1]


def _farthest(dist):
    best = max(dist.values())
    return min(n for n in dist if dist[n] == best)


def longest_path_centreline(g):
    """Longest geodesic path between two extremities of the largest component.

    Extremities are the degree-0/1 endpoints plus the two ends of a
    double-sweep BFS, which covers thinned bodies whose tips are left two
    pixels thick. Ties on length go to the lexicographically smallest
    ``(start, end)`` pair. When the component has no endpoints at all the
    ring cut open at the edge between its smallest node and that node's
    smallest neighbour is also tried, and the longer path wins.
    """
    comps = g.components()
    if len(comps) > 1:
        logger.info("skeleton has %d components; using the largest (%d px)", len(comps), len(comps[0]))
    nodes = comps[0]
    if len(nodes) == 1:
        return Centreline((nodes[0],))
    adjacency = g.adjacency
    ends = [n for n in nodes if len(adjacency[n]) <= 1]
    sweep = _farthest(_bfs(adjacency, ends[0] if ends else nodes[0])[0])
    candidates = sorted(set(ends) | {sweep, _farthest(_bfs(adjacency, sweep)[0])})

    best = None
    for a in candidates:
        dist, parent = _bfs(adjacency, a)
        for b in candidates:
            if b <= a:
                continue
            key = (-dist[b], a, b)
            if best is None or key < best[0]:
                best = (key, parent)
    (_, a, b), parent = best
    path = _trace(parent, b)

    if not ends:
        start = nodes[0]
        dist, parent = _bfs(adjacency, start, skip_edge={start, adjacency[start][0]})
        ring = _trace(parent, _farthest(dist))
        if len(ring) > len(path):
            path = ring
    return Centreline(path)


def centreline_from_mask(mask):
    return longest_path_centreline(build_graph(skeletonize(mask)))


def component_count(bits):
    """Number of 8-connected components in a boolean raster."""
    return int(ndimage.label(np.asarray(bits, dtype=bool), structure=_EIGHT)[1])


class Skeletonizer(TransformerMixin, BaseEstimator):
    """Stateless transformer from instance masks to centrelines.

    ``transform`` maps a sequence of masks to :class:`Centreline` objects
    (or raw skeletons when ``output='skeleton'``).
    """

    def __init__(self, output="centreline"):
        self.output = output

    def fit(self, X=None, y=None):
        if self.output not in ("centreline", "skeleton"):
            raise ValueError(f"output must be 'centreline' or 'skeleton', got {self.output!r}")
        return self

    def transform(self, X):
        self.fit()
        if self.output == "skeleton":
            return [skeletonize(m) for m in X]
        return [centreline_from_mask(m) for m in X]
