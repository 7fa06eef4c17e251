"""Cross-view person matching through ground-plane feet assignment.

Each detection is reduced to a :class:`FootPair`: its two heels rectified
into a common ground frame, summarized by their midpoint (anchor) and the
left-to-right heel vector (stride). View pairs around a ring are matched by
solving a linear assignment over edge costs built from foot location,
stride length and stride direction; the pairwise matches are then merged
into multi-view person tracks, keeping cheaper edges first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detections import Detection2D
from .errors import MissingFeet, RingTopologyError, ViewMismatch
from .homography import GroundHomography, rectify, rectify_points
from .lap import Assignment, solve_lap

log = logging.getLogger(__name__)

STRIDE_EPS = 1e-6


@dataclass(frozen=True)
class MatchingConfig:
    k1: float = 1.0  # per rectified unit of anchor distance
    k2: float = 1.0  # per rectified unit of stride-length difference
    k3: float = 0.5  # on |sin| of the angle between strides
    gate: float = 1.0
    c_min: float = 0.05  # minimum heel confidence
    lap_method: str = "jv"
    # let the solver leave a detection unmatched at cost gate/2 instead of
    # forcing min(n, m) pairs and gating afterwards
    gate_in_lap: bool = False

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.k1, self.k2, self.k3)


@dataclass(frozen=True)
class FootPair:
    """Heels of one detection, rectified into the ground frame `frame`."""

    view: int
    index: int
    left: np.ndarray
    right: np.ndarray
    frame: int
    left_rect: np.ndarray
    right_rect: np.ndarray
    detection: Detection2D | None = field(default=None, compare=False, repr=False)

    @property
    def anchor(self) -> np.ndarray:
        return 0.5 * (self.left_rect + self.right_rect)

    @property
    def stride(self) -> np.ndarray:
        return self.right_rect - self.left_rect


def extract_foot_pairs(
    det: Detection2D,
    h_to_ref: GroundHomography,
    c_min: float = 0.05,
    heel_indices: tuple[int, int] = (19, 22),
) -> FootPair:
    """Rectify the heels of `det` into the reference frame of `h_to_ref`.

    Raises:
        MissingFeet: a heel is absent or scored below `c_min`.
        ViewMismatch: `h_to_ref` does not start at the detection's view.
    """
    if h_to_ref.from_view != det.view:
        raise ViewMismatch(f"homography starts at view {h_to_ref.from_view}, detection is in {det.view}")
    li, ri = heel_indices
    for j in (li, ri):
        if not det.present[j] or det.confidence[j] < c_min:
            raise MissingFeet(f"view {det.view} person {det.person_index}: heel {j} missing")
    left, right = det.joints[li], det.joints[ri]
    return FootPair(
        view=det.view,
        index=det.person_index,
        left=left.copy(),
        right=right.copy(),
        frame=h_to_ref.to_view,
        left_rect=rectify(h_to_ref, left),
        right_rect=rectify(h_to_ref, right),
        detection=det,
    )


def collect_foot_pairs(
    detections: Sequence[Detection2D],
    h_to_ref: GroundHomography,
    c_min: float = 0.05,
    heel_indices: tuple[int, int] = (19, 22),
) -> tuple[list[FootPair], list[int]]:
    """Foot pairs for one view plus the indices routed to the unmatched pool."""
    feet, missing = [], []
    for det in detections:
        try:
            feet.append(extract_foot_pairs(det, h_to_ref, c_min, heel_indices))
        except MissingFeet as e:
            log.debug("excluded from matching: %s", e)
            missing.append(det.person_index)
    return feet, missing


def _check_views(fp_a: FootPair, fp_b: FootPair, h: GroundHomography) -> None:
    if fp_b.frame != h.from_view or fp_a.frame != h.to_view:
        raise ViewMismatch(
            f"homography maps {h.from_view}->{h.to_view} but feet live in frames "
            f"{fp_b.frame} and {fp_a.frame}"
        )


def edge_cost(
    fp_a: FootPair,
    fp_b: FootPair,
    h: GroundHomography,
    weights: tuple[float, float, float] = (1.0, 1.0, 0.5),
) -> float:
    """Cost of matching `fp_a` with `fp_b`, `h` mapping b's frame onto a's.

    k1 * anchor distance + k2 * stride-length difference + k3 * |sin| of the
    angle between strides. The stride terms are skipped when either stride
    is shorter than 1e-6.
    """
    _check_views(fp_a, fp_b, h)
    k1, k2, k3 = weights
    if min(weights) < 0:
        raise ValueError("weights must be non-negative")
    p_l = fp_a.anchor
    p_m = rectify(h, fp_b.anchor)
    v_l = fp_a.stride
    v_m = rectify(h, fp_b.right_rect) - rectify(h, fp_b.left_rect)
    cost = k1 * float(np.linalg.norm(p_l - p_m))
    nl, nm = float(np.linalg.norm(v_l)), float(np.linalg.norm(v_m))
    if nl >= STRIDE_EPS and nm >= STRIDE_EPS:
        cross = v_l[0] * v_m[1] - v_l[1] * v_m[0]
        cost += k2 * abs(nl - nm) + k3 * abs(cross) / (nl * nm)
    return cost


def cost_matrix(
    feet_a: Sequence[FootPair],
    feet_b: Sequence[FootPair],
    h: GroundHomography,
    weights: tuple[float, float, float] = (1.0, 1.0, 0.5),
) -> np.ndarray:
    """All edge costs between two views at once; same values as edge_cost."""
    if not feet_a or not feet_b:
        return np.zeros((len(feet_a), len(feet_b)))
    for fp in feet_a:
        _check_views(fp, feet_b[0], h)
    for fp in feet_b:
        _check_views(feet_a[0], fp, h)
    k1, k2, k3 = weights
    la = np.array([f.left_rect for f in feet_a])
    ra = np.array([f.right_rect for f in feet_a])
    lb = rectify_points(h, np.array([f.left_rect for f in feet_b]))
    rb = rectify_points(h, np.array([f.right_rect for f in feet_b]))
    pb = rectify_points(h, np.array([f.anchor for f in feet_b]))
    pa = 0.5 * (la + ra)
    va, vb = ra - la, rb - lb
    cost = k1 * np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    na, nb = np.linalg.norm(va, axis=1), np.linalg.norm(vb, axis=1)
    cross = va[:, None, 0] * vb[None, :, 1] - va[:, None, 1] * vb[None, :, 0]
    valid = (na[:, None] >= STRIDE_EPS) & (nb[None, :] >= STRIDE_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        stride_terms = k2 * np.abs(na[:, None] - nb[None, :]) + k3 * np.abs(cross) / (na[:, None] * nb[None, :])
    return cost + np.where(valid, stride_terms, 0.0)


def match_pair(
    view_a_feet: Sequence[FootPair],
    view_b_feet: Sequence[FootPair],
    h: GroundHomography,
    weights: tuple[float, float, float] = (1.0, 1.0, 0.5),
    gate: float = 1.0,
    method: str = "jv",
    view_a: int | None = None,
    view_b: int | None = None,
    gate_in_lap: bool = False,
) -> Assignment:
    """Optimal feet assignment between two views, dropping pairs above `gate`.

    Pairs and unmatched lists are expressed in detection indices
    (``FootPair.index``). Pass `view_a`/`view_b` when a side may be empty.

    By default the assignment pairs min(n, m) detections and the gate applies
    afterwards. In a crowd where each view misses different people, those
    forced pairs can displace a chain of correct ones. With `gate_in_lap`
    every detection may instead stay unmatched at cost ``gate / 2``, so a pair
    is formed only when it costs less than leaving both sides alone.
    """
    for feet in (view_a_feet, view_b_feet):
        if len({f.view for f in feet}) > 1:
            raise ViewMismatch("feet of one side must all come from the same view")
    if view_a is None and view_a_feet:
        view_a = view_a_feet[0].view
    if view_b is None and view_b_feet:
        view_b = view_b_feet[0].view
    C = cost_matrix(view_a_feet, view_b_feet, h, weights)
    n, m = C.shape
    if gate_in_lap and n and m:
        big = 10.0 * (n + m) * (float(C.max()) + gate + 1.0)
        A = np.zeros((n + m, n + m))
        A[:n, :m] = C
        A[:n, m:] = np.where(np.eye(n, dtype=bool), gate / 2, big)
        A[n:, :m] = np.where(np.eye(m, dtype=bool), gate / 2, big)
        raw = solve_lap(A, method=method)
        raw_pairs = [(l, k, c) for l, k, c in raw.pairs if l < n and k < m]
    else:
        raw_pairs = solve_lap(C, method=method).pairs
    ia = [f.index for f in view_a_feet]
    ib = [f.index for f in view_b_feet]
    pairs, rejected = [], []
    for l, m, c in raw_pairs:
        if c > gate:
            rejected.append((ia[l], ib[m], c))
        else:
            pairs.append((ia[l], ib[m], c))
    matched_a = {l for l, _, _ in pairs}
    matched_b = {m for _, m, _ in pairs}
    return Assignment(
        pairs=tuple(pairs),
        unmatched_a=tuple(i for i in ia if i not in matched_a),
        unmatched_b=tuple(i for i in ib if i not in matched_b),
        view_a=view_a,
        view_b=view_b,
        meta={"cost": C, "rows": ia, "cols": ib, "gated": rejected},
    )


@dataclass(frozen=True)
class PersonTrack:
    """Detections of one hypothesized person, at most one per view."""

    members: Mapping[int, int]
    closed: bool = False
    cost: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "members", dict(sorted(self.members.items())))

    @property
    def views(self) -> list[int]:
        return list(self.members)

    def links(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        """All unordered (view, detection) pairs inside this track."""
        items = list(self.members.items())
        return [(items[a], items[b]) for a in range(len(items)) for b in range(a + 1, len(items))]


@dataclass(frozen=True)
class PersonTrackSet:
    persons: tuple[PersonTrack, ...]

    def __post_init__(self):
        persons = tuple(self.persons)
        seen = set()
        for p in persons:
            for key in p.members.items():
                if key in seen:
                    raise ValueError(f"detection {key} assigned to two persons")
                seen.add(key)
        object.__setattr__(self, "persons", persons)

    def __len__(self) -> int:
        return len(self.persons)

    def __iter__(self):
        return iter(self.persons)

    def to_records(self) -> list[dict]:
        return [
            {"members": [[v, d] for v, d in p.members.items()], "closed": p.closed, "cost": p.cost}
            for p in self.persons
        ]

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "PersonTrackSet":
        return cls(
            tuple(
                PersonTrack({int(v): int(d) for v, d in r["members"]}, r.get("closed", False), r.get("cost", 0.0))
                for r in records
            )
        )


def ring_order(views: Sequence[int]) -> list[tuple[int, int]]:
    """View pairs (v1, v2), (v2, v3), ..., (vn, v1); a single pair for two views."""
    views = list(views)
    if len(views) < 2:
        return []
    if len(views) == 2:
        return [(views[0], views[1])]
    return [(views[i], views[(i + 1) % len(views)]) for i in range(len(views))]


def _check_ring(pairwise: Sequence[Assignment]) -> list[int]:
    edges = []
    for a in pairwise:
        if a.view_a is None or a.view_b is None or a.view_a == a.view_b:
            raise RingTopologyError("every assignment needs two distinct view indices")
        edges.append(frozenset((a.view_a, a.view_b)))
    views = sorted({v for e in edges for v in e})
    if len(set(edges)) != len(edges):
        # the two-view ring 1 -> 2 -> 1 may list the same pair twice
        if not (len(views) == 2 and len(edges) == 2):
            raise RingTopologyError("a view pair is matched more than once")
    if len(views) == 2:
        return views
    degree = {v: 0 for v in views}
    for e in edges:
        for v in e:
            degree[v] += 1
    if any(d != 2 for d in degree.values()) or len(edges) != len(views):
        raise RingTopologyError(f"view pairs {sorted(map(sorted, edges))} do not form a ring")
    # a union of several disjoint rings also has all degrees 2
    adj = {v: [] for v in views}
    for e in edges:
        a, b = tuple(e)
        adj[a].append(b)
        adj[b].append(a)
    seen, stack = {views[0]}, [views[0]]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    if len(seen) != len(views):
        raise RingTopologyError("view pairs form more than one ring")
    return views


def merge_multiview(
    pairwise: Sequence[Assignment],
    detections_per_view: Mapping[int, int] | None = None,
) -> PersonTrackSet:
    """Merge pairwise assignments over a ring of views into person tracks.

    Edges are accepted cheapest first; an edge is dropped when it would put
    two detections of the same view into one person, so inconsistent chains
    are broken at their most expensive links. A person whose edges close the
    ring is marked ``closed``. Detections without any kept edge become
    singletons.

    Args:
        pairwise: assignments whose view pairs form the ring.
        detections_per_view: number of detections in each view, so that
            detections missing from every assignment still get a singleton.
    """
    _check_ring(pairwise)
    nodes: set[tuple[int, int]] = set()
    edges = []
    for a in pairwise:
        for l, m, c in a.pairs:
            edges.append((float(c), (a.view_a, l), (a.view_b, m)))
            nodes.update([(a.view_a, l), (a.view_b, m)])
        nodes.update((a.view_a, l) for l in a.unmatched_a)
        nodes.update((a.view_b, m) for m in a.unmatched_b)
    for v, n in (detections_per_view or {}).items():
        nodes.update((v, i) for i in range(n))

    parent = {n: n for n in nodes}
    members = {n: {n[0]: n[1]} for n in nodes}
    closed = {n: False for n in nodes}
    cost = {n: 0.0 for n in nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for c, u, w in sorted(edges):
        ru, rw = find(u), find(w)
        if ru == rw:
            closed[ru] = True
            cost[ru] += c
            continue
        if members[ru].keys() & members[rw].keys():
            log.debug("dropping edge %s-%s (cost %.4g): view conflict", u, w, c)
            continue
        parent[rw] = ru
        members[ru].update(members.pop(rw))
        cost[ru] += cost.pop(rw) + c
        closed[ru] = closed[ru] or closed.pop(rw)

    roots = sorted({find(n) for n in nodes}, key=lambda r: min(members[r].items()))
    return PersonTrackSet(tuple(PersonTrack(members[r], closed[r], cost[r]) for r in roots))


def match_views(
    detections: Mapping[int, Sequence[Detection2D]],
    to_reference: Mapping[int, GroundHomography],
    config: MatchingConfig = MatchingConfig(),
    heel_indices: tuple[int, int] = (19, 22),
) -> tuple[PersonTrackSet, list[Assignment]]:
    """Full matching stage for one frame.

    Every view's heels are rectified into the common reference frame, each
    ring pair is assigned, and the results are merged.
    """
    views = sorted(detections)
    counts = {v: len(detections[v]) for v in views}
    if len(views) < 2:
        persons = [PersonTrack({v: i}) for v in views for i in range(counts[v])]
        return PersonTrackSet(tuple(persons)), []
    feet = {}
    for v in views:
        if v not in to_reference:
            log.warning("view %d has no homography to the reference frame; its detections stay unmatched", v)
            feet[v] = []
            continue
        feet[v], _ = collect_foot_pairs(detections[v], to_reference[v], config.c_min, heel_indices)
    frames = {to_reference[v].to_view for v in views if v in to_reference}
    ref = frames.pop() if len(frames) == 1 else None
    if frames:
        raise ViewMismatch("homographies point at different reference frames")
    same = GroundHomography.identity(ref if ref is not None else -1)
    pairwise = [
        match_pair(feet[a], feet[b], same, config.weights, config.gate, config.lap_method, view_a=a, view_b=b,
                   gate_in_lap=config.gate_in_lap)
        for a, b in ring_order(views)
    ]
    return merge_multiview(pairwise, counts), pairwise
