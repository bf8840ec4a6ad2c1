"""Camera clustering over the covisibility graph.

Image pairs are weighted by the number of tracks they co-observe; pairs
under 5 counts are dropped and the median of the remaining counts sets the
inlier threshold tau. Initial clusters are connected components over edges
strictly above tau; clusters joined by at least two edges each strictly
above 0.75*tau are then merged until no merge applies. Splitting wrongly
merged, non-overlapping reconstructions is the point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .reconstruction import Reconstruction

MIN_PAIR_COUNT = 5


@dataclass
class CovisibilityGraph:
    nodes: List[int]
    counts: Dict[Tuple[int, int], int]  # unordered pairs, count >= MIN_PAIR_COUNT
    tau: Optional[float] = None

    def edges_above(self, threshold: float) -> List[Tuple[int, int]]:
        return sorted(pair for pair, c in self.counts.items() if c > threshold)


def _lower_median(values: List[int]) -> float:
    values = sorted(values)
    return float(values[(len(values) - 1) // 2])


def build_covisibility(recon: Reconstruction) -> CovisibilityGraph:
    """Count co-observed tracks per registered image pair; drop weak pairs;
    tau is the (lower) median of the surviving counts."""
    registered = set(recon.registered_ids())
    counts: Dict[Tuple[int, int], int] = {}
    for track in recon.live_tracks():
        ids = sorted({i for i in track.image_ids() if i in registered})
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                pair = (ids[a], ids[b])
                counts[pair] = counts.get(pair, 0) + 1
    counts = {p: c for p, c in counts.items() if c >= MIN_PAIR_COUNT}
    tau = _lower_median(list(counts.values())) if counts else None
    return CovisibilityGraph(sorted(registered), counts, tau)


def _components(nodes: List[int], edges: List[Tuple[int, int]]) -> List[Set[int]]:
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comps: Dict[int, Set[int]] = {}
    for n in nodes:
        comps.setdefault(find(n), set()).add(n)
    return list(comps.values())


def cluster_cameras(graph: CovisibilityGraph) -> List[List[int]]:
    """Strong components over edges with count > tau, then repeated merging
    of cluster pairs joined by >= 2 edges with count > 0.75*tau.

    Images without a strong edge stay singleton clusters. Output sorted by
    descending size, ties broken by smallest image id; merge candidates are
    processed in ascending cluster-id order per pass for determinism.
    """
    if graph.tau is None:
        return [sorted(graph.nodes)] if graph.nodes else []
    tau = graph.tau
    strong = graph.edges_above(tau)
    clusters = _components(graph.nodes, strong)
    merge_edges = graph.edges_above(0.75 * tau)

    changed = True
    while changed:
        changed = False
        cluster_of: Dict[int, int] = {}
        for k, cl in enumerate(clusters):
            for n in cl:
                cluster_of[n] = k
        link_count: Dict[Tuple[int, int], int] = {}
        for a, b in merge_edges:
            ca, cb = cluster_of[a], cluster_of[b]
            if ca == cb:
                continue
            key = (min(ca, cb), max(ca, cb))
            link_count[key] = link_count.get(key, 0) + 1
        for (ca, cb) in sorted(link_count):
            if link_count[(ca, cb)] >= 2:
                clusters[ca] = clusters[ca] | clusters[cb]
                clusters[cb] = set()
                changed = True
                break  # recompute memberships, then look again
        clusters = [c for c in clusters if c]

    out = [sorted(c) for c in clusters]
    out.sort(key=lambda c: (-len(c), c[0]))
    return out
