"""Site coordinates and the m-nearest-neighbour taper sets.

Every downstream sparsity pattern (weight matrix rows, reverse index,
conditional updates) is induced by the taper sets built here, so the
ordering rules are pinned down exactly: ascending distance, ties broken
by ascending site index, self always a member (distance 0).
"""

from dataclasses import dataclass
import csv
import warnings

import numpy as np
from scipy.spatial import cKDTree

__all__ = ["Location", "SpatialFrame", "euclidean_distance", "build_taper_sets",
           "load_locations", "write_locations"]

# Above this many sites the kd-tree path is used; it must agree with the
# brute-force path exactly, including tie-breaks.
_KDTREE_CUTOFF = 512


@dataclass(frozen=True)
class Location:
    """A fixed site with planar (projected) coordinates."""
    site_id: str
    easting: float
    northing: float

    def __post_init__(self):
        if not (np.isfinite(self.easting) and np.isfinite(self.northing)):
            raise ValueError(f"non-finite coordinate for site {self.site_id!r}")


def euclidean_distance(a: Location, b: Location) -> float:
    """Planar Euclidean distance between two locations."""
    return float(np.hypot(a.easting - b.easting, a.northing - b.northing))


@dataclass(frozen=True)
class SpatialFrame:
    """Sites plus, for each site, the ordered indices of its m nearest sites.

    ``taper_sets[k, r]`` is the index of the (r+1)-th closest site to site k
    (self included at distance 0); ``taper_dists`` holds the matching
    distances. ``m`` is the effective taper size min(m_requested, K).
    """
    locations: tuple[Location, ...]
    taper_sets: np.ndarray      # (K, m) int
    taper_dists: np.ndarray     # (K, m) float
    m: int
    m_requested: int

    @property
    def K(self) -> int:
        return len(self.locations)

    @property
    def coords(self) -> np.ndarray:
        return np.array([(s.easting, s.northing) for s in self.locations])

    def site_ids(self) -> list[str]:
        return [s.site_id for s in self.locations]


def _pairwise_distances(coords: np.ndarray) -> np.ndarray:
    dx = coords[:, 0][:, None] - coords[:, 0][None, :]
    dy = coords[:, 1][:, None] - coords[:, 1][None, :]
    return np.hypot(dx, dy)


def _taper_bruteforce(coords: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    K = coords.shape[0]
    D = _pairwise_distances(coords)
    idx = np.arange(K)
    sets = np.empty((K, m), dtype=np.int64)
    for k in range(K):
        order = np.lexsort((idx, D[k]))
        sets[k] = order[:m]
    dists = D[np.arange(K)[:, None], sets]
    return sets, dists


def _taper_kdtree(coords: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    # The tree only proposes candidates; ranking is redone with the same
    # arithmetic and tie-break as the brute-force path so results match it
    # exactly. The candidate radius is inflated slightly to be safe against
    # rounding differences in the tree's own distance computation.
    K = coords.shape[0]
    tree = cKDTree(coords)
    d, _ = tree.query(coords, k=m)
    radius = d[:, -1] * (1.0 + 1e-9) + 1e-12
    sets = np.empty((K, m), dtype=np.int64)
    dists = np.empty((K, m))
    for k in range(K):
        cand = np.asarray(tree.query_ball_point(coords[k], radius[k]), dtype=np.int64)
        dk = np.hypot(coords[cand, 0] - coords[k, 0], coords[cand, 1] - coords[k, 1])
        order = np.lexsort((cand, dk))[:m]
        sets[k] = cand[order]
        dists[k] = dk[order]
    return sets, dists


def build_taper_sets(locations: list[Location], m: int, method: str = "auto") -> SpatialFrame:
    """Build the frame holding each site's m nearest sites (self included).

    m > K is clamped to K with a warning. ``method`` picks the neighbour
    search: "bruteforce" (the reference O(K^2) sort), "kdtree", or "auto".
    """
    if len(locations) < 1:
        raise ValueError("need at least one location")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    ids = [s.site_id for s in locations]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate site_id values: {dup}")
    K = len(locations)
    m_eff = min(m, K)
    if m > K:
        warnings.warn(f"m={m} exceeds K={K}; clamped to {K}", stacklevel=2)

    coords = np.array([(s.easting, s.northing) for s in locations], dtype=float)
    if method == "auto":
        method = "kdtree" if K > _KDTREE_CUTOFF else "bruteforce"
    if method == "bruteforce":
        sets, dists = _taper_bruteforce(coords, m_eff)
    elif method == "kdtree":
        sets, dists = _taper_kdtree(coords, m_eff)
    else:
        raise ValueError(f"unknown method {method!r}")
    sets.setflags(write=False)
    dists.setflags(write=False)
    return SpatialFrame(tuple(locations), sets, dists, m_eff, m)


def load_locations(path) -> list[Location]:
    """Read a `site_id,easting,northing` CSV; row order defines the site index."""
    locations = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["site_id", "easting", "northing"]:
            raise ValueError(f"{path}: expected header 'site_id,easting,northing', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            sid, e, n = row
            try:
                loc = Location(sid, float(e), float(n))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            locations.append(loc)
    if not locations:
        raise ValueError(f"{path}: no locations")
    ids = [s.site_id for s in locations]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate site_id values")
    return locations


def write_locations(locations, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "easting", "northing"])
        for s in locations:
            writer.writerow([s.site_id, repr(float(s.easting)), repr(float(s.northing))])
