"""Semantic knowledge base: per-class diagonal Gaussians in feature space.

Matching picks the entry with the highest cosine similarity.  Unknown
detection uses the tail-mass likelihood

    P_m(z) = 1 - prod_i erf(|z_i - k_mi| / (sigma_mi * sqrt(2)))

which is 1 at the centre and falls towards 0 as ``z`` moves away in every
dimension.  Samples rejected by every entry are grouped online; a group
that reaches ``maturity`` members is promoted to a new entry whose centre
is the members' arithmetic mean.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DegenerateFeatureError, FormatError, InsufficientSupportError, StateError
from .io_util import atomic_write_bytes, atomic_write_text

VAR_FLOOR = 1e-6

SKB_MAGIC = b"TSPK"
SKB_VERSION = 1
_SKB_HEADER = struct.Struct("<4sHII")
_ENTRY_HEAD = struct.Struct("<qBQ")


class Provenance(enum.IntEnum):
    TRAINED = 0
    SELF_ADDED = 1


@dataclass(frozen=True)
class SkbEntry:
    class_id: int
    center: np.ndarray
    var: np.ndarray
    provenance: Provenance = Provenance.TRAINED
    support: int = 1

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "var", np.asarray(self.var, dtype=np.float64))
        if self.center.shape != self.var.shape or self.center.ndim != 1:
            raise ConfigError("entry centre and variance must be vectors of equal length")
        if self.support < 1:
            raise ConfigError("entry support must be >= 1")

    def __eq__(self, other):
        if not isinstance(other, SkbEntry):
            return NotImplemented
        return (self.class_id == other.class_id and self.provenance == other.provenance
                and self.support == other.support and np.array_equal(self.center, other.center)
                and np.array_equal(self.var, other.var))


@dataclass(frozen=True)
class Skb:
    """Ordered, immutable collection of entries.  Updates return a new Skb."""

    entries: tuple[SkbEntry, ...]
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.class_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate class ids in SKB: {ids}")
        for e in self.entries:
            if e.center.shape != (self.dim,):
                raise ConfigError(f"entry {e.class_id} has dimension {e.center.shape}, SKB has {self.dim}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([e.class_id for e in self.entries], dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        return np.stack([e.center for e in self.entries]) if self.entries else np.empty((0, self.dim))

    @property
    def variances(self) -> np.ndarray:
        return np.stack([e.var for e in self.entries]) if self.entries else np.empty((0, self.dim))

    def entry(self, class_id: int) -> SkbEntry:
        for e in self.entries:
            if e.class_id == class_id:
                return e
        raise KeyError(class_id)

    def add(self, entry: SkbEntry) -> "Skb":
        return Skb(self.entries + (entry,), self.dim)

    def next_class_id(self) -> int:
        return int(self.class_ids.max()) + 1 if self.entries else 0


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def build_skb(features, labels, var_floor: float = VAR_FLOOR) -> Skb:
    """One trained entry per label: mean and unbiased per-dimension variance."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or len(features) != len(labels):
        raise ConfigError("features must be (n, d) with one label per row")
    entries = []
    for cid in np.unique(labels):
        f = features[labels == cid]
        if len(f) < 2:
            raise InsufficientSupportError(f"class {cid} has {len(f)} feature(s); need at least 2")
        entries.append(SkbEntry(
            class_id=int(cid),
            center=f.mean(axis=0),
            var=np.maximum(f.var(axis=0, ddof=1), var_floor),
            provenance=Provenance.TRAINED,
            support=len(f),
        ))
    return Skb(tuple(entries), features.shape[1])


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------


def similarity(z, k) -> float:
    """Cosine of the angle between two feature vectors."""
    z = np.asarray(z, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    nz, nk = np.linalg.norm(z), np.linalg.norm(k)
    if nz == 0 or nk == 0:
        raise DegenerateFeatureError("cosine similarity of a zero vector")
    return float(np.clip(z @ k / (nz * nk), -1.0, 1.0))


def similarities(z, skb: Skb) -> np.ndarray:
    """Cosine similarity of each query row against each entry, shape (n, M)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    C = skb.centers
    nz = np.linalg.norm(z, axis=1, keepdims=True)
    nc = np.linalg.norm(C, axis=1)
    if np.any(nz == 0) or np.any(nc == 0):
        raise DegenerateFeatureError("cosine similarity of a zero vector")
    return np.clip((z @ C.T) / (nz * nc), -1.0, 1.0)


def _best(sims: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
    # ties go to the lowest class id
    order = np.argsort(class_ids, kind="stable")
    return class_ids[order][np.argmax(sims[:, order], axis=1)]


def match(z, skb: Skb) -> int:
    if not len(skb):
        raise StateError("cannot match against an empty SKB")
    return int(_best(similarities(z, skb), skb.class_ids)[0])


def match_many(z, skb: Skb) -> np.ndarray:
    if not len(skb):
        raise StateError("cannot match against an empty SKB")
    return _best(similarities(z, skb), skb.class_ids)


def likelihood(z, entry: SkbEntry) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != entry.center.shape:
        raise ConfigError(f"feature dim {z.shape} does not match entry dim {entry.center.shape}")
    u = np.abs(z - entry.center) / np.sqrt(2.0 * entry.var)
    return float(1.0 - np.prod(erf(u)))


def likelihoods(z, skb: Skb) -> np.ndarray:
    """P_m(z) for each query row and each entry, shape (n, M)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != skb.dim:
        raise ConfigError(f"feature dim {z.shape[1]} does not match SKB dim {skb.dim}")
    u = np.abs(z[:, None, :] - skb.centers[None]) / np.sqrt(2.0 * skb.variances[None])
    return 1.0 - np.prod(erf(u), axis=2)


@dataclass(frozen=True)
class Decision:
    known: bool
    class_id: int | None
    max_likelihood: float

    def __str__(self):
        return f"Known({self.class_id})" if self.known else "Unknown"


def detect(z, skb: Skb, tau: float) -> Decision:
    """Known(best cosine match) if any entry's likelihood reaches ``tau``."""
    if not len(skb):
        raise StateError("cannot detect against an empty SKB")
    pmax = float(likelihoods(z, skb).max())
    if pmax < tau:
        return Decision(False, None, pmax)
    return Decision(True, match(z, skb), pmax)


def calibrate_tau(features, skb: Skb, target_acceptance: float = 0.95) -> float:
    """Threshold accepting ``target_acceptance`` of the given known features.

    Returns the lower ``1 - target_acceptance`` empirical quantile (an order
    statistic, no interpolation) of the per-feature best likelihood, so at
    least ``ceil(target * n)`` features reach it.
    """
    if not 0 < target_acceptance < 1:
        raise ConfigError("target_acceptance must lie in (0, 1)")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(features) == 0:
        raise ConfigError("no features to calibrate on")
    pmax = np.sort(likelihoods(features, skb).max(axis=1))
    n = len(pmax)
    k = n - int(np.ceil(target_acceptance * n - 1e-9))
    return float(pmax[k])


# ---------------------------------------------------------------------------
# Self-update
# ---------------------------------------------------------------------------


@dataclass
class Cluster:
    members: list[np.ndarray] = field(default_factory=list)
    tags: list = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return np.mean(np.stack(self.members), axis=0)


@dataclass
class UnknownBuffer:
    """Provisional groups of rejected features awaiting promotion."""

    maturity: int = 20
    radius: float = 0.15
    var_floor: float = VAR_FLOOR
    clusters: list[Cluster] = field(default_factory=list)

    def __post_init__(self):
        if self.maturity < 2:
            raise ConfigError("maturity must be >= 2 to estimate a variance")
        if not 0 <= self.radius <= 2:
            raise ConfigError("radius is a cosine distance in [0, 2]")

    def copy(self) -> "UnknownBuffer":
        return UnknownBuffer(self.maturity, self.radius, self.var_floor,
                             [Cluster(list(c.members), list(c.tags)) for c in self.clusters])


@dataclass(frozen=True)
class Promotion:
    """Record of one cluster becoming an SKB entry."""

    class_id: int
    members: np.ndarray
    tags: tuple


def absorb_unknown(z, buffer: UnknownBuffer, skb: Skb, tag=None):
    """Route a rejected feature into the buffer; promote a cluster if it matures.

    ``z`` joins the cluster whose mean is nearest in cosine distance if that
    distance is within ``buffer.radius``, otherwise it starts a new cluster.
    Returns ``(buffer, skb, promotion)``; the inputs are not mutated and
    ``promotion`` is None unless a new entry was added.
    """
    z = np.asarray(z, dtype=np.float64)
    buf = buffer.copy()
    best, best_d = None, np.inf
    for i, c in enumerate(buf.clusters):
        d = 1.0 - similarity(z, c.mean)
        if d < best_d:
            best, best_d = i, d
    if best is None or best_d > buf.radius:
        buf.clusters.append(Cluster([z], [tag]))
        best = len(buf.clusters) - 1
    else:
        buf.clusters[best].members.append(z)
        buf.clusters[best].tags.append(tag)
    c = buf.clusters[best]
    if len(c.members) < buf.maturity:
        return buf, skb, None
    members = np.stack(c.members)
    new_id = skb.next_class_id()
    entry = SkbEntry(
        class_id=new_id,
        center=members.mean(axis=0),
        var=np.maximum(members.var(axis=0, ddof=1), buf.var_floor),
        provenance=Provenance.SELF_ADDED,
        support=len(members),
    )
    del buf.clusters[best]
    return buf, skb.add(entry), Promotion(new_id, members, tuple(c.tags))


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------


def skb_to_bytes(skb: Skb) -> bytes:
    parts = [_SKB_HEADER.pack(SKB_MAGIC, SKB_VERSION, skb.dim, len(skb))]
    for e in skb.entries:
        parts.append(_ENTRY_HEAD.pack(e.class_id, int(e.provenance), e.support))
        parts.append(e.center.astype("<f8").tobytes())
        parts.append(e.var.astype("<f8").tobytes())
    return b"".join(parts)


def skb_from_bytes(buf: bytes, path=None) -> Skb:
    if len(buf) < _SKB_HEADER.size:
        raise FormatError("truncated SKB header", offset=len(buf), path=path)
    magic, version, dim, count = _SKB_HEADER.unpack_from(buf, 0)
    if magic != SKB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SKB_MAGIC!r}", offset=0, path=path)
    if version != SKB_VERSION:
        raise FormatError(f"unsupported SKB version {version}", offset=4, path=path)
    off = _SKB_HEADER.size
    step = _ENTRY_HEAD.size + 16 * dim
    entries = []
    for _ in range(count):
        if len(buf) < off + step:
            raise FormatError("truncated SKB entry", offset=off, path=path)
        cid, prov, support = _ENTRY_HEAD.unpack_from(buf, off)
        o = off + _ENTRY_HEAD.size
        center = np.frombuffer(buf, "<f8", dim, o).astype(np.float64)
        var = np.frombuffer(buf, "<f8", dim, o + 8 * dim).astype(np.float64)
        try:
            prov = Provenance(prov)
        except ValueError:
            raise FormatError(f"bad provenance flag {prov}", offset=off + 8, path=path) from None
        entries.append(SkbEntry(cid, center, var, prov, support))
        off += step
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", offset=off, path=path)
    return Skb(tuple(entries), dim)


def save_skb(skb: Skb, path) -> None:
    atomic_write_bytes(path, skb_to_bytes(skb))


def load_skb(path) -> Skb:
    path = Path(path)
    return skb_from_bytes(path.read_bytes(), path=path)


def skb_to_json(skb: Skb) -> str:
    return json.dumps({
        "dim": skb.dim,
        "entries": [{
            "class_id": e.class_id,
            "provenance": e.provenance.name.lower(),
            "support": e.support,
            "center": e.center.tolist(),
            "var": e.var.tolist(),
        } for e in skb.entries],
    }, indent=1)


def export_skb_json(skb: Skb, path) -> None:
    atomic_write_text(path, skb_to_json(skb))
