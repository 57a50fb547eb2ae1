"""Class prototypes by masked average pooling, and their hierarchy.

Features come from any upstream network, exported as tensor files (see
:func:`write_tensor`). A prototype is the mean feature vector over every pixel
of a class across a set of images. Prototype distances are Euclidean and feed
an agglomerative clustering whose merge tree is serialised as nested JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

TENSOR_MAGIC = b"VCTF"


# -- tensor files ---------------------------------------------------------------
# Layout: b"VCTF", uint32 ndim, ndim x uint32 shape, float32 data, all little-endian.


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    header = TENSOR_MAGIC + np.array([a.ndim, *a.shape], "<u4").tobytes()
    return header + np.ascontiguousarray(a, "<f4").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise ValueError("not a tensor file (bad magic)")
    ndim = int(np.frombuffer(data[4:8], "<u4")[0])
    shape = tuple(int(s) for s in np.frombuffer(data[8:8 + 4 * ndim], "<u4"))
    body = np.frombuffer(data[8 + 4 * ndim:], "<f4")
    if body.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"tensor body holds {body.size} values, header says shape {shape}")
    return body.reshape(shape).astype(np.float32)


def write_tensor(path, a: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(a))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


# -- types ------------------------------------------------------------------------


@dataclass
class FeatureMap:
    """Per-pixel feature vectors, shape ``(height, width, channels)``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, np.float64)
        if self.values.ndim == 2:
            self.values = self.values[..., None]
        if self.values.ndim != 3 or self.values.shape[2] < 1:
            raise ValueError(f"feature map must be (H, W, C), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map has non-finite values")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[:2]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class ClassMask:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("class mask must be 2-D")

    def resized(self, shape: Tuple[int, int]) -> "ClassMask":
        """Nearest-neighbour resampling to ``shape`` (sampling at cell centres)."""
        h, w = self.labels.shape
        H, W = shape
        if (h, w) == (H, W):
            return self
        rows = np.minimum(((np.arange(H) + 0.5) * h / H).astype(int), h - 1)
        cols = np.minimum(((np.arange(W) + 0.5) * w / W).astype(int), w - 1)
        return ClassMask(self.labels[np.ix_(rows, cols)])


@dataclass(frozen=True)
class Prototype:
    class_id: int
    vector: np.ndarray
    support: int


@dataclass
class PoolAccumulator:
    """Running ``(sum, count)`` per class; merging is commutative."""

    sums: Dict[int, np.ndarray] = field(default_factory=dict)
    counts: Dict[int, int] = field(default_factory=dict)

    def add(self, fm: FeatureMap, mask: ClassMask, classes: Optional[Iterable[int]] = None,
            l2_normalize: bool = False) -> "PoolAccumulator":
        labels = mask.resized(fm.shape).labels
        feats = fm.values
        if l2_normalize:
            norms = np.linalg.norm(feats, axis=-1, keepdims=True)
            feats = feats / np.where(norms > 0, norms, 1.0)
        wanted = np.unique(labels) if classes is None else classes
        for c in wanted:
            sel = labels == c
            n = int(np.count_nonzero(sel))
            if n == 0:
                continue
            c = int(c)
            s = feats[sel].sum(axis=0)
            if c in self.sums:
                self.sums[c] = self.sums[c] + s
                self.counts[c] += n
            else:
                self.sums[c] = s
                self.counts[c] = n
        return self

    def merge(self, other: "PoolAccumulator") -> "PoolAccumulator":
        for c in sorted(other.sums):
            if c in self.sums:
                self.sums[c] = self.sums[c] + other.sums[c]
                self.counts[c] += other.counts[c]
            else:
                self.sums[c] = other.sums[c].copy()
                self.counts[c] = other.counts[c]
        return self

    def prototype(self, c: int) -> Prototype:
        if c not in self.counts:
            raise ValueError(f"class {c} has no pixels in the batch")
        return Prototype(c, self.sums[c] / self.counts[c], self.counts[c])

    def prototypes(self) -> List[Prototype]:
        return [self.prototype(c) for c in sorted(self.counts)]


def masked_average_pool(
    batch: Sequence[Tuple[FeatureMap, ClassMask]], c: int, l2_normalize: bool = False
) -> Prototype:
    """Mean feature over every pixel labelled ``c`` across the batch.

    Masks are resampled to the feature resolution first. Raises
    ``ValueError`` if no pixel carries class ``c``.
    """
    acc = PoolAccumulator()
    for fm, mask in batch:
        acc.add(fm, mask, classes=[c], l2_normalize=l2_normalize)
    return acc.prototype(c)


def pool_all(batch, ignore: Iterable[int] = (), l2_normalize: bool = False) -> List[Prototype]:
    acc = PoolAccumulator()
    for fm, mask in batch:
        acc.add(fm, mask, l2_normalize=l2_normalize)
    skip = set(int(i) for i in ignore)
    return [p for p in acc.prototypes() if p.class_id not in skip]


def pairwise_distances(ps: Sequence) -> np.ndarray:
    """Euclidean distance matrix between prototypes (or raw vectors)."""
    vecs = [np.asarray(p.vector if isinstance(p, Prototype) else p, np.float64) for p in ps]
    dims = {v.shape for v in vecs}
    if len(dims) > 1:
        raise ValueError(f"prototypes differ in dimensionality: {sorted(dims)}")
    x = np.stack(vecs) if vecs else np.zeros((0, 0))
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


# -- clustering -------------------------------------------------------------------

LINKAGES = ("average", "single", "complete")


@dataclass
class Dendrogram:
    """Merge tree. Leaves are nodes ``0..n-1``; merge ``k`` creates node ``n+k``."""

    leaves: List[int]
    merges: List[Tuple[int, int, float]]
    names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.leaves)
        if n and len(self.merges) != n - 1:
            raise ValueError(f"{n} leaves need {n - 1} merges, got {len(self.merges)}")

    @property
    def heights(self) -> List[float]:
        return [h for _, _, h in self.merges]

    def partitions(self) -> List[List[Tuple[int, ...]]]:
        """Leaf partition after each merge, clusters as sorted leaf tuples."""
        n = len(self.leaves)
        members = {i: (i,) for i in range(n)}
        out = []
        for k, (a, b, _) in enumerate(self.merges):
            members[n + k] = tuple(sorted(members.pop(a) + members.pop(b)))
            out.append(sorted(members.values()))
        return out


def agglomerative_cluster(d: np.ndarray, linkage: str = "average") -> Dendrogram:
    """Hierarchical clustering of a symmetric distance matrix.

    Merges the closest pair of clusters until one remains. Ties go to the
    lexicographically smallest ``(left node, right node)`` pair.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}; choose from {LINKAGES}")
    d = np.asarray(d, np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    n = d.shape[0]
    if n < 2:
        raise ValueError("clustering needs at least 2 items")
    if not np.array_equal(d, d.T) or np.any(np.diag(d) != 0) or np.any(d < 0):
        raise ValueError("distance matrix must be symmetric, non-negative, zero diagonal")

    total = 2 * n - 1
    # average linkage keeps sums of leaf distances; the others keep the linkage value
    link = np.full((total, total), np.inf)
    link[:n, :n] = d
    size = np.zeros(total, np.int64)
    size[:n] = 1
    active = list(range(n))
    merges = []
    for k in range(n - 1):
        idx = np.array(active)
        sub = link[np.ix_(idx, idx)]
        if linkage == "average":
            sub = sub / np.outer(size[idx], size[idx])
        iu = np.triu_indices(len(idx), 1)
        vals = sub[iu]
        best = int(np.argmin(vals))
        a, b = int(idx[iu[0][best]]), int(idx[iu[1][best]])
        h = float(vals[best])
        new = n + k
        others = [i for i in active if i not in (a, b)]
        for o in others:
            if linkage == "average":
                v = link[a, o] + link[b, o]
            elif linkage == "single":
                v = min(link[a, o], link[b, o])
            else:
                v = max(link[a, o], link[b, o])
            link[new, o] = link[o, new] = v
        size[new] = size[a] + size[b]
        active = others + [new]
        active.sort()
        merges.append((a, b, h))
    return Dendrogram(list(range(n)), merges)


# -- JSON -------------------------------------------------------------------------


def dendrogram_to_dict(dg: Dendrogram) -> dict:
    n = len(dg.leaves)

    def leaf(i):
        c = dg.leaves[i]
        return {"node": i, "class_id": c, "name": dg.names.get(c, str(c))}

    nodes = {i: leaf(i) for i in range(n)}
    for k, (a, b, h) in enumerate(dg.merges):
        nodes[n + k] = {"node": n + k, "height": h, "children": [nodes.pop(a), nodes.pop(b)]}
    (root,) = nodes.values() if nodes else ({},)
    return {
        "leaves": [leaf(i) for i in range(n)],
        "heights": dg.heights,
        "tree": root,
    }


def serialize_dendrogram(dg: Dendrogram) -> str:
    return json.dumps(dendrogram_to_dict(dg), indent=2)


def deserialize_dendrogram(doc) -> Dendrogram:
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    leaves_doc = sorted(doc["leaves"], key=lambda r: r["node"])
    leaves = [int(r["class_id"]) for r in leaves_doc]
    names = {int(r["class_id"]): r["name"] for r in leaves_doc}
    found = {}

    def walk(node):
        if "children" in node:
            left, right = node["children"]
            found[int(node["node"])] = (int(left["node"]), int(right["node"]), float(node["height"]))
            walk(left)
            walk(right)

    walk(doc["tree"])
    n = len(leaves)
    merges = [found[n + k] for k in range(len(found))]
    return Dendrogram(leaves, merges, names)


def cluster_prototypes(ps: Sequence[Prototype], names: Optional[Mapping[int, str]] = None,
                       linkage: str = "average") -> Dendrogram:
    dg = agglomerative_cluster(pairwise_distances(ps), linkage)
    dg.leaves = [p.class_id for p in ps]
    dg.names = dict(names or {})
    return dg


def prototypes_to_json(ps: Sequence[Prototype], names: Optional[Mapping[int, str]] = None) -> str:
    names = names or {}
    return json.dumps(
        [
            {"class_id": p.class_id, "name": names.get(p.class_id, str(p.class_id)),
             "support": p.support, "vector": [float(x) for x in p.vector]}
            for p in ps
        ],
        indent=2,
    )


def prototypes_from_json(text: str) -> Tuple[List[Prototype], Dict[int, str]]:
    rows = json.loads(text)
    ps = [Prototype(int(r["class_id"]), np.array(r["vector"], float), int(r["support"])) for r in rows]
    return ps, {int(r["class_id"]): r["name"] for r in rows}
