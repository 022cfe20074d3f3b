"""Residual k-means codebook mapping item embeddings to hierarchical semantic IDs."""
from __future__ import annotations

import io
import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Item

SID_BEGIN = "<sid_begin>"
SID_END = "<sid_end>"
CODEBOOK_FORMAT_VERSION = 1
_SID_RE = re.compile(r"<sid_begin>((?:s\d+_\d+ ?)+)<sid_end>")


@dataclass(frozen=True, order=True)
class Sid:
    codes: tuple[int, ...]

    def __post_init__(self):
        if not self.codes or any(c < 0 for c in self.codes):
            raise ValueError(f"invalid sid codes {self.codes}")

    def __iter__(self):
        return iter(self.codes)

    def __len__(self) -> int:
        return len(self.codes)

    def __getitem__(self, level: int) -> int:
        return self.codes[level]

    def prefix(self, level: int) -> tuple[int, ...]:
        return self.codes[:level]

    def to_text(self) -> str:
        body = " ".join(f"s{l + 1}_{c}" for l, c in enumerate(self.codes))
        return f"{SID_BEGIN}{body}{SID_END}"

    def __str__(self) -> str:
        return self.to_text()

    @classmethod
    def of(cls, *codes: int) -> "Sid":
        return cls(tuple(int(c) for c in codes))

    @classmethod
    def parse(cls, text: str) -> "Sid":
        m = _SID_RE.fullmatch(text.strip())
        if m is None:
            raise ValueError(f"not a serialized sid: {text!r}")
        return _sid_from_body(m.group(1))


def _sid_from_body(body: str) -> Sid:
    codes = []
    for level, tok in enumerate(body.split(), start=1):
        lv, _, code = tok[1:].partition("_")
        if int(lv) != level:
            raise ValueError(f"sid token {tok!r} out of level order")
        codes.append(int(code))
    return Sid(tuple(codes))


def find_sids(text: str) -> tuple[list[Sid], int]:
    """All well-formed serialized sids in ``text`` plus the count of malformed spans."""
    found, bad = [], 0
    for m in _SID_RE.finditer(text):
        try:
            found.append(_sid_from_body(m.group(1)))
        except ValueError:
            bad += 1
    bad += max(0, text.count(SID_BEGIN) - len(found) - bad)
    return found, bad


@dataclass(frozen=True)
class SidVocabulary:
    """Token layout shared by prompts and the backbone.

    Level tokens ``s{l}_{k}`` occupy contiguous id ranges, followed by the two
    boundary tokens. The backbone's begin-of-sequence token sits after those
    and is not counted among the tokens added to a language model.
    """

    sizes: tuple[int, ...]

    @property
    def level_offsets(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    def level_range(self, level: int) -> range:
        off = self.level_offsets[level]
        return range(off, off + self.sizes[level])

    @property
    def sid_begin(self) -> int:
        return sum(self.sizes)

    @property
    def sid_end(self) -> int:
        return sum(self.sizes) + 1

    @property
    def bos(self) -> int:
        return sum(self.sizes) + 2

    @property
    def n_added_tokens(self) -> int:
        return sum(self.sizes) + 2

    def token_strings(self) -> list[str]:
        toks = [f"s{l + 1}_{k}" for l, k_l in enumerate(self.sizes) for k in range(k_l)]
        return toks + [SID_BEGIN, SID_END]

    def token_id(self, level: int, code: int) -> int:
        if not 0 <= code < self.sizes[level]:
            raise ValueError(f"code {code} outside level {level + 1} range")
        return self.level_offsets[level] + code


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the nearest centroid per row (squared Euclidean, first index on ties)."""
    out = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), chunk):
        out[s:s + chunk] = _sq_dists(x[s:s + chunk], centroids).argmin(axis=1)
    return out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a k-means++ start.

    An empty cluster is reseeded with the point farthest from its own centroid.
    Returns (centroids, assignment).
    """
    c = _kmeans_pp(x, k, rng)
    assign = nearest(x, c)
    for _ in range(iters):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, assign, x)
        new = c.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        if not nz.all():
            d_own = ((x - new[assign]) ** 2).sum(axis=1)
            for j in np.flatnonzero(~nz):
                far = int(d_own.argmax())
                new[j] = x[far]
                d_own[far] = -1.0
        c = new
        new_assign = nearest(x, c)
        if np.array_equal(new_assign, assign) and nz.all():
            break
        assign = new_assign
    return c, nearest(x, c)


@dataclass
class Codebook:
    levels: list[np.ndarray]
    train_seed: int = 0
    residual_energy: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.levels:
            raise ValueError("codebook needs at least one level")
        dims = {c.shape[1] for c in self.levels}
        if len(dims) != 1:
            raise ValueError(f"centroid dimensions differ across levels: {dims}")
        if any(len(c) < 1 for c in self.levels):
            raise ValueError("every level needs K >= 1")

    @property
    def L(self) -> int:
        return len(self.levels)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    @property
    def vocabulary(self) -> SidVocabulary:
        return SidVocabulary(self.sizes)

    def _check_dim(self, x: np.ndarray):
        if x.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: got {x.shape[-1]}, codebook has {self.dim}")

    def encode_many(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("encode_many expects a 2-D array")
        self._check_dim(x)
        codes = np.empty((len(x), self.L), dtype=np.int64)
        residual = x.copy()
        for l, c in enumerate(self.levels):
            codes[:, l] = nearest(residual, c)
            residual = residual - c[codes[:, l]]
        return codes

    def encode(self, x: Sequence[float] | np.ndarray) -> Sid:
        x = np.asarray(x, dtype=np.float64)
        self._check_dim(x)
        return Sid(tuple(int(v) for v in self.encode_many(x[None, :])[0]))

    def decode(self, sid: Sid, levels: int | None = None) -> np.ndarray:
        """Sum of the selected centroids, optionally over the first ``levels`` only."""
        if len(sid) != self.L:
            raise ValueError(f"sid has {len(sid)} levels, codebook {self.L}")
        for l, (code, k) in enumerate(zip(sid, self.sizes)):
            if not 0 <= code < k:
                raise ValueError(f"code {code} out of range at level {l + 1} (K={k})")
        n = self.L if levels is None else levels
        out = np.zeros(self.dim)
        for l in range(n):
            out = out + self.levels[l][sid[l]]
        return out

    def is_valid(self, sid: Sid) -> bool:
        return len(sid) == self.L and all(0 <= c < k for c, k in zip(sid, self.sizes))

    def save(self, path) -> None:
        arrays = {f"level_{l}": c for l, c in enumerate(self.levels)}
        buf = io.BytesIO()
        np.savez(
            buf,
            version=np.array(CODEBOOK_FORMAT_VERSION),
            seed=np.array(self.train_seed),
            sizes=np.array(self.sizes),
            dim=np.array(self.dim),
            residual_energy=np.array(self.residual_energy, dtype=np.float64),
            **arrays,
        )
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Codebook":
        with np.load(path) as z:
            if int(z["version"]) != CODEBOOK_FORMAT_VERSION:
                raise ValueError(f"unsupported codebook version {int(z['version'])}")
            sizes = [int(s) for s in z["sizes"]]
            levels = [z[f"level_{l}"].astype(np.float64) for l in range(len(sizes))]
            return cls(levels, int(z["seed"]), tuple(float(v) for v in z["residual_energy"]))


def train_codebook(
    embeddings: np.ndarray | Sequence[Sequence[float]],
    L: int = 3,
    K: int | Sequence[int] = 16,
    iters: int = 25,
    seed: int = 0,
) -> Codebook:
    """Fit ``L`` levels of k-means, each on the residual left by the previous ones."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("embeddings must be a non-empty 2-D array")
    if np.isnan(x).any():
        raise ValueError("embeddings contain NaN")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    sizes = [K] * L if isinstance(K, int) else list(K)
    if len(sizes) != L:
        raise ValueError("need one K per level")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    levels, energy = [], []
    for l, k in enumerate(sizes, start=1):
        if k < 1:
            raise ValueError(f"level {l}: K must be >= 1")
        n_distinct = len(np.unique(residual, axis=0))
        if n_distinct < k:
            raise ValueError(f"level {l}: {n_distinct} distinct points for K={k}")
        c, assign = kmeans(residual, k, iters, rng)
        levels.append(c)
        residual = residual - c[assign]
        energy.append(float((residual ** 2).sum(axis=1).mean()))
    return Codebook(levels, seed, tuple(energy))


@dataclass
class CollisionReport:
    shared: dict[Sid, int]

    @property
    def n_collisions(self) -> int:
        return len(self.shared)

    def histogram(self) -> dict[int, int]:
        """Items-per-sid -> number of sids with that multiplicity (only for shared sids)."""
        return dict(sorted(Counter(self.shared.values()).items()))


def assign_catalog(cb: Codebook, catalog: Mapping[str, Item]) -> tuple[dict[str, Sid], CollisionReport]:
    ids = list(catalog)
    if not ids:
        return {}, CollisionReport({})
    codes = cb.encode_many(np.stack([catalog[i].embedding for i in ids]))
    mapping = {i: Sid(tuple(int(v) for v in row)) for i, row in zip(ids, codes)}
    counts = Counter(mapping.values())
    return mapping, CollisionReport({s: n for s, n in sorted(counts.items()) if n > 1})


def sids_to_items(sid_map: Mapping[str, Sid]) -> dict[Sid, list[str]]:
    out: dict[Sid, list[str]] = {}
    for item_id, sid in sid_map.items():
        out.setdefault(sid, []).append(item_id)
    return out


def write_sid_map(sid_map: Mapping[str, Sid]) -> Iterable[str]:
    for item_id, sid in sid_map.items():
        yield json.dumps({"item_id": item_id, "sid": list(sid.codes)})


def read_sid_map(lines: Iterable[str]) -> dict[str, Sid]:
    out = {}
    for line in lines:
        if line.strip():
            rec = json.loads(line)
            out[rec["item_id"]] = Sid(tuple(rec["sid"]))
    return out
