"""Training examples, guidance features and batch collation."""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..codebook import Sid
from ..core import Behavior
from .model import BackboneConfig, ContextBatch


def hist_bucket(count: int, n_buckets: int = 8) -> int:
    """0 for absent, then log2-spaced buckets: 1, 2-3, 4-7, ... capped at n_buckets - 1."""
    return min(n_buckets - 1, int(count).bit_length())


@dataclass(frozen=True)
class GuidanceFeatures:
    candidates: tuple[Sid, ...] = ()
    level1_counts: tuple[tuple[int, int], ...] = ()   # (code, count), sorted by code
    level2_counts: tuple[tuple[int, int], ...] = ()

    @property
    def present(self) -> bool:
        return bool(self.candidates)

    def quantized(self, level: int, size: int, n_buckets: int = 8) -> list[int]:
        counts = self.level1_counts if level == 1 else self.level2_counts
        out = [0] * size
        for code, n in counts:
            out[code] = hist_bucket(n, n_buckets)
        return out


NO_GUIDANCE = GuidanceFeatures()


def build_guidance(candidates: Sequence[Sid], top_n: int = 25) -> GuidanceFeatures:
    """Top-``top_n`` reasoner candidates plus level-1 and level-2 code counts over them."""
    top = tuple(candidates[:top_n])
    if not top:
        return NO_GUIDANCE
    c1 = Counter(s[0] for s in top)
    c2 = Counter(s[1] for s in top)
    return GuidanceFeatures(top, tuple(sorted(c1.items())), tuple(sorted(c2.items())))


def static_bucket(text: str, n_buckets: int) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") % n_buckets


@dataclass(frozen=True)
class Example:
    user_id: str
    static_text: str
    history: tuple[tuple[Sid, Behavior], ...]
    target: Sid | None = None
    guidance: GuidanceFeatures = NO_GUIDANCE


@dataclass
class EncodedExamples:
    """Examples packed once into padded integer arrays; batches are slices of these."""

    static: np.ndarray       # (E,)
    codes: np.ndarray        # (E, N, 3), -1 padded
    behavior: np.ndarray     # (E, N)
    pos: np.ndarray          # (E, N)
    lengths: np.ndarray      # (E,)
    guide: np.ndarray        # (E, G, 3), -1 padded
    n_guide: np.ndarray      # (E,)
    hist1: np.ndarray        # (E, K1)
    hist2: np.ndarray        # (E, K2)
    targets: np.ndarray | None  # (E, 3)

    def __len__(self) -> int:
        return len(self.static)

    def batch(self, idx: np.ndarray | slice) -> tuple[ContextBatch, torch.Tensor | None]:
        lengths = self.lengths[idx]
        n = max(1, int(lengths.max(initial=0)))
        g = int(self.n_guide[idx].max(initial=0))
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).long()
        batch = ContextBatch(
            t(self.static[idx]),
            t(self.codes[idx, :n]),
            t(self.behavior[idx, :n]),
            t(self.pos[idx, :n]),
            t(self.guide[idx, :g]),
            t(self.hist1[idx]),
            t(self.hist2[idx]),
        )
        return batch, (None if self.targets is None else t(self.targets[idx]))


def encode_examples(examples: Sequence[Example], cfg: BackboneConfig, use_guidance: bool = True) -> EncodedExamples:
    """Histories keep their most recent ``max_items`` entries, left-aligned."""
    e = len(examples)
    n = max([1] + [min(len(x.history), cfg.max_items) for x in examples])
    g = max([0] + [len(x.guidance.candidates) for x in examples]) if use_guidance else 0
    if g > cfg.guidance_n:
        raise ValueError(f"{g} guidance candidates exceed guidance_n={cfg.guidance_n}")
    codes = np.full((e, n, cfg.levels), -1, dtype=np.int32)
    behavior = np.zeros((e, n), dtype=np.int8)
    pos = np.zeros((e, n), dtype=np.int32)
    lengths = np.zeros(e, dtype=np.int32)
    guide = np.full((e, g, cfg.levels), -1, dtype=np.int32)
    n_guide = np.zeros(e, dtype=np.int32)
    hist1 = np.zeros((e, cfg.level_sizes[0]), dtype=np.int8)
    hist2 = np.zeros((e, cfg.level_sizes[1]), dtype=np.int8)
    static = np.zeros(e, dtype=np.int64)
    has_target = all(x.target is not None for x in examples)
    targets = np.zeros((e, cfg.levels), dtype=np.int32) if has_target else None
    for r, x in enumerate(examples):
        static[r] = static_bucket(x.static_text, cfg.n_static_buckets)
        hist = x.history[-cfg.max_items :]
        m = len(hist)
        lengths[r] = m
        if m:
            codes[r, :m] = [sid.codes for sid, _ in hist]
            behavior[r, :m] = [int(b) for _, b in hist]
            pos[r, :m] = np.arange(m - 1, -1, -1)
        if g and x.guidance.present:
            k = len(x.guidance.candidates)
            guide[r, :k] = [sid.codes for sid in x.guidance.candidates]
            n_guide[r] = k
            hist1[r] = x.guidance.quantized(1, cfg.level_sizes[0], cfg.hist_buckets)
            hist2[r] = x.guidance.quantized(2, cfg.level_sizes[1], cfg.hist_buckets)
        if targets is not None:
            targets[r] = x.target.codes
    return EncodedExamples(static, codes, behavior, pos, lengths, guide, n_guide, hist1, hist2, targets)


def collate(
    examples: Sequence[Example], cfg: BackboneConfig, use_guidance: bool = True
) -> tuple[ContextBatch, torch.Tensor | None]:
    return encode_examples(examples, cfg, use_guidance).batch(slice(None))
