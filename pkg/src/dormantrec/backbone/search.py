"""Level-synchronous beam search over sid codes."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from ..codebook import Sid
from .data import EncodedExamples
from .model import Backbone, ContextCache


@dataclass(frozen=True)
class BeamHypothesis:
    codes: tuple[int, ...]
    logp: float

    @property
    def finished(self) -> bool:
        return len(self.codes) == 3

    @property
    def sid(self) -> Sid:
        if not self.finished:
            raise ValueError("hypothesis is incomplete")
        return Sid(self.codes)


def _select(scores: np.ndarray, codes: np.ndarray, width: int) -> np.ndarray:
    """Per row, indices of the ``width`` best entries by (-score, codes lexicographic).

    scores: (B, C); codes: (B, C, t). Returns (B, width).
    """
    b, c = scores.shape
    if width < c:
        # only entries at or above each row's width-th best score can be kept; ties there stay in
        thr = -np.partition(-scores, width - 1, axis=1)[:, width - 1]
        rows, cols = np.nonzero(scores >= thr[:, None])
    else:
        rows, cols = np.repeat(np.arange(b), c), np.tile(np.arange(c), b)
    keys = [codes[rows, cols, j] for j in reversed(range(codes.shape[-1]))]
    order = np.lexsort((*keys, -scores[rows, cols], rows))
    rows, cols = rows[order], cols[order]
    # rank of each entry inside its row, then the first ``width`` per row
    starts = np.searchsorted(rows, np.arange(b))
    rank = np.arange(len(rows)) - starts[rows]
    out = np.empty((b, width), dtype=np.int64)
    sel = rank < width
    out[rows[sel], rank[sel]] = cols[sel]
    return out


@torch.no_grad()
def beam_search_cache(model: Backbone, cache: ContextCache, beam_width: int) -> list[list[BeamHypothesis]]:
    """Finished hypotheses per example, best first; ties go to the lexicographically smaller sid."""
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    b = cache.k.shape[0]
    prev = np.zeros((b, 1, 0), dtype=np.int64)
    logp = np.zeros((b, 1))
    last, state = None, None
    rows = np.arange(b)[:, None]
    for level in range(model.cfg.levels):
        logits, state = model.step_incremental(cache, last, state)
        lp = torch.log_softmax(logits, dim=-1).double().numpy()  # (B, M, K)
        m, k = lp.shape[1], lp.shape[2]
        total = (logp[:, :, None] + lp).reshape(b, m * k)
        cand_codes = np.concatenate(
            [np.repeat(prev, k, axis=1), np.tile(np.arange(k), (b, m))[:, :, None]], axis=2
        )
        keep = _select(total, cand_codes, min(beam_width, m * k))
        logp = total[rows, keep]
        prev = cand_codes[rows, keep]
        parent = torch.from_numpy(keep // k)
        gather = lambda z: z[torch.arange(b)[:, None], parent]
        state = [(gather(kk), gather(vv)) for kk, vv in state]
        last = torch.from_numpy(np.ascontiguousarray(prev[:, :, -1]))
    return [
        [BeamHypothesis(tuple(c), lp) for c, lp in zip(row_codes, row_logp)]
        for row_codes, row_logp in zip(prev.tolist(), logp.tolist())
    ]


@torch.no_grad()
def beam_search(
    model: Backbone, data: EncodedExamples, beam_width: int, batch_size: int = 128
) -> list[list[BeamHypothesis]]:
    model.eval()
    out: list[list[BeamHypothesis]] = []
    for start in range(0, len(data), batch_size):
        batch, _ = data.batch(slice(start, start + batch_size))
        out.extend(beam_search_cache(model, model.encode_context(batch), beam_width))
    return out


def inference_lines(user_ids: Sequence[str], results: Iterable[Sequence[BeamHypothesis]]) -> Iterable[str]:
    for user_id, hyps in zip(user_ids, results, strict=True):
        yield json.dumps(
            {"user_id": user_id, "candidates": [{"sid": list(h.codes), "logp": round(h.logp, 8)} for h in hyps]},
            sort_keys=True,
        )
