"""Decoder that reads a precomputed context cache and emits three sid codes."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    level_sizes: tuple[int, ...] = (16, 16, 16)
    max_items: int = 128
    n_static_buckets: int = 256
    guidance_n: int = 25
    hist_buckets: int = 8
    ffn_mult: int = 4
    lr: float = 1e-4
    min_lr_ratio: float = 0.0
    warmup_steps: int = 0
    batch_size: int = 256
    epochs: int = 1
    grad_clip: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.level_sizes = tuple(int(k) for k in self.level_sizes)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if len(self.level_sizes) != 3:
            raise ValueError("backbone emits exactly three sid levels")
        if self.max_items < 1 or self.n_layers < 1:
            raise ValueError("max_items and n_layers must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.level_sizes)

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    @property
    def max_context_tokens(self) -> int:
        return 1 + self.levels * self.max_items

    @property
    def max_guidance_tokens(self) -> int:
        # one token per candidate plus one histogram token per level-1 and level-2 code
        return self.guidance_n + self.level_sizes[0] + self.level_sizes[1]

    def to_json(self) -> dict:
        d = asdict(self)
        d["level_sizes"] = list(self.level_sizes)
        return d


class ContextBatch(NamedTuple):
    """Padded tensors for one batch. Codes are level-local; -1 marks padding."""

    static: torch.Tensor        # (B,) static-feature bucket
    hist_codes: torch.Tensor    # (B, N, 3)
    hist_behavior: torch.Tensor  # (B, N)
    hist_pos: torch.Tensor      # (B, N) 0 = most recent
    guide_codes: torch.Tensor   # (B, G, 3) candidate sids, -1 padded
    hist1: torch.Tensor         # (B, K1) quantized level-1 histogram bucket (0 = absent)
    hist2: torch.Tensor         # (B, K2)


class ContextCache(NamedTuple):
    k: torch.Tensor             # (B, H, S, dh)
    v: torch.Tensor
    mask: torch.Tensor          # (B, S) True = real token
    gk: torch.Tensor            # (B, H, G, dh); G may be 0
    gv: torch.Tensor
    gmask: torch.Tensor         # (B, G)


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def _split_heads(x: torch.Tensor, h: int) -> torch.Tensor:
    *lead, s, d = x.shape
    return x.reshape(*lead, s, h, d // h).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, s, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, s, h * dh)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Softmax attention; ``mask`` broadcasts against the score tensor, True = keep.

    Every query row must keep at least one key.
    """
    return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d, self.h = cfg.d_model, cfg.n_heads
        self.norm_x = RMSNorm(d)
        self.q_ctx = nn.Linear(d, d, bias=False)
        self.o_ctx = nn.Linear(d, d, bias=False)
        self.norm_g = RMSNorm(d)
        self.q_guide = nn.Linear(d, d, bias=False)
        self.o_guide = nn.Linear(d, d, bias=False)
        nn.init.zeros_(self.o_guide.weight)
        self.norm_s = RMSNorm(d)
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.o_self = nn.Linear(d, d, bias=False)
        self.norm_f = RMSNorm(d)
        self.ff_in = nn.Linear(d, cfg.ffn_mult * d)
        self.ff_out = nn.Linear(cfg.ffn_mult * d, d)

    def _cross(self, x: torch.Tensor, q_proj: nn.Linear, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # all hypotheses of an example share its keys, so fold (M, T) into one query axis
        b, m, t, d = x.shape
        q = _split_heads(q_proj(x).reshape(b, m * t, d), self.h)
        out = _merge_heads(attend(q, k, v, mask[:, None, None, :]))
        return out.reshape(b, m, t, d)

    def _read_context(self, x: torch.Tensor, cache: ContextCache) -> torch.Tensor:
        x = x + self.o_ctx(self._cross(self.norm_x(x), self.q_ctx, cache.k, cache.v, cache.mask))
        if cache.gk.shape[-2]:
            present = cache.gmask.any(-1)
            # rows without guidance attend to a dummy key and are zeroed afterwards
            gmask = cache.gmask.clone()
            gmask[~present, 0] = True
            g = self.o_guide(self._cross(self.norm_g(x), self.q_guide, cache.gk, cache.gv, gmask))
            x = x + g * present[:, None, None, None].to(x.dtype)
        return x

    def _qkv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        qkv = self.qkv(self.norm_s(x))
        return tuple(_split_heads(z, self.h) for z in qkv.chunk(3, dim=-1))

    def _ffn(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.ff_out(F.silu(self.ff_in(self.norm_f(x))))

    def forward(self, x: torch.Tensor, cache: ContextCache) -> torch.Tensor:
        # x: (B, M, T, d) with M hypotheses per example
        t = x.shape[-2]
        x = self._read_context(x, cache)
        q, k, v = self._qkv(x)
        causal = torch.ones(t, t, dtype=torch.bool, device=x.device).tril()
        x = x + self.o_self(_merge_heads(attend(q, k, v, causal)))
        return self._ffn(x)

    def step(
        self, x: torch.Tensor, cache: ContextCache, past: tuple[torch.Tensor, torch.Tensor] | None
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        """One new position per hypothesis, x: (B, M, 1, d); ``past`` holds earlier self-attention k/v."""
        x = self._read_context(x, cache)
        q, k, v = self._qkv(x)
        if past is not None:
            k = torch.cat([past[0], k], dim=-2)
            v = torch.cat([past[1], v], dim=-2)
        x = x + self.o_self(_merge_heads(attend(q, k, v, None)))
        return self._ffn(x), (k, v)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        sizes = cfg.level_sizes
        self.offsets = [sum(sizes[:l]) for l in range(cfg.levels)]
        n_codes = sum(sizes)
        self.code_emb = nn.Embedding(n_codes + 1, d)  # last row = BOS
        self.level_emb = nn.Embedding(cfg.levels, d)
        self.pos_emb = nn.Embedding(cfg.max_items, d)
        self.behavior_emb = nn.Embedding(3, d)
        self.static_emb = nn.Embedding(cfg.n_static_buckets, d)
        self.ctx_proj = nn.Linear(d, d, bias=False)
        self.ctx_norm = RMSNorm(d)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.rank_emb = nn.Embedding(cfg.guidance_n, d)
        self.hist_emb = nn.Embedding(cfg.hist_buckets, d)
        self.guide_proj = nn.Linear(d, d, bias=False)
        self.guide_norm = RMSNorm(d)
        self.gk_proj = nn.Linear(d, d, bias=False)
        self.gv_proj = nn.Linear(d, d, bias=False)
        self.dec_pos = nn.Embedding(cfg.levels, d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.out_norm = RMSNorm(d)
        self.heads = nn.ModuleList(nn.Linear(d, k) for k in sizes)
        self.register_buffer("_offsets", torch.tensor(self.offsets, dtype=torch.long), persistent=False)
        for emb in (self.code_emb, self.level_emb, self.pos_emb, self.behavior_emb, self.static_emb,
                    self.rank_emb, self.hist_emb, self.dec_pos):
            nn.init.normal_(emb.weight, std=0.02 * math.sqrt(64 / d))
        self.to(cfg.torch_dtype)

    @property
    def bos_index(self) -> int:
        return sum(self.cfg.level_sizes)

    def _code_tokens(self, codes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(..., 3) level-local codes -> (..., 3, d) embeddings and validity mask."""
        valid = codes >= 0
        idx = torch.where(valid, codes + self._offsets, torch.zeros_like(codes))
        levels = torch.arange(self.cfg.levels, device=codes.device)
        return self.code_emb(idx) + self.level_emb(levels), valid

    def context_tokens(self, batch: ContextBatch) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, _ = batch.hist_codes.shape
        if n > self.cfg.max_items:
            raise ValueError(f"history of {n} items exceeds max_items={self.cfg.max_items}")
        tok, valid = self._code_tokens(batch.hist_codes)
        item_feat = self.pos_emb(batch.hist_pos.clamp(min=0)) + self.behavior_emb(batch.hist_behavior.clamp(min=0))
        tok = (tok + item_feat[:, :, None, :]).reshape(b, n * self.cfg.levels, -1)
        mask = valid.reshape(b, n * self.cfg.levels)
        static = self.static_emb(batch.static)[:, None, :]
        tokens = torch.cat([static, tok], dim=1)
        mask = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=mask.device), mask], dim=1)
        return self.ctx_norm(self.ctx_proj(tokens)), mask

    def guidance_tokens(self, batch: ContextBatch) -> tuple[torch.Tensor, torch.Tensor]:
        b, g, _ = batch.guide_codes.shape
        d = self.cfg.d_model
        if g == 0:
            return torch.zeros(b, 0, d, dtype=self.code_emb.weight.dtype), torch.zeros(b, 0, dtype=torch.bool)
        if g > self.cfg.guidance_n:
            raise ValueError(f"{g} guidance candidates exceed guidance_n={self.cfg.guidance_n}")
        # one token per candidate: its code embeddings summed, plus its rank
        valid = batch.guide_codes[..., 0] >= 0
        idx = torch.where(batch.guide_codes >= 0, batch.guide_codes + self._offsets, torch.zeros_like(batch.guide_codes))
        tok = self.code_emb(idx).sum(-2) + self.rank_emb(torch.arange(g))[None]
        parts, masks = [tok], [valid]
        for level, hist in ((0, batch.hist1), (1, batch.hist2)):
            codes = torch.arange(hist.shape[1]) + self.offsets[level]
            parts.append(self.code_emb(codes)[None] + self.level_emb.weight[level] + self.hist_emb(hist))
            masks.append(hist > 0)
        tokens = torch.cat(parts, dim=1)
        return self.guide_norm(self.guide_proj(tokens)), torch.cat(masks, dim=1)

    def encode_context(self, batch: ContextBatch) -> ContextCache:
        """Project context and guidance once into the keys/values every layer reads."""
        h = self.cfg.n_heads
        ctx, mask = self.context_tokens(batch)
        if ctx.shape[1] > self.cfg.max_context_tokens:
            raise ValueError(f"context of {ctx.shape[1]} tokens exceeds {self.cfg.max_context_tokens}")
        gtok, gmask = self.guidance_tokens(batch)
        if gtok.shape[1] > self.cfg.max_guidance_tokens:
            raise ValueError(f"guidance of {gtok.shape[1]} tokens exceeds {self.cfg.max_guidance_tokens}")
        return ContextCache(
            _split_heads(self.k_proj(ctx), h),
            _split_heads(self.v_proj(ctx), h),
            mask,
            _split_heads(self.gk_proj(gtok), h),
            _split_heads(self.gv_proj(gtok), h),
            gmask,
        )

    def decode(self, cache: ContextCache, prefix: torch.Tensor) -> torch.Tensor:
        """Hidden states for BOS + prefix.

        prefix: (B, M, t) level-local codes, t in 0..2. Returns (B, M, t + 1, d).
        """
        b, m, t = prefix.shape
        bos = torch.full((b, m, 1), self.bos_index, dtype=torch.long)
        idx = torch.cat([bos, prefix + self._offsets[:t]], dim=-1)
        x = self.code_emb(idx) + self.dec_pos(torch.arange(t + 1))
        for block in self.blocks:
            x = block(x, cache)
        return self.out_norm(x)

    def step_logits(self, cache: ContextCache, prefix: torch.Tensor) -> torch.Tensor:
        """Logits over the next level's codes, (B, M, K_{t+1})."""
        t = prefix.shape[-1]
        if t >= self.cfg.levels:
            raise ValueError("prefix already holds a complete sid")
        return self.heads[t](self.decode(cache, prefix)[:, :, -1])

    def step_incremental(
        self, cache: ContextCache, codes: torch.Tensor | None, past: list | None
    ) -> tuple[torch.Tensor, list]:
        """Next-level logits feeding only the newest code; equals :meth:`step_logits` on the full prefix.

        codes: (B, M) level-local codes of the last decoded level, or None at the start.
        Returns logits (B, M, K_{t+1}) and the per-layer self-attention state to pass back in.
        """
        t = 0 if past is None else past[0][0].shape[-2]
        if t >= self.cfg.levels:
            raise ValueError("prefix already holds a complete sid")
        if codes is None:
            b = cache.k.shape[0]
            idx = torch.full((b, 1), self.bos_index, dtype=torch.long)
        else:
            idx = codes + self.offsets[t - 1]
        x = (self.code_emb(idx) + self.dec_pos.weight[t])[:, :, None, :]
        state = []
        for layer, block in enumerate(self.blocks):
            x, kv = block.step(x, cache, None if past is None else past[layer])
            state.append(kv)
        return self.heads[t](self.out_norm(x[:, :, 0])), state

    def level_logits(self, cache: ContextCache, targets: torch.Tensor) -> list[torch.Tensor]:
        """Teacher-forced logits for every level; targets (B, M, 3)."""
        x = self.decode(cache, targets[..., : self.cfg.levels - 1])
        return [head(x[:, :, l]) for l, head in enumerate(self.heads)]

    def nll(self, batch: ContextBatch, targets: torch.Tensor) -> torch.Tensor:
        """Per-example negative log-likelihood averaged over the three levels, shape (B,)."""
        for l, k in enumerate(self.cfg.level_sizes):
            col = targets[:, l]
            if (col < 0).any() or (col >= k).any():
                raise ValueError(f"target code out of range at level {l + 1}")
        cache = self.encode_context(batch)
        logits = self.level_logits(cache, targets[:, None, :])
        per_level = [
            F.cross_entropy(lg[:, 0], targets[:, l], reduction="none") for l, lg in enumerate(logits)
        ]
        return torch.stack(per_level, dim=-1).mean(-1)

    def loss(self, batch: ContextBatch, targets: torch.Tensor) -> torch.Tensor:
        return self.nll(batch, targets).mean()
