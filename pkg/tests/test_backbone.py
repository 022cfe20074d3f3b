import itertools
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from torch.nn import functional as F

from dormantrec.backbone import (
    BackboneConfig,
    Example,
    NO_GUIDANCE,
    TrainingDiverged,
    beam_search,
    beam_search_cache,
    build_guidance,
    collate,
    encode_examples,
    evaluate_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)
from dormantrec.backbone.data import hist_bucket
from dormantrec.backbone.search import _select, inference_lines
from dormantrec.backbone.train import build_model, lr_at
from dormantrec.codebook import Sid
from dormantrec.core import Behavior


def tiny_cfg(**kw):
    base = dict(d_model=16, n_layers=2, n_heads=2, level_sizes=(8, 8, 8), max_items=4, guidance_n=5,
                n_static_buckets=16, dtype="float64", seed=0)
    base.update(kw)
    return BackboneConfig(**base)


def random_examples(rng, cfg, n=6, guided=True, targets=True):
    k1, k2, k3 = cfg.level_sizes
    sid = lambda: Sid.of(int(rng.integers(k1)), int(rng.integers(k2)), int(rng.integers(k3)))
    out = []
    for u in range(n):
        hist = tuple((sid(), list(Behavior)[int(rng.integers(3))]) for _ in range(int(rng.integers(0, cfg.max_items + 1))))
        guide = build_guidance([sid() for _ in range(int(rng.integers(0, cfg.guidance_n + 1)))], cfg.guidance_n) if guided else NO_GUIDANCE
        out.append(Example(f"u{u}", f"static {u}", hist, sid() if targets else None, guide))
    return out


def randomize(model, rng_seed=1, scale=0.3):
    """Push every parameter off its init so no path is trivially zero."""
    g = torch.Generator().manual_seed(rng_seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def all_joint_logp(model, cache):
    """(B, K1*K2*K3) joint log-probabilities, level by level through step_logits."""
    k1, k2, k3 = model.cfg.level_sizes
    b = cache.k.shape[0]
    l1 = torch.log_softmax(model.step_logits(cache, torch.zeros(b, 1, 0, dtype=torch.long)), -1)[:, 0]
    p1 = torch.arange(k1).repeat_interleave(1)[None, :, None].expand(b, k1, 1)
    l2 = torch.log_softmax(model.step_logits(cache, p1), -1)                       # (B, K1, K2)
    p2 = torch.tensor([[a, c] for a in range(k1) for c in range(k2)])[None].expand(b, k1 * k2, 2)
    l3 = torch.log_softmax(model.step_logits(cache, p2), -1).reshape(b, k1, k2, k3)
    joint = l1[:, :, None, None] + l2[:, :, :, None] + l3
    return joint.reshape(b, -1)


@pytest.fixture
def tiny(rng):
    cfg = tiny_cfg()
    model = randomize(build_model(cfg))
    batch, targets = collate(random_examples(rng, cfg), cfg)
    return model, batch, targets


# ---------------------------------------------------------------- normalization and numerics

def test_joint_probability_sums_to_one(tiny):
    model, batch, _ = tiny
    with torch.no_grad():
        joint = all_joint_logp(model, model.encode_context(batch))
    assert joint.shape[1] == 512
    assert torch.allclose(joint.exp().sum(-1), torch.ones(joint.shape[0], dtype=joint.dtype), atol=1e-4)


def test_fresh_model_logits_finite_and_normalized(rng):
    cfg = tiny_cfg(dtype="float32")
    model = build_model(cfg)
    batch, _ = collate(random_examples(rng, cfg), cfg)
    with torch.no_grad():
        logits = model.step_logits(model.encode_context(batch), torch.zeros(batch.static.shape[0], 1, 0, dtype=torch.long))
    assert torch.isfinite(logits).all()
    assert torch.allclose(logits.softmax(-1).sum(-1), torch.ones(logits.shape[:2]), atol=1e-6)


def test_complete_prefix_rejected(tiny):
    model, batch, _ = tiny
    cache = model.encode_context(batch)
    with pytest.raises(ValueError, match="complete"):
        model.step_logits(cache, torch.zeros(batch.static.shape[0], 1, 3, dtype=torch.long))


def test_context_overflow_names_lengths(tiny):
    model, batch, _ = tiny
    b = batch.static.shape[0]
    n = model.cfg.max_items + 2
    long = batch._replace(
        hist_codes=torch.zeros(b, n, 3, dtype=torch.long),
        hist_behavior=torch.zeros(b, n, dtype=torch.long),
        hist_pos=torch.zeros(b, n, dtype=torch.long),
    )
    with pytest.raises(ValueError, match=f"{n} items exceeds max_items={model.cfg.max_items}"):
        model.encode_context(long)


def test_uniform_logits_give_log_k_loss(rng):
    cfg = BackboneConfig(d_model=8, n_layers=1, n_heads=2, level_sizes=(4096, 4096, 4096), max_items=4, guidance_n=5)
    model = build_model(cfg)
    with torch.no_grad():
        for head in model.heads:
            head.weight.zero_()
            head.bias.zero_()
    batch, targets = collate(random_examples(rng, cfg, n=4), cfg)
    with torch.no_grad():
        loss = float(model.loss(batch, targets))
    assert loss == pytest.approx(math.log(4096), abs=1e-5)
    assert math.log(4096) == pytest.approx(8.3178, abs=1e-4)


def test_certain_targets_give_zero_loss(rng):
    cfg = tiny_cfg()
    model = build_model(cfg)
    target = Sid.of(3, 1, 6)
    ex = [Example("u", "s", (), target)]
    with torch.no_grad():
        for level, head in enumerate(model.heads):
            head.weight.zero_()
            head.bias.zero_()
            head.bias[target[level]] = 1e4
    batch, targets = collate(ex, cfg)
    with torch.no_grad():
        loss = float(model.loss(batch, targets))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_out_of_range_target_rejected(tiny):
    model, batch, targets = tiny
    bad = targets.clone()
    bad[0, 2] = 8
    with pytest.raises(ValueError, match="level 3"):
        model.loss(batch, bad)


def test_gradients_match_central_differences(rng):
    cfg = tiny_cfg()
    model = randomize(build_model(cfg), scale=0.2)
    batch, targets = collate(random_examples(rng, cfg, n=4), cfg)
    model.zero_grad()
    model.loss(batch, targets).backward()
    eps = 1e-6
    worst = 0.0
    checked = 0
    for name, p in model.named_parameters():
        grad = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        # probe the largest-gradient entries plus a couple of random ones
        picks = set(torch.topk(grad.abs(), min(3, flat.numel())).indices.tolist())
        picks |= set(rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False).tolist())
        for i in picks:
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + eps
                up = float(model.loss(batch, targets))
                flat[i] = old - eps
                down = float(model.loss(batch, targets))
                flat[i] = old
            numeric = (up - down) / (2 * eps)
            analytic = float(grad[i])
            scale = max(abs(numeric), abs(analytic))
            if scale < 1e-7:
                assert abs(numeric - analytic) < 1e-9, name
                continue
            worst = max(worst, abs(numeric - analytic) / scale)
            checked += 1
    assert checked > 50
    assert worst < 1e-4


# ---------------------------------------------------------------- context cache

def reference_logits(model, batch, prefix):
    """Explicit-softmax forward that rebuilds context keys and values inside every layer."""
    cfg = model.cfg
    h, d = cfg.n_heads, cfg.d_model
    dh = d // h
    ctx, mask = model.context_tokens(batch)
    gtok, gmask = model.guidance_tokens(batch)
    b, m, t = prefix.shape

    def heads(x):
        return x.reshape(*x.shape[:-1], h, dh).transpose(-3, -2)

    def merge(x):
        return x.transpose(-3, -2).reshape(*x.shape[:-3], x.shape[-2], d)

    def attn(q, k, v, keep):
        s = q @ k.transpose(-1, -2) / math.sqrt(dh)
        s = s.masked_fill(~keep, float("-inf"))
        return torch.softmax(s, -1) @ v

    idx = torch.cat([torch.full((b, m, 1), model.bos_index), prefix + torch.tensor(model.offsets[:t], dtype=torch.long)], -1)
    x = model.code_emb(idx) + model.dec_pos(torch.arange(t + 1))
    present = gmask.any(-1)
    for blk in model.blocks:
        k, v = heads(model.k_proj(ctx))[:, None], heads(model.v_proj(ctx))[:, None]
        q = heads(blk.q_ctx(blk.norm_x(x)))
        x = x + blk.o_ctx(merge(attn(q, k, v, mask[:, None, None, None, :])))
        if gtok.shape[1]:
            gk, gv = heads(model.gk_proj(gtok))[:, None], heads(model.gv_proj(gtok))[:, None]
            keep = gmask.clone()
            keep[~present, 0] = True
            q = heads(blk.q_guide(blk.norm_g(x)))
            g = blk.o_guide(merge(attn(q, gk, gv, keep[:, None, None, None, :])))
            x = x + g * present[:, None, None, None].to(x.dtype)
        q, k, v = (heads(z) for z in blk.qkv(blk.norm_s(x)).chunk(3, -1))
        causal = torch.ones(t + 1, t + 1, dtype=torch.bool).tril()
        x = x + blk.o_self(merge(attn(q, k, v, causal)))
        x = x + blk.ff_out(F.silu(blk.ff_in(blk.norm_f(x))))
    return model.heads[t](model.out_norm(x)[:, :, -1])


def test_cache_matches_eager_recompute(rng):
    cfg = tiny_cfg()
    model = randomize(build_model(cfg))
    batch, _ = collate(random_examples(rng, cfg, n=8), cfg)
    with torch.no_grad():
        cache = model.encode_context(batch)
        for t in range(3):
            prefix = torch.from_numpy(rng.integers(0, 8, size=(8, 3, t)))
            assert torch.allclose(model.step_logits(cache, prefix), reference_logits(model, batch, prefix), atol=1e-10)


def test_cache_is_deterministic(tiny):
    model, batch, _ = tiny
    with torch.no_grad():
        a, b = model.encode_context(batch), model.encode_context(batch)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_no_guidance_cache_has_base_shape(rng):
    cfg = tiny_cfg()
    model = build_model(cfg)
    ex = random_examples(rng, cfg, guided=False)
    batch, _ = collate(ex, cfg)
    cache = model.encode_context(batch)
    assert cache.gk.shape[-2] == 0 and cache.gmask.shape == (len(ex), 0)
    assert cache.k.shape[-2] == 1 + 3 * batch.hist_codes.shape[1]


def test_incremental_steps_match_full_prefix(tiny, rng):
    model, batch, _ = tiny
    b = batch.static.shape[0]
    with torch.no_grad():
        cache = model.encode_context(batch)
        codes = torch.from_numpy(rng.integers(0, 8, size=(b, 1, 3)))
        expanded = cache
        state, last = None, None
        for t in range(3):
            inc, state = model.step_incremental(expanded, last, state)
            full = model.step_logits(cache, codes[:, :, :t])
            assert torch.allclose(inc, full, atol=1e-10)
            last = codes[:, :, t]


def test_zero_guidance_projection_is_neutral(rng):
    cfg = tiny_cfg()
    model = build_model(cfg)
    ex = random_examples(rng, cfg, n=5)
    with_g, _ = collate(ex, cfg)
    without, _ = collate(ex, cfg, use_guidance=False)
    with torch.no_grad():
        prefix = torch.zeros(5, 1, 0, dtype=torch.long)
        a = model.step_logits(model.encode_context(with_g), prefix)
        b = model.step_logits(model.encode_context(without), prefix)
    assert torch.equal(a, b)


def test_prefix_changes_logits_after_training(rng):
    cfg = tiny_cfg(epochs=30, lr=1e-2, batch_size=64)
    # level-2 code copies level 1, so the model must read its prefix
    ex = []
    for u in range(64):
        a = int(rng.integers(8))
        ex.append(Example(f"u{u}", "s", (), Sid.of(a, a, 0)))
    model = train(encode_examples(ex, cfg), cfg).model
    batch, _ = collate(ex[:1], cfg)
    with torch.no_grad():
        cache = model.encode_context(batch)
        logits = model.step_logits(cache, torch.tensor([[[0], [5]]]))
    assert int(logits[0, 0].argmax()) == 0 and int(logits[0, 1].argmax()) == 5


# ---------------------------------------------------------------- beam search

def exhaustive(model, cache):
    joint = all_joint_logp(model, cache).numpy()
    k1, k2, k3 = model.cfg.level_sizes
    codes = list(itertools.product(range(k1), range(k2), range(k3)))
    return [sorted(zip(row.tolist(), codes), key=lambda x: (-x[0], x[1])) for row in joint]


def test_full_beam_equals_exhaustive_ordering(tiny):
    model, batch, _ = tiny
    with torch.no_grad():
        cache = model.encode_context(batch)
        got = beam_search_cache(model, cache, 512)
        want = exhaustive(model, cache)
    for hyps, ref in zip(got, want):
        assert [h.codes for h in hyps] == [c for _, c in ref]
        assert np.allclose([h.logp for h in hyps], [lp for lp, _ in ref], atol=1e-10)


def test_two_codes_per_level_beam_eight(rng):
    cfg = tiny_cfg(level_sizes=(2, 2, 2))
    model = randomize(build_model(cfg))
    batch, _ = collate(random_examples(rng, cfg, n=3), cfg)
    with torch.no_grad():
        cache = model.encode_context(batch)
        got = beam_search_cache(model, cache, 8)
        want = exhaustive(model, cache)
    assert [[h.codes for h in row] for row in got] == [[c for _, c in ref] for ref in want]
    assert all(h.finished for row in got for h in row)


def test_beam_one_is_greedy(tiny):
    model, batch, _ = tiny
    b = batch.static.shape[0]
    with torch.no_grad():
        cache = model.encode_context(batch)
        got = beam_search_cache(model, cache, 1)
        prefix = torch.zeros(b, 1, 0, dtype=torch.long)
        for _ in range(3):
            nxt = model.step_logits(cache, prefix).argmax(-1, keepdim=True)
            prefix = torch.cat([prefix, nxt], -1)
    assert [row[0].codes for row in got] == [tuple(p) for p in prefix[:, 0].tolist()]


def test_serving_beam_width_accepted(rng):
    cfg = BackboneConfig(d_model=16, n_layers=1, n_heads=2, max_items=4, guidance_n=5)
    model = build_model(cfg)
    data = encode_examples(random_examples(rng, cfg, n=2, targets=False), cfg)
    hyps = beam_search(model, data, 1024)
    assert [len(h) for h in hyps] == [1024, 1024]
    for row in hyps:
        assert all(a.logp >= b.logp for a, b in zip(row, row[1:]))


def test_beam_width_must_be_positive(tiny):
    model, batch, _ = tiny
    with pytest.raises(ValueError):
        beam_search_cache(model, model.encode_context(batch), 0)


def sort_oracle(scores, codes, width):
    out = []
    for r in range(scores.shape[0]):
        order = sorted(range(scores.shape[1]), key=lambda c: (-scores[r, c], tuple(codes[r, c])))
        out.append(order[:width])
    return np.array(out)


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 40), st.integers(0, 2))
def test_select_matches_sort(seed, b, c, t):
    rng = np.random.default_rng(seed)
    scores = rng.integers(-3, 3, size=(b, c)).astype(float)   # plenty of ties
    codes = rng.integers(0, 3, size=(b, c, t + 1))
    for width in {1, max(1, c // 2), c}:
        assert np.array_equal(_select(scores, codes, width), sort_oracle(scores, codes, width))


def test_inference_lines_format():
    from dormantrec.backbone import BeamHypothesis

    line = next(iter(inference_lines(["u1"], [[BeamHypothesis((1, 2, 3), -0.5)]])))
    assert json.loads(line) == {"user_id": "u1", "candidates": [{"sid": [1, 2, 3], "logp": -0.5}]}


# ---------------------------------------------------------------- guidance features

def test_shared_first_code_fills_one_bin():
    g = build_guidance([Sid.of(7, k % 16, k) for k in range(25)])
    assert g.level1_counts == ((7, 25),)
    hist = g.quantized(1, 16)
    assert sum(1 for v in hist if v) == 1 and hist[7] == hist_bucket(25)


def test_empty_candidates_mean_absent():
    assert not build_guidance([]).present


@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 15), st.integers(0, 15)), max_size=40), st.integers(1, 30))
def test_histograms_match_recount(codes, top_n):
    g = build_guidance([Sid(c) for c in codes], top_n)
    top = codes[:top_n]
    for level, counts in ((0, g.level1_counts), (1, g.level2_counts)):
        recount = {}
        for c in top:
            recount[c[level]] = recount.get(c[level], 0) + 1
        assert dict(counts) == recount
        assert sum(n for _, n in counts) == len(top)


def test_hist_bucket_edges():
    assert [hist_bucket(n) for n in (0, 1, 2, 3, 4, 7, 8, 1000)] == [0, 1, 2, 2, 3, 3, 4, 7]


def test_histories_keep_most_recent(rng):
    cfg = tiny_cfg(max_items=3)
    hist = tuple((Sid.of(k, 0, 0), Behavior.CLICK) for k in range(6))
    data = encode_examples([Example("u", "s", hist)], cfg)
    assert data.codes[0, :, 0].tolist() == [3, 4, 5]
    assert data.pos[0].tolist() == [2, 1, 0]


# ---------------------------------------------------------------- training

def test_single_example_is_memorized():
    cfg = tiny_cfg(epochs=150, lr=1e-2, batch_size=1)
    ex = [Example("u", "s", ((Sid.of(1, 2, 3), Behavior.CLICK),), Sid.of(4, 5, 6))]
    result = train(encode_examples(ex, cfg), cfg)
    assert result.epoch_losses[-1] < 0.01


def test_first_epoch_lowers_loss(rng):
    cfg = tiny_cfg(epochs=1, lr=3e-3, batch_size=16)
    ex = []
    for u in range(256):
        a = int(rng.integers(4))
        ex.append(Example(f"u{u}", "s", ((Sid.of(a, 0, 0), Behavior.CLICK),), Sid.of(a, a + 1, 0)))
    data = encode_examples(ex, cfg)
    start = evaluate_loss(build_model(cfg), data)
    result = train(data, cfg)
    assert evaluate_loss(result.model, data) < start


def test_warm_start_continues_from_loaded_model(rng, tmp_path):
    cfg = tiny_cfg(batch_size=1024)
    ex = random_examples(rng, cfg, n=12)
    data = encode_examples(ex, cfg)
    base = train(data, cfg).model
    save_checkpoint(base, tmp_path / "base.pt")
    loaded = load_checkpoint(tmp_path / "base.pt")
    result = train(data, cfg, init=loaded)
    assert result.losses[0] == pytest.approx(evaluate_loss(loaded, data), abs=1e-6)
    # the warm-start input is left untouched
    assert all(torch.equal(a, b) for a, b in zip(loaded.state_dict().values(), base.state_dict().values()))


def test_training_is_deterministic(rng):
    cfg = tiny_cfg(epochs=2, batch_size=4)
    data = encode_examples(random_examples(rng, cfg, n=10), cfg)
    assert train(data, cfg).losses == train(data, cfg).losses


def test_divergence_restores_last_good(rng):
    cfg = tiny_cfg()
    data = encode_examples(random_examples(rng, cfg, n=4), cfg)
    model = build_model(cfg)
    with torch.no_grad():
        model.heads[0].bias[0] = float("nan")
    with pytest.raises(TrainingDiverged) as info:
        train(data, cfg, init=model)
    assert info.value.step == 0
    assert torch.isnan(info.value.last_good["heads.0.bias"][0])


def test_training_needs_targets(rng):
    cfg = tiny_cfg()
    with pytest.raises(ValueError):
        train(encode_examples(random_examples(rng, cfg, targets=False), cfg), cfg)
    with pytest.raises(ValueError):
        train(encode_examples([], cfg), cfg)


def test_cosine_schedule_endpoints():
    cfg = tiny_cfg(lr=1e-3, min_lr_ratio=0.1)
    assert lr_at(0, 100, cfg) == pytest.approx(1e-3)
    assert lr_at(100, 100, cfg) == pytest.approx(1e-4)
    assert lr_at(50, 100, cfg) == pytest.approx(0.55e-3)


def test_checkpoint_round_trip(tiny, tmp_path):
    model, batch, _ = tiny
    save_checkpoint(model, tmp_path / "sub" / "m.pt")
    back = load_checkpoint(tmp_path / "sub" / "m.pt")
    assert back.cfg == model.cfg
    with torch.no_grad():
        prefix = torch.zeros(batch.static.shape[0], 1, 0, dtype=torch.long)
        assert torch.equal(back.step_logits(back.encode_context(batch), prefix),
                           model.step_logits(model.encode_context(batch), prefix))


def test_checkpoint_version_checked(tiny, tmp_path):
    model, _, _ = tiny
    path = tmp_path / "m.pt"
    torch.save({"version": 99, "config": model.cfg.to_json(), "state": model.state_dict()}, path)
    with pytest.raises(ValueError, match="version 99"):
        load_checkpoint(path)


def test_config_invariants():
    with pytest.raises(ValueError):
        BackboneConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        BackboneConfig(level_sizes=(8, 8))
    assert BackboneConfig().n_layers == 6 and BackboneConfig().lr == 1e-4
