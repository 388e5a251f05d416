import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msfmamba import ndtensor as nt
from msfmamba.model import (
    PRESETS,
    AdamW,
    ModelConfig,
    MSFMamba,
    TrainConfig,
    cross_entropy,
    decays,
    lr_at,
    topk_accuracy,
)
from msfmamba.ndtensor import ConfigError, ContractError, Parameter

from oracles import adamw_scalar, gradient_entries, max_abs_fd_error, topk_sorted


def tiny_cfg(**kw):
    base = dict(d=4, layers=1, N=2, patch=4, scales=(1, 3), grid=(3, 8, 8), classes=4, preset="desk")
    return ModelConfig(**{**base, **kw})


def test_presets_match_published_sizes():
    assert PRESETS["tiny"]["d"] == 192 and PRESETS["tiny"]["layers"] == 24
    assert PRESETS["small"]["d"] == 384 and PRESETS["small"]["layers"] == 24
    assert PRESETS["middle"]["d"] == 576 and PRESETS["middle"]["layers"] == 32
    desk = ModelConfig.from_preset("desk")
    assert (desk.d, desk.layers, desk.N, desk.scales) == (64, 4, 8, (3, 5, 7))
    assert desk.token_grid == (8, 4, 4) and desk.tokens == 128


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig.from_preset("huge")
    with pytest.raises(ConfigError):
        tiny_cfg(scales=(2, 3))
    with pytest.raises(ConfigError):
        tiny_cfg(motion_mode="flow")
    with pytest.raises(ConfigError):
        tiny_cfg(grid=(3, 10, 8))
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ConfigError):
        TrainConfig(batch=0)


def test_forward_shapes_single_and_batch():
    rng = np.random.default_rng(0)
    m = MSFMamba(tiny_cfg(), seed=0)
    clips = rng.uniform(size=(2, 3, 8, 8, 3))
    logits, alpha = m.forward(clips)
    assert logits.shape == (2, 4) and alpha.shape == (2, 2, 3, 2, 2)
    single, a1 = m.forward(clips[0])
    assert single.shape == (4,) and a1.shape == (2, 3, 2, 2)
    np.testing.assert_allclose(single.data, logits.data[0], atol=1e-12)


def test_average_mode_has_no_attention_params():
    m = MSFMamba(tiny_cfg(aggregate_mode="average"), seed=0)
    assert m.aswm is None
    assert not any(p.name.startswith("aswm") for p in m.parameters())
    _, alpha = m.forward(np.zeros((3, 8, 8, 3)))
    assert alpha is None


def test_grid_mismatch_rejected():
    m = MSFMamba(tiny_cfg(), seed=0)
    with pytest.raises(ConfigError):
        m.forward(np.zeros((4, 8, 8, 3)))


def test_same_seed_same_parameters():
    a = MSFMamba(tiny_cfg(), seed=3).state_dict()
    b = MSFMamba(tiny_cfg(), seed=3).state_dict()
    c = MSFMamba(tiny_cfg(), seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_parameter_names_unique():
    names = [p.name for p in MSFMamba(ModelConfig.from_preset("desk")).parameters()]
    assert len(names) == len(set(names))


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 4))
    y = np.array([0, 3, 1, 1, 2])
    expect = np.mean([math.log(np.exp(r).sum()) - r[t] for r, t in zip(z, y)])
    assert cross_entropy(z, y).data == pytest.approx(expect, abs=1e-13)
    assert cross_entropy(z[0], 0).data == pytest.approx(math.log(np.exp(z[0]).sum()) - z[0, 0], abs=1e-13)


def test_cross_entropy_bad_label():
    with pytest.raises(ContractError):
        cross_entropy(np.zeros((2, 3)), [0, 3])


def test_topk_ties_prefer_lower_index():
    z = np.array([[1.0, 1.0, 0.0]])
    assert topk_accuracy(z, [0], 1) == 1.0
    assert topk_accuracy(z, [1], 1) == 0.0
    assert topk_accuracy(z, [1], 2) == 1.0


@settings(max_examples=50, deadline=None)
@given(
    rows=st.integers(1, 8),
    C=st.integers(2, 7),
    k=st.integers(1, 7),
    seed=st.integers(0, 2**31),
    coarse=st.booleans(),
)
def test_topk_matches_sort_oracle(rows, C, k, seed, coarse):
    k = min(k, C)
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 3, size=(rows, C)).astype(float) if coarse else rng.normal(size=(rows, C))
    y = rng.integers(0, C, size=rows)
    assert topk_accuracy(z, y, k) == pytest.approx(topk_sorted(z, y, k))
    if k > 1:
        assert topk_accuracy(z, y, k) >= topk_accuracy(z, y, k - 1)


def test_lr_schedule_shape():
    tc = TrainConfig(epochs=10, warmup_epochs=2, base_lr_per_256=0.256, batch=16, steps_per_epoch=5)
    peak = 0.256 * 16 / 256
    assert tc.peak_lr == pytest.approx(peak)
    lrs = [lr_at(s, tc) for s in range(1, 51)]
    assert lrs[0] == pytest.approx(peak / 10)
    assert lrs[9] == pytest.approx(peak)
    assert all(np.diff(lrs[:10]) > 0)
    assert all(np.diff(lrs[10:]) <= 0)
    assert lrs[-1] == 0.0
    # first epoch is entirely inside the warm-up
    assert max(lrs[:5]) < peak


def test_decay_exclusions():
    names = {p.name: decays(p) for p in MSFMamba(tiny_cfg()).parameters()}
    assert names["head.w"] and names["embed.proj"] and names["aswm.conv1_w"]
    assert not names["head.b"] and not names["embed.bias"] and not names["aswm.conv2_b"]
    assert not names["pos.spatial"] and not names["block0.norm_offset"]
    assert not names["mcfm.w3.gate_logit"] and not names["block0.fwd.delta_bias"]


def test_adamw_matches_scalar_recursion():
    rng = np.random.default_rng(2)
    w = Parameter(np.array([0.7, -1.2]), "layer.w")
    b = Parameter(np.array([0.3]), "layer.bias")
    opt = AdamW([w, b], 0.9, 0.99, 1e-8, 0.1)
    grads = rng.normal(size=(6, 3))
    lrs = [0.01 * (i + 1) for i in range(6)]
    for g, lr in zip(grads, lrs):
        w.grad.data[:] = g[:2]
        b.grad.data[:] = g[2:]
        opt.step(lr)
    for i in range(2):
        ref = adamw_scalar([0.7, -1.2][i], grads[:, i], lrs, 0.9, 0.99, 1e-8, 0.1)
        assert w.data[i] == pytest.approx(ref[-1], abs=1e-14)
    ref_b = adamw_scalar(0.3, grads[:, 2], lrs, 0.9, 0.99, 1e-8, 0.1, decay=False)
    assert b.data[0] == pytest.approx(ref_b[-1], abs=1e-14)


def test_end_to_end_gradients_small_model():
    rng = np.random.default_rng(3)
    m = MSFMamba(tiny_cfg(), seed=1)
    # move the attention head off zero so every branch carries gradient
    m.aswm.conv2_w.data[...] = rng.normal(scale=0.5, size=m.aswm.conv2_w.shape)
    for s in m.scales:
        s.gate_logit.data[...] = 0.4
    clips = rng.uniform(size=(2, 3, 8, 8, 3))
    y = np.array([1, 2])
    params = m.parameters()
    f = lambda: cross_entropy(m.forward(clips)[0], y)  # noqa: E731
    big, tiny = gradient_entries(f, params)
    assert sum(len(v) for v in big.values()) > 0.75 * sum(p.size for p in params)
    assert nt.finite_diff_check(f, params, entries=big) < 1e-4
    assert max_abs_fd_error(f, params, tiny) < 1e-9


def test_all_zero_parameters_give_uniform_prediction():
    m = MSFMamba(tiny_cfg(), seed=0)
    for p in m.parameters():
        p.data[...] = 0.0
    logits, _ = m.forward(np.random.default_rng(4).uniform(size=(3, 8, 8, 3)))
    assert np.all(logits.data == logits.data[0])
    assert cross_entropy(logits.data, 2).data == pytest.approx(math.log(4), abs=1e-12)


def test_desk_final_grid_shape():
    m = MSFMamba(ModelConfig.from_preset("desk"), seed=0)
    h = m.encode(np.zeros((8, 32, 32, 3)))
    assert h.tokens.shape == (128, 64)
    from msfmamba.mcfm import mcfm_forward

    bank = mcfm_forward(h, m.scales, "central")
    assert all(g.shape == (64, 8, 4, 4) for g in bank)


def test_forward_is_deterministic():
    m = MSFMamba(tiny_cfg(), seed=5)
    clip = np.random.default_rng(5).uniform(size=(3, 8, 8, 3))
    np.testing.assert_array_equal(m.forward(clip)[0].data, m.forward(clip)[0].data)


def test_classify_head_pooling_oracle():
    from msfmamba.model import classify_head

    rng = np.random.default_rng(6)
    f = rng.normal(size=(2, 5, 3, 2, 2))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    got = classify_head(f, w, b).data
    for i in range(2):
        pooled = [f[i, c].sum() / f[i, c].size for c in range(5)]
        expect = [sum(pooled[c] * w[c, k] for c in range(5)) + b[k] for k in range(4)]
        np.testing.assert_allclose(got[i], expect, atol=1e-13)
    np.testing.assert_allclose(classify_head(np.full((5, 2, 2, 2), 3.0), np.zeros((5, 4)), b).data, b)


def test_cross_entropy_reference_values():
    assert cross_entropy(np.zeros(10), 4).data == pytest.approx(2.302585092994046, abs=1e-12)
    z = np.zeros(10)
    z[7] = 30.0
    assert cross_entropy(z, 7).data < 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(-100, 100))
def test_cross_entropy_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(3, 6))
    y = rng.integers(0, 6, size=3)
    assert abs(cross_entropy(z + c, y).data - cross_entropy(z, y).data) < 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 6))
def test_topk_invariant_under_monotone_maps(seed, k):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(8, 6))
    y = rng.integers(0, 6, size=8)
    base = topk_accuracy(z, y, k)
    assert topk_accuracy(2 * z, y, k) == base
    assert topk_accuracy(z + 7, y, k) == base


def test_topk_rank_semantics():
    z = np.arange(10.0)[::-1].copy()  # class 0 best
    assert topk_accuracy(z[None], [2], 1) == 0.0
    assert topk_accuracy(z[None], [2], 5) == 1.0
    with pytest.raises(ConfigError):
        topk_accuracy(z[None], [2], 11)


def test_lr_reference_points():
    for batch, expect in ((256, 4.0e-4), (64, 1.0e-4)):
        tc = TrainConfig(batch=batch, steps_per_epoch=10)
        assert lr_at(50, tc) == pytest.approx(expect, rel=1e-12)
        assert lr_at(25, tc) == pytest.approx(expect / 2, rel=1e-12)


def test_zero_lr_step_is_bitwise_noop():
    m = MSFMamba(tiny_cfg(), seed=7)
    params = m.parameters()
    before = [p.data.copy() for p in params]
    opt = AdamW(params, weight_decay=0.05)
    rng = np.random.default_rng(7)
    for p in params:
        p.grad.data[...] = rng.normal(size=p.shape)
    opt.step(0.0)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, params))


def test_zero_grads_no_decay_fixed_point():
    w = Parameter(np.array([1.5, -2.0]), "w")
    opt = AdamW([w], weight_decay=0.0)
    for _ in range(5):
        opt.step(0.1)
    np.testing.assert_array_equal(w.data, [1.5, -2.0])


def test_constant_gradient_update_approaches_lr():
    w = Parameter(np.array([0.0]), "w")
    opt = AdamW([w])
    for _ in range(200):
        w.grad.data[:] = 0.37
        prev = w.data.copy()
        opt.step(1e-3)
    assert abs((prev - w.data)[0] - 1e-3) < 1e-9


def test_parameter_count_stable():
    a = MSFMamba(ModelConfig.from_preset("desk"), seed=0).parameter_count()
    b = MSFMamba(ModelConfig.from_preset("desk"), seed=9).parameter_count()
    assert a == b > 0


def test_desk_end_to_end_gradient_sample():
    """Random 1% of desk-model entries, decisive magnitudes only (see gradient_entries)."""
    rng = np.random.default_rng(11)
    m = MSFMamba(ModelConfig.from_preset("desk"), seed=2)
    m.aswm.conv2_w.data[...] = rng.normal(scale=0.1, size=m.aswm.conv2_w.shape)
    clips = rng.uniform(size=(2, 8, 32, 32, 3))
    y = np.array([3, 8])
    params = m.parameters()
    f = lambda: cross_entropy(m.forward(clips)[0], y)  # noqa: E731
    total = sum(p.size for p in params)
    sample = {p.name: rng.choice(p.size, max(1, p.size // 100), replace=False) for p in params}
    big, tiny = gradient_entries(f, params)
    keep = {k: np.intersect1d(v, big[k]) for k, v in sample.items()}
    small = {k: np.intersect1d(v, tiny[k])[:3] for k, v in sample.items()}
    assert sum(len(v) for v in sample.values()) >= total // 100
    assert nt.finite_diff_check(f, params, entries=keep) < 1e-4
    assert max_abs_fd_error(f, params, small) < 1e-9
