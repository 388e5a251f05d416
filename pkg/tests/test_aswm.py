import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msfmamba import ndtensor as nt
from msfmamba.aswm import (
    AswmParams,
    aggregate,
    attention_csv,
    attention_logits,
    average,
    normalize_scales,
    weighted_sum,
)
from msfmamba.ndtensor import ConfigError, ContractError, Parameter, Tensor


def bank(rng, M=3, shape=(2, 4, 3, 2, 2)):
    return [rng.normal(size=shape) for _ in range(M)]


def trained_like(M, d, rng):
    p = AswmParams.init(M, d, rng)
    p.conv2_w.data[...] = rng.normal(size=p.conv2_w.shape)
    p.conv2_b.data[...] = rng.normal(size=M)
    return p


def test_alpha_sums_to_one_everywhere():
    rng = np.random.default_rng(0)
    b = bank(rng)
    p = trained_like(3, 4, rng)
    _, alpha = aggregate(b, p, "aswm")
    assert alpha.shape == (2, 3, 3, 2, 2)
    assert np.abs(alpha.data.sum(axis=1) - 1.0).max() < 1e-12
    assert np.all(alpha.data > 0)


def test_zero_init_equals_average():
    rng = np.random.default_rng(1)
    b = bank(rng)
    p = AswmParams.init(3, 4, rng)
    fused, alpha = aggregate(b, p, "aswm")
    np.testing.assert_allclose(alpha.data, 1.0 / 3.0, atol=1e-15)
    avg, none = aggregate(b, None, "average")
    assert none is None
    assert np.abs(fused.data - avg.data).max() < 1e-12


def test_average_equals_forced_uniform_weights():
    rng = np.random.default_rng(2)
    b = bank(rng, M=4)
    uniform = np.full((2, 4, 3, 2, 2), 0.25)
    assert np.abs(weighted_sum(b, uniform).data - average(b).data).max() < 1e-12


def test_weighted_sum_explicit():
    rng = np.random.default_rng(3)
    b = bank(rng)
    alpha = normalize_scales(rng.normal(size=(2, 3, 3, 2, 2))).data
    got = weighted_sum(b, alpha).data
    expect = sum(alpha[:, k:k + 1] * b[k] for k in range(3))
    np.testing.assert_allclose(got, expect, atol=1e-14)


def test_unbatched_bank():
    rng = np.random.default_rng(4)
    b = [g[0] for g in bank(rng)]
    p = trained_like(3, 4, rng)
    fused, alpha = aggregate(b, p)
    assert fused.shape == (4, 3, 2, 2) and alpha.shape == (3, 3, 2, 2)


def test_single_scale_weights_are_one():
    rng = np.random.default_rng(5)
    p = trained_like(1, 4, rng)
    fused, alpha = aggregate(bank(rng, M=1), p)
    np.testing.assert_array_equal(alpha.data, 1.0)


def test_bank_errors():
    rng = np.random.default_rng(6)
    p = AswmParams.init(2, 4, rng)
    with pytest.raises(ContractError):
        aggregate([np.zeros((1, 4, 3, 2, 2)), np.zeros((1, 4, 3, 2, 1))], p)
    with pytest.raises(ContractError):
        aggregate(bank(rng, M=3), p)
    with pytest.raises(ConfigError):
        aggregate(bank(rng, M=2), None, "aswm")
    with pytest.raises(ConfigError):
        aggregate(bank(rng, M=2), p, "max")


def test_aswm_gradients():
    rng = np.random.default_rng(7)
    p = trained_like(2, 2, rng)
    grids = [Parameter(g, f"g{i}") for i, g in enumerate(bank(rng, M=2, shape=(1, 2, 3, 2, 2)))]
    w = Tensor(rng.normal(size=(1, 2, 3, 2, 2)))

    def f():
        fused, _ = aggregate(grids, p)
        return nt.sum(nt.mul(fused, w))

    assert nt.finite_diff_check(f, grids + p.parameters()) < 1e-6


def test_attention_csv_format():
    rng = np.random.default_rng(8)
    p = trained_like(3, 2, rng)
    _, alpha = aggregate([g[0] for g in bank(rng, shape=(1, 2, 2, 2, 3))], p)
    text = attention_csv(alpha, [3, 5, 7])
    lines = text.strip().split("\n")
    assert lines[0] == "scale,t,h,w,weight"
    assert len(lines) == 1 + 3 * 2 * 2 * 3 + 1
    assert lines[1].startswith("3,0,0,0,")
    summary = lines[-1]
    assert summary.startswith("# mean,")
    means = [float(v) for v in summary.split(",")[1:]]
    assert abs(sum(means) - 1.0) < 1e-9
    weight = lines[1].split(",")[-1]
    assert len(weight.replace("0.", "", 1).lstrip("0")) <= 9


def test_attention_csv_rejects_batched():
    with pytest.raises(ContractError):
        attention_csv(np.ones((1, 3, 2, 2, 2)))


@settings(max_examples=25, deadline=None)
@given(M=st.integers(1, 4), seed=st.integers(0, 2**31), scale=st.floats(0.1, 50))
def test_softmax_normalization_property(M, seed, scale):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=scale, size=(2, M, 2, 3, 3))
    a = normalize_scales(logits).data
    assert np.abs(a.sum(axis=1) - 1.0).max() < 1e-12
    assert np.all(a >= 0)
