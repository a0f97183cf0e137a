import csv
import io

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from dynconv import autodiff as ad
from dynconv.budget import (
    BlockBudget,
    SparsityConfig,
    anneal_p,
    block_budget,
    bounds,
    flops_dense,
    flops_sparse,
    loss_bounds,
    loss_net,
    loss_per_layer,
    network_fraction,
    report_csv,
    total_loss,
)
from dynconv.gating import GumbelConfig, gate_traced
from dynconv.sparse import GatedBlockSpec
from dynconv.tensor import ConfigurationError

SPEC = GatedBlockSpec(16, 96)


def rep(frac, dense=100.0, block=0):
    return BlockBudget(block, dense, frac * dense, 0.0, 0.0)


def test_dense_count_example():
    assert flops_dense(SPEC, 8, 8) == 251904
    assert flops_dense(SPEC, 16, 8) == 2 * 251904


def test_degenerate_expansion_costs_nothing():
    class Spec:
        channels, expansion_channels = 16, 0

    assert flops_dense(Spec, 8, 8) == 0


def test_sparse_count_example():
    assert flops_sparse(SPEC, 10, 20) == 54720
    assert flops_sparse(SPEC, 0, 0) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(0, 512), st.integers(1, 40), st.integers(1, 40))
def test_full_mask_sparse_equals_dense(c, extra, h, w):
    spec = GatedBlockSpec(c, c + extra)
    assert flops_sparse(spec, h * w, h * w) == flops_dense(spec, h, w)


def test_block_budget_uses_dilated_count_and_batch_average():
    g = np.zeros((2, 8, 8), bool)
    g[0, 3, 3] = True  # 1 active, 9 dilated
    b = block_budget(SPEC, 8, 8, g)
    assert b.n_active == 0.5 and b.n_dilated == 4.5
    assert b.flops_sparse == 4.5 * 1536 + 0.5 * (864 + 1536)
    full = block_budget(SPEC, 8, 8, np.ones((3, 8, 8), bool))
    assert full.flops_sparse == full.flops_dense == 251904 and full.fraction == 1.0


def test_loss_net_examples():
    assert loss_net([rep(0.3)], 0.3) == pytest.approx(0.0)
    assert loss_net([rep(1.0)], 0.5) == pytest.approx(0.25)
    assert loss_net([rep(1.0), rep(0.0)], 0.5) == pytest.approx(0.0)


def test_loss_net_weights_blocks_by_cost():
    assert loss_net([rep(1.0, 300.0), rep(0.0, 100.0)], 0.5) == pytest.approx(0.0625)


def test_loss_per_layer_examples():
    assert loss_per_layer([rep(0.4), rep(0.4)], 0.4) == pytest.approx(0.0)
    assert loss_per_layer([rep(1.0), rep(0.0)], 0.5) == pytest.approx(0.5)
    assert loss_per_layer([rep(1.0)], 1.0) == pytest.approx(0.0)


def test_anneal_p_schedule():
    assert anneal_p(0, 11) == 1.0
    assert anneal_p(10, 11) == pytest.approx(0.0)
    assert anneal_p(5, 11) == pytest.approx(0.5)
    ps = [anneal_p(e, 30) for e in range(30)]
    assert all(a >= b for a, b in zip(ps, ps[1:]))


def test_loss_bounds_examples():
    low, up = loss_bounds([rep(0.2)], 1.0, 0.5)
    assert low == pytest.approx(0.09) and up == 0.0
    assert loss_bounds([rep(0.0), rep(1.0)], 0.0, 0.3) == (0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0.01, 1))
def test_band_contains_theta_and_widens(p, theta):
    lo, hi = bounds(p, theta)
    assert lo <= theta + 1e-12 and hi >= theta - 1e-12
    assert loss_bounds([rep(theta, dense=1.0)], p, theta) == (0.0, 0.0)
    lo2, hi2 = bounds(p / 2, theta)
    assert lo2 <= lo and hi2 >= hi


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.floats(0.01, 1), st.floats(0, 1))
def test_losses_non_negative_and_zero_iff_satisfied(fracs, theta, p):
    reports = [rep(f, dense=1.0) for f in fracs]
    net = loss_net(reports, theta)
    per = loss_per_layer(reports, theta)
    low, up = loss_bounds(reports, p, theta)
    assert min(net, per, low, up) >= 0
    lo, hi = bounds(p, theta)
    # violations below ~1e-150 square to zero in float64; keep clear of that band
    assume(all(abs(f - lo) > 1e-100 and abs(f - hi) > 1e-100 for f in fracs))
    assert (low == 0) == all(f >= lo for f in fracs)
    assert (up == 0) == all(f <= hi for f in fracs)
    assume(abs(np.mean(fracs) - theta) > 1e-6)
    assert net > 0 and per > 0


def test_total_loss_combinations():
    reports = [rep(1.0)]
    cfg = SparsityConfig(theta=0.5, alpha=10.0, epochs=10, criterion="net")
    assert total_loss(2.0, reports, cfg, 0).total == pytest.approx(4.5)
    cfg0 = SparsityConfig(theta=0.5, alpha=0.0, epochs=10)
    assert total_loss(2.0, reports, cfg0, 0).total == 2.0
    at = [rep(0.5), rep(0.5)]
    for crit in ("net", "per_layer", "net_bounds"):
        assert total_loss(1.0, at, SparsityConfig(0.5, 10.0, 10, crit), 3).total == pytest.approx(1.0)
    t = total_loss(1.0, [rep(1.0), rep(0.0)], SparsityConfig(0.5, 10.0, 10, "net_bounds"), 0)
    assert t.net == pytest.approx(0.0)
    assert t.low == pytest.approx(0.125) and t.up == pytest.approx(0.125)
    assert t.total == pytest.approx(1.0 + 10 * 0.25)
    t = total_loss(1.0, [rep(1.0), rep(0.0)], SparsityConfig(0.5, 10.0, 10, "per_layer"), 0)
    assert t.total == pytest.approx(1.0 + 10 * 0.5) and t.net == 0.0


def test_sparsity_config_validation():
    with pytest.raises(ConfigurationError):
        SparsityConfig(theta=0.0)
    with pytest.raises(ConfigurationError):
        SparsityConfig(criterion="bounds")
    with pytest.raises(ConfigurationError):
        loss_net([], 0.5)


def test_loss_net_gradient_pushes_fraction_toward_theta():
    # 1-block, one image: the fraction sits above theta, so d loss / d m must be positive
    m = ad.Var(np.full((1, 1, 4, 4), 0.5), requires_grad=True)
    z = gate_traced(m, GumbelConfig(noise_enabled=False))
    n_b = z.sum()
    g = z.value[:, 0] > 0.5
    ref = block_budget(SPEC, 4, 4, g)
    r = BlockBudget(0, ref.flops_dense, flops_sparse(SPEC, n_b, ref.n_dilated), n_b, ref.n_dilated)
    ad.backward(loss_net([r], 0.25))
    assert np.all(m.grad > 0)
    # straight-through: loss evaluated at the hard fraction, derivative taken on the soft path
    E, C = 96, 16
    sig = 1 / (1 + np.exp(-0.5))
    expected = 2 * (ref.fraction - 0.25) * (9 * E + E * C) / ref.flops_dense * sig * (1 - sig)
    np.testing.assert_allclose(m.grad, expected, rtol=1e-10)


def test_report_csv_round_trip():
    reports = [rep(0.25, 400.0, 0), rep(1.0, 400.0, 2)]
    rows = list(csv.DictReader(io.StringIO(report_csv(reports))))
    assert [r["block"] for r in rows] == ["0", "2"]
    assert float(rows[0]["flops_sparse"]) == 100.0 and float(rows[0]["fraction"]) == 0.25
    assert list(rows[0].keys()) == ["block", "flops_dense", "flops_sparse", "fraction"]
    assert network_fraction(reports) == pytest.approx(0.625)
