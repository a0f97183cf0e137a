import numpy as np
import pytest

from dynconv.budget import block_budget
from dynconv.gating import GumbelConfig
from dynconv.harness import (
    BenchRow,
    bench,
    coherent_mask,
    emit_ponder,
    ponder_focus,
    ponder_maps,
    read_pgm,
    relative_error,
    upscale_nearest,
    verify_equivalence,
    write_bench_csv,
    write_pgm,
)
from dynconv.model import ModelConfig, TrainingRecipe, build_model
from dynconv.sparse import GatedBlockSpec, block_forward
from dynconv.tensor import ConfigurationError


def small_model(seed=0, n_blocks=2, C=8, E=48, size=16, bias=None):
    cfg = ModelConfig(blocks=[GatedBlockSpec(C, E) for _ in range(n_blocks)], stem_channels=C, input_size=size,
                      recipe=TrainingRecipe(seed=seed)).validate()
    m = build_model(cfg)
    rng = np.random.default_rng(seed + 100)
    for b in m.blocks:
        for bn in (b.bn1, b.bn2, b.bn3):
            bn.running_mean[...] = rng.standard_normal(bn.running_mean.shape) * 0.1
            bn.running_var[...] = rng.uniform(0.5, 1.5, bn.running_var.shape)
        b.mask.bias[...] = rng.normal(0, 0.5) if bias is None else bias
    return m


def test_relative_error_examples():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([1.0, 2.5]), np.array([1.0, 2.0])) == pytest.approx(0.25)
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_verify_random_model(seed):
    rep = verify_equivalence(small_model(seed), trials=20, seed=seed)
    assert rep.passed
    assert max(rep.per_block + [rep.end_to_end]) <= 1e-5


def test_verify_full_masks():
    m = small_model()
    full = [np.ones((1, 8, 8), bool)] * 2
    rep = verify_equivalence(m, trials=10, masks=full)
    assert max(rep.per_block + [rep.end_to_end]) <= 1e-6


def test_empty_mask_returns_residual_exactly():
    m = small_model()
    h = m.stem(np.random.default_rng(3).standard_normal((4, 1, 16, 16)).astype(np.float32))
    empty = np.zeros((4, 8, 8), bool)
    for spec, params in zip(m.specs, m.blocks):
        out, _, rep = block_forward(h, spec, params, GumbelConfig(noise_enabled=False), "infer-sparse", mask=empty)
        np.testing.assert_array_equal(out, h)
        assert rep.flops_sparse == 0


def test_verify_report_rows():
    rep = verify_equivalence(small_model(), trials=3)
    rows = rep.rows()
    assert [r["scope"] for r in rows] == ["block0", "block1", "end_to_end"]
    assert rep.inputs == 3


@pytest.mark.parametrize("density", [0.0, 0.125, 0.5, 1.0])
def test_coherent_mask_exact_density(density):
    g = coherent_mask(3, 12, 12, density, np.random.default_rng(0))
    assert g.shape == (3, 12, 12)
    assert (g.reshape(3, -1).sum(1) == round(density * 144)).all()


def test_coherent_mask_rejects_bad_density():
    with pytest.raises(ConfigurationError):
        coherent_mask(1, 4, 4, 1.5, np.random.default_rng(0))


def test_bench_accounting():
    m = small_model(C=16, E=96)
    rows = bench(m, batch=8, repeats=3, warmup=1, densities=(1.0, 0.25))
    dense, full, quarter = rows
    assert dense.path == "dense" and full.measured_density == 1.0
    for r in rows[1:]:
        parts = r.mask_ms + r.bookkeeping_ms + r.gather_ms + r.residual_ms + r.scatter_ms
        assert parts <= r.ms_total * 1.0001
        assert r.macs_per_image == pytest.approx(r.budget_macs_per_image, rel=1e-12)
        assert r.overhead_ms <= r.ms_total
    assert full.macs_per_image == dense.macs_per_image
    assert quarter.macs_per_image < full.macs_per_image


def test_bench_macs_match_budget_on_masks():
    m = small_model(C=8, E=48)
    H = m.cfg.feature_size
    rng = np.random.default_rng(0)
    rows = bench(m, batch=4, repeats=1, warmup=0, densities=(0.3,), seed=5)
    rng = np.random.default_rng(5)
    rng.standard_normal((4, 1, 16, 16))
    masks = [coherent_mask(4, H, H, 0.3, rng) for _ in m.specs]
    want = sum(float(block_budget(s, H, H, g).flops_sparse) for s, g in zip(m.specs, masks))
    assert rows[1].macs_per_image == pytest.approx(want, rel=1e-12)


def test_bench_csv(tmp_path):
    rows = [BenchRow("dense", 1.0, 1.0, 4, 10.0, 400.0)]
    write_bench_csv(rows, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0].startswith("# ") and lines[1].startswith("path,density")
    assert len(lines) == 3


def test_upscale_nearest():
    g = np.array([[[1, 0], [0, 1]]])
    np.testing.assert_array_equal(upscale_nearest(g, 4)[0], np.kron(g[0], np.ones((2, 2), int)))


def test_ponder_full_and_empty_masks():
    m = small_model(n_blocks=3)
    x = np.random.default_rng(0).standard_normal((2, 1, 16, 16)).astype(np.float32)
    full = ponder_maps(m, x, masks=[np.ones((2, 8, 8), bool)] * 3)
    assert full.shape == (2, 16, 16) and (full == 3).all()
    empty = ponder_maps(m, x, masks=[np.zeros((2, 8, 8), bool)] * 3)
    assert (empty == 0).all()


def test_ponder_maps_need_a_gate():
    m = small_model()
    for s in m.specs:
        s.gated = False
    with pytest.raises(ConfigurationError):
        ponder_maps(m, np.zeros((1, 1, 16, 16), np.float32))


def test_pgm_round_trip(tmp_path):
    v = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    write_pgm(tmp_path / "a.pgm", v)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n") and len(raw) == len(b"P5\n4 3\n255\n") + 12
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), v)
    with pytest.raises(ConfigurationError):
        write_pgm(tmp_path / "b.pgm", v.astype(np.int32))


def test_emit_ponder_scaling(tmp_path):
    maps = np.array([[[0, 1], [2, 3]]])
    paths = emit_ponder(maps, 3, tmp_path)
    assert [p.name for p in paths] == ["ponder_0.pgm", "ponder.csv"]
    np.testing.assert_array_equal(read_pgm(paths[0]), [[0, 85], [170, 255]])
    assert paths[1].read_text().splitlines() == ["image,row,c0,c1", "0,0,0,1", "0,1,2,3"]


def test_ponder_focus():
    maps = np.zeros((1, 20, 20), int)
    maps[0, 5:9, 5:9] = 2
    maps[0, 0, 19] = 8
    frac, cov = ponder_focus(maps, np.array([[5, 5, 9, 9]]), margin=2)
    assert frac == pytest.approx(32 / 40)
    assert cov == pytest.approx(64 / 400)
