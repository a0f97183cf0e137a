"""Equivalence checking, throughput benchmarking and ponder-cost maps."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .budget import block_budget
from .gating import GumbelConfig
from .model import DynConvNet
from .sparse import BlockTimings, _block_dense_infer, block_forward
from .tensor import ConfigurationError

TOLERANCE = 1e-4


def relative_error(a: np.ndarray, ref: np.ndarray) -> float:
    """``max|a - ref| / max|ref|``, with the scale floored at 1e-12."""
    a = np.asarray(a, np.float64)
    ref = np.asarray(ref, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.abs(a - ref).max() / max(np.abs(ref).max(), 1e-12))


# equivalence -------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    per_block: List[float]
    end_to_end: float
    inputs: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return max(self.per_block + [self.end_to_end]) <= self.tolerance

    def rows(self) -> List[dict]:
        out = [{"scope": f"block{i}", "max_rel_error": e} for i, e in enumerate(self.per_block)]
        out.append({"scope": "end_to_end", "max_rel_error": self.end_to_end})
        return out


def verify_equivalence(model: DynConvNet, trials: int = 100, seed: int = 0, batch_size: int = 25,
                       masks: Optional[Sequence[Optional[np.ndarray]]] = None,
                       tolerance: float = TOLERANCE) -> EquivalenceReport:
    """Compare the dense masked path with gather/scatter inference on ``trials`` random inputs.

    Each block is checked on the identical dense-path input, so both sides
    derive the same mask; the end-to-end figure compares final logits.
    ``masks`` optionally forces per-block masks of shape (1, H, W) broadcast
    over the batch.
    """
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    per_block = [0.0] * len(model.specs)
    e2e = 0.0
    noise_off = GumbelConfig(noise_enabled=False)
    done = 0
    while done < trials:
        n = min(batch_size, trials - done)
        x = rng.standard_normal((n, cfg.in_channels, cfg.input_size, cfg.input_size)).astype(np.float32)
        forced = None
        if masks is not None:
            forced = [None if m is None else np.broadcast_to(m, (n,) + m.shape[1:]).copy() for m in masks]
        dense = model.infer(x, "train-dense", masks=forced, return_features=True)
        sparse = model.infer(x, "infer-sparse", masks=forced)
        for i, (spec, params) in enumerate(zip(model.specs, model.blocks)):
            if not spec.gated and (forced is None or forced[i] is None):
                continue
            m = None if forced is None else forced[i]
            out, _, _ = block_forward(dense.features[i], spec, params, noise_off, "infer-sparse", mask=m)
            per_block[i] = max(per_block[i], relative_error(out, dense.features[i + 1]))
        e2e = max(e2e, relative_error(sparse.logits, dense.logits))
        done += n
    return EquivalenceReport(per_block, e2e, trials, tolerance)


# benchmark ---------------------------------------------------------------------

def coherent_mask(n: int, h: int, w: int, density: float, rng: np.random.Generator,
                  smoothing: int = 3) -> np.ndarray:
    """Spatially coherent random masks with exactly ``round(density*h*w)`` active pixels each.

    Blurred white noise is thresholded per image at its top-k value, which
    yields blob-shaped regions like learned masks rather than salt-and-pepper
    patterns that dilation would nearly fill.
    """
    if not 0.0 <= density <= 1.0:
        raise ConfigurationError("density must lie in [0, 1]")
    k = int(round(density * h * w))
    field_ = rng.standard_normal((n, h, w))
    for _ in range(smoothing):
        p = np.pad(field_, ((0, 0), (1, 1), (1, 1)), mode="edge")
        field_ = sum(p[:, i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0
    flat = field_.reshape(n, -1)
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    out = np.zeros((n, h * w), dtype=bool)
    np.put_along_axis(out, order, True, axis=1)
    return out.reshape(n, h, w)


@dataclass
class BenchRow:
    path: str
    density: float
    measured_density: float
    batch: int
    images_per_sec: float
    ms_total: float
    mask_ms: float = 0.0
    bookkeeping_ms: float = 0.0
    gather_ms: float = 0.0
    residual_ms: float = 0.0
    scatter_ms: float = 0.0
    macs_per_image: float = 0.0
    budget_macs_per_image: float = 0.0

    @property
    def overhead_ms(self) -> float:
        return self.mask_ms + self.bookkeeping_ms + self.gather_ms + self.scatter_ms


BENCH_NOTE = ("scope: gated residual blocks only (stem and head excluded); "
              "bookkeeping = mask thresholding + dilation + index construction; "
              "times are medians over repeats after warm-up")


def _time_blocks(model: DynConvNet, h0: np.ndarray, masks, sparse: bool):
    noise_off = GumbelConfig(noise_enabled=False)
    timings = [BlockTimings() for _ in model.specs]
    t0 = time.perf_counter()
    h = h0
    for i, (spec, params) in enumerate(zip(model.specs, model.blocks)):
        if sparse:
            h, _, _ = block_forward(h, spec, params, noise_off, "infer-sparse", mask=masks[i],
                                    timings=timings[i], run_mask_unit=True)
        else:
            h = _block_dense_infer(h, spec, params)
    return time.perf_counter() - t0, timings


def bench(model: DynConvNet, batch: int = 32, repeats: int = 5, warmup: int = 2,
          densities: Iterable[float] = (1.0, 0.5, 0.25, 0.125), seed: int = 0) -> List[BenchRow]:
    """Throughput of the block stack, dense versus gather/scatter at forced mask densities."""
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    x = rng.standard_normal((batch, cfg.in_channels, cfg.input_size, cfg.input_size)).astype(np.float32)
    h0 = model.stem(x)
    _, _, H, W = h0.shape
    dense_macs = float(sum(block_budget(s, H, W, None).flops_dense for s in model.specs))

    rows = []
    for _ in range(warmup):
        _time_blocks(model, h0, None, sparse=False)
    times = [_time_blocks(model, h0, None, sparse=False)[0] for _ in range(repeats)]
    t = statistics.median(times)
    rows.append(BenchRow("dense", 1.0, 1.0, batch, batch / t, 1e3 * t,
                         residual_ms=1e3 * t, macs_per_image=dense_macs, budget_macs_per_image=dense_macs))

    for d in densities:
        masks = [coherent_mask(batch, H, W, d, rng) for _ in model.specs]
        for _ in range(warmup):
            _time_blocks(model, h0, masks, sparse=True)
        runs = [_time_blocks(model, h0, masks, sparse=True) for _ in range(repeats)]
        totals = [r[0] for r in runs]
        k = int(np.argsort(totals)[len(totals) // 2])
        t = totals[k]
        per = runs[k][1]
        budget = sum(float(block_budget(s, H, W, m).flops_sparse) for s, m in zip(model.specs, masks))
        rows.append(BenchRow(
            "sparse", d, float(np.mean([m.mean() for m in masks])), batch, batch / t, 1e3 * t,
            mask_ms=1e3 * sum(p.mask for p in per),
            bookkeeping_ms=1e3 * sum(p.bookkeeping for p in per),
            gather_ms=1e3 * sum(p.gather for p in per),
            residual_ms=1e3 * sum(p.residual for p in per),
            scatter_ms=1e3 * sum(p.scatter for p in per),
            macs_per_image=sum(p.macs for p in per) / batch,
            budget_macs_per_image=budget,
        ))
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# {BENCH_NOTE}\n")
        w = csv.DictWriter(f, fieldnames=list(asdict(rows[0]).keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


# ponder maps -------------------------------------------------------------------

def upscale_nearest(g: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of (N, h, w) masks to (N, size, size)."""
    N, h, w = g.shape
    ri = (np.arange(size) * h) // size
    ci = (np.arange(size) * w) // size
    return g[:, ri][:, :, ci]


def ponder_maps(model: DynConvNet, images: np.ndarray, masks=None) -> np.ndarray:
    """Per-pixel count of executed gated blocks at input resolution, shape (N, H, W)."""
    if not model.gated_indices and masks is None:
        raise ConfigurationError("ponder maps need at least one gated block")
    res = model.infer(images, "infer-sparse", masks=masks)
    size = model.cfg.input_size
    total = np.zeros((len(images), size, size), dtype=np.int64)
    for i, g in enumerate(res.masks):
        if g is not None and (model.specs[i].gated or masks is not None):
            total += upscale_nearest(g, size)
    return total


def write_pgm(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.dtype != np.uint8 or values.ndim != 2:
        raise ConfigurationError("PGM writer expects a 2-D uint8 array")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(values.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ConfigurationError("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ConfigurationError("only 8-bit PGM files are supported")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def emit_ponder(maps: np.ndarray, blocks: int, out_dir, prefix: str = "ponder") -> List[Path]:
    """Write ``{prefix}_{i}.pgm`` per image, scaled by ``round(255 * ponder / blocks)``, plus ``{prefix}.csv``."""
    if blocks < 1:
        raise ConfigurationError("ponder maps need at least one gated block")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    width = len(str(max(len(maps) - 1, 0)))
    for i, m in enumerate(maps):
        p = out_dir / f"{prefix}_{i:0{width}d}.pgm"
        write_pgm(p, np.rint(255.0 * m / blocks).astype(np.uint8))
        paths.append(p)
    csv_path = out_dir / f"{prefix}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image", "row"] + [f"c{j}" for j in range(maps.shape[2])])
        for i, m in enumerate(maps):
            for r, line in enumerate(m):
                w.writerow([i, r] + [int(v) for v in line])
    paths.append(csv_path)
    return paths


def ponder_focus(maps: np.ndarray, boxes: np.ndarray, margin: int = 2):
    """Share of total ponder mass inside each image's box grown by ``margin``.

    Returns ``(mass_fraction, mean_box_coverage)`` where coverage is the grown
    box area over the canvas area.
    """
    from .data import box_mask

    inside = total = 0.0
    coverage = []
    for m, box in zip(maps, boxes):
        b = box_mask(box, m.shape, margin)
        inside += float(m[b].sum())
        total += float(m.sum())
        coverage.append(b.mean())
    return (inside / total if total else 0.0), float(np.mean(coverage))
