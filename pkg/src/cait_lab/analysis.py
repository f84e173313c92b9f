"""Diagnostics: residual branch ratios, class-attention maps, saliency, size tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .blocks import ConfigError
from .cait import (
    AttentionRecord,
    CaitModel,
    ClassAttentionStage,
    FULL_PRESETS,
    forward,
    model_presets,
    patchify,
)
from .data import write_pnm
from .flops import count_flops, count_params
from .tensor import Tensor


# ---------------------------------------------------------------- branch ratios


@dataclass
class BranchRatioSeries:
    """Rows of ``(epoch, layer, branch, ratio)``; branch is ``"SA"`` or ``"FFN"``."""

    rows: list = field(default_factory=list)
    flagged: bool = False  # set when some input had zero norm (ratio = +inf)

    def add(self, epoch: int, other: "BranchRatioSeries") -> None:
        self.rows.extend((epoch, layer, branch, r) for _, layer, branch, r in other.rows)
        self.flagged = self.flagged or other.flagged

    @property
    def epochs(self) -> list:
        return sorted({r[0] for r in self.rows})

    def ratios(self, epoch: Optional[int] = None) -> np.ndarray:
        """[layers, 2] array (SA, FFN) for ``epoch`` (default: the last one)."""
        if not self.rows:
            return np.zeros((0, 2))
        if epoch is None:
            epoch = self.epochs[-1]
        sel = [r for r in self.rows if r[0] == epoch]
        n = max(r[1] for r in sel) + 1
        out = np.zeros((n, 2))
        for _, layer, branch, ratio in sel:
            out[layer, 0 if branch == "SA" else 1] = ratio
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "layer", "branch", "ratio"])
        for epoch, layer, branch, ratio in self.rows:
            w.writerow([epoch, layer, branch, repr(float(ratio))])
        return buf.getvalue()


def _as_patches(model: CaitModel, x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    cfg = model.config
    if arr.shape[-2:] == (cfg.patch_count, cfg.patch_dim):
        return arr
    return patchify(arr, cfg.patch_size)


def branch_ratios(model: CaitModel, probe_batch, epoch: int = 0) -> BranchRatioSeries:
    """Mean over the probe batch of ||weighted branch|| / ||block input|| per SA-stage block.

    Runs in evaluation mode, so stochastic-depth gates are 1. A zero-norm input
    makes that block's ratio +inf and sets ``flagged``.
    """
    probe = []
    forward(model, Tensor(_as_patches(model, probe_batch)), training=False, probe=probe)
    series = BranchRatioSeries()
    for layer, branch, per_sample in probe:
        r = float(np.mean(per_sample)) if np.all(np.isfinite(per_sample)) else math.inf
        series.flagged = series.flagged or not math.isfinite(r)
        series.rows.append((epoch, layer, branch, r))
    return series


# ---------------------------------------------------------------- attention maps


def extract_attention(model: CaitModel, image) -> list[AttentionRecord]:
    """Class-attention records ([h, 1, keys] each) for one image or patch matrix."""
    if not isinstance(model.config.cls_policy, ClassAttentionStage):
        raise ConfigError("attention maps need a model with a class-attention stage")
    patches = _as_patches(model, image)
    if patches.ndim != 2:
        raise ConfigError(f"extract_attention takes one image, got patches of shape {patches.shape}")
    _, records = forward(model, Tensor(patches), training=False)
    return [r for r in records if r.stage == "CA"]


def attention_maps(model: CaitModel, records: Sequence[AttentionRecord]) -> list[tuple[int, int, np.ndarray]]:
    """``(layer, head, [grid, grid] map)`` for every head of every CA record."""
    cfg = model.config
    out = []
    for rec in records:
        maps = rec.patch_maps(cfg.grid, cfg.keys_include_class)
        for h in range(maps.shape[0]):
            out.append((rec.layer_index, h, maps[h]))
    return out


@dataclass
class SaliencyMap:
    values: np.ndarray  # [H, W] in [0, 1]
    layer_index: int
    modulated: Optional[np.ndarray] = None  # gray image times values
    image_id: str = ""


def _grid_of(keys: int, keys_include_class: Optional[bool]) -> tuple[int, bool]:
    if keys_include_class is None:
        g = math.isqrt(keys)
        if g * g == keys:
            return g, False
        keys_include_class = True
    n = keys - 1 if keys_include_class else keys
    g = math.isqrt(n)
    if g * g != n:
        raise ConfigError(f"{n} patch keys do not form a square grid")
    return g, keys_include_class


def upsample(m: np.ndarray, H: int, W: int, mode: str = "nearest") -> np.ndarray:
    """Resize a [gh, gw] map to [H, W] (pixel-center sampling)."""
    gh, gw = m.shape
    if mode == "nearest":
        rows = (np.arange(H) * gh) // H
        cols = (np.arange(W) * gw) // W
        return m[np.ix_(rows, cols)]
    if mode == "bilinear":
        ys = np.clip((np.arange(H) + 0.5) * gh / H - 0.5, 0, gh - 1)
        xs = np.clip((np.arange(W) + 0.5) * gw / W - 0.5, 0, gw - 1)
        tmp = np.stack([np.interp(xs, np.arange(gw), row) for row in m])
        return np.stack([np.interp(ys, np.arange(gh), col) for col in tmp.T], axis=1)
    raise ValueError(f"unknown upsampling mode {mode!r}")


def minmax(a: np.ndarray) -> np.ndarray:
    """(a - min) / (max - min); a constant array maps to 0.5 everywhere."""
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0:
        return np.full(a.shape, 0.5)
    return (a - lo) / (hi - lo)


def saliency(records: Sequence[AttentionRecord], layer_index: int, image=None, mode: str = "nearest",
             keys_include_class: Optional[bool] = None, size: Optional[tuple] = None,
             image_id: str = "") -> SaliencyMap:
    """Head-averaged class attention of CA layer ``layer_index`` at image resolution.

    ``image`` is [C, H, W] or [H, W]; its channel mean is multiplied by the
    normalized map to give ``modulated``. Without an image, pass ``size``.
    """
    rec = next((r for r in records if r.stage == "CA" and r.layer_index == layer_index), None)
    if rec is None:
        raise ConfigError(f"no class-attention record for layer {layer_index}")
    w = rec.weights[..., 0, :]
    if w.ndim != 2:
        raise ConfigError("saliency takes the records of a single image")
    g, with_cls = _grid_of(w.shape[-1], keys_include_class)
    m = (w[:, 1:] if with_cls else w).mean(axis=0).reshape(g, g)
    gray = None
    if image is not None:
        img = np.asarray(image, dtype=np.float64)
        gray = img if img.ndim == 2 else img.mean(axis=0)
        size = gray.shape
    if size is None:
        raise ValueError("saliency needs an image or an explicit size")
    values = minmax(upsample(m, size[0], size[1], mode))
    return SaliencyMap(values, layer_index, None if gray is None else gray * values, image_id)


def export_maps(model: CaitModel, records, out_dir, prefix: str = "attn") -> list[Path]:
    """Write one min-max normalized PGM per (CA layer, head)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer, head, m in attention_maps(model, records):
        p = out_dir / f"{prefix}_ca{layer}_head{head}.pgm"
        write_pnm(p, minmax(m))
        paths.append(p)
    return paths


def export_saliency(sal: SaliencyMap, path) -> Path:
    """PPM with the map in red and the modulated image in green and blue."""
    base = sal.modulated if sal.modulated is not None else sal.values
    rgb = np.stack([sal.values, base, base], axis=-1)
    write_pnm(path, rgb)
    return Path(path)


# ---------------------------------------------------------------- size tables

# (params in millions, GFLOPs @224, GFLOPs @384) as published; None if not listed
REFERENCE = {
    "XXS-24": (12.0, 2.5, 9.5),
    "XXS-36": (17.3, 3.8, 14.2),
    "XS-24": (26.6, 5.4, 19.3),
    "XS-36": (38.6, 8.1, 28.8),
    "S-24": (46.9, 9.4, 32.2),
    "S-36": (68.2, 13.9, 48.0),
    "S-48": (89.5, 18.6, 63.8),
    "M-24": (185.9, 36.0, 116.1),
    "M-36": (270.9, 53.7, 173.3),
    "M-48": (356.0, None, None),
}


def report_tables(configs: Optional[Sequence] = None, resolutions: Sequence[int] = (224, 384)) -> str:
    """CSV of parameter and FLOP counts, with published values where known.

    ``configs`` holds preset names or ``(name, CaitConfig)`` pairs; the default
    is every full-size preset.
    """
    if configs is None:
        configs = FULL_PRESETS
    rows = []
    for item in configs:
        name, cfg = (item, model_presets(item)) if isinstance(item, str) else item
        ref = REFERENCE.get(name, (None, None, None))
        row = {
            "model": name,
            "depth": f"{cfg.sa_depth}+{cfg.ca_depth}",
            "dim": cfg.dim,
            "heads": cfg.heads,
            "params_M": f"{count_params(cfg) / 1e6:.2f}",
            "ref_params_M": "" if ref[0] is None else ref[0],
        }
        for res in resolutions:
            row[f"gflops_{res}"] = f"{count_flops(cfg, res) / 1e9:.2f}"
            r = {224: ref[1], 384: ref[2]}.get(res)
            row[f"ref_gflops_{res}"] = "" if r is None else r
        rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


__all__ = [
    "BranchRatioSeries",
    "REFERENCE",
    "SaliencyMap",
    "attention_maps",
    "branch_ratios",
    "export_maps",
    "export_saliency",
    "extract_attention",
    "minmax",
    "report_tables",
    "saliency",
    "upsample",
]
