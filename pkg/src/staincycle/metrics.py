"""Evaluation metrics: brown-mask DICE/IOU, cell-count ratios, SSIM, and FID
with a pluggable embedder, aggregated over evaluation directories."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import eigh
from scipy.signal import convolve2d
from skimage.color import rgb2hsv

from .structure import to_grayscale


class MetricError(ValueError):
    """Raised for metric contract violations (shape/dimension mismatch, empty sets)."""


@dataclass
class BrownThresholds:
    """HSV bounds for DAB-positive (brown) pixels. Hue in degrees."""

    hue_low: float = 10.0
    hue_high: float = 45.0
    sat_min: float = 0.25
    val_min: float = 0.10
    val_max: float = 0.95

    def __post_init__(self) -> None:
        if not (0 <= self.hue_low < self.hue_high <= 360):
            raise ValueError(f"need 0 <= hue_low < hue_high <= 360, got {self.hue_low}, {self.hue_high}")
        if not (0 <= self.sat_min <= 1):
            raise ValueError("sat_min must lie in [0, 1]")
        if not (0 <= self.val_min < self.val_max <= 1):
            raise ValueError("need 0 <= val_min < val_max <= 1")

    def to_dict(self) -> dict:
        return {"hue_low": self.hue_low, "hue_high": self.hue_high,
                "sat_min": self.sat_min, "val_min": self.val_min, "val_max": self.val_max}


@dataclass
class CellCounts:
    total: int
    positive: int
    negative: int

    def __post_init__(self) -> None:
        if self.total != self.positive + self.negative:
            raise ValueError("total must equal positive + negative")


@dataclass
class MetricReport:
    fid: float
    ssim: float
    iou: float
    dice: float
    r_total: Optional[float]
    r_positive: Optional[float]
    r_negative: Optional[float]
    n_patches: int


def brown_mask(rgb: np.ndarray, thresholds: BrownThresholds = BrownThresholds()) -> np.ndarray:
    """Binary mask of pixels whose HSV falls in the DAB-brown band."""
    hsv = rgb2hsv(np.asarray(rgb, dtype=np.float64))
    hue = hsv[..., 0] * 360.0
    sat = hsv[..., 1]
    val = hsv[..., 2]
    return ((hue >= thresholds.hue_low) & (hue <= thresholds.hue_high)
            & (sat >= thresholds.sat_min)
            & (val >= thresholds.val_min) & (val <= thresholds.val_max))


def dice_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> tuple[float, float]:
    """(dice, iou) between two binary masks; both are 1.0 when both masks are empty."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    size_sum = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if union == 0:
        return 1.0, 1.0
    return 2.0 * inter / size_sum, inter / union


def cell_count_ratio(gen_count: int, gt_count: int) -> float:
    """Signed percent deviation of the generated-image cell count from ground truth."""
    if gt_count <= 0:
        raise MetricError("undefined ratio: ground-truth count must be positive")
    return (gen_count - gt_count) / gt_count * 100.0


def count_cells(segmentation) -> CellCounts:
    """Per-class cell counts over a CellSegmentation."""
    positive = sum(1 for c in segmentation.cells if c.cls == "positive")
    negative = sum(1 for c in segmentation.cells if c.cls == "negative")
    return CellCounts(total=positive + negative, positive=positive, negative=negative)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(img_a: np.ndarray, img_b: np.ndarray, window_size: int = 11,
         sigma: float = 1.5, dynamic_range: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window; images are converted to luma
    grayscale internally. Returns a value in [-1, 1]."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = to_grayscale(a)
        b = to_grayscale(b)
    if min(a.shape) < window_size:
        raise MetricError(f"image {a.shape} smaller than the {window_size}x{window_size} window")

    win = _gaussian_window(window_size, sigma)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    mu_a = convolve2d(a, win, mode="valid")
    mu_b = convolve2d(b, win, mode="valid")
    var_a = convolve2d(a * a, win, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, win, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, win, mode="valid") - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def embed(images: Sequence[np.ndarray],
          embedder: str | Callable[[np.ndarray], np.ndarray] = "downsample_identity",
          ) -> list[np.ndarray]:
    """Map images to embedding vectors for FID.

    'downsample_identity' converts to grayscale and average-pools to 8x8
    (64-dim); any callable taking one image and returning a 1-D vector is
    accepted as a pluggable backbone.
    """
    if len(images) == 0:
        raise MetricError("cannot embed an empty image list")
    if callable(embedder):
        return [np.asarray(embedder(img), dtype=np.float64).ravel() for img in images]
    if embedder != "downsample_identity":
        raise MetricError(f"unknown embedder {embedder!r}")

    def pool(img: np.ndarray) -> np.ndarray:
        g = to_grayscale(np.asarray(img, dtype=np.float64)) if img.ndim == 3 else np.asarray(img)
        rows = np.array_split(np.arange(g.shape[0]), 8)
        cols = np.array_split(np.arange(g.shape[1]), 8)
        out = np.empty((8, 8))
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                out[i, j] = g[np.ix_(r, c)].mean()
        return out.ravel()

    return [pool(img) for img in images]


def fid(vectors_a: Sequence[np.ndarray], vectors_b: Sequence[np.ndarray],
        eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two embedding sets.

    The trace cross term uses the symmetric PSD route: eigenvalues of
    S_a^{1/2} S_b S_a^{1/2}, with small negative eigenvalues clamped to zero.
    Covariances are regularized by eps * I.
    """
    a = np.asarray(vectors_a, dtype=np.float64)
    b = np.asarray(vectors_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError(f"embedding dimension mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise MetricError("need at least 2 vectors per set")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + eps * np.eye(d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + eps * np.eye(d)

    # symmetric square root of cov_a
    w, v = eigh(cov_a)
    w = np.clip(w, 0.0, None)
    sqrt_a = (v * np.sqrt(w)) @ v.T
    inner = sqrt_a @ cov_b @ sqrt_a
    w2 = eigh(inner, eigvals_only=True)
    w2 = np.clip(w2, 0.0, None)
    trace_sqrt = float(np.sum(np.sqrt(w2)))

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(value, 0.0)


@dataclass
class EvalConfig:
    thresholds: BrownThresholds = field(default_factory=BrownThresholds)
    min_area: int = 12
    segmenter: str = "local"  # 'local' or 'remote'
    endpoint: Optional[str] = None
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.segmenter not in ("local", "remote"):
            raise ValueError("segmenter must be 'local' or 'remote'")
        if self.segmenter == "remote" and not self.endpoint:
            raise ValueError("remote segmenter requires an endpoint")


def evaluate_dataset(generated_dir: str | Path, reference_dir: str | Path,
                     config: EvalConfig = EvalConfig(),
                     embedder: str | Callable = "downsample_identity",
                     ) -> tuple[MetricReport, list[dict]]:
    """Evaluate a directory of generated IHC patches against references.

    Paired metrics (SSIM, brown-mask DICE/IOU, cell counts) align files by
    name; FID is computed over the pooled unpaired sets. Count ratios are
    computed on counts summed over the whole set. Returns the aggregate
    report plus per-patch rows.
    """
    from .data import Stain, StainPatch, load_image
    from .segmenter import segment_local, segment_remote

    gen_dir, ref_dir = Path(generated_dir), Path(reference_dir)
    gen_names = sorted(p.name for p in gen_dir.glob("*.png"))
    ref_names = sorted(p.name for p in ref_dir.glob("*.png"))
    if not gen_names or not ref_names:
        raise MetricError("evaluation directories must contain PNG images")
    if gen_names != ref_names:
        raise MetricError("paired metrics require identical filename sets "
                          f"({len(gen_names)} generated vs {len(ref_names)} reference)")

    def segment(pixels: np.ndarray):
        patch = StainPatch(pixels, Stain.CDX2, "eval")
        if config.segmenter == "remote":
            return segment_remote(config.endpoint, patch, timeout=config.timeout)
        return segment_local(patch, config.thresholds, config.min_area)

    per_patch: list[dict] = []
    gen_images, ref_images = [], []
    sums = {"gen": CellCounts(0, 0, 0), "ref": CellCounts(0, 0, 0)}
    for name in gen_names:
        g = load_image(gen_dir / name)
        r = load_image(ref_dir / name)
        gen_images.append(g)
        ref_images.append(r)
        d, i = dice_iou(brown_mask(g, config.thresholds), brown_mask(r, config.thresholds))
        s = ssim(g, r)
        cg = count_cells(segment(g))
        cr = count_cells(segment(r))
        sums["gen"] = CellCounts(sums["gen"].total + cg.total,
                                 sums["gen"].positive + cg.positive,
                                 sums["gen"].negative + cg.negative)
        sums["ref"] = CellCounts(sums["ref"].total + cr.total,
                                 sums["ref"].positive + cr.positive,
                                 sums["ref"].negative + cr.negative)
        per_patch.append({
            "name": name, "ssim": s, "dice": d, "iou": i,
            "gen_total": cg.total, "gen_positive": cg.positive, "gen_negative": cg.negative,
            "ref_total": cr.total, "ref_positive": cr.positive, "ref_negative": cr.negative,
        })

    def ratio(cls: str) -> Optional[float]:
        gen_n = getattr(sums["gen"], cls)
        ref_n = getattr(sums["ref"], cls)
        if ref_n == 0:
            return 0.0 if gen_n == 0 else None
        return cell_count_ratio(gen_n, ref_n)

    report = MetricReport(
        fid=fid(embed(gen_images, embedder), embed(ref_images, embedder)),
        ssim=float(np.mean([p["ssim"] for p in per_patch])),
        iou=float(np.mean([p["iou"] for p in per_patch])),
        dice=float(np.mean([p["dice"] for p in per_patch])),
        r_total=ratio("total"),
        r_positive=ratio("positive"),
        r_negative=ratio("negative"),
        n_patches=len(per_patch),
    )
    return report, per_patch


def write_report(report: MetricReport, per_patch: list[dict], path: str | Path,
                 config: EvalConfig, render_figures: bool = True) -> Path:
    """Write report JSON (+ per-patch CSV and summary figures alongside it).

    SSIM/DICE/IOU are additionally reported on the x100 display scale.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "n_patches": report.n_patches,
        "fid": report.fid,
        "ssim": report.ssim,
        "iou": report.iou,
        "dice": report.dice,
        "r_total": report.r_total,
        "r_positive": report.r_positive,
        "r_negative": report.r_negative,
        "display": {
            "ssim_x100": report.ssim * 100.0,
            "iou_x100": report.iou * 100.0,
            "dice_x100": report.dice * 100.0,
        },
        "segmenter": config.segmenter,
        "endpoint": config.endpoint,
        "min_area": config.min_area,
        "brown_thresholds": config.thresholds.to_dict(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.rename(path)

    csv_path = path.with_suffix(".csv")
    fieldnames = list(per_patch[0].keys()) if per_patch else ["name"]
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(per_patch)

    if render_figures and per_patch:
        _plot_report(report, per_patch, path)
    return path


def _plot_report(report: MetricReport, per_patch: list[dict], json_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    base = json_path.with_suffix("")

    fig, ax = plt.subplots(figsize=(6, 4))
    names = ["ssim", "dice", "iou"]
    ax.bar(names, [getattr(report, n) * 100 for n in names], color="#6A4C93")
    ax.set_ylabel("score (x100)")
    ratios = [("total", report.r_total), ("pos", report.r_positive), ("neg", report.r_negative)]
    text = "  ".join(f"R_{k}={v:+.2f}%" for k, v in ratios if v is not None)
    ax.set_title(f"FID={report.fid:.3f}   {text}", fontsize=9)
    fig.tight_layout()
    fig.savefig(f"{base}_summary.png", dpi=120)
    plt.close(fig)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].hist([p["ssim"] for p in per_patch], bins=20, color="#8B4513")
    axes[0].set_title("per-patch SSIM")
    axes[1].hist([p["dice"] for p in per_patch], bins=20, color="#2A6F97")
    axes[1].set_title("per-patch DICE (brown mask)")
    fig.tight_layout()
    fig.savefig(f"{base}_per_patch.png", dpi=120)
    plt.close(fig)
