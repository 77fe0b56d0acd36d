"""Dataset ingestion, tiling, batch sampling, and synthetic H&E/IHC pair generation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from skimage.draw import disk as draw_disk
from skimage.draw import polygon as draw_polygon
from scipy.ndimage import binary_dilation


class Stain(str, Enum):
    HE = "HE"
    CDX2 = "CDX2"
    CK818 = "CK818"


class Marker(str, Enum):
    CDX2_LIKE = "CDX2_like"
    CK818_LIKE = "CK818_like"


class DataError(ValueError):
    """Raised for malformed manifests, dangling paths, or sampling contract violations."""


@dataclass
class StainPatch:
    """An RGB patch in [0,1] with its stain-domain label.

    `pair_id` is set iff a registered counterpart exists in the other domain.
    """

    pixels: np.ndarray  # H x W x 3, float, values in [0, 1]
    stain: Stain
    patient_id: str
    pair_id: Optional[str] = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"patch pixels must be HxWx3, got {px.shape}")
        h, w = px.shape[:2]
        if h != w:
            raise DataError(f"patches must be square, got {h}x{w}")
        if h <= 0 or h % 4 != 0:
            raise DataError(f"patch side must be a positive multiple of 4, got {h}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DataError("patch pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class ManifestEntry:
    path: str
    stain: Stain
    patient_id: str
    pair_id: Optional[str] = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]

    def by_stain(self, stain: Stain) -> list[ManifestEntry]:
        return [e for e in self.entries if e.stain == stain]

    def ihc_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.stain != Stain.HE]


@dataclass
class SynthSpec:
    """Layout parameters for one procedurally generated H&E/IHC pair."""

    image_size: int = 128
    n_glands: int = 3
    nuclei_per_gland: tuple[int, int] = (4, 8)
    marker: Marker = Marker.CDX2_LIKE
    noise_level: float = 0.0

    def __post_init__(self) -> None:
        if self.image_size <= 0 or self.image_size % 4 != 0:
            raise DataError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if self.n_glands < 0:
            raise DataError("n_glands must be >= 0")
        lo, hi = self.nuclei_per_gland
        if lo < 0 or hi < lo:
            raise DataError(f"bad nuclei_per_gland range {self.nuclei_per_gland}")
        if self.noise_level < 0:
            raise DataError("noise_level must be >= 0")
        self.marker = Marker(self.marker)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "n_glands": self.n_glands,
            "nuclei_per_gland": list(self.nuclei_per_gland),
            "marker": self.marker.value,
            "noise_level": self.noise_level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(
            image_size=int(d.get("image_size", 128)),
            n_glands=int(d.get("n_glands", 3)),
            nuclei_per_gland=tuple(d.get("nuclei_per_gland", (4, 8))),
            marker=Marker(d.get("marker", "CDX2_like")),
            noise_level=float(d.get("noise_level", 0.0)),
        )


@dataclass
class CellTruth:
    """Ground truth for one synthetic pair: rendered nuclei and marker masks."""

    nuclei_centroids: list[tuple[int, int]]
    positive_mask: np.ndarray  # H x W bool
    negative_mask: np.ndarray  # H x W bool
    gland_boundaries: list[np.ndarray]  # each (k, 2) array of (row, col) vertices


@dataclass
class PatchBatch:
    he: list[StainPatch]
    ihc: list[StainPatch]
    registered: bool

    def __post_init__(self) -> None:
        if len(self.he) != len(self.ihc):
            raise DataError("he and ihc lists must have equal length")
        if self.registered:
            for a, b in zip(self.he, self.ihc):
                if a.pair_id is None or a.pair_id != b.pair_id:
                    raise DataError("registered batch requires element-wise pair_id equality")


# Canonical rendering palette (RGB in [0,1]). These are implementation constants
# referenced symbolically by tests, not ground truth.
@dataclass(frozen=True)
class SynthPalette:
    he_stroma: tuple[float, float, float] = (0.909, 0.627, 0.706)
    he_gland: tuple[float, float, float] = (0.949, 0.800, 0.847)
    he_nucleus: tuple[float, float, float] = (0.416, 0.298, 0.576)
    ihc_background: tuple[float, float, float] = (0.930, 0.930, 0.960)
    ihc_gland: tuple[float, float, float] = (0.880, 0.885, 0.930)
    ihc_counterstain: tuple[float, float, float] = (0.290, 0.370, 0.760)
    dab_brown: tuple[float, float, float] = (0.545, 0.271, 0.075)


PALETTE = SynthPalette()


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a JSON dataset manifest.

    Entry order is preserved. Raises DataError on missing file, malformed
    records, duplicate (stain, pair_id), or dangling image paths.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "root" not in doc or "entries" not in doc:
        raise DataError("manifest must be an object with 'root' and 'entries'")
    root = Path(doc["root"])
    if not root.is_absolute():
        root = (path.parent / root).resolve()
    entries: list[ManifestEntry] = []
    seen_pairs: set[tuple[str, str]] = set()
    for i, rec in enumerate(doc["entries"]):
        try:
            entry = ManifestEntry(
                path=rec["path"],
                stain=Stain(rec["stain"]),
                patient_id=rec["patient_id"],
                pair_id=rec.get("pair_id"),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"malformed manifest record {i}: {e}") from e
        if entry.pair_id is not None:
            key = (entry.stain.value, entry.pair_id)
            if key in seen_pairs:
                raise DataError(f"duplicate pair: stain={entry.stain.value} pair_id={entry.pair_id}")
            seen_pairs.add(key)
        if not (root / entry.path).is_file():
            raise DataError(f"dangling path in manifest: {entry.path}")
        entries.append(entry)
    return DatasetManifest(root=root, entries=entries)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "root": str(manifest.root),
        "entries": [
            {"path": e.path, "stain": e.stain.value, "patient_id": e.patient_id, "pair_id": e.pair_id}
            for e in manifest.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PNG as an HxWx3 float array via value/255."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write an HxWx3 [0,1] array as an 8-bit RGB PNG."""
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def tile_image(image: np.ndarray, tile: int, stride: int, stain: Stain = Stain.HE,
               patient_id: str = "unknown") -> list[StainPatch]:
    """Extract row-major square tiles; the last tile in each axis is clamped to the border."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if tile > min(h, w):
        raise DataError(f"tile {tile} exceeds image dimension {min(h, w)}")
    if stride < 1:
        raise DataError("stride must be >= 1")

    def starts(dim: int) -> list[int]:
        s = list(range(0, dim - tile + 1, stride))
        if s[-1] != dim - tile:
            s.append(dim - tile)
        return s

    patches = []
    for r in starts(h):
        for c in starts(w):
            patches.append(StainPatch(image[r:r + tile, c:c + tile], stain, patient_id))
    return patches


def _place_points(rng: np.random.Generator, n: int, region: np.ndarray,
                  min_dist: float, avoid: Sequence[tuple[int, int]] = (),
                  max_tries: int = 400) -> list[tuple[int, int]]:
    """Sample n pixel positions from a boolean region with pairwise separation
    min_dist (also against `avoid`). Returns what fits."""
    coords = np.argwhere(region)
    if coords.size == 0:
        return []
    pts: list[tuple[int, int]] = []
    for _ in range(n):
        placed = False
        for _ in range(max_tries):
            r, c = coords[int(rng.integers(len(coords)))]
            if all((r - pr) ** 2 + (c - pc) ** 2 >= min_dist ** 2
                   for pr, pc in list(pts) + list(avoid)):
                pts.append((int(r), int(c)))
                placed = True
                break
        if not placed:
            break
    return pts


def generate_synthetic_pair(spec: SynthSpec, seed: int) -> tuple[StainPatch, StainPatch, CellTruth]:
    """Render one registered H&E/IHC pair with exact cell-level ground truth.

    Pure function of (spec, seed). H&E uses a pink-stroma / purple-nuclei
    palette; IHC renders DAB brown on nuclei (CDX2-like) or gland cytoplasm
    (CK818-like) with a blue counterstain on the remaining nuclei. Truth masks
    are taken before noise is applied.
    """
    rng = np.random.default_rng(seed)
    s = spec.image_size
    gland_r = max(6.0, s / 7.0)
    nuc_r = max(3, s // 32)  # radius-3 disks (29 px) clear the default segmenter area floor

    # Gland centers: farthest-candidate placement keeps glands apart even
    # when the image is too small for strict rejection sampling.
    centers: list[tuple[float, float]] = []
    margin = gland_r * 1.15 + 1
    for _ in range(spec.n_glands):
        cands = rng.uniform(margin, s - margin, size=(40, 2))
        if not centers:
            centers.append(tuple(cands[0]))
            continue
        dists = [min((cr - r) ** 2 + (cc - c) ** 2 for r, c in centers) for cr, cc in cands]
        centers.append(tuple(cands[int(np.argmax(dists))]))

    gland_mask = np.zeros((s, s), dtype=bool)
    gland_masks: list[np.ndarray] = []
    boundaries: list[np.ndarray] = []
    for cr, cc in centers:
        k = 14
        ang = np.linspace(0, 2 * np.pi, k, endpoint=False)
        radii = gland_r * (0.80 + 0.35 * rng.random(k))
        # light smoothing avoids spiky polygons
        radii = (radii + np.roll(radii, 1) + np.roll(radii, -1)) / 3.0
        verts = np.stack([cr + radii * np.sin(ang), cc + radii * np.cos(ang)], axis=1)
        rr, ccx = draw_polygon(verts[:, 0], verts[:, 1], shape=(s, s))
        m = np.zeros((s, s), dtype=bool)
        m[rr, ccx] = True
        gland_masks.append(m)
        gland_mask |= m
        boundaries.append(verts)

    # Nuclei inside glands.
    sep = 2 * nuc_r + 2
    gland_nuclei: list[tuple[int, int]] = []
    for m in gland_masks:
        interior = m & ~binary_dilation(~m, iterations=nuc_r + 1)
        count = int(rng.integers(spec.nuclei_per_gland[0], spec.nuclei_per_gland[1] + 1))
        gland_nuclei.extend(_place_points(rng, count, interior, sep, avoid=gland_nuclei))

    # Stromal nuclei, kept clear of glands and the image border.
    clear = ~binary_dilation(gland_mask, iterations=nuc_r + 2)
    clear[:nuc_r + 1] = clear[-(nuc_r + 1):] = False
    clear[:, :nuc_r + 1] = clear[:, -(nuc_r + 1):] = False
    n_stromal = max(2, 2 * spec.n_glands)
    stromal_nuclei = _place_points(rng, n_stromal, clear, sep, avoid=gland_nuclei)

    def disks(points: Sequence[tuple[int, int]]) -> np.ndarray:
        m = np.zeros((s, s), dtype=bool)
        for r, c in points:
            rr, cc = draw_disk((r, c), nuc_r, shape=(s, s))
            m[rr, cc] = True
        return m

    gland_nuc_mask = disks(gland_nuclei)
    stromal_nuc_mask = disks(stromal_nuclei)
    all_nuc_mask = gland_nuc_mask | stromal_nuc_mask

    pal = PALETTE

    def paint(base: tuple[float, float, float]) -> np.ndarray:
        img = np.empty((s, s, 3), dtype=np.float64)
        img[:] = base
        return img

    he = paint(pal.he_stroma)
    he[gland_mask] = pal.he_gland
    he[all_nuc_mask] = pal.he_nucleus

    ihc = paint(pal.ihc_background)
    if spec.marker is Marker.CDX2_LIKE:
        ihc[gland_mask] = pal.ihc_gland
        ihc[stromal_nuc_mask] = pal.ihc_counterstain
        ihc[gland_nuc_mask] = pal.dab_brown
        positive = gland_nuc_mask.copy()
    else:
        ihc[gland_mask & ~gland_nuc_mask] = pal.dab_brown
        ihc[stromal_nuc_mask] = pal.ihc_counterstain
        ihc[gland_nuc_mask] = pal.ihc_counterstain
        positive = gland_mask & ~gland_nuc_mask
    negative = stromal_nuc_mask.copy()

    truth = CellTruth(
        nuclei_centroids=gland_nuclei + stromal_nuclei,
        positive_mask=positive,
        negative_mask=negative,
        gland_boundaries=boundaries,
    )

    if spec.noise_level > 0:
        he = np.clip(he + rng.normal(0.0, spec.noise_level, he.shape), 0.0, 1.0)
        ihc = np.clip(ihc + rng.normal(0.0, spec.noise_level, ihc.shape), 0.0, 1.0)

    stain = Stain.CDX2 if spec.marker is Marker.CDX2_LIKE else Stain.CK818
    pair_id = f"synth-{seed}"
    he_patch = StainPatch(he, Stain.HE, "synthetic", pair_id)
    ihc_patch = StainPatch(ihc, stain, "synthetic", pair_id)
    return he_patch, ihc_patch, truth


def write_synthetic_dataset(spec: SynthSpec, n_pairs: int, out_dir: str | Path,
                            seed: int) -> Path:
    """Materialize n registered synthetic pairs plus truth files and a manifest.

    Returns the manifest path. Layout: pair_XXXX_{he,ihc}.png,
    pair_XXXX_{pos,neg}.png truth masks, pair_XXXX_truth.json, manifest.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    stain = Stain.CDX2 if spec.marker is Marker.CDX2_LIKE else Stain.CK818
    for i in range(n_pairs):
        he, ihc, truth = generate_synthetic_pair(spec, seed + i)
        name = f"pair_{i:04d}"
        pair_id = f"{name}"
        save_image(he.pixels, out / f"{name}_he.png")
        save_image(ihc.pixels, out / f"{name}_ihc.png")
        for tag, mask in (("pos", truth.positive_mask), ("neg", truth.negative_mask)):
            Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(out / f"{name}_{tag}.png")
        truth_doc = {
            "nuclei_centroids": [[int(r), int(c)] for r, c in truth.nuclei_centroids],
            "gland_boundaries": [b.tolist() for b in truth.gland_boundaries],
            "positive_mask": f"{name}_pos.png",
            "negative_mask": f"{name}_neg.png",
        }
        (out / f"{name}_truth.json").write_text(json.dumps(truth_doc, sort_keys=True))
        entries.append(ManifestEntry(f"{name}_he.png", Stain.HE, "synthetic", pair_id))
        entries.append(ManifestEntry(f"{name}_ihc.png", stain, "synthetic", pair_id))
    manifest = DatasetManifest(root=out, entries=entries)
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path


def _load_patch(manifest: DatasetManifest, entry: ManifestEntry) -> StainPatch:
    return StainPatch(load_image(manifest.root / entry.path), entry.stain,
                      entry.patient_id, entry.pair_id)


def registered_pairs(manifest: DatasetManifest) -> list[tuple[ManifestEntry, ManifestEntry]]:
    """Matched (HE, IHC) entry pairs sharing a pair_id."""
    he = {e.pair_id: e for e in manifest.by_stain(Stain.HE) if e.pair_id is not None}
    out = []
    for e in manifest.ihc_entries():
        if e.pair_id is not None and e.pair_id in he:
            out.append((he[e.pair_id], e))
    return out


def sample_batch(manifest: DatasetManifest, mode: str, batch: int, seed: int) -> PatchBatch:
    """Sample a batch of patches; 'registered' draws matched pairs, 'unregistered'
    draws the two domains independently. Deterministic in seed."""
    if mode not in ("registered", "unregistered"):
        raise DataError(f"unknown sampling mode {mode!r}")
    rng = np.random.default_rng(seed)
    if mode == "registered":
        pairs = registered_pairs(manifest)
        if len(pairs) < batch:
            raise DataError(f"insufficient pairs: need {batch}, have {len(pairs)}")
        idx = rng.choice(len(pairs), size=batch, replace=False)
        he = [_load_patch(manifest, pairs[i][0]) for i in idx]
        ihc = [_load_patch(manifest, pairs[i][1]) for i in idx]
        return PatchBatch(he=he, ihc=ihc, registered=True)
    he_entries = manifest.by_stain(Stain.HE)
    ihc_entries = manifest.ihc_entries()
    if len(he_entries) < batch or len(ihc_entries) < batch:
        raise DataError(
            f"insufficient patches: need {batch} per domain, "
            f"have {len(he_entries)} HE / {len(ihc_entries)} IHC")
    hi = rng.choice(len(he_entries), size=batch, replace=False)
    ii = rng.choice(len(ihc_entries), size=batch, replace=False)
    he = [_load_patch(manifest, he_entries[i]) for i in hi]
    ihc = [_load_patch(manifest, ihc_entries[i]) for i in ii]
    return PatchBatch(he=he, ihc=ihc, registered=False)
