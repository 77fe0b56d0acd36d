import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import binary_dilation
from skimage.draw import polygon as draw_polygon

from staincycle.data import (DataError, Marker, PatchBatch, Stain, StainPatch,
                             SynthSpec, generate_synthetic_pair, load_manifest,
                             sample_batch, tile_image, write_synthetic_dataset)
from staincycle.metrics import brown_mask, dice_iou


def make_manifest(tmp_path, entries):
    from PIL import Image
    for e in entries:
        if e.get("_write", True):
            Image.new("RGB", (16, 16)).save(tmp_path / e["path"])
    doc = {"root": str(tmp_path),
           "entries": [{k: v for k, v in e.items() if not k.startswith("_")} for e in entries]}
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps(doc))
    return mpath


class TestLoadManifest:
    def test_identity_load(self, tmp_path):
        entries = [
            {"path": "a.png", "stain": "HE", "patient_id": "p1", "pair_id": None},
            {"path": "b.png", "stain": "CDX2", "patient_id": "p1", "pair_id": "x"},
            {"path": "c.png", "stain": "HE", "patient_id": "p2", "pair_id": "x"},
            {"path": "d.png", "stain": "CK818", "patient_id": "p2", "pair_id": None},
        ]
        m = load_manifest(make_manifest(tmp_path, entries))
        assert len(m.entries) == 4
        assert [e.path for e in m.entries] == ["a.png", "b.png", "c.png", "d.png"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_manifest(tmp_path / "nope.json")

    def test_dangling_path(self, tmp_path):
        entries = [{"path": "gone.png", "stain": "HE", "patient_id": "p", "_write": False}]
        with pytest.raises(DataError, match="dangling path"):
            load_manifest(make_manifest(tmp_path, entries))

    def test_duplicate_pair(self, tmp_path):
        entries = [
            {"path": "a.png", "stain": "CDX2", "patient_id": "p", "pair_id": "p7"},
            {"path": "b.png", "stain": "CDX2", "patient_id": "p", "pair_id": "p7"},
        ]
        with pytest.raises(DataError, match="duplicate pair"):
            load_manifest(make_manifest(tmp_path, entries))

    def test_malformed_record(self, tmp_path):
        entries = [{"path": "a.png", "stain": "NOT_A_STAIN", "patient_id": "p"}]
        with pytest.raises(DataError, match="malformed"):
            load_manifest(make_manifest(tmp_path, entries))


class TestTileImage:
    def test_exact_tiling(self):
        img = np.random.default_rng(0).random((512, 512, 3))
        assert len(tile_image(img, 256, 256)) == 4

    def test_identity(self):
        img = np.random.default_rng(1).random((512, 512, 3))
        patches = tile_image(img, 512, 512)
        assert len(patches) == 1
        assert np.array_equal(patches[0].pixels, img)

    def test_clamped_last_tile(self):
        # derived by enumerating the clamping rule: starts {0, 256->clamped 244}
        img = np.random.default_rng(2).random((500, 500, 3))
        patches = tile_image(img, 256, 256)
        assert len(patches) == 4
        assert np.array_equal(patches[3].pixels, img[244:500, 244:500])

    def test_tile_too_large(self):
        with pytest.raises(DataError):
            tile_image(np.zeros((64, 64, 3)), 128, 64)

    @settings(max_examples=30, deadline=None)
    @given(size=st.integers(64, 200), tile=st.integers(16, 64), stride=st.integers(1, 64))
    def test_full_coverage(self, size, tile, stride):
        tile -= tile % 4  # patch side must be a multiple of 4
        if tile < 4:
            tile = 4
        if stride > tile:
            stride = tile
        img = np.zeros((size, size, 3))
        covered = np.zeros((size, size), dtype=bool)
        n_starts = len(set(list(range(0, size - tile + 1, stride)) + [size - tile]))
        patches = tile_image(img, tile, stride)
        assert len(patches) == n_starts ** 2
        starts = sorted(set(list(range(0, size - tile + 1, stride)) + [size - tile]))
        for r in starts:
            for c in starts:
                covered[r:r + tile, c:c + tile] = True
        assert covered.all()


class TestSyntheticPairs:
    SPEC = SynthSpec(image_size=128, n_glands=3, nuclei_per_gland=(4, 8))

    def test_construction_contract(self):
        he, ihc, truth = generate_synthetic_pair(self.SPEC, 1)
        assert len(truth.gland_boundaries) == 3
        assert len(truth.nuclei_centroids) >= 3
        assert he.size == ihc.size == 128
        assert he.stain is Stain.HE and ihc.stain is Stain.CDX2

    def test_determinism(self):
        a = generate_synthetic_pair(self.SPEC, 42)
        b = generate_synthetic_pair(self.SPEC, 42)
        assert np.array_equal(a[0].pixels, b[0].pixels)
        assert np.array_equal(a[1].pixels, b[1].pixels)
        assert a[2].nuclei_centroids == b[2].nuclei_centroids

    def test_brown_matches_truth_at_zero_noise(self):
        _, ihc, truth = generate_synthetic_pair(self.SPEC, 3)
        _, iou = dice_iou(brown_mask(ihc.pixels), truth.positive_mask)
        assert iou >= 0.9

    def test_masks_disjoint(self):
        for seed in range(5):
            _, _, truth = generate_synthetic_pair(self.SPEC, seed)
            assert not np.any(truth.positive_mask & truth.negative_mask)

    def test_cdx2_brown_inside_dilated_nuclei(self):
        _, ihc, truth = generate_synthetic_pair(self.SPEC, 4)
        nuclei = truth.positive_mask | truth.negative_mask
        allowed = binary_dilation(nuclei, iterations=2)
        assert np.all(allowed[brown_mask(ihc.pixels)])

    def test_ck818_brown_inside_dilated_glands(self):
        spec = SynthSpec(image_size=128, n_glands=3, marker=Marker.CK818_LIKE)
        _, ihc, truth = generate_synthetic_pair(spec, 4)
        gland = np.zeros((128, 128), dtype=bool)
        for poly in truth.gland_boundaries:
            rr, cc = draw_polygon(poly[:, 0], poly[:, 1], shape=(128, 128))
            gland[rr, cc] = True
        allowed = binary_dilation(gland, iterations=2)
        assert np.all(allowed[brown_mask(ihc.pixels)])

    def test_noise_level(self):
        noisy = SynthSpec(image_size=128, n_glands=2, noise_level=0.05)
        he, _, _ = generate_synthetic_pair(noisy, 0)
        clean_spec = SynthSpec(image_size=128, n_glands=2, noise_level=0.0)
        he0, _, _ = generate_synthetic_pair(clean_spec, 0)
        assert not np.array_equal(he.pixels, he0.pixels)
        assert he.pixels.min() >= 0 and he.pixels.max() <= 1


class TestStainPatch:
    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            StainPatch(np.full((16, 16, 3), 1.5), Stain.HE, "p")

    def test_rejects_non_square(self):
        with pytest.raises(DataError):
            StainPatch(np.zeros((16, 20, 3)), Stain.HE, "p")

    def test_rejects_non_multiple_of_four(self):
        with pytest.raises(DataError):
            StainPatch(np.zeros((18, 18, 3)), Stain.HE, "p")


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    spec = SynthSpec(image_size=32, n_glands=1, nuclei_per_gland=(1, 2))
    return load_manifest(write_synthetic_dataset(spec, 5, out, seed=0))


class TestSampleBatch:
    def test_registered_pairing(self, manifest):
        batch = sample_batch(manifest, "registered", 2, seed=0)
        assert batch.registered
        for he, ihc in zip(batch.he, batch.ihc):
            assert he.pair_id == ihc.pair_id

    def test_determinism(self, manifest):
        a = sample_batch(manifest, "registered", 2, seed=5)
        b = sample_batch(manifest, "registered", 2, seed=5)
        assert [p.pair_id for p in a.he] == [p.pair_id for p in b.he]
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.ihc, b.ihc))

    def test_unregistered_independent(self, manifest):
        batch = sample_batch(manifest, "unregistered", 3, seed=1)
        assert not batch.registered
        assert len(batch.he) == len(batch.ihc) == 3

    def test_insufficient_pairs(self, tmp_path):
        entries = [
            {"path": "a.png", "stain": "HE", "patient_id": "p", "pair_id": None},
            {"path": "b.png", "stain": "CDX2", "patient_id": "p", "pair_id": None},
        ]
        m = load_manifest(make_manifest(tmp_path, entries))
        with pytest.raises(DataError, match="insufficient pairs"):
            sample_batch(m, "registered", 1, seed=0)


def test_patch_batch_invariant():
    px = np.zeros((16, 16, 3))
    he = StainPatch(px, Stain.HE, "p", pair_id="a")
    ihc = StainPatch(px, Stain.CDX2, "p", pair_id="b")
    with pytest.raises(DataError):
        PatchBatch(he=[he], ihc=[ihc], registered=True)
    PatchBatch(he=[he], ihc=[ihc], registered=False)  # no constraint unregistered
