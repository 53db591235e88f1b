import json

import numpy as np
import pytest
from scipy import stats

from seq2seq_mri.errors import ConfigError
from seq2seq_mri.toy.font import GLYPH_H, GLYPH_W, LETTERS, glyph_bitmap
from seq2seq_mri.toy.sim import (
    BACKGROUND,
    DISC,
    GLYPH,
    ToyConfig,
    difference_mask,
    generate_dataset,
    generate_subject,
    generate_subjects,
    manifest_hash,
    split_assignment,
    tissue_map,
)
from seq2seq_mri.volume_io import load_study, read_manifest


def _box_mask(box, size=128):
    y, x, h, w = box
    m = np.zeros((size, size), bool)
    m[y:y + h, x:x + w] = True
    return m


def _tissues_from_pixels(img, levels):
    # invert the per-sequence palette: each pixel takes the nearest tissue level
    lut = np.array([levels["background"], levels["disc"], levels["glyph"]])
    return np.abs(img[..., None] - lut).argmin(-1)


def test_font_has_26_distinct_nonempty_glyphs():
    bitmaps = [glyph_bitmap(k, 1) for k in range(26)]
    assert len(LETTERS) == 26
    assert all(b.shape == (GLYPH_H, GLYPH_W) and b.any() for b in bitmaps)
    assert len({b.tobytes() for b in bitmaps}) == 26
    assert glyph_bitmap(0, 4).shape == (GLYPH_H * 4, GLYPH_W * 4)


def test_same_seed_is_pixel_identical():
    a, b = generate_subject(99), generate_subject(99)
    assert np.array_equal(a.x1.data, b.x1.data) and np.array_equal(a.x2.data, b.x2.data)
    assert (a.label1, a.label2, a.layout) == (b.label1, b.label2, b.layout)
    c = generate_subject(100)
    assert not np.array_equal(a.x1.data, c.x1.data)


def test_subject_invariants():
    for s in generate_subjects(100, seed=3):
        assert s.x1.shape == s.x2.shape == (128, 128)
        assert s.label1 != s.label2
        assert 0 <= s.x1.data.min() and s.x1.data.max() <= 1
        for k in ("background", "disc", "glyph"):
            assert s.intensities[0][k] != s.intensities[1][k] or k == "background"
        # shared slot renders the same letter in both sequences
        shared = _box_mask(s.layout["shared_box"])
        t1, t2 = tissue_map(s, 1), tissue_map(s, 2)
        assert np.array_equal(t1[shared], t2[shared])


def test_structure_differs_only_inside_differing_slot():
    for s in generate_subjects(100, seed=11):
        t1 = _tissues_from_pixels(s.x1.data, s.intensities[0])
        t2 = _tissues_from_pixels(s.x2.data, s.intensities[1])
        differs = t1 != t2
        assert differs.any()
        assert not (differs & ~_box_mask(s.layout["diff_box"])).any()
        # every structural difference is covered by the ground-truth mask
        assert not (differs & ~difference_mask(s)).any()


def test_difference_mask_geometry():
    for s in generate_subjects(100, seed=5):
        m = difference_mask(s)
        assert m.any()
        assert not (m & ~_box_mask(s.layout["diff_box"])).any()
        assert not (m & _box_mask(s.layout["shared_box"])).any()


def test_palettes_are_separated():
    cfg = ToyConfig()
    for pal in cfg.palettes:
        ranges = sorted(pal.values())
        for (lo_a, hi_a), (lo_b, hi_b) in zip(ranges, ranges[1:]):
            assert lo_b - hi_a >= 0.2 - 1e-9


def test_tissue_codes_cover_all_structures():
    t = tissue_map(generate_subject(1), 1)
    assert {BACKGROUND, DISC, GLYPH} <= set(np.unique(t).tolist())


def test_label_distribution_uniform():
    labels = np.array([(s.label1, s.label2) for s in generate_subjects(10_000, seed=0)])
    for col in labels.T:
        counts = np.bincount(col, minlength=26)
        assert stats.chisquare(counts).pvalue > 0.001


def test_dataset_sizes_and_disjoint_splits(tmp_path):
    m = generate_dataset(10, 1, (8, 1, 1), tmp_path / "d")
    ids = [e["subject_id"] for e in m["studies"]]
    assert len(set(ids)) == 10
    splits = [e["split"] for e in m["studies"]]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (8, 1, 1)
    assert all(e["labels"]["label1"] != e["labels"]["label2"] for e in m["studies"])


def test_full_size_split_counts():
    s = split_assignment(20000, (9000, 1000, 10000), 0)
    assert (s.count("train"), s.count("val"), s.count("test")) == (9000, 1000, 10000)


def test_split_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        generate_dataset(10, 0, (5, 1, 1))


def test_regeneration_gives_identical_manifest_hash(tmp_path):
    generate_dataset(6, 7, (4, 1, 1), tmp_path / "a")
    generate_dataset(6, 7, (4, 1, 1), tmp_path / "b")
    assert manifest_hash(tmp_path / "a/manifest.json") == manifest_hash(tmp_path / "b/manifest.json")
    for name in sorted(p.name for p in (tmp_path / "a/images").iterdir()):
        assert (tmp_path / "a/images" / name).read_bytes() == (tmp_path / "b/images" / name).read_bytes()


def test_written_images_load_back_in_unit_range(tmp_path):
    m = generate_dataset(3, 2, (1, 1, 1), tmp_path)
    doc = read_manifest(tmp_path)
    st_ = load_study(doc["studies"][0], doc)
    subj = generate_subject(doc["studies"][0]["seed"])
    np.testing.assert_allclose(st_.sequences[0].data, subj.x1.data, atol=0.5 / 255 + 1e-6)
    assert json.loads((tmp_path / "manifest.json").read_text())["normalize"] is False
    assert m["studies"][0]["subject_id"] == "toy000000"
