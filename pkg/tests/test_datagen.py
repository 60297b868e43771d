import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from swinkoa import datagen
from swinkoa.datagen import AugmentParams, ManifestError, ManifestRow, Sample, SiteSpec, SynthSpec

SMALL = (6, 3, 3, 3, 2)


def _small_spec(seed=0, counts=SMALL):
    spec = SynthSpec(seed=seed)
    for s in spec.sites.values():
        s.train_counts = counts
    return spec


def test_sample_is_deterministic():
    a = datagen.synth_sample(3, "target", 42)
    b = datagen.synth_sample(3, "target", 42)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.gap_mask, b.gap_mask)
    assert a.image.shape == (64, 64, 3) and a.image.dtype == np.float32
    assert 0.0 <= a.image.min() and a.image.max() <= 1.0


def test_sample_rejects_bad_inputs():
    with pytest.raises(ValueError):
        datagen.synth_sample(5, "source", 0)
    with pytest.raises(ValueError):
        datagen.synth_sample(0, "elsewhere", 0)


def test_gap_width_decreases_with_grade():
    spec = SynthSpec()
    means = [np.mean([datagen.measure_gap(datagen.render_clean(g, s, spec)[0]) for s in range(100)])
             for g in range(5)]
    assert all(a > b for a, b in zip(means[:-1], means[1:])), means


def test_site_intensity_offset():
    spec = SynthSpec()
    rng = np.random.default_rng(0)
    diffs = []
    for k in range(1000):
        g = int(rng.integers(5))
        a = datagen.synth_sample(g, "source", k, spec).image.mean()
        b = datagen.synth_sample(g, "target", k, spec).image.mean()
        diffs.append(b - a)
    offset = spec.sites["target"].intensity_offset - spec.sites["source"].intensity_offset
    assert np.mean(diffs) == pytest.approx(offset, abs=0.01)


def test_apply_site_identity_without_effects(rng):
    img = rng.random((16, 16))
    out = datagen.apply_site(img, SiteSpec(noise_sigma=0.0), rng)
    np.testing.assert_allclose(out, img, atol=1e-12)


@pytest.mark.parametrize("ratio,expect", [((6, 1, 3), (60, 10, 30)), ((7, 1, 2), (70, 10, 20))])
def test_split_sizes(ratio, expect):
    samples = [Sample(np.zeros((1, 1, 3)), g, "source", id=str(i)) for i, g in enumerate(np.arange(100) % 5)]
    out = datagen.split_dataset(samples, ratio, seed=0)
    assert tuple(len(datagen.select(out, split=s)) for s in datagen.SPLITS) == expect


@given(st.lists(st.integers(0, 4), min_size=10, max_size=200),
       st.sampled_from([(6, 1, 3), (7, 1, 2)]), st.integers(0, 1000))
@example([0] * 4 + [1] * 7 + [2] * 7, (7, 1, 2), 0)  # greedy rounding dead end
def test_split_is_stratified(grades, ratio, seed):
    samples = [Sample(np.zeros((1, 1, 3)), g, "source", id=str(i)) for i, g in enumerate(grades)]
    out = datagen.split_dataset(samples, ratio, seed=seed)
    assert sorted(s.id for s in out) == sorted(s.id for s in samples)
    counts = np.bincount(grades, minlength=5)
    for k, split in enumerate(datagen.SPLITS):
        got = np.bincount([s.grade for s in out if s.split == split], minlength=5)
        assert (np.abs(got - counts * ratio[k] / sum(ratio)) <= 1).all()


def test_augment_identity_and_flip(rng):
    img = datagen.synth_sample(2, "source", 7).image
    np.testing.assert_array_equal(datagen.apply_augment(img, AugmentParams()), img)
    once = datagen.apply_augment(img, AugmentParams(flip=True))
    np.testing.assert_array_equal(datagen.apply_augment(once, AugmentParams(flip=True)), img)


def test_augment_range_sweep():
    img = datagen.synth_sample(4, "target", 3).image
    rng = np.random.default_rng(0)
    for _ in range(1000):
        out = datagen.apply_augment(img, AugmentParams.draw(rng))
        assert out.shape == img.shape and out.dtype == img.dtype
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_drops_mask():
    s = datagen.synth_sample(1, "source", 3)
    assert datagen.augment(s, np.random.default_rng(0)).gap_mask is None


def test_generate_counts_and_zero_grade():
    spec = _small_spec(counts=(6, 3, 3, 3, 0))
    data = datagen.generate_dataset(spec)
    for site in datagen.SITES:
        got = np.bincount([s.grade for s in data if s.site == site], minlength=5)
        assert got.tolist() == spec.counts(site)
        train = np.bincount([s.grade for s in datagen.select(data, site, "train")], minlength=5)
        assert train.tolist() == [6, 3, 3, 3, 0]
    assert not any(s.grade == 4 for s in data)
    assert len({s.id for s in data}) == len(data)


def test_generate_rejects_invalid_spec():
    spec = SynthSpec(gap_widths=(5, 6, 4, 3, 2))
    assert spec.validate()
    with pytest.raises(ValueError):
        datagen.generate_dataset(spec)


def test_spec_yaml_roundtrip(tmp_path):
    spec = _small_spec(seed=9)
    datagen.save_synth_spec(spec, tmp_path / "s.yaml")
    assert datagen.load_synth_spec(tmp_path / "s.yaml") == spec
    with pytest.raises(ValueError):
        SynthSpec.from_dict({"bogus": 1})


def _write_rows(tmp_path, lines):
    p = tmp_path / "manifest.csv"
    p.write_text("path,grade,site,split\n" + "\n".join(lines) + "\n")
    return p


def test_manifest_three_rows_in_order(tmp_path):
    p = _write_rows(tmp_path, ["a.png,0,source,train", "b.png,4,target,test", "c.png,2,source,val"])
    rows = datagen.load_manifest(p)
    assert [r.path for r in rows] == ["a.png", "b.png", "c.png"]
    assert rows[1] == ManifestRow("b.png", 4, "target", "test")


@pytest.mark.parametrize("line,needle", [
    ("a.png,7,source,train", "grade 7"),
    ("a.png,x,source,train", "not an integer"),
    ("a.png,1,moon,train", "site"),
    ("a.png,1,source,holdout", "split"),
    ("a.png,1,source", "4 fields"),
])
def test_manifest_errors_name_line(tmp_path, line, needle):
    p = _write_rows(tmp_path, ["ok.png,0,source,train", line])
    with pytest.raises(ManifestError, match=rf":3: .*{needle}"):
        datagen.load_manifest(p)


def test_manifest_duplicate_and_header(tmp_path):
    with pytest.raises(ManifestError, match="duplicate"):
        datagen.load_manifest(_write_rows(tmp_path, ["a.png,0,source,train", "a.png,1,source,val"]))
    bad = tmp_path / "bad.csv"
    bad.write_text("file,label\n")
    with pytest.raises(ManifestError, match=":1:"):
        datagen.load_manifest(bad)
    with pytest.raises(ManifestError, match="not found"):
        datagen.load_manifest(tmp_path / "missing.csv")


def test_dataset_write_read_roundtrip(tmp_path):
    data = datagen.generate_dataset(_small_spec(counts=(2, 1, 1, 1, 1)))
    manifest = datagen.write_dataset(data, tmp_path)
    rows = datagen.load_manifest(manifest)
    assert [(r.grade, r.site, r.split) for r in rows] == [(s.grade, s.site, s.split) for s in data]
    back = datagen.load_dataset(manifest, 64)
    # 8-bit storage quantises to within half a grey level
    for a, b in zip(data, back):
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


def test_load_image_errors(tmp_path):
    p = tmp_path / "junk.png"
    p.write_bytes(b"not an image")
    with pytest.raises(ManifestError):
        datagen.load_image(p, 64)
