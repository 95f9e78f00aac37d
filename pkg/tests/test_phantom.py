import csv

import numpy as np
import pytest
from scipy import stats

from hmseg import phantom as ph
from hmseg.io import FormatError
from hmseg.phantom import PhantomConfig, PhantomDataset

SMALL = PhantomConfig(height=48, width=48, n_control=6, n_lesion=6, seed=11)


def test_control_has_no_lesion_labels_and_all_tissues():
    for i in range(10):
        s = ph.generate_sample(SMALL, ph.sample_rng(0, "control", i), "control")
        counts = np.bincount(s.labels_full.ravel(), minlength=8)
        assert counts[7] == 0 and (counts[:7] > 0).all()
        assert s.visible == "tissue" and s.mask.indices() == [0]


def test_lesions_replace_white_matter_only():
    for i in range(10):
        rng = ph.sample_rng(3, "lesion", i)
        s = ph.generate_sample(SMALL, rng, "lesion")
        before = ph.tissue_phantom(SMALL, ph.sample_rng(3, "lesion", i))
        lesion = s.labels_full == 7
        assert lesion.any()
        assert (before[lesion] == ph.WM).all()
        np.testing.assert_array_equal(s.labels_full[~lesion], before[~lesion])
        assert s.visible == "lesion" and s.mask.indices() == [0, 1]


def test_lesions_are_bright_in_flair():
    s = ph.generate_sample(PhantomConfig(), ph.sample_rng(0, "lesion", 0), "lesion")
    assert s.image[1][s.labels_full == 7].mean() > s.image[1][s.labels_full == 1].mean() + 0.3


def test_generation_is_deterministic():
    a = ph.generate_samples(SMALL, "lesion", 3)
    b = ph.generate_samples(SMALL, "lesion", 3)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.labels_full.tobytes() == y.labels_full.tobytes()


def test_config_validation():
    means = list(ph.DEFAULT_MEANS)
    means[7] = (0.78, 0.46)
    with pytest.raises(ValueError):
        PhantomConfig(means=tuple(means))
    with pytest.raises(ValueError):
        PhantomConfig(lesion_count_range=(0, 2))
    with pytest.raises(ValueError):
        PhantomConfig(height=16)


def test_normalize_properties():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(2, 40, 40)) * 3 + 5
    out = ph.normalize(img)
    np.testing.assert_allclose(out.mean(axis=(1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=(1, 2)), 1, atol=1e-12)
    # invariant to positive affine intensity changes, idempotent
    np.testing.assert_allclose(ph.normalize(img * 2.5 - 7), out, atol=1e-10)
    np.testing.assert_allclose(ph.normalize(out), out, atol=1e-10)


def test_normalize_rejects_constant_channel():
    img = np.zeros((2, 10, 10))
    img[0] = np.random.default_rng(0).normal(size=(10, 10))
    with pytest.raises(ValueError):
        ph.normalize(img)


def test_sample_round_trip_is_bitwise():
    s = ph.generate_sample(SMALL, ph.sample_rng(0, "lesion", 1), "lesion", "l0001")
    raw = ph.encode_sample(s)
    back = ph.decode_sample(raw, "l0001")
    assert ph.encode_sample(back) == raw
    assert back.kind == "lesion" and back.visible == "lesion"


def test_sample_decode_errors():
    raw = ph.encode_sample(ph.generate_sample(SMALL, ph.sample_rng(0, "control", 0), "control"))
    with pytest.raises(FormatError):
        ph.decode_sample(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        ph.decode_sample(raw[:-1])


def test_visible_labels():
    s = ph.generate_sample(SMALL, ph.sample_rng(0, "lesion", 0), "lesion")
    assert set(np.unique(s.visible_labels())) == {0, 7}
    c = ph.generate_sample(SMALL, ph.sample_rng(0, "control", 0), "control")
    np.testing.assert_array_equal(c.visible_labels(), c.labels_full)


def test_generate_dataset_layout(tmp_path):
    out = ph.generate_dataset(SMALL, tmp_path / "data")
    rows = ph.read_manifest(out / "manifest.csv")
    assert [r["kind"] for r in rows].count("control") == 6
    assert [r["kind"] for r in rows].count("lesion") == 6
    assert all((out / r["path"]).exists() for r in rows)
    assert (out / "phantom.cfg").read_text().startswith("height = 48")
    with open(out / "h4_audit.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 12


def test_generate_dataset_is_bitwise_reproducible(tmp_path):
    a = ph.generate_dataset(SMALL, tmp_path / "a")
    b = ph.generate_dataset(SMALL, tmp_path / "b")
    for p in sorted((a / "samples").iterdir()):
        assert p.read_bytes() == (b / "samples" / p.name).read_bytes()
    assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()


def test_generate_dataset_cleans_up_on_failure(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = ph.save_sample

    def flaky(path, s):
        calls["n"] += 1
        if calls["n"] == 4:
            raise OSError("disk full")
        real(path, s)

    monkeypatch.setattr(ph, "save_sample", flaky)
    with pytest.raises(OSError):
        ph.generate_dataset(SMALL, tmp_path / "data")
    assert not (tmp_path / "data").exists()


def test_dataset_is_lazy_and_normalised(tmp_path):
    out = ph.generate_dataset(SMALL, tmp_path / "data")
    ds = PhantomDataset(out, "lesion")
    assert len(ds) == 6 and ds.access_log == []
    s = ds["l0002"]
    assert len(ds.access_log) == 1
    np.testing.assert_allclose(s.image.mean(axis=(1, 2)), 0, atol=1e-12)
    sub = ds.subset(["l0002", "l0003"])
    sub["l0002"]
    assert len(ds.access_log) == 1
    raw = PhantomDataset(out, "lesion", normalise=False)["l0002"]
    np.testing.assert_array_equal(ph.normalize(raw.image), s.image)


def test_ks_statistic_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.normal(size=rng.integers(5, 300))
        y = rng.normal(0.2, 1.1, size=rng.integers(5, 300))
        assert ph.ks_statistic(x, y) == pytest.approx(stats.ks_2samp(x, y).statistic, abs=1e-12)


def test_ks_critical_constant():
    assert ph.ks_critical(100, 100, 0.01) == pytest.approx(1.6276 * np.sqrt(0.02), rel=1e-4)


def test_h4_holds_on_published_seed():
    cfg = PhantomConfig(seed=0)
    rows = ph.h4_audit(ph.generate_samples(cfg, "control", 50), ph.generate_samples(cfg, "lesion", 50))
    assert len(rows) == 12
    assert all(r.ks_ok and r.mean_ok for r in rows)


def test_h4_false_rejection_rate_matches_alpha():
    # intensities are identically distributed by construction, so each KS test
    # should reject with probability about 1%; 12 tests per seed
    rejected = total = 0
    for seed in range(10):
        cfg = PhantomConfig(seed=100 + seed)
        rows = ph.h4_audit(ph.generate_samples(cfg, "control", 15), ph.generate_samples(cfg, "lesion", 15))
        rejected += sum(not r.ks_ok for r in rows)
        total += len(rows)
    # P(Binomial(120, 0.01) > 5) < 1e-3
    assert rejected <= 5, (rejected, total)


def test_h4_detects_a_shifted_population():
    cfg = PhantomConfig(seed=5)
    controls = ph.generate_samples(cfg, "control", 20)
    lesions = [s.with_image(s.image + 0.05) for s in ph.generate_samples(cfg, "lesion", 20)]
    rows = ph.h4_audit(controls, lesions)
    assert not any(r.ks_ok for r in rows)
