import shutil

import numpy as np
import pytest
from scipy.special import ndtri

from moddrop_pp import data as D
from moddrop_pp.errors import ConfigError, DegenerateError, FormatError
from moddrop_pp.moddrop import make_rng
from moddrop_pp.tensor import Tensor

SMALL = dict(size=24, lesion_radius=(1.5, 3.0))


def datasets_equal(a, b):
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if x.subject_id != y.subject_id or x.label.tobytes() != y.label.tobytes():
            return False
        if any(m.tobytes() != n.tobytes() for m, n in zip(x.modalities, y.modalities)):
            return False
    return True


@pytest.fixture(scope="module")
def small_ds():
    return D.generate_dataset(D.SynthConfig(seed=3, **SMALL), 3)


class TestGenerate:
    def test_deterministic(self, small_ds):
        again = D.generate_dataset(D.SynthConfig(seed=3, **SMALL), 3)
        assert datasets_equal(small_ds, again)

    def test_seed_changes_data(self, small_ds):
        other = D.generate_dataset(D.SynthConfig(seed=4, **SMALL), 3)
        assert not datasets_equal(small_ds, other)

    def test_shapes_and_labels(self, small_ds):
        for s in small_ds:
            assert s.k == 4
            assert all(m.shape == (3, 24, 24) for m in s.modalities)
            assert s.label.dtype == bool and s.label.shape == (24, 24)
            assert s.label.any()
            assert s.stacked().shape == (12, 24, 24)

    def test_label_matches_lesions(self, small_ds):
        s = small_ds[0]
        oracle = np.zeros((24, 24), bool)
        for les in s.lesions:
            oracle |= les.rasterize(24, 24)
        np.testing.assert_array_equal(s.label, oracle)

    def test_zero_contrast_carries_no_signal(self):
        cfg = D.SynthConfig(noise_sigma=0.0, contrast=[0.0, 1.0, 0.5, 0.3], normalize=False, **SMALL)
        empty = np.zeros((3, 24, 24), bool)
        full = np.ones((3, 24, 24), bool)
        a = D._render_modality(cfg, 0, empty, make_rng(0, 1))
        b = D._render_modality(cfg, 0, full, make_rng(0, 1))
        assert a.tobytes() == b.tobytes()
        c = D._render_modality(cfg, 1, full, make_rng(0, 1))
        assert c.tobytes() != D._render_modality(cfg, 1, empty, make_rng(0, 1)).tobytes()

    def test_flair_has_strongest_lesion_contrast(self):
        s = D.generate_subject(D.SynthConfig(seed=0, **SMALL), 0)
        mid = 1
        gaps = [m[mid][s.label].mean() - m[mid][~s.label].mean() for m in s.modalities]
        assert int(np.argmax(gaps)) == 1

    @pytest.mark.parametrize("kwargs", [
        dict(lesions=(0, 2)), dict(slices=2), dict(lesion_radius=(5.0, 40.0)), dict(size=4),
        dict(contrast=[1.0]), dict(prevalence_range=(0.5, 0.1)), dict(tissue_level=[0, 1, 1, 1]),
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            D.SynthConfig(**kwargs).validate()

    def test_modality_names(self):
        assert D.modality_names(6) == ["T1", "FLAIR", "T2", "CE", "M4", "M5"]


class TestKDE:
    def test_fixed_point(self):
        # Gaussian quantiles: a smooth unimodal histogram peaked exactly at 1.0
        img = 1.0 + 0.05 * ndtri(np.linspace(0.0005, 0.9995, 4000))
        step = (img.max() - img.min()) / (D.KDE_GRID - 1)
        assert abs(D.kde_mode(img) - 1.0) < 0.5 * step
        out = D.kde_normalize(img)
        assert np.max(np.abs(out - img)) < 0.5 * step * img.max()

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        img = rng.gamma(4.0, 0.3, (20, 20))
        np.testing.assert_allclose(D.kde_normalize(3 * img), D.kde_normalize(img), rtol=1e-9, atol=0)

    def test_bimodal(self):
        rng = np.random.default_rng(2)
        img = np.concatenate([rng.normal(2.0, 0.1, 6000), rng.normal(0.8, 0.1, 3000)])
        out = D.kde_normalize(img)
        step = (out.max() - out.min()) / (D.KDE_GRID - 1)
        assert abs(D.kde_mode(out) - 1.0) <= step

    def test_grid_search_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0.0, 1.0, 400) ** 2 + 0.5
        h = D._silverman(x)
        grid = np.linspace(x.min(), x.max(), D.KDE_GRID)
        dens = [np.exp(-0.5 * ((g - x) / h) ** 2).sum() for g in grid]
        assert abs(D.kde_mode(x) - grid[int(np.argmax(dens))]) <= grid[1] - grid[0]

    def test_tensor_in_tensor_out(self):
        out = D.kde_normalize(Tensor(np.random.default_rng(4).uniform(1, 2, (8, 8))))
        assert isinstance(out, Tensor)

    def test_constant(self):
        with pytest.raises(DegenerateError):
            D.kde_normalize(np.full((5, 5), 2.0))


class TestDatasetIO:
    def test_round_trip(self, tmp_path, small_ds):
        D.save_dataset(tmp_path / "ds", small_ds)
        assert D.dataset_exists(tmp_path / "ds")
        back = D.load_dataset(tmp_path / "ds")
        assert datasets_equal(small_ds, back)
        assert back[1].lesions == small_ds[1].lesions
        D.save_dataset(tmp_path / "again", back)
        for f in sorted((tmp_path / "ds").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "again" / f.relative_to(tmp_path / "ds")).read_bytes()

    def test_truncated_file(self, tmp_path, small_ds):
        D.save_dataset(tmp_path / "ds", small_ds)
        victim = tmp_path / "ds" / small_ds[0].subject_id / "FLAIR.mdt"
        victim.write_bytes(victim.read_bytes()[:-5])
        with pytest.raises(FormatError) as exc:
            D.load_dataset(tmp_path / "ds")
        assert exc.value.offset is not None

    def test_corrupt_magic(self, tmp_path, small_ds):
        D.save_dataset(tmp_path / "ds", small_ds)
        victim = tmp_path / "ds" / small_ds[0].subject_id / "label.mdt"
        victim.write_bytes(b"JUNK" + victim.read_bytes()[4:])
        with pytest.raises(FormatError):
            D.load_dataset(tmp_path / "ds")

    def test_permuted_manifest(self, tmp_path, small_ds):
        D.save_dataset(tmp_path / "ds", small_ds)
        manifest = tmp_path / "ds" / D.MANIFEST_NAME
        lines = manifest.read_text().splitlines()
        lines = [("modalities=CE,T2,FLAIR,T1" if l.startswith("modalities=") else l) for l in lines]
        manifest.write_text("\n".join(reversed(lines)) + "\n")
        assert datasets_equal(D.load_dataset(tmp_path / "ds"), small_ds)

    def test_unknown_modality_names(self, tmp_path, small_ds):
        D.save_dataset(tmp_path / "ds", small_ds)
        manifest = tmp_path / "ds" / D.MANIFEST_NAME
        manifest.write_text(manifest.read_text().replace("modalities=T1,", "modalities=PD,"))
        with pytest.raises(FormatError):
            D.load_dataset(tmp_path / "ds")

    def test_missing_key(self, tmp_path, small_ds):
        D.save_dataset(tmp_path / "ds", small_ds)
        manifest = tmp_path / "ds" / D.MANIFEST_NAME
        kept = [l for l in manifest.read_text().splitlines() if not l.startswith("subject.0.label=")]
        manifest.write_text("\n".join(kept) + "\n")
        with pytest.raises(FormatError):
            D.load_dataset(tmp_path / "ds")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            D.load_dataset(tmp_path / "nothing")

    def test_missing_tensor_file(self, tmp_path, small_ds):
        D.save_dataset(tmp_path / "ds", small_ds)
        shutil.rmtree(tmp_path / "ds" / small_ds[2].subject_id)
        with pytest.raises(FormatError):
            D.load_dataset(tmp_path / "ds")
