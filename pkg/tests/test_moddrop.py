from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moddrop_pp.errors import ConfigError, InvalidCodeError, ShapeError
from moddrop_pp.moddrop import DropoutPolicy, apply_dropout, enumerate_configs, make_rng, sample_config


class TestEnumerate:
    def test_k4(self):
        codes = [str(c) for c in enumerate_configs(4)]
        assert len(codes) == 15
        assert codes[0] == "1111"
        assert codes[1:5] == ["0111", "1011", "1101", "1110"]
        assert codes[-1] == "1000"

    def test_k1(self):
        assert [str(c) for c in enumerate_configs(1)] == ["1"]

    def test_bitmask_oracle(self):
        assert sorted(str(c) for c in enumerate_configs(3)) == sorted(format(i, "03b") for i in range(1, 8))

    @pytest.mark.parametrize("k", range(1, 9))
    def test_unique_nonzero(self, k):
        codes = [str(c) for c in enumerate_configs(k)]
        assert len(set(codes)) == len(codes) == 2**k - 1
        assert "0" * k not in codes

    @pytest.mark.parametrize("k", [0, 17])
    def test_out_of_range(self, k):
        with pytest.raises(ConfigError):
            enumerate_configs(k)


class TestSampling:
    def test_uniform_frequencies(self):
        rng = make_rng(0)
        policy = DropoutPolicy(4)
        counts = Counter(str(sample_config(policy, rng)) for _ in range(150_000))
        assert len(counts) == 15
        assert max(abs(n / 150_000 - 1 / 15) for n in counts.values()) < 0.01

    def test_all_ones_probabilities(self):
        rng = make_rng(1)
        policy = DropoutPolicy(4, [1.0] * 4, "bernoulli_rejection")
        assert all(sample_config(policy, rng).is_full for _ in range(100))

    def test_bernoulli_rejection_exact(self):
        policy = DropoutPolicy(2, [0.5, 0.5], "bernoulli_rejection")
        probs = policy.probabilities()
        for c in ("01", "10", "11"):
            assert probs[c] == pytest.approx(1 / 3, abs=1e-15)
        rng = make_rng(2)
        counts = Counter(str(sample_config(policy, rng)) for _ in range(30_000))
        assert set(counts) == {"01", "10", "11"}
        assert max(abs(n / 30_000 - 1 / 3) for n in counts.values()) < 0.015

    def test_all_zero_bernoulli(self):
        with pytest.raises(ConfigError):
            sample_config(DropoutPolicy(3, [0.0] * 3, "bernoulli_rejection"), make_rng(0))

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            DropoutPolicy(2, mode="sometimes").validate()

    def test_reproducible(self):
        policy = DropoutPolicy(4)
        a = [str(sample_config(policy, make_rng(7, 3))) for _ in range(5)]
        b = [str(sample_config(policy, make_rng(7, 3))) for _ in range(5)]
        assert a == b
        seq_a = make_rng(7, 1).integers(0, 2**31, 10)
        seq_b = make_rng(7, 2).integers(0, 2**31, 10)
        assert not np.array_equal(seq_a, seq_b)


def sample(k=4, s=3, size=5, seed=0):
    rng = np.random.default_rng(seed)
    return SimpleNamespace(modalities=[rng.normal(size=(s, size, size)) + 1.0 for _ in range(k)])


class TestApplyDropout:
    def test_full_code_is_concat(self):
        smp = sample()
        out = apply_dropout(smp, "1111")
        assert out.data.tobytes() == np.concatenate(smp.modalities)[None].tobytes()

    def test_first_modality_dropped(self):
        out = apply_dropout(sample(), "0111").data
        assert not np.any(out[:, :3])
        assert np.all(out[:, 3:] != 0)

    def test_concat_oracle(self):
        smp = sample(k=2, s=2)
        oracle = np.concatenate([smp.modalities[0], np.zeros_like(smp.modalities[1])])[None]
        assert apply_dropout(smp, "10").data.tobytes() == oracle.tobytes()

    def test_code_length_mismatch(self):
        with pytest.raises(ShapeError):
            apply_dropout(sample(), "101")

    def test_zero_code(self):
        with pytest.raises(InvalidCodeError):
            apply_dropout(sample(), "0000")

    def test_array_input(self):
        x = np.ones((2, 8, 3, 3))
        out = apply_dropout(x, "01", k=2).data
        assert out[:, :4].sum() == 0 and out[:, 4:].sum() == 2 * 4 * 9


@given(st.integers(1, 15), st.integers(0, 1000))
def test_dropout_properties(code_idx, seed):
    code = format(code_idx, "04b")
    smp = sample(seed=seed, size=3)
    full = np.concatenate(smp.modalities)[None]
    once = apply_dropout(smp, code).data
    assert apply_dropout(once, code).data.tobytes() == once.tobytes()
    for j, bit in enumerate(code):
        block = once[:, 3 * j:3 * (j + 1)]
        if bit == "1":
            assert block.tobytes() == full[:, 3 * j:3 * (j + 1)].tobytes()
        else:
            assert np.abs(block).sum() == 0.0
