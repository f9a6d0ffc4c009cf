import json

import numpy as np
import pytest

from melmatch.params import (
    K_VALUES,
    S_VALUES,
    ErrorModelParams,
    apply_variant,
    default_params,
    discrete_normal,
    wrap_pitch,
)


def test_defaults_are_valid_and_centered():
    p = default_params()
    assert p.edit[0].tolist() == pytest.approx([0.95, 0.03, 0.02])
    for name in ("modulation", "pitch_error"):
        assert np.argmax(getattr(p, name)[0]) == 5
    assert np.argmax(p.tempo_change[0]) == 4
    assert np.argmax(p.rhythm_error[0]) == p.q - 1
    assert p.rhythm_error.shape == (1, 57)


def test_initial_distributions():
    p = default_params()
    assert p.initial_transposition() == pytest.approx(np.full(12, 1 / 12))
    pi_s = p.initial_tempo()
    assert pi_s.sum() == pytest.approx(1.0)
    assert pi_s[4] > pi_s[0] and pi_s[4] > pi_s[8]
    assert pi_s == pytest.approx(pi_s[::-1])


@pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0])
def test_discrete_normal_is_normalized(sigma):
    d = discrete_normal(np.arange(-10, 11), sigma)
    assert d.sum() == pytest.approx(1.0)
    assert np.argmax(d) == 10


def test_wrap_pitch_range():
    d = wrap_pitch(np.arange(-30, 30))
    assert d.min() == -5 and d.max() == 6
    assert np.all((d - np.arange(-30, 30)) % 12 == 0)


@pytest.mark.parametrize(
    "change",
    [
        {"edit": [0.5, 0.4]},
        {"pitch_error": np.full(12, 0.1)},
        {"modulation": np.r_[-0.1, np.full(11, 1.1 / 11)]},
        {"init_tempo_sigma": 0.0},
    ],
)
def test_validation_rejects(change):
    with pytest.raises(ValueError):
        default_params().replace(**change)


def test_tables_are_read_only():
    p = default_params()
    with pytest.raises(ValueError):
        p.edit[0, 0] = 1.0


def test_json_round_trip(tmp_path):
    p = default_params(L=3, M=2)
    path = tmp_path / "p.json"
    p.save(path)
    d = json.loads(path.read_text())
    assert len(d["edit"]) == 4 and len(d["modulation"]) == 12 and len(d["rhythm_error"]) == 57
    back = ErrorModelParams.load(path)
    for name, arr in p.tables().items():
        np.testing.assert_allclose(getattr(back, name), arr, rtol=1e-12, atol=0)
    assert (back.L, back.M, back.q) == (3, 2, 29)


def test_json_tolerates_small_rounding_but_not_bad_sums():
    d = default_params().to_json_dict()
    d["edit"] = [0.9500004, 0.03, 0.02]
    assert ErrorModelParams.from_json_dict(d).edit.sum() == pytest.approx(1.0, abs=1e-12)
    d["edit"] = [0.9, 0.03, 0.02]
    with pytest.raises(ValueError):
        ErrorModelParams.from_json_dict(d)
    del d["edit"]
    with pytest.raises(ValueError, match="missing"):
        ErrorModelParams.from_json_dict(d)


def test_tempo_matrices_renormalize_at_the_edges():
    p = default_params()
    MS = p.tempo_matrices()[0]
    assert MS.sum(axis=1) == pytest.approx(np.ones(9))
    # from S=+4 only non-positive changes remain
    row = p.tempo_change[0]
    assert MS[8, 8] == pytest.approx(row[4] / row[:5].sum())


def test_modulation_matrix_is_circulant():
    p = default_params()
    MK = p.modulation_matrices()[0]
    assert MK.sum(axis=1) == pytest.approx(np.ones(12))
    for k in range(12):
        assert np.array_equal(MK[k], np.roll(MK[0], k))


def test_tempo_ghost_weights_complete_each_row():
    p = default_params()
    G = p.tempo_ghost_weights()[0]
    row = p.tempo_change[0]
    for s in range(9):
        valid = [d for d in range(-4, 5) if -4 <= S_VALUES[s] + d <= 4]
        z = sum(row[d + 4] for d in valid)
        # in-range mass (normalized) plus ghost mass reproduces the raw row / z
        assert G[s].sum() == pytest.approx((1 - z) / z)


class TestVariants:
    def test_full_is_identity(self):
        p = default_params()
        assert apply_variant(p, "full") is p

    def test_local_pins_cumulative_tables(self):
        p = apply_variant(default_params(), "local")
        assert p.modulation[0].tolist() == [float(k == 0) for k in K_VALUES]
        assert p.tempo_change[0].tolist() == [float(s == 0) for s in S_VALUES]
        assert np.array_equal(p.pitch_error, default_params().pitch_error)

    def test_cumulative_pins_local_tables(self):
        p = apply_variant(default_params(), "cumulative")
        assert p.pitch_error[0, 5] == 1.0 and p.pitch_error.sum() == 1.0
        assert p.rhythm_error[0, p.q - 1] == 1.0

    def test_restricted_limits_support(self):
        p = apply_variant(default_params(), "restricted")
        assert np.flatnonzero(p.modulation[0]).tolist() == [4, 5, 6]
        assert np.flatnonzero(p.tempo_change[0]).tolist() == [2, 3, 4, 5, 6]
        assert p.modulation.sum() == pytest.approx(1.0)

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown variant"):
            apply_variant(default_params(), "bogus")
