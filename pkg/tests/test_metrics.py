"""Metric oracles: closed forms, an independent matrix-root implementation."""

import csv
import io

import numpy as np
import pytest
import scipy.linalg

import venom.metrics as metrics_mod
from venom.data import SHAPE_CLASSES, render_sample
from venom.errors import ContractViolationError
from venom.metrics import (
    CSV_COLUMNS,
    asr,
    evaluate_suite,
    frechet_distance,
    inception_score_toy,
    metrics_csv,
    ssim,
    write_metrics_csv,
)
from venom.tensor import mlp_init
from venom.victims import ARCH_ACTIVATION, ARCH_SIZES, VictimClassifier


def fresh_victim(seed=0, arch="a"):
    rng = np.random.default_rng(seed)
    return VictimClassifier(arch=arch, net=mlp_init(ARCH_SIZES[arch], ARCH_ACTIVATION[arch], rng), train_seed=0)


# ---------------------------------------------------------------------------
# success rate


def test_asr_ratio():
    records = [{"success": True}] * 90 + [{"success": False}] * 10
    assert asr(records) == pytest.approx(0.90)
    assert asr([{"success": True}] * 7) == 1.0
    with pytest.raises(ContractViolationError):
        asr([])


# ---------------------------------------------------------------------------
# Fréchet distance


def test_frechet_identical_sets_is_zero():
    a = np.random.default_rng(0).standard_normal((80, 5))
    assert frechet_distance(a, a) <= 1e-6


def test_frechet_one_dimensional_closed_form():
    rng = np.random.default_rng(42)
    n = 100_000
    a = rng.normal(0.0, 1.0, (n, 1))
    b = rng.normal(1.0, 1.0, (n, 1))
    # equal variances: the distance reduces to the squared mean gap, 1.0
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=0.1)


def test_frechet_matches_independent_matrix_root():
    rng = np.random.default_rng(3)
    for trial in range(5):
        a = rng.standard_normal((60, 3)) @ rng.standard_normal((3, 3)) + rng.standard_normal(3)
        b = rng.standard_normal((60, 3)) @ rng.standard_normal((3, 3)) + rng.standard_normal(3)
        mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
        ca = np.cov(a, rowvar=False) + 1e-6 * np.eye(3)
        cb = np.cov(b, rowvar=False) + 1e-6 * np.eye(3)
        cross = scipy.linalg.sqrtm(ca @ cb)
        expect = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2.0 * np.real(cross)))
        assert frechet_distance(a, b) == pytest.approx(expect, abs=1e-8)


def test_frechet_symmetric_and_nonnegative():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((40, 4)) * 2.0
    b = rng.standard_normal((40, 4)) + 0.5
    d_ab = frechet_distance(a, b)
    d_ba = frechet_distance(b, a)
    assert d_ab >= 0.0
    assert d_ab == pytest.approx(d_ba, abs=1e-9)


def test_frechet_rejects_degenerate_inputs():
    good = np.zeros((10, 4))
    with pytest.raises(ContractViolationError):
        frechet_distance(np.zeros((4, 4)), good)  # needs dim+1 samples
    with pytest.raises(ContractViolationError):
        frechet_distance(good, np.zeros((10, 3)))
    with pytest.raises(ContractViolationError):
        frechet_distance(np.zeros(10), good)


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_identity_is_exactly_one():
    x = np.random.default_rng(0).uniform(-1, 1, (16, 16))
    assert ssim(x, x) == 1.0


def test_ssim_constant_images_closed_form():
    a = np.full((16, 16), 0.2)
    b = np.full((16, 16), 0.6)
    c1 = (0.01 * 2.0) ** 2
    # variance terms vanish; only the luminance ratio survives
    expect = (2 * 0.2 * 0.6 + c1) / (0.2**2 + 0.6**2 + c1)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-12)


def test_ssim_negation_breaks_structure():
    # on zero-mean windows the luminance factor stays ~1 while covariance
    # flips sign, so negation drives the score toward -1
    x = 0.9 * np.cos(2 * np.pi * np.arange(16) / 4)[None, :] * np.ones((16, 1))
    assert ssim(x, -x) < 0.2


def test_ssim_negation_on_shapes_regression_band():
    # rendered shapes sit on a -1 background: negation flips BOTH the
    # luminance and structure factors and the two minus signs cancel, so the
    # score stays high (though below identity); pinned as a regression band
    for k in (0, 5):
        x = render_sample(SHAPE_CLASSES[k], jitter_seed=1)
        value = ssim(x, -x)
        assert 0.8 < value < 1.0


def test_ssim_symmetry():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (16, 16))
    y = rng.uniform(-1, 1, (16, 16))
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)


def test_ssim_joint_shift_with_matched_window_means():
    # a cosine with period 7 sums to zero over every 7-wide window, so x and
    # y share all window means; a joint constant shift then cancels exactly
    rng = np.random.default_rng(8)
    x = rng.uniform(-0.5, 0.5, (16, 16))
    ripple = 0.2 * np.cos(2 * np.pi * np.arange(16) / 7)[None, :]
    y = x + ripple
    base = ssim(x, y)
    for c in (0.3, -0.25):
        assert ssim(x + c, y + c) == pytest.approx(base, abs=1e-12)


def test_ssim_bounded():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.uniform(-1, 1, (16, 16))
        y = rng.uniform(-1, 1, (16, 16))
        assert -1.0 <= ssim(x, y) <= 1.0


def test_ssim_rejects_bad_shapes():
    with pytest.raises(ContractViolationError):
        ssim(np.zeros((16, 16)), np.zeros((8, 8)))
    with pytest.raises(ContractViolationError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))  # smaller than the window


# ---------------------------------------------------------------------------
# toy inception score


def test_inception_score_uniform_stub_is_one(monkeypatch):
    monkeypatch.setattr(metrics_mod, "probs", lambda clf, x: np.full((len(x), 6), 1.0 / 6.0))
    images = [np.zeros((16, 16))] * 12
    assert inception_score_toy(images, clf=None) == pytest.approx(1.0, abs=1e-12)


def test_inception_score_one_hot_stub_is_six(monkeypatch):
    def one_hot_per_index(clf, x):
        p = np.zeros((len(x), 6))
        p[np.arange(len(x)), np.arange(len(x)) % 6] = 1.0
        return p

    monkeypatch.setattr(metrics_mod, "probs", one_hot_per_index)
    images = [np.zeros((16, 16))] * 12  # balanced: two of each class
    assert inception_score_toy(images, clf=None) == pytest.approx(6.0, abs=1e-12)


def test_inception_score_bounds_and_duplication():
    clf = fresh_victim(seed=2)
    rng = np.random.default_rng(0)
    images = [rng.uniform(-1, 1, (16, 16)) for _ in range(10)]
    score = inception_score_toy(images, clf)
    assert 1.0 <= score <= 6.0
    assert inception_score_toy(images + images, clf) == pytest.approx(score, abs=1e-12)
    with pytest.raises(ContractViolationError):
        inception_score_toy([], clf)


# ---------------------------------------------------------------------------
# the full suite


def fake_records(n, n_success, mode="nae", direction="untargeted", with_reference=False, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        records.append(
            {
                "x_star": rng.uniform(-1, 1, (16, 16)),
                "success": i < n_success,
                "y_a": 1,
                "y_true": 0,
                "reference": rng.uniform(-1, 1, (16, 16)) if with_reference else None,
                "config": {
                    "mode": mode,
                    "direction": direction,
                    "s": 0.5,
                    "beta": 0.5,
                    "t_start": 12,
                    "seed": seed,
                },
            }
        )
    return records


def suite_models():
    return {
        "white": fresh_victim(seed=1),
        "transfer": fresh_victim(seed=2, arch="b"),
        "adv_trained": fresh_victim(seed=3),
    }


def clean_images(n=70, seed=99):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 16, 16))


def test_suite_zero_successes_keeps_image_metrics():
    records = fake_records(70, n_success=0)
    report = evaluate_suite(records, clean_images(), suite_models(), {"purify": lambda x: x})
    assert report.asr_map == {"white": 0.0, "transfer": 0.0, "advtrain": 0.0, "purify": 0.0}
    assert np.isfinite(report.frechet)
    assert 1.0 <= report.inception_score <= 6.0
    assert report.ssim_median is None  # nae run has no references


def test_suite_white_asr_tracks_success_flags():
    records = fake_records(70, n_success=21)
    report = evaluate_suite(records, clean_images(), suite_models())
    assert report.asr_map["white"] == pytest.approx(0.3)
    assert 0.0 <= report.asr_map["transfer"] <= report.asr_map["white"]
    assert report.n == 70


def test_suite_purify_scored_only_on_successes():
    calls = []

    def spy_purify(x):
        calls.append(1)
        return x

    records = fake_records(70, n_success=8)
    evaluate_suite(records, clean_images(), suite_models(), {"purify": spy_purify})
    assert len(calls) == 8


def test_suite_uae_needs_references():
    records = fake_records(70, n_success=5, mode="uae", with_reference=False)
    with pytest.raises(ContractViolationError):
        evaluate_suite(records, clean_images(), suite_models())
    with_refs = fake_records(70, n_success=5, mode="uae", with_reference=True)
    report = evaluate_suite(with_refs, clean_images(), suite_models())
    assert report.ssim_median is not None
    assert -1.0 <= report.ssim_median <= 1.0


def test_suite_requires_white_slot():
    records = fake_records(70, n_success=5)
    with pytest.raises(ContractViolationError) as err:
        evaluate_suite(records, clean_images(), {"transfer": fresh_victim()})
    assert "white" in str(err.value)
    with pytest.raises(ContractViolationError):
        evaluate_suite([], clean_images(), suite_models())


def test_suite_errored_records_count_as_failures():
    records = fake_records(70, n_success=10)
    records.append(
        {
            "x_star": None,
            "success": False,
            "y_a": None,
            "y_true": 0,
            "reference": None,
            "config": records[0]["config"],
        }
    )
    report = evaluate_suite(records, clean_images(), suite_models())
    assert report.n == 71
    assert report.asr_map["white"] == pytest.approx(10 / 71)


# ---------------------------------------------------------------------------
# CSV rendering


def test_csv_schema_and_stability(tmp_path):
    records = fake_records(70, n_success=7)
    report = evaluate_suite(records, clean_images(), suite_models(), {"purify": lambda x: x},
                            run_id="r1")
    text = metrics_csv([report])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == CSV_COLUMNS
    assert len(rows) == 2
    row = dict(zip(rows[0], rows[1]))
    assert row["run_id"] == "r1" and row["n"] == "70"
    assert row["ssim_median"] == "NA"  # nae: no reference-based ssim
    assert float(row["asr_white"]) == pytest.approx(0.1)
    assert metrics_csv([report]) == text  # rerun: identical bytes
    out = tmp_path / "m.csv"
    write_metrics_csv(out, [report])
    assert out.read_text() == text
