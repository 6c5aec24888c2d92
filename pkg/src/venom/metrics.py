"""Evaluation: success rates, feature-space Fréchet distance, SSIM, a toy IS.

The Fréchet distance runs over the white-box classifier's penultimate
features (no larger pretrained feature extractor exists at this scale), so
its numbers are comparable only within this project.  SSIM uses a 7×7
uniform window — the images are only 16 pixels on a side.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractViolationError, NumericError
from .victims import VictimClassifier, classify, features, probs

_RIDGE = 1e-6
_SSIM_WIN = 7
_SSIM_L = 2.0  # pixel range is [-1, 1]
_C1 = (0.01 * _SSIM_L) ** 2
_C2 = (0.03 * _SSIM_L) ** 2

CSV_COLUMNS = [
    "run_id",
    "mode",
    "direction",
    "n",
    "asr_white",
    "asr_transfer",
    "asr_purify",
    "asr_advtrain",
    "fd",
    "ssim_median",
    "is",
    "s",
    "beta",
    "t_start",
    "seed",
]


@dataclass
class MetricReport:
    run_id: str
    n: int
    mode: str
    direction: str
    asr_map: dict  # slot name -> fraction; always has "white"
    frechet: float
    ssim_mean: float | None  # uae runs only: adversarial image vs its source
    ssim_median: float | None
    inception_score: float
    s: float
    beta: float
    t_start: int
    seed: int


def _field(record, name):
    if isinstance(record, Mapping):
        return record.get(name)
    return getattr(record, name)


def asr(records: Sequence) -> float:
    """Fraction of records marked successful; an empty list is a caller bug."""
    if len(records) == 0:
        raise ContractViolationError("success rate over an empty record list is undefined")
    return float(np.mean([bool(_field(r, "success")) for r in records]))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    try:
        vals, vecs = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigen-decomposition failed: {exc}") from None
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """‖μa−μb‖² + Tr(Σa + Σb − 2·(Σa·Σb)^½) with a 1e-6 ridge on both Σ.

    The matrix square root is taken symmetrically: (Σa^½ Σb Σa^½)^½ shares
    its trace with (Σa Σb)^½ and stays in symmetric-eigenproblem territory.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolationError("feature sets must be 2-D (samples x dims)")
    if a.shape[1] != b.shape[1]:
        raise ContractViolationError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    dim = a.shape[1]
    for name, m in (("first", a), ("second", b)):
        if m.shape[0] < dim + 1:
            raise ContractViolationError(
                f"{name} feature set has {m.shape[0]} samples; need at least {dim + 1}"
            )
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    eye = np.eye(dim)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + _RIDGE * eye
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + _RIDGE * eye
    sqrt_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sqrt_a @ cov_b @ sqrt_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def _window_means(img: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, (_SSIM_WIN, _SSIM_WIN))
    return view.mean(axis=(-1, -2))


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean structural similarity over all 7×7 windows; symmetric in x, y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractViolationError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < _SSIM_WIN:
        raise ContractViolationError(f"images must be 2-D with sides >= {_SSIM_WIN}")
    mu_x = _window_means(x)
    mu_y = _window_means(y)
    var_x = _window_means(x * x) - mu_x * mu_x
    var_y = _window_means(y * y) - mu_y * mu_y
    cov = _window_means(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _C1) * (2.0 * cov + _C2)
    den = (mu_x * mu_x + mu_y * mu_y + _C1) * (var_x + var_y + _C2)
    return float((num / den).mean())


def inception_score_toy(images: Sequence[np.ndarray], clf: VictimClassifier) -> float:
    """exp(mean KL(p(y|x) ‖ p̄)) under the given classifier; lies in [1, K]."""
    if len(images) == 0:
        raise ContractViolationError("score over an empty image set is undefined")
    p = probs(clf, np.stack([np.asarray(img, dtype=np.float64) for img in images]))
    p_bar = p.mean(axis=0)
    mask = p > 0
    log_p = np.where(mask, np.log(np.where(mask, p, 1.0)), 0.0)
    log_bar = np.where(p_bar > 0, np.log(np.where(p_bar > 0, p_bar, 1.0)), 0.0)
    kl = np.where(mask, p * (log_p - log_bar), 0.0).sum(axis=1)
    return float(np.exp(kl.mean()))


def _is_adversarial(model, x: np.ndarray, direction: str, y_a, y_true) -> bool:
    label = int(classify(model, x)[0])
    if direction == "targeted":
        return y_a is not None and label == y_a
    return y_true is not None and label != y_true


def evaluate_suite(
    records: Sequence,
    clean_reference: np.ndarray,
    models: Mapping[str, VictimClassifier],
    defenses: Mapping | None = None,
    run_id: str = "run",
) -> MetricReport:
    """Full evaluation of one attack run against every available model slot.

    ``models`` must carry "white"; "transfer" and "adv_trained" are scored
    when present.  ``defenses`` may carry "purify": an image → image callable
    whose output is re-scored on the white model.  Image-quality metrics run
    over every record that has an image, successful or not; records that
    errored out count as failures in every success-rate column.
    """
    if len(records) == 0:
        raise ContractViolationError("cannot evaluate an empty record list")
    if "white" not in models:
        raise ContractViolationError("model slot 'white' is missing")
    defenses = defenses or {}

    first_cfg = _field(records[0], "config")
    mode = first_cfg["mode"]
    direction = first_cfg["direction"]

    slots = {"white": models["white"]}
    if "transfer" in models:
        slots["transfer"] = models["transfer"]
    if "adv_trained" in models:
        slots["advtrain"] = models["adv_trained"]

    hits = {name: 0 for name in slots}
    if "purify" in defenses:
        hits["purify"] = 0
    images = []
    ssim_values = []
    for record in records:
        x = _field(record, "x_star")
        if x is None:
            continue
        x = np.asarray(x, dtype=np.float64)
        images.append(x)
        y_a = _field(record, "y_a")
        y_true = _field(record, "y_true")
        if bool(_field(record, "success")):
            # only a successful output is an adversarial example; the other
            # columns measure how well those examples carry over
            hits["white"] += 1
            for name, model in slots.items():
                if name != "white" and _is_adversarial(model, x, direction, y_a, y_true):
                    hits[name] += 1
            if "purify" in defenses:
                if _is_adversarial(models["white"], defenses["purify"](x), direction, y_a, y_true):
                    hits["purify"] += 1
        if mode == "uae":
            reference = _field(record, "reference")
            if reference is None:
                raise ContractViolationError("uae record lacks its reference image; cannot score ssim")
            ssim_values.append(ssim(x, np.asarray(reference, dtype=np.float64)))
    if not images:
        raise ContractViolationError("no record carries an image; nothing to evaluate")

    n = len(records)
    asr_map = {name: count / n for name, count in hits.items()}
    clean_feats = features(models["white"], np.asarray(clean_reference, dtype=np.float64))
    run_feats = features(models["white"], np.stack(images))
    fd = frechet_distance(run_feats, clean_feats)
    score = inception_score_toy(images, models["white"])
    return MetricReport(
        run_id=run_id,
        n=n,
        mode=mode,
        direction=direction,
        asr_map=asr_map,
        frechet=fd,
        ssim_mean=float(np.mean(ssim_values)) if ssim_values else None,
        ssim_median=float(np.median(ssim_values)) if ssim_values else None,
        inception_score=score,
        s=first_cfg["s"],
        beta=first_cfg["beta"],
        t_start=first_cfg["t_start"],
        seed=first_cfg["seed"],
    )


def _cell(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def metrics_csv(reports: Sequence[MetricReport]) -> str:
    """Render reports as the fixed-schema CSV; byte-stable across reruns."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(
            [
                r.run_id,
                r.mode,
                r.direction,
                r.n,
                _cell(r.asr_map.get("white")),
                _cell(r.asr_map.get("transfer")),
                _cell(r.asr_map.get("purify")),
                _cell(r.asr_map.get("advtrain")),
                _cell(r.frechet),
                _cell(r.ssim_median),
                _cell(r.inception_score),
                _cell(float(r.s)),
                _cell(float(r.beta)),
                r.t_start,
                r.seed,
            ]
        )
    return buf.getvalue()


def write_metrics_csv(path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(reports))
