"""Session fixtures for the reference artifacts shared across test modules.

The heavy pieces — a 20 000-step denoiser and three 2 000-step classifiers,
plus the frozen attack runs scored by the end-to-end tests — are built once
and cached under ``.venom_cache/`` in the repository root (override the
location with the VENOM_TEST_CACHE environment variable).  Delete the cache
to force a rebuild; every artifact is a deterministic function of fixed
seeds, so a rebuild reproduces the same bytes.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from venom.attack import AttackConfig, load_records, run_batch, save_records
from venom.data import generate_dataset
from venom.diffusion import (
    DiffusionTrainConfig,
    build_schedule,
    load_diffusion,
    save_diffusion,
    train_denoiser,
)
from venom.victims import (
    VictimTrainConfig,
    adv_train_classifier,
    load_victim,
    save_victim,
    train_classifier,
)

DIFFUSION_SEED_TAG = 0x44494646
VICTIM_SEED_TAG = 0x56494354


@pytest.fixture(scope="session")
def cache_dir():
    override = os.environ.get("VENOM_TEST_CACHE")
    path = Path(override) if override else Path(__file__).resolve().parent.parent / ".venom_cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def ref_dataset():
    """Seed-7 dataset, 1000 per class: 6000 train / 1200 test."""
    return generate_dataset(seed=7, per_class=1000)


@pytest.fixture(scope="session")
def ref_diffusion(cache_dir, ref_dataset):
    """The 20k-step reference denoiser (trains ~6 min on first use)."""
    path = cache_dir / "diff_ref.vnmc"
    if not path.exists():
        train, _ = ref_dataset
        schedule = build_schedule()
        rng = np.random.default_rng(np.random.SeedSequence([DIFFUSION_SEED_TAG, 7]))
        predictor, _ = train_denoiser(schedule, train, DiffusionTrainConfig(), rng)
        save_diffusion(path, predictor, schedule)
    return load_diffusion(path)


def _victim(cache_dir, ref_dataset, stem, arch, seed, eps=0.0):
    path = cache_dir / f"victim_{stem}.vnmc"
    if not path.exists():
        train, test = ref_dataset
        rng = np.random.default_rng(np.random.SeedSequence([VICTIM_SEED_TAG, seed]))
        if eps > 0:
            clf, _ = adv_train_classifier(train, test, arch, eps, VictimTrainConfig(), rng)
        else:
            clf, _ = train_classifier(train, test, arch, VictimTrainConfig(), rng)
        save_victim(path, clf)
    return load_victim(path)


@pytest.fixture(scope="session")
def ref_victim_a(cache_dir, ref_dataset):
    """White-box victim: arch A, train seed 101."""
    return _victim(cache_dir, ref_dataset, "a", "a", 101)


@pytest.fixture(scope="session")
def ref_victim_b(cache_dir, ref_dataset):
    """Transfer victim: arch B, train seed 202."""
    return _victim(cache_dir, ref_dataset, "b", "b", 202)


@pytest.fixture(scope="session")
def ref_victim_adv(cache_dir, ref_dataset):
    """Adversarially trained arch A (eps 0.06), train seed 303."""
    return _victim(cache_dir, ref_dataset, "adv", "a", 303, eps=0.06)


def _attack_run(cache_dir, stem, config, schedule, predictor, clf, count, references=None):
    """Run (or reload) a frozen attack batch; wall seconds stored alongside."""
    path = cache_dir / f"{stem}.jsonl"
    meta = cache_dir / f"{stem}.meta.json"
    if not path.exists():
        start = time.monotonic()
        records, _ = run_batch(config, schedule, predictor, clf, count=count, references=references)
        wall = time.monotonic() - start
        save_records(path, records)
        meta.write_text(json.dumps({"wall_s": wall}))
    wall = json.loads(meta.read_text())["wall_s"] if meta.exists() else None
    return load_records(path), wall


@pytest.fixture(scope="session")
def ref_nae_run(cache_dir, ref_diffusion, ref_victim_a):
    """Targeted NAE, 200 samples, all defaults, seed 0."""
    predictor, schedule = ref_diffusion
    config = AttackConfig(mode="nae", direction="targeted", seed=0)
    return _attack_run(cache_dir, "nae_run", config, schedule, predictor, ref_victim_a, 200)


@pytest.fixture(scope="session")
def ref_uae_run(cache_dir, ref_dataset, ref_diffusion, ref_victim_a):
    """Untargeted UAE over held-out references, 200 samples, seed 0.

    Uses normalized gradients at scale 2.0: the untargeted log-probability
    gradient vanishes wherever the victim is confident, so raw-gradient runs
    barely move most samples regardless of scale.
    """
    _, test = ref_dataset
    predictor, schedule = ref_diffusion
    config = AttackConfig(
        mode="uae", direction="untargeted", s=2.0, normalize_grad=True, seed=0
    )
    return _attack_run(
        cache_dir, "uae_run", config, schedule, predictor, ref_victim_a, 200,
        references=(test.images, test.labels),
    )


@pytest.fixture(scope="session")
def ref_ablation(cache_dir, ref_dataset, ref_diffusion, ref_victim_a):
    """The 2×2 momentum/adaptive-switch grid, 200 attacks per cell, shared seed.

    Runs targeted UAE: anchoring each attack to an inverted reference image is
    what makes overshoot visible in feature space, so the switch's
    stop-on-success behavior shows up as a fidelity difference.
    """
    _, test = ref_dataset
    predictor, schedule = ref_diffusion
    cells = {"both": (0.5, True), "mo": (0.5, False), "as": (0.0, True), "none": (0.0, False)}
    out = {}
    for name, (beta, adaptive) in cells.items():
        config = AttackConfig(
            mode="uae", direction="targeted", beta=beta, adaptive_switch=adaptive, seed=0
        )
        records, _ = _attack_run(
            cache_dir, f"abl_{name}", config, schedule, predictor, ref_victim_a, 200,
            references=(test.images, test.labels),
        )
        out[name] = records
    return out
