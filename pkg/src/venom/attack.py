"""Momentum-guided adversarial generation inside DDIM sampling.

An attack runs up to N full reverse passes from one fixed starting latent
(drawn from noise, or obtained by inverting a reference image).  Inside the
guidance window — the last ``t_start`` of the sampler's steps — an adaptive
switch decides, from a fresh classification of each intermediate image,
whether to inject the momentum-smoothed classifier gradient into the latent.

Switch rules: ON at attack start; while ON inside the window, an adversarial
verdict turns it OFF (the pending update is still applied on that very step —
literal statement order, toggleable); while OFF, a non-adversarial verdict
turns it back ON; from the third pass onward it is forced ON at every step.
Momentum v is (re)seeded with the raw gradient whenever a pass applies
guidance at t_start itself, and both v and the switch persist across passes.
"""

from __future__ import annotations

import hashlib
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import IMG_H, IMG_W, N_CLASSES
from .diffusion import (
    LATENT_DIM,
    IdentityCodec,
    NoiseSchedule,
    ddim_reverse_step,
    invert_image,
    sample,
)
from .errors import ContractViolationError, NumericError, VenomError
from .victims import VictimClassifier, input_log_prob_grad, log_probs

SWITCH_ON = "on"
SWITCH_OFF = "off"

_ATTACK_TAG = 0x41545431  # domain separation for per-attack noise streams

# input-gradient extraction briefly accumulates into the shared classifier's
# gradient buffers; one guidance gradient at a time keeps that sound
_GRAD_LOCK = threading.Lock()


@dataclass
class AttackConfig:
    mode: str = "nae"  # "nae" (from noise) | "uae" (from a reference image)
    direction: str = "targeted"  # "targeted" | "untargeted"
    n_restarts: int = 5
    t_start: int = 12  # guidance may begin this many sampler steps before the end
    s: float = 0.5  # guidance scale
    beta: float = 0.5  # momentum coefficient
    class_id: int | None = None  # generation class c
    y_a: int | None = None  # target label (targeted mode; selected if omitted)
    y_true: int | None = None  # ground-truth label
    cfg_scale: float = 1.0
    seed: int = 0
    apply_on_deactivate: bool = True  # apply the pending update on the switch-OFF step
    normalize_grad: bool = False  # L2-normalize g before the momentum update
    adaptive_switch: bool = True  # False: ablation cell with the switch pinned ON

    def validate(self) -> None:
        if self.mode not in ("nae", "uae"):
            raise ContractViolationError(f"mode {self.mode!r} not one of 'nae', 'uae'")
        if self.direction not in ("targeted", "untargeted"):
            raise ContractViolationError(f"direction {self.direction!r} not one of 'targeted', 'untargeted'")
        if self.n_restarts < 1:
            raise ContractViolationError("n_restarts must be >= 1")
        if self.t_start <= 0:
            raise ContractViolationError("t_start must be positive")
        if self.s < 0:
            raise ContractViolationError("guidance scale s must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractViolationError("momentum beta must lie in [0, 1]")
        for name, value in (("class_id", self.class_id), ("y_a", self.y_a), ("y_true", self.y_true)):
            if value is not None and not 0 <= value < N_CLASSES:
                raise ContractViolationError(f"{name} {value} outside 0..{N_CLASSES - 1}")
        if self.direction == "targeted" and self.y_a is not None and self.y_true is not None \
                and self.y_a == self.y_true:
            raise ContractViolationError("targeted attack needs y_a != y_true")

    def echo(self) -> dict:
        return {
            "mode": self.mode,
            "direction": self.direction,
            "n_restarts": self.n_restarts,
            "t_start": self.t_start,
            "s": self.s,
            "beta": self.beta,
            "class_id": self.class_id,
            "y_a": self.y_a,
            "y_true": self.y_true,
            "cfg_scale": self.cfg_scale,
            "seed": self.seed,
            "apply_on_deactivate": self.apply_on_deactivate,
            "normalize_grad": self.normalize_grad,
            "adaptive_switch": self.adaptive_switch,
        }


@dataclass
class GuidanceState:
    v: np.ndarray
    switch: str = SWITCH_ON
    restart_index: int = 1  # 1-based pass counter
    initialized: bool = False  # whether v has been seeded at t_start


@dataclass
class AttackRecord:
    x_star: np.ndarray | None
    success: bool
    passes_used: int
    guidance_steps_applied: int
    final_label: int | None
    y_a: int | None
    y_true: int | None
    config: dict
    seed: int
    trajectory: list = field(default_factory=list)
    error: str | None = None
    reference: np.ndarray | None = None  # uae mode: the inverted source image

    @property
    def x_star_sha256(self) -> str | None:
        if self.x_star is None:
            return None
        return image_digest(self.x_star)


def image_digest(img: np.ndarray) -> str:
    """Canonical content hash: sha256 over the float32 little-endian pixels."""
    return hashlib.sha256(np.asarray(img, dtype="<f4").tobytes()).hexdigest()


def select_target(clf: VictimClassifier, probe: np.ndarray, y_true: int) -> int:
    """Most likely class other than the truth, ties broken toward lower id."""
    if not 0 <= y_true < N_CLASSES:
        raise ContractViolationError(f"y_true {y_true} outside 0..{N_CLASSES - 1}")
    lp = log_probs(clf, probe)[0].copy()
    lp[y_true] = -np.inf
    return int(lp.argmax())


def momentum_update(state: GuidanceState, g: np.ndarray, is_first_step: bool, beta: float) -> np.ndarray:
    """v ← g at the window's first step, else the moving average β·v + (1−β)·g."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.v.shape:
        raise ContractViolationError(f"gradient shape {g.shape} != momentum shape {state.v.shape}")
    if not np.isfinite(g).all():
        raise NumericError("non-finite guidance gradient")
    if is_first_step:
        state.v = g.copy()
        state.initialized = True
    else:
        state.v = beta * state.v + (1.0 - beta) * g
    return state.v


def switch_step(
    state: GuidanceState, adversarial: bool, t: int, t_start: int, restart_index: int, forced: bool = False
) -> str:
    """Advance the switch by one sampler step's verdict; returns the new state."""
    if forced or restart_index >= 3:
        state.switch = SWITCH_ON  # forced for the entire pass
    elif state.switch == SWITCH_ON:
        if 0 < t <= t_start and adversarial:
            state.switch = SWITCH_OFF
    else:
        if not adversarial:
            state.switch = SWITCH_ON
    return state.switch


def _verdict(clf: VictimClassifier, x: np.ndarray, config: AttackConfig, y_a: int, y_true: int) -> tuple[bool, int]:
    label = int(log_probs(clf, x)[0].argmax())
    if config.direction == "targeted":
        return label == y_a, label
    return label != y_true, label


def _guidance_gradient(
    clf: VictimClassifier, x: np.ndarray, config: AttackConfig, y_a: int, y_true: int
) -> np.ndarray:
    with _GRAD_LOCK:
        if config.direction == "targeted":
            g = input_log_prob_grad(clf, x, y_a)
        else:
            g = -input_log_prob_grad(clf, x, y_true)
    if config.normalize_grad:
        g = g / (np.linalg.norm(g) + 1e-12)
    return g


def run_attack(
    config: AttackConfig,
    schedule: NoiseSchedule,
    predictor,
    clf: VictimClassifier,
    rng: np.random.Generator | None = None,
    reference: tuple[np.ndarray, int] | None = None,
    codec=None,
) -> AttackRecord:
    """One full attack: up to N guided reverse passes from a fixed start latent."""
    config.validate()
    n_steps = schedule.n_sample_steps
    if config.t_start > n_steps:
        raise ContractViolationError(f"t_start {config.t_start} exceeds the {n_steps}-step sampler")
    codec = codec if codec is not None else IdentityCodec()

    state = GuidanceState(v=np.zeros((IMG_H, IMG_W)))
    trajectory: list[dict] = []
    applied_total = 0
    record = AttackRecord(
        x_star=None,
        success=False,
        passes_used=0,
        guidance_steps_applied=0,
        final_label=None,
        y_a=None,
        y_true=None,
        config=config.echo(),
        seed=config.seed,
        trajectory=trajectory,
    )

    try:
        # resolve the start latent, the conditioning class, and the label pair
        if config.mode == "uae":
            if reference is None:
                raise ContractViolationError("uae attack needs a reference image")
            ref_img, ref_label = reference
            record.reference = np.asarray(ref_img, dtype=np.float64).reshape(IMG_H, IMG_W).copy()
            y_true = config.y_true if config.y_true is not None else int(ref_label)
            cond_class = config.class_id if config.class_id is not None else y_true
            z_start = invert_image(schedule, predictor, ref_img, cond_class, cfg_scale=config.cfg_scale)
        else:
            if config.class_id is None:
                raise ContractViolationError("nae attack needs a generation class")
            if rng is None:
                raise ContractViolationError("nae attack needs an rng for the start latent")
            cond_class = config.class_id
            y_true = config.y_true if config.y_true is not None else cond_class
            z_start = rng.standard_normal(LATENT_DIM)
        record.y_true = int(y_true)

        if config.direction == "untargeted":
            y_a = y_true
        elif config.y_a is not None:
            y_a = config.y_a
        else:
            if config.mode == "uae":
                probe = reference[0]
            else:  # the unguided clean sample from the same start latent
                probe = sample(schedule, predictor, cond_class, config.cfg_scale, z_t=z_start)
            y_a = select_target(clf, probe, y_true)
        if config.direction == "targeted" and y_a == y_true:
            raise ContractViolationError("targeted attack needs y_a != y_true")
        record.y_a = int(y_a)

        for restart_index in range(1, config.n_restarts + 1):
            state.restart_index = restart_index
            z = z_start.copy()
            for i in range(n_steps - 1, -1, -1):
                t = i + 1
                in_window = t <= config.t_start
                z = ddim_reverse_step(schedule, predictor, z, i, cond_class, config.cfg_scale)
                x = codec.decode(z).reshape(IMG_H, IMG_W)
                adversarial, _ = _verdict(clf, x, config, y_a, y_true)
                entry_on = state.switch == SWITCH_ON
                switch_step(state, adversarial, t, config.t_start, restart_index,
                            forced=not config.adaptive_switch)
                exit_on = state.switch == SWITCH_ON
                deactivated = entry_on and not exit_on
                apply_now = in_window and (exit_on or (deactivated and config.apply_on_deactivate))
                g_norm = v_norm = None
                if apply_now:
                    g = _guidance_gradient(clf, x, config, y_a, y_true)
                    v = momentum_update(state, g, t == config.t_start, config.beta)
                    g_norm = float(np.linalg.norm(g))
                    v_norm = float(np.linalg.norm(v))
                    applied_total += 1
                    if config.s != 0.0:
                        z = z + config.s * codec.grad_to_latent(v.reshape(LATENT_DIM))
                trajectory.append(
                    {
                        "pass": restart_index,
                        "t": t,
                        "switch": state.switch,
                        "applied": apply_now,
                        "g_norm": g_norm,
                        "v_norm": v_norm,
                    }
                )
            x_star = np.clip(codec.decode(z), -1.0, 1.0).reshape(IMG_H, IMG_W)
            adversarial, label = _verdict(clf, x_star, config, y_a, y_true)
            record.x_star = x_star
            record.final_label = label
            record.passes_used = restart_index
            record.guidance_steps_applied = applied_total
            record.success = adversarial
            if record.success:
                break
    except NumericError as exc:
        record.x_star = None
        record.final_label = None
        record.success = False
        record.guidance_steps_applied = applied_total
        record.error = str(exc)
    return record


@dataclass
class BatchSummary:
    n: int
    asr: float | None  # None (undefined), never silently 0, when n == 0
    mean_guidance_steps: float | None
    mean_passes: float | None
    errors: int


def summarize(records: Sequence[AttackRecord]) -> BatchSummary:
    n = len(records)
    if n == 0:
        return BatchSummary(n=0, asr=None, mean_guidance_steps=None, mean_passes=None, errors=0)
    return BatchSummary(
        n=n,
        asr=float(np.mean([r.success for r in records])),
        mean_guidance_steps=float(np.mean([r.guidance_steps_applied for r in records])),
        mean_passes=float(np.mean([r.passes_used for r in records])),
        errors=sum(1 for r in records if r.error is not None),
    )


def run_batch(
    config: AttackConfig,
    schedule: NoiseSchedule,
    predictor,
    clf: VictimClassifier,
    count: int,
    references: tuple[np.ndarray, np.ndarray] | None = None,
    codec=None,
    jobs: int = 1,
) -> tuple[list[AttackRecord], BatchSummary]:
    """Run ``count`` attacks with per-index RNG streams; order-independent.

    Each index gets its own noise stream, its own reference draw (uae) or
    generation class draw (nae, when the config leaves the class open), so
    results are identical no matter how execution interleaves.
    """
    config.validate()
    if count < 0:
        raise ContractViolationError("count must be >= 0")
    if jobs < 1:
        raise ContractViolationError("jobs must be >= 1")
    if config.mode == "uae":
        if references is None:
            raise ContractViolationError("uae batch needs reference images and labels")
        ref_images, ref_labels = references
        if len(ref_images) == 0:
            raise ContractViolationError("reference set is empty")

    def run_one(index: int) -> AttackRecord:
        rng = np.random.default_rng(np.random.SeedSequence([_ATTACK_TAG, config.seed, index]))
        cfg = AttackConfig(**{**config.echo(), "seed": config.seed})
        reference = None
        if config.mode == "uae":
            ref_idx = int(rng.integers(0, len(ref_images)))
            reference = (ref_images[ref_idx], int(ref_labels[ref_idx]))
        elif cfg.class_id is None:
            cfg.class_id = int(rng.integers(0, N_CLASSES))
        rec = run_attack(cfg, schedule, predictor, clf, rng=rng, reference=reference, codec=codec)
        return rec

    if jobs == 1 or count <= 1:
        records = [run_one(i) for i in range(count)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run_one, range(count)))
    return records, summarize(records)


# ---------------------------------------------------------------------------
# record serialization (JSON lines)


def record_to_json(record: AttackRecord, include_trajectory: bool = False) -> str:
    body = {
        "x_star": None if record.x_star is None else [float(v) for v in record.x_star.reshape(-1)],
        "x_star_sha256": record.x_star_sha256,
        "success": bool(record.success),
        "passes_used": record.passes_used,
        "guidance_steps_applied": record.guidance_steps_applied,
        "final_label": record.final_label,
        "y_a": record.y_a,
        "y_true": record.y_true,
        "config": record.config,
        "seed": record.seed,
        "error": record.error,
        "reference": None if record.reference is None else [float(v) for v in record.reference.reshape(-1)],
    }
    if include_trajectory:
        body["trajectory"] = record.trajectory
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def save_records(path, records: Sequence[AttackRecord], include_trajectory: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record, include_trajectory))
            fh.write("\n")


def load_records(path) -> list[dict]:
    """Read JSON-lines attack records back as dicts with image arrays restored."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise VenomError(f"malformed record on line {line_no + 1}: {exc}") from None
            for key in ("x_star", "reference"):
                if entry.get(key) is not None:
                    entry[key] = np.asarray(entry[key], dtype=np.float64).reshape(IMG_H, IMG_W)
            out.append(entry)
    return out
