"""Noise schedules, denoiser training, and deterministic DDIM stepping.

The generative core: a linear-β schedule with cumulative-product signal rates,
a conditional noise-prediction MLP (summed input branches for image, sinusoidal
time embedding and learned class embedding), forward diffusion, DDIM reverse
steps and their exact inverses, conditional sampling, image inversion, and a
noise-and-denoise purification routine.

Conventions
-----------
Latents are flat float64 vectors of length 256; images are 16×16 and appear
only at module boundaries.  A reverse/invert step pair indexed by ``i`` moves
between levels ``sample_steps[i]`` (high) and ``sample_steps[i-1]`` (low, with
level 0 below the first).  The noise prediction for the pair is evaluated at
the high level in both directions, which makes the pair an exact algebraic
inverse whenever the prediction depends only on the timestep.  Outputs are
clipped to [−1, 1] only at the very end of a trajectory, never mid-flight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from .data import IMG_H, IMG_W, N_CLASSES, Dataset
from .errors import ContractViolationError, NumericError
from .tensor import (
    Tape,
    Tensor,
    adam_init,
    adam_step,
    add,
    affine,
    backward_grad,
    clear_grads,
    gather_rows,
    matmul,
    mul,
    relu,
    square,
    tmean,
)

LATENT_DIM = IMG_H * IMG_W
NULL_CLASS = N_CLASSES  # class-embedding row reserved for the unconditional token
TIME_EMBED_DIM = 32
CLASS_EMBED_DIM = 16
HIDDEN = (512, 512)


# ---------------------------------------------------------------------------
# schedule


@dataclass
class NoiseSchedule:
    t_train: int
    beta: np.ndarray  # [T], β_1..β_T
    alpha_bar: np.ndarray  # [T], cumulative product of (1 − β)
    sample_steps: np.ndarray  # strictly increasing subsequence of 1..T, ends at T

    @property
    def n_sample_steps(self) -> int:
        return int(self.sample_steps.shape[0])

    def alpha_bar_at(self, t: int) -> float:
        """Signal rate ᾱ_t, with ᾱ_0 defined as 1."""
        if not 0 <= t <= self.t_train:
            raise ContractViolationError(f"timestep {t} outside 0..{self.t_train}")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def step_levels(self, step_index: int) -> tuple[int, int]:
        """(high, low) timesteps for reverse/invert step ``step_index``."""
        if not 0 <= step_index < self.n_sample_steps:
            raise ContractViolationError(
                f"step index {step_index} outside 0..{self.n_sample_steps - 1}"
            )
        hi = int(self.sample_steps[step_index])
        lo = 0 if step_index == 0 else int(self.sample_steps[step_index - 1])
        return hi, lo


def build_schedule(
    t_train: int = 200,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    n_sample_steps: int = 50,
) -> NoiseSchedule:
    """Linear β ramp, cumulative-product ᾱ, uniform sampling subsequence."""
    if t_train < 1:
        raise ContractViolationError("t_train must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ContractViolationError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    if not 1 <= n_sample_steps <= t_train:
        raise ContractViolationError(f"n_sample_steps {n_sample_steps} outside 1..{t_train}")
    beta = np.linspace(beta_min, beta_max, t_train)
    alpha_bar = np.cumprod(1.0 - beta)
    steps = np.array([t_train * (i + 1) // n_sample_steps for i in range(n_sample_steps)], dtype=np.int64)
    return NoiseSchedule(t_train=t_train, beta=beta, alpha_bar=alpha_bar, sample_steps=steps)


def validate_schedule(s: NoiseSchedule) -> None:
    if s.beta.shape != (s.t_train,) or s.alpha_bar.shape != (s.t_train,):
        raise ContractViolationError("schedule arrays inconsistent with t_train")
    if not ((s.beta > 0.0) & (s.beta < 1.0)).all():
        raise ContractViolationError("beta values must lie in (0, 1)")
    if not (np.diff(s.alpha_bar) < 0.0).all() or not (0.0 < s.alpha_bar[-1] < 1.0):
        raise ContractViolationError("alpha_bar must be strictly decreasing into (0, 1)")
    ss = s.sample_steps
    if ss.ndim != 1 or ss[0] < 1 or ss[-1] != s.t_train or not (np.diff(ss) > 0).all():
        raise ContractViolationError("sample_steps must strictly increase within 1..t_train and end at t_train")


# ---------------------------------------------------------------------------
# forward diffusion


@dataclass
class ForwardDraw:
    z0: np.ndarray
    t: int
    epsilon: np.ndarray
    zt: np.ndarray


def forward_diffuse(
    schedule: NoiseSchedule,
    z0: np.ndarray,
    t: int,
    rng: np.random.Generator | None = None,
    epsilon: np.ndarray | None = None,
) -> ForwardDraw:
    """One jump to level ``t``: zt = √ᾱ_t·z0 + √(1−ᾱ_t)·ε with recorded ε."""
    if not 1 <= t <= schedule.t_train:
        raise ContractViolationError(f"timestep {t} outside 1..{schedule.t_train}")
    z0 = np.asarray(z0, dtype=np.float64)
    if not np.isfinite(z0).all():
        raise ContractViolationError("z0 must be finite")
    if epsilon is None:
        if rng is None:
            raise ContractViolationError("forward_diffuse needs an rng when epsilon is not supplied")
        epsilon = rng.standard_normal(z0.shape)
    else:
        epsilon = np.asarray(epsilon, dtype=np.float64)
        if epsilon.shape != z0.shape:
            raise ContractViolationError("epsilon shape must match z0")
    ab = schedule.alpha_bar_at(t)
    zt = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * epsilon
    return ForwardDraw(z0=z0, t=t, epsilon=epsilon, zt=zt)


# ---------------------------------------------------------------------------
# noise predictor


def time_embedding_table(t_train: int, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Fixed sinusoidal embeddings for t = 0..t_train, shape [t_train+1, dim]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = np.arange(t_train + 1)[:, None] * freqs[None, :]
    out = np.empty((t_train + 1, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


@dataclass
class NoisePredictor:
    """Conditional ε-predictor: summed input branches, two relu hidden layers.

    First layer activations are x·Wx + te·Wt + ce·Wc + b0 where te is a fixed
    sinusoidal time embedding and ce a learned class embedding with one row per
    class plus a null token for unconditional prediction.
    """

    t_train: int
    time_table: np.ndarray  # fixed, [t_train+1, TIME_EMBED_DIM]
    class_embed: Tensor  # learned, [N_CLASSES+1, CLASS_EMBED_DIM]
    wx: Tensor
    wt: Tensor
    wc: Tensor
    b0: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.class_embed, self.wx, self.wt, self.wc, self.b0, self.w1, self.b1, self.w2, self.b2]

    def _class_ids(self, class_id, n: int) -> np.ndarray:
        ids = np.full(n, NULL_CLASS if class_id is None else class_id, dtype=np.int64) \
            if np.isscalar(class_id) or class_id is None else np.asarray(class_id, dtype=np.int64)
        if ids.shape != (n,):
            raise ContractViolationError(f"class ids shape {ids.shape} != ({n},)")
        if (ids < 0).any() or (ids > NULL_CLASS).any():
            raise ContractViolationError(f"class id outside 0..{NULL_CLASS}")
        return ids

    def forward_t(self, z: Tensor, t_idx: np.ndarray, class_ids: np.ndarray) -> Tensor:
        """Differentiable forward pass on a [batch, 256] tensor."""
        te = Tensor(self.time_table[t_idx])
        ce = gather_rows(self.class_embed, class_ids)
        h = add(add(affine(z, self.wx, self.b0), matmul(te, self.wt)), matmul(ce, self.wc))
        h = relu(h)
        h = relu(affine(h, self.w1, self.b1))
        return affine(h, self.w2, self.b2)

    def _raw_predict(self, z: np.ndarray, t_idx: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
        h = z @ self.wx.data + self.time_table[t_idx] @ self.wt.data \
            + self.class_embed.data[class_ids] @ self.wc.data + self.b0.data
        np.maximum(h, 0.0, out=h)
        h = h @ self.w1.data + self.b1.data
        np.maximum(h, 0.0, out=h)
        return h @ self.w2.data + self.b2.data

    def predict(self, z: np.ndarray, t, class_id=None, cfg_scale: float = 1.0) -> np.ndarray:
        """Plain-numpy ε̂ for one latent or a batch; no gradient recording.

        With ``cfg_scale`` ≠ 1 the conditional and null predictions are mixed
        as ε̂ = ε_null + cfg_scale·(ε_class − ε_null).
        """
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None, :] if single else z
        if zb.ndim != 2 or zb.shape[1] != LATENT_DIM:
            raise ContractViolationError(f"latent shape {z.shape} incompatible with width {LATENT_DIM}")
        n = zb.shape[0]
        t_idx = np.full(n, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t, dtype=np.int64)
        if (t_idx < 0).any() or (t_idx > self.t_train).any():
            raise ContractViolationError(f"timestep outside 0..{self.t_train}")
        ids = self._class_ids(class_id, n)
        if cfg_scale == 1.0:
            eps = self._raw_predict(zb, t_idx, ids)
        else:
            e_cls = self._raw_predict(zb, t_idx, ids)
            e_null = self._raw_predict(zb, t_idx, np.full(n, NULL_CLASS, dtype=np.int64))
            eps = e_null + cfg_scale * (e_cls - e_null)
        return eps[0] if single else eps


def new_predictor(rng: np.random.Generator, t_train: int = 200) -> NoisePredictor:
    """Fresh predictor; the output layer starts at zero so ε̂ ≈ 0 untrained."""
    def he(fan_in, shape):
        return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

    h1, h2 = HIDDEN
    return NoisePredictor(
        t_train=t_train,
        time_table=time_embedding_table(t_train),
        class_embed=Tensor(rng.normal(0.0, 0.1, size=(N_CLASSES + 1, CLASS_EMBED_DIM)), requires_grad=True),
        wx=he(LATENT_DIM, (LATENT_DIM, h1)),
        wt=he(TIME_EMBED_DIM, (TIME_EMBED_DIM, h1)),
        wc=he(CLASS_EMBED_DIM, (CLASS_EMBED_DIM, h1)),
        b0=Tensor(np.zeros(h1), requires_grad=True),
        w1=he(h1, (h1, h2)),
        b1=Tensor(np.zeros(h2), requires_grad=True),
        w2=Tensor(np.zeros((h2, LATENT_DIM)), requires_grad=True),
        b2=Tensor(np.zeros(LATENT_DIM), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class DiffusionTrainConfig:
    steps: int = 20000
    batch: int = 128
    lr: float = 1e-3  # peak rate; cosine-decayed to lr·lr_floor over the run
    cfg_dropout: float = 0.1
    lr_floor: float = 0.03


def train_denoiser(
    schedule: NoiseSchedule,
    dataset: Dataset,
    config: DiffusionTrainConfig,
    rng: np.random.Generator,
) -> tuple[NoisePredictor, np.ndarray]:
    """Noise-prediction training: minimize mean ‖ε − ε̂(z_t, t, c)‖² per element.

    Each step draws a batch, per-sample timesteps and fresh noise; with
    probability ``cfg_dropout`` a sample's class token is replaced by the null
    token so unconditional prediction is learned alongside.  Returns the
    trained predictor and the per-step loss trace.
    """
    if dataset.n == 0:
        raise ContractViolationError("dataset is empty")
    if config.steps < 1:
        raise ContractViolationError("steps must be >= 1")
    if not 0.0 <= config.cfg_dropout <= 1.0:
        raise ContractViolationError("cfg_dropout must lie in [0, 1]")

    if not 0.0 < config.lr_floor <= 1.0:
        raise ContractViolationError("lr_floor must lie in (0, 1]")

    predictor = new_predictor(rng, schedule.t_train)
    params = predictor.parameters()
    opt = adam_init(params, lr=config.lr)
    flat = dataset.images.reshape(dataset.n, LATENT_DIM)
    losses = np.empty(config.steps)
    lr_min = config.lr * config.lr_floor

    for step in range(config.steps):
        opt.lr = lr_min + (config.lr - lr_min) * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
        idx = rng.integers(0, dataset.n, size=config.batch)
        t = rng.integers(1, schedule.t_train + 1, size=config.batch)
        eps = rng.standard_normal((config.batch, LATENT_DIM))
        ab = schedule.alpha_bar[t - 1][:, None]
        zt = np.sqrt(ab) * flat[idx] + np.sqrt(1.0 - ab) * eps
        cls = dataset.labels[idx].copy()
        cls[rng.random(config.batch) < config.cfg_dropout] = NULL_CLASS

        clear_grads(params)
        with Tape() as tape:
            pred = predictor.forward_t(Tensor(zt), t, cls)
            loss = tmean(square(add(pred, mul(Tensor(eps), -1.0))))
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"training loss diverged at step {step}")
        losses[step] = value
        backward_grad(tape, loss)
        adam_step(opt, params, [p.grad for p in params])
    return predictor, losses


# ---------------------------------------------------------------------------
# DDIM stepping

def _predict_for_step(predictor, z: np.ndarray, t: int, class_id, cfg_scale: float) -> np.ndarray:
    eps = np.asarray(predictor.predict(z, t, class_id, cfg_scale), dtype=np.float64)
    if eps.shape != z.shape:
        raise ContractViolationError(f"predicted noise shape {eps.shape} != latent shape {z.shape}")
    if not np.isfinite(eps).all():
        raise NumericError(f"non-finite noise prediction at t={t}")
    return eps


def ddim_reverse_step(
    schedule: NoiseSchedule,
    predictor,
    z_t: np.ndarray,
    step_index: int,
    class_id=None,
    cfg_scale: float = 1.0,
) -> np.ndarray:
    """One deterministic denoising step from level sample_steps[i] down."""
    hi, lo = schedule.step_levels(step_index)
    z_t = np.asarray(z_t, dtype=np.float64)
    if not np.isfinite(z_t).all():
        raise NumericError(f"non-finite latent entering reverse step {step_index}")
    ab_hi = schedule.alpha_bar_at(hi)
    ab_lo = schedule.alpha_bar_at(lo)
    eps = _predict_for_step(predictor, z_t, hi, class_id, cfg_scale)
    x0_hat = (z_t - math.sqrt(1.0 - ab_hi) * eps) / math.sqrt(ab_hi)
    return math.sqrt(ab_lo) * x0_hat + math.sqrt(1.0 - ab_lo) * eps


def ddim_invert_step(
    schedule: NoiseSchedule,
    predictor,
    z_t: np.ndarray,
    step_index: int,
    class_id=None,
    cfg_scale: float = 1.0,
) -> np.ndarray:
    """Mirror of the reverse step, toward larger t.

    The noise prediction is evaluated at the pair's high level, the same point
    the reverse step uses, so the two are exact inverses for any prediction
    that depends only on t.
    """
    hi, lo = schedule.step_levels(step_index)
    z_t = np.asarray(z_t, dtype=np.float64)
    if not np.isfinite(z_t).all():
        raise NumericError(f"non-finite latent entering invert step {step_index}")
    ab_hi = schedule.alpha_bar_at(hi)
    ab_lo = schedule.alpha_bar_at(lo)
    eps = _predict_for_step(predictor, z_t, hi, class_id, cfg_scale)
    x0_hat = (z_t - math.sqrt(1.0 - ab_lo) * eps) / math.sqrt(ab_lo)
    return math.sqrt(ab_hi) * x0_hat + math.sqrt(1.0 - ab_hi) * eps


def sample(
    schedule: NoiseSchedule,
    predictor,
    class_id=None,
    cfg_scale: float = 1.0,
    rng: np.random.Generator | None = None,
    z_t: np.ndarray | None = None,
) -> np.ndarray:
    """Run the full reverse chain from z_T to an image, clipped only at the end."""
    if z_t is None:
        if rng is None:
            raise ContractViolationError("sample needs an rng when z_t is not supplied")
        z = rng.standard_normal(LATENT_DIM)
    else:
        z = np.asarray(z_t, dtype=np.float64).reshape(LATENT_DIM).copy()
    for i in range(schedule.n_sample_steps - 1, -1, -1):
        z = ddim_reverse_step(schedule, predictor, z, i, class_id, cfg_scale)
    return np.clip(z, -1.0, 1.0).reshape(IMG_H, IMG_W)


def invert_image(
    schedule: NoiseSchedule,
    predictor,
    x0: np.ndarray,
    class_id=None,
    depth: int | None = None,
    cfg_scale: float = 1.0,
) -> np.ndarray:
    """Iterated inversion of an image through the first ``depth`` step pairs.

    Returns the latent at the depth-th sampling level (depth 0: the flattened
    input unchanged); depth defaults to the full chain.
    """
    if depth is None:
        depth = schedule.n_sample_steps
    if not 0 <= depth <= schedule.n_sample_steps:
        raise ContractViolationError(f"depth {depth} outside 0..{schedule.n_sample_steps}")
    z = np.asarray(x0, dtype=np.float64).reshape(LATENT_DIM).copy()
    for i in range(depth):
        z = ddim_invert_step(schedule, predictor, z, i, class_id, cfg_scale)
    return z


def purify(
    schedule: NoiseSchedule,
    predictor,
    x: np.ndarray,
    depth_fraction: float = 0.3,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Noise-and-denoise defense: fresh forward noise to ⌈fraction·T⌉, then
    unconditional DDIM denoising through every sampling level at or below it."""
    if not 0.0 < depth_fraction < 1.0:
        raise ContractViolationError(f"depth_fraction {depth_fraction} outside (0, 1)")
    if rng is None:
        rng = np.random.default_rng()
    t = math.ceil(depth_fraction * schedule.t_train)
    z = forward_diffuse(schedule, np.asarray(x, dtype=np.float64).reshape(LATENT_DIM), t, rng).zt
    start = int(np.searchsorted(schedule.sample_steps, t, side="right")) - 1
    for i in range(start, -1, -1):
        z = ddim_reverse_step(schedule, predictor, z, i, class_id=None, cfg_scale=1.0)
    return np.clip(z, -1.0, 1.0).reshape(IMG_H, IMG_W)


# ---------------------------------------------------------------------------
# latent/image codecs


class IdentityCodec:
    """Pixel-space mode: the latent is the image."""

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)

    def grad_to_latent(self, g: np.ndarray) -> np.ndarray:
        return np.asarray(g, dtype=np.float64)


class LinearCodec:
    """Fixed orthogonal decoding map, for exercising the gradient chain rule.

    decode(z) = z·Q; an image-space gradient g maps back to latent space as
    g·Qᵀ, the transpose of the decoding map.
    """

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([0x434F4443, seed]))
        q, _ = np.linalg.qr(rng.standard_normal((LATENT_DIM, LATENT_DIM)))
        self.q = q

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.q

    def grad_to_latent(self, g: np.ndarray) -> np.ndarray:
        return np.asarray(g, dtype=np.float64) @ self.q.T


# ---------------------------------------------------------------------------
# persistence


def save_diffusion(path, predictor: NoisePredictor, schedule: NoiseSchedule) -> None:
    tensors = {
        "t_train": np.float64(schedule.t_train),
        "beta": schedule.beta,
        "sample_steps": schedule.sample_steps.astype(np.float64),
        "class_embed": predictor.class_embed.data,
        "wx": predictor.wx.data,
        "wt": predictor.wt.data,
        "wc": predictor.wc.data,
        "b0": predictor.b0.data,
        "w1": predictor.w1.data,
        "b1": predictor.b1.data,
        "w2": predictor.w2.data,
        "b2": predictor.b2.data,
    }
    checkpoint.save_tensors(path, tensors)


def load_diffusion(path) -> tuple[NoisePredictor, NoiseSchedule]:
    t = checkpoint.load_tensors(path)
    required = ["t_train", "beta", "sample_steps", "class_embed", "wx", "wt", "wc", "b0", "w1", "b1", "w2", "b2"]
    missing = [k for k in required if k not in t]
    if missing:
        raise ContractViolationError(f"diffusion checkpoint missing tensors: {missing}")
    t_train = int(t["t_train"])
    beta = t["beta"]
    schedule = NoiseSchedule(
        t_train=t_train,
        beta=beta,
        alpha_bar=np.cumprod(1.0 - beta),
        sample_steps=np.rint(t["sample_steps"]).astype(np.int64),
    )
    validate_schedule(schedule)
    predictor = NoisePredictor(
        t_train=t_train,
        time_table=time_embedding_table(t_train),
        class_embed=Tensor(t["class_embed"], requires_grad=True),
        wx=Tensor(t["wx"], requires_grad=True),
        wt=Tensor(t["wt"], requires_grad=True),
        wc=Tensor(t["wc"], requires_grad=True),
        b0=Tensor(t["b0"], requires_grad=True),
        w1=Tensor(t["w1"], requires_grad=True),
        b1=Tensor(t["b1"], requires_grad=True),
        w2=Tensor(t["w2"], requires_grad=True),
        b2=Tensor(t["b2"], requires_grad=True),
    )
    return predictor, schedule
