"""Training protocol: AWGN synthesis, augmented patch sampling, Adam, staged LR schedule."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .io import Checkpoint
from .network import ModelConfig, ParamStore, backward, build, denoise

Dataset = Sequence[tuple[str, np.ndarray]]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    sigma: float = 25.0
    patch: int = 152
    batch: int = 32
    # epochs per stage and the log10 learning-rate endpoints of each stage
    stages: tuple[int, ...] = (15, 20, 10)
    lr_log10: tuple[tuple[float, float], ...] = ((-3.0, -3.0), (-3.8, -4.0), (-4.5, -5.0))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    steps_per_epoch: int | None = None
    checkpoint_every: int = 1
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))
        object.__setattr__(self, "lr_log10", tuple(tuple(float(v) for v in p) for p in self.lr_log10))
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.batch < 1 or self.patch < 1:
            raise ValueError(f"batch and patch must be positive, got {self.batch}, {self.patch}")
        if len(self.stages) != len(self.lr_log10) or any(s < 0 for s in self.stages):
            raise ValueError(f"stages {self.stages} must be non-negative and match lr_log10 {self.lr_log10}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")

    @property
    def epochs(self) -> int:
        return sum(self.stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        d["lr_log10"] = [list(p) for p in self.lr_log10]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["stages"] = tuple(d["stages"])
        d["lr_log10"] = tuple(tuple(p) for p in d["lr_log10"])
        return cls(**d)


def lr_at(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    """Learning rate for a 0-based epoch: log-linear within each stage, endpoints inclusive."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {config.epochs} epochs")
    start = 0
    for length, (a, b) in zip(config.stages, config.lr_log10):
        if epoch < start + length:
            k = epoch - start
            exponent = a if length == 1 else a + (b - a) * k / (length - 1)
            # exact powers of ten at the stage endpoints
            if k == 0:
                exponent = a
            elif k == length - 1:
                exponent = b
            return 10.0 ** exponent
        start += length
    raise AssertionError("unreachable")


def add_gaussian_noise(clean: np.ndarray, sigma: float, seed) -> np.ndarray:
    """clean + N(0, (sigma/255)^2) per pixel, not clipped. ``seed`` may be a Generator."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.standard_normal(np.shape(clean)) * (sigma / 255.0)
    return (clean + noise).astype(np.asarray(clean).dtype, copy=False)


def dihedral(patch: np.ndarray, aug: int) -> np.ndarray:
    """Augmentation ``aug`` in 0..7: rotate by ``aug % 4`` quarter turns, then mirror if ``aug >= 4``."""
    out = np.rot90(patch, aug % 4)
    if aug >= 4:
        out = out[:, ::-1]
    return out


def dihedral_inverse(patch: np.ndarray, aug: int) -> np.ndarray:
    out = patch[:, ::-1] if aug >= 4 else patch
    return np.rot90(out, -(aug % 4))


@dataclass
class PatchBatch:
    clean: np.ndarray
    noisy: np.ndarray
    provenance: list[tuple[int, tuple[int, int], int]] = field(default_factory=list)


def _eligible(dataset: Dataset, patch: int) -> list[int]:
    idx = []
    for i, (name, img) in enumerate(dataset):
        if min(img.shape) >= patch:
            idx.append(i)
        else:
            warnings.warn(f"skipping {name}: {img.shape} smaller than patch {patch}", stacklevel=3)
    if not idx:
        raise ValueError(f"no training image is at least {patch}x{patch}")
    return idx


def sample_patches(dataset: Dataset, config: TrainConfig, rng: np.random.Generator,
                   dtype=np.float32) -> PatchBatch:
    p = config.patch
    eligible = _eligible(dataset, p)
    clean = np.empty((config.batch, 1, p, p), dtype=dtype)
    prov = []
    for b in range(config.batch):
        i = eligible[rng.integers(len(eligible))]
        img = dataset[i][1]
        y = int(rng.integers(img.shape[0] - p + 1))
        x = int(rng.integers(img.shape[1] - p + 1))
        aug = int(rng.integers(8)) if config.augment else 0
        clean[b, 0] = dihedral(img[y:y + p, x:x + p], aug)
        prov.append((i, (y, x), aug))
    noisy = add_gaussian_noise(clean, config.sigma, rng)
    return PatchBatch(clean, noisy, prov)


def steps_per_epoch(dataset: Dataset, config: TrainConfig) -> int:
    """Explicit override, else floor(non-overlapping patches in the dataset / batch), at least 1."""
    if config.steps_per_epoch is not None:
        return config.steps_per_epoch
    p = config.patch
    total = sum((img.shape[0] // p) * (img.shape[1] // p) for _, img in dataset)
    return max(1, total // config.batch)


def adam_step(params: ParamStore, grads, lr: float, t: int,
              config: TrainConfig = TrainConfig()) -> ParamStore:
    """One bias-corrected Adam update in place; ``t`` is the 1-based step index."""
    if list(grads) != params.names():
        raise ValueError("gradients are not aligned with the parameter store")
    if t < 1:
        raise ValueError(f"Adam step index starts at 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params.values[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = params.adam_m[name], params.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype, copy=False)
    return params


@dataclass
class ProgressRecord:
    epoch: int
    step: int
    lr: float
    loss: float | None = None
    val_psnr: float | None = None

    def line(self) -> str:
        parts = [f"epoch={self.epoch}", f"step={self.step}", f"lr={self.lr:.6g}"]
        if self.loss is not None:
            parts.append(f"loss={self.loss:.6g}")
        if self.val_psnr is not None:
            parts.append(f"val_psnr={self.val_psnr:.4f}")
        return " ".join(parts)


def validation_psnr(params: ParamStore, validation: Dataset, sigma: float, seed: int) -> float:
    from .metrics import psnr

    scores = []
    for k, (_, img) in enumerate(validation):
        noisy = add_gaussian_noise(img, sigma, np.random.default_rng([seed, k]))
        out = np.clip(denoise(noisy, params), 0.0, 1.0)
        scores.append(psnr(out * 255.0, img * 255.0))
    finite = [s for s in scores if math.isfinite(s)]
    return float(np.mean(finite)) if finite else math.inf


def _grad_norms(grads) -> str:
    worst = sorted(((float(np.linalg.norm(g)), k) for k, g in grads.items()), reverse=True)[:3]
    return ", ".join(f"{k}={n:.3g}" for n, k in worst)


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
          sinks: Sequence[Callable[[ProgressRecord], None]] = (),
          validation: Dataset | None = None,
          resume: Checkpoint | None = None) -> Iterator[Checkpoint]:
    """Run the optimizer and yield checkpoints every ``checkpoint_every`` epochs and at the end.

    Everything, including resumption from a yielded checkpoint, is a
    deterministic function of the seed, configs and dataset.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    tc = train_config
    if tc.patch % model_config.grid:
        raise ValueError(f"patch {tc.patch} must be divisible by 2**levels = {model_config.grid}")
    if resume is not None:
        if resume.config != model_config:
            raise ValueError("resume checkpoint has a different model config: "
                             + "; ".join(resume.config.diff(model_config)))
        params = resume.params.copy()
        epoch, step = resume.epoch, resume.step
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
    else:
        params = build(model_config, seed=tc.seed)
        epoch, step = 0, 0
        rng = np.random.default_rng([tc.seed, 1])
    spe = steps_per_epoch(dataset, tc)

    def emit(rec):
        for sink in sinks:
            sink(rec)

    def snapshot():
        return Checkpoint(params.copy(), epoch, step, rng.bit_generator.state, tc.to_dict())

    yielded_at = None
    while epoch < tc.epochs:
        lr = lr_at(epoch, tc)
        for _ in range(spe):
            batch = sample_patches(dataset, tc, rng, dtype=params.dtype)
            loss, grads = backward(batch.noisy, batch.clean, params, "train", update_stats=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step + 1} (epoch {epoch}, lr {lr:.3g}); "
                    f"largest gradient norms: {_grad_norms(grads)}"
                )
            step += 1
            adam_step(params, grads, lr, step, tc)
            emit(ProgressRecord(epoch, step, lr, loss=loss))
        epoch += 1
        if validation:
            emit(ProgressRecord(epoch - 1, step, lr,
                                val_psnr=validation_psnr(params, validation, tc.sigma, tc.seed)))
        if epoch % tc.checkpoint_every == 0 or epoch == tc.epochs:
            yielded_at = epoch
            yield snapshot()
    if yielded_at is None:
        yield snapshot()
