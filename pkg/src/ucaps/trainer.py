"""Adam training loop with plateau decay, early stopping and best-checkpoint tracking."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .losses import total_loss
from .metrics import evaluate
from .patches import random_origins, sliding_window, _pad_to
from .tensor import NonFiniteError, Tensor, no_grad
from .volume import normalize, read_manifest, read_volume

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainResult",
    "Sample",
    "SegDataset",
    "NonFiniteGradientError",
    "NonFiniteLossError",
    "adam_step",
    "predict_volume",
    "evaluate_dataset",
    "train",
]


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, iteration: int, name: str):
        super().__init__(f"non-finite gradient for {name!r} at iteration {iteration}")
        self.iteration = iteration
        self.name = name


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, op: str):
        super().__init__(f"non-finite values from op {op!r} at iteration {iteration}")
        self.iteration = iteration
        self.op = op


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_decay_factor: float = 0.05
    plateau_patience_iters: int = 500
    early_stop_iters: int = 2500
    max_iters: int = 100_000
    time_budget_s: Optional[float] = None
    batch_size: int = 2
    seed: int = 0
    patch_size: int = 64
    eval_interval: int = 50
    eval_patch_size: Optional[int] = None
    eval_overlap: Optional[int] = None
    label_downsampling: str = "majority"

    def __post_init__(self):
        if isinstance(self.betas, list):
            self.betas = tuple(self.betas)

    def validate(self) -> "TrainConfig":
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if not self.plateau_patience_iters < self.early_stop_iters:
            raise ValueError("plateau_patience_iters must be smaller than early_stop_iters")
        if self.lr0 <= 0 or self.eps <= 0:
            raise ValueError("lr0 and eps must be positive")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError("betas must be two numbers in [0, 1)")
        if min(self.batch_size, self.patch_size, self.eval_interval, self.max_iters) < 1:
            raise ValueError("batch_size, patch_size, eval_interval and max_iters must be >= 1")
        if self.patch_size % 8:
            raise ValueError("patch_size must be a multiple of 8")
        if self.eval_patch_size is not None and self.eval_patch_size % 8:
            raise ValueError("eval_patch_size must be a multiple of 8")
        if self.label_downsampling not in ("majority", "nearest"):
            raise ValueError("label_downsampling must be 'majority' or 'nearest'")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class TrainState:
    params: Dict[str, Tensor]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    lr: float
    iteration: int = 0
    step: int = 0
    decays: int = 0
    best_dice: float = 0.0
    best_iter: int = 0
    last_decay_iter: int = 0
    rng: Optional[np.random.Generator] = None

    @classmethod
    def init(cls, params: Dict[str, Tensor], lr: float, seed: int = 0) -> "TrainState":
        return cls(
            params=params,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            lr=lr,
            rng=np.random.default_rng(seed),
        )


def adam_step(state: TrainState, grads: Dict[str, np.ndarray], lr: Optional[float] = None,
              betas=(0.9, 0.999), eps: float = 1e-8) -> TrainState:
    """One bias-corrected Adam update of ``state.params`` in place.

    Parameters without a gradient are left untouched.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(state.iteration, name)
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W, D] float32
    labels: np.ndarray  # [H, W, D] uint8


@dataclass
class SegDataset:
    train: List[Sample] = field(default_factory=list)
    val: List[Sample] = field(default_factory=list)
    test: List[Sample] = field(default_factory=list)

    @classmethod
    def from_manifest(cls, path) -> "SegDataset":
        out = cls()
        for entry in read_manifest(path):
            img = normalize(read_volume(entry.image_path)).data
            lab = read_volume(entry.label_path).data
            split = getattr(out, entry.split, None)
            if split is None:
                raise ValueError(f"unknown split {entry.split!r} for {entry.image_path}")
            split.append(Sample(img[None], lab))
        return out

    @classmethod
    def from_phantoms(cls, spec, n_train: int, n_val: int = 2, n_test: int = 0) -> "SegDataset":
        """Phantoms with seeds ``spec.seed, spec.seed + 1, ...`` split in order."""
        from .phantom import generate_phantom
        samples = []
        for i in range(n_train + n_val + n_test):
            img, lab = generate_phantom(dataclasses.replace(spec, seed=spec.seed + i))
            samples.append(Sample(img.data[None], lab.data))
        return cls(samples[:n_train], samples[n_train:n_train + n_val],
                   samples[n_train + n_val:])


def _sample_batch(rng, samples: Sequence[Sample], p: int, n: int):
    images, labels = [], []
    for _ in range(n):
        s = samples[int(rng.integers(len(samples)))]
        spatial = tuple(max(d, p) for d in s.labels.shape)
        img = _pad_to(s.image, spatial, range(1, 4))
        lab = _pad_to(s.labels, spatial, range(3))
        (o,) = random_origins(rng, spatial, p, 1)
        sl = tuple(slice(a, a + p) for a in o)
        images.append(img[(slice(None),) + sl])
        labels.append(lab[sl])
    return np.stack(images).astype(np.float32), np.stack(labels)


def predict_volume(net, image: np.ndarray, patch_size: Optional[int] = None,
                   overlap: Optional[int] = None) -> np.ndarray:
    """Sliding-window class probabilities ``[K, H, W, D]`` for one ``[C, H, W, D]`` image.

    Softmax probabilities are averaged where windows overlap. The network is
    run in eval mode and restored to its previous mode afterwards.
    """
    was_training = net.training
    net.eval()
    p = patch_size or max(8, int(np.ceil(max(image.shape[1:]) / 8)) * 8)

    def run(batch):
        out = net(Tensor(batch.astype(np.float32))).logits.data
        e = np.exp(out - out.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    try:
        with no_grad():
            return sliding_window(run, image, p, overlap if overlap is not None else p // 2)
    finally:
        net.train(was_training)


def evaluate_dataset(net, samples: Sequence[Sample], num_classes: int,
                     patch_size: Optional[int] = None, overlap: Optional[int] = None):
    """Mean foreground Dice over ``samples`` and the per-sample metrics."""
    per = []
    for s in samples:
        pred = predict_volume(net, s.image, patch_size, overlap).argmax(0)
        per.append(evaluate(pred, s.labels, num_classes))
    return float(np.mean([m.mean_dice for m in per])), per


@dataclass
class TrainResult:
    best_state: Dict[str, np.ndarray]
    history: List[dict]
    state: TrainState
    stop_reason: str


def _finite_mean(values):
    return float(np.mean(values)) if values else float("nan")


def train(net, dataset: SegDataset, cfg: TrainConfig, history_path=None,
          class_weights=None, log=None) -> TrainResult:
    """Optimize ``net`` on random training patches.

    Every ``eval_interval`` iterations the validation mean foreground Dice is
    computed. When it has not improved for ``plateau_patience_iters`` the
    learning rate is multiplied by ``lr_decay_factor``; after
    ``early_stop_iters`` without improvement training halts. The returned
    ``best_state`` is the state dict at the best validation Dice.
    """
    cfg.validate()
    if not dataset.train:
        raise ValueError("dataset has no training samples")
    if not dataset.val:
        raise ValueError("dataset has no validation samples")
    ncfg = net.config
    params = net.parameters()
    state = TrainState.init(params, cfg.lr0, cfg.seed)
    eval_p = cfg.eval_patch_size or cfg.patch_size
    history: List[dict] = []
    best_state = {k: v.copy() for k, v in net.state_dict().items()}
    running: Dict[str, List[float]] = {"ce": [], "margin": [], "reconstruction": [], "total": []}
    start = time.perf_counter()
    reason = "max_iters"
    hist_fh = open(history_path, "w") if history_path else None
    try:
        net.train()
        while state.iteration < cfg.max_iters:
            x, y = _sample_batch(state.rng, dataset.train, cfg.patch_size, cfg.batch_size)
            net.zero_grad()
            try:
                out = net(Tensor(x))
                losses = total_loss(out, y, x, ncfg, class_weights, cfg.label_downsampling)
            except NonFiniteError as exc:
                raise NonFiniteLossError(state.iteration, exc.op) from None
            losses.total.backward()
            adam_step(state, {k: p.grad for k, p in params.items()}, state.lr,
                      cfg.betas, cfg.eps)
            state.iteration += 1
            for k, v in losses.as_dict().items():
                running[k].append(v)

            if state.iteration % cfg.eval_interval:
                continue
            dice, _ = evaluate_dataset(net, dataset.val, ncfg.num_classes, eval_p,
                                       cfg.eval_overlap)
            if dice > state.best_dice:
                state.best_dice, state.best_iter = dice, state.iteration
                best_state = {k: v.copy() for k, v in net.state_dict().items()}
            since = state.iteration - max(state.best_iter, state.last_decay_iter)
            if since >= cfg.plateau_patience_iters:
                state.lr *= cfg.lr_decay_factor
                state.decays += 1
                state.last_decay_iter = state.iteration
            record = {"iter": state.iteration, **{k: _finite_mean(v) for k, v in running.items()},
                      "lr": state.lr, "val_dice": dice, "best_dice": state.best_dice}
            running = {k: [] for k in running}
            history.append(record)
            if hist_fh:
                hist_fh.write(json.dumps(record) + "\n")
                hist_fh.flush()
            if log:
                log(record)
            if state.iteration - state.best_iter >= cfg.early_stop_iters:
                reason = "early_stop"
                break
            if cfg.time_budget_s is not None and time.perf_counter() - start > cfg.time_budget_s:
                reason = "time_budget"
                break
    finally:
        if hist_fh:
            hist_fh.close()
    return TrainResult(best_state, history, state, reason)
