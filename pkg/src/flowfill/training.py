"""Training loop: flip augmentation, Adam, validation-driven lr halving,
best-weights selection, and the checkpoint file format."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adam import AdamState, adam_step
from .losses import LossReport, net_loss
from .metrics import mean_epe
from .model import (
    CheckpointError,
    ModelConfig,
    forward_tensors,
    init_params,
    predict,
    read_model,
    read_tensor,
    read_u32,
    read_blob,
    write_blob,
    write_model,
    write_tensor,
)
from .preprocess import Sample, flip_horizontal, without_edges

log = logging.getLogger(__name__)

PRETRAIN_LR = 5e-5
FINETUNE_LR = 5e-6
PATIENCE_PROFILES = {"chairs": 5000, "sintel": 1000, "kitti": 400}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = PRETRAIN_LR
    patience: int = PATIENCE_PROFILES["chairs"]
    rounds: int = 4
    val_interval: int = 100
    max_steps: int = 1_000_000
    seed: int = 0
    flip_prob: float = 0.5
    improve_tol: float = 1e-4
    use_ld: bool = True
    use_mll: bool = True
    use_edges: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.val_interval < 1:
            raise ValueError("val_interval must be >= 1")
        if self.patience < self.val_interval:
            raise ValueError("patience must be at least one validation interval")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    step: int = 0
    lr: float = PRETRAIN_LR
    rounds_done: int = 0
    best_params: dict[str, np.ndarray] | None = None
    best_val: float = float("inf")
    best_step: int = -1
    last_improve_step: int = 0
    validated_step: int = -1
    history: list[tuple[int, float]] = field(default_factory=list)
    finished: bool = False
    train_config: TrainConfig | None = None


# -- checkpoint file ---------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = list(ckpt.config.param_shapes())
    state = {
        "step": ckpt.step,
        "lr": ckpt.lr,
        "rounds_done": ckpt.rounds_done,
        "best_val": None if not np.isfinite(ckpt.best_val) else ckpt.best_val,
        "best_step": ckpt.best_step,
        "last_improve_step": ckpt.last_improve_step,
        "validated_step": ckpt.validated_step,
        "history": ckpt.history,
        "finished": ckpt.finished,
        "train_config": None if ckpt.train_config is None else asdict(ckpt.train_config),
        "adam": None
        if ckpt.adam is None
        else {k: getattr(ckpt.adam, k) for k in ("lr", "beta1", "beta2", "eps", "t")},
    }
    with open(path, "wb") as f:
        write_model(f, ckpt.config, ckpt.params)
        write_blob(f, json.dumps(state, sort_keys=True))
        has_moments = ckpt.adam is not None and all(k in ckpt.adam.m for k in names)
        f.write(struct.pack("<I", int(has_moments)))
        if has_moments:
            for k in names:
                write_tensor(f, ckpt.adam.m[k])
            for k in names:
                write_tensor(f, ckpt.adam.v[k])
        f.write(struct.pack("<I", int(ckpt.best_params is not None)))
        if ckpt.best_params is not None:
            for k in names:
                write_tensor(f, ckpt.best_params[k])


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect`` enforces a matching architecture."""
    with open(path, "rb") as f:
        config, params = read_model(f, expect)
        names = list(config.param_shapes())
        ckpt = Checkpoint(config, params)
        rest = f.read(1)
        if not rest:
            return ckpt
        f.seek(-1, 1)
        try:
            state = json.loads(read_blob(f))
        except ValueError as e:
            raise CheckpointError(f"bad training state: {e}") from None
        adam = None
        if state["adam"] is not None:
            adam = AdamState(**state["adam"])
        if read_u32(f):
            moments = [read_tensor(f) for _ in range(2 * len(names))]
            if adam is None:
                raise CheckpointError("moment buffers without optimizer state")
            adam.m = dict(zip(names, moments[: len(names)]))
            adam.v = dict(zip(names, moments[len(names):]))
        best = None
        if read_u32(f):
            best = {k: read_tensor(f) for k in names}
    tc = state["train_config"]
    return replace(
        ckpt,
        adam=adam,
        step=state["step"],
        lr=state["lr"],
        rounds_done=state["rounds_done"],
        best_params=best,
        best_val=float("inf") if state["best_val"] is None else state["best_val"],
        best_step=state["best_step"],
        last_improve_step=state["last_improve_step"],
        validated_step=state["validated_step"],
        history=[tuple(h) for h in state["history"]],
        finished=state["finished"],
        train_config=None if tc is None else TrainConfig(**tc),
    )


# -- training ------------------------------------------------------------------


def loss_and_grads(
    params: dict[str, np.ndarray],
    sample: Sample,
    weights: Sequence[float],
    use_ld: bool = True,
    dtype=np.float32,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    tape = ad.Tape(dtype=dtype)
    pt = {k: tape.param(v, k) for k, v in params.items()}
    outs = forward_tensors(pt, tape.constant(sample.input.grid), len(weights))
    loss, report = net_loss(outs, sample.gt, weights, use_ld=use_ld)
    tape.backward(loss)
    return report, {k: t.grad for k, t in pt.items()}


def validation_epe(params: dict[str, np.ndarray], samples: Sequence[Sample]) -> float:
    """Mean over samples of the last detour's mean EPE on the /8 grid."""
    return float(np.mean([mean_epe(predict(params, s.input), s.gt) for s in samples]))


def _copy(params):
    return {k: v.copy() for k, v in params.items()}


def _draw(seed: int, step: int, n: int, flip_prob: float) -> tuple[int, bool]:
    # pure function of (seed, step) so a resumed run draws the same sequence
    epoch, pos = divmod(step, n)
    idx = int(np.random.default_rng([seed, 0, epoch]).permutation(n)[pos])
    flip = bool(np.random.default_rng([seed, 1, step]).random() < flip_prob)
    return idx, flip


def train(
    model_config: ModelConfig,
    config: TrainConfig,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    start: Checkpoint | None = None,
    on_step: Callable[[int, float, LossReport], None] | None = None,
    on_checkpoint: Callable[[Checkpoint], None] | None = None,
    checkpoint_every: int = 0,
) -> Checkpoint:
    """Run the training loop and return the best-on-validation checkpoint.

    ``start`` resumes an interrupted run (or seeds a fine-tune); otherwise
    parameters are initialized from ``model_config.seed``.  Training stops
    after ``config.rounds`` lr halvings or ``config.max_steps`` steps.
    ``on_checkpoint`` receives the live state every ``checkpoint_every``
    steps and at the end.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    if any(s.gt is None for s in list(train_set) + list(val_set)):
        raise ValueError("every sample needs ground truth")
    if not config.use_edges:
        train_set = [without_edges(s) for s in train_set]
        val_set = [without_edges(s) for s in val_set]
    L = model_config.num_layers
    weights = model_config.detour_weights if config.use_mll else (0.0,) * (L - 1) + (1.0,)

    if start is None:
        ck = Checkpoint(model_config, init_params(model_config), AdamState(lr=config.lr), lr=config.lr)
    else:
        ck = replace(start, params=_copy(start.params), history=list(start.history))
        if ck.adam is None:
            ck.adam = AdamState(lr=ck.lr)
        else:
            ck.adam = ck.adam.copy()
    ck.train_config = config

    def validate():
        val = validation_epe(ck.params, val_set)
        ck.history.append((ck.step, val))
        ck.validated_step = ck.step
        if val < ck.best_val - config.improve_tol or ck.best_params is None:
            ck.best_val, ck.best_step = val, ck.step
            ck.best_params = _copy(ck.params)
            ck.last_improve_step = ck.step
        elif ck.step - ck.last_improve_step >= config.patience:
            ck.rounds_done += 1
            ck.lr = config.lr / 2**ck.rounds_done
            ck.params = _copy(ck.best_params)
            ck.adam = AdamState(lr=ck.lr)
            ck.last_improve_step = ck.step
            log.info("step %d: no improvement, round %d, lr -> %g", ck.step, ck.rounds_done, ck.lr)
        return val

    n = len(train_set)
    while not ck.finished:
        if ck.step % config.val_interval == 0 and ck.validated_step != ck.step:
            validate()
        if ck.rounds_done >= config.rounds or ck.step >= config.max_steps:
            break
        idx, flip = _draw(config.seed, ck.step, n, config.flip_prob)
        sample = flip_horizontal(train_set[idx]) if flip else train_set[idx]
        try:
            report, grads = loss_and_grads(ck.params, sample, weights, config.use_ld)
        except ad.NonFiniteError as e:
            raise TrainingDiverged(f"step {ck.step}: {e}") from e
        if not np.isfinite(report.total):
            raise TrainingDiverged(f"step {ck.step}: loss is {report.total}")
        ck.adam.lr = ck.lr
        adam_step(ck.params, grads, ck.adam)
        ck.step += 1
        if on_step is not None:
            on_step(ck.step, ck.lr, report)
        if on_checkpoint is not None and checkpoint_every and ck.step % checkpoint_every == 0:
            on_checkpoint(ck)
    ck.finished = ck.rounds_done >= config.rounds
    if on_checkpoint is not None:
        on_checkpoint(ck)
    # the final off-interval evaluation only feeds the result, never the
    # resumable state, so a resumed run sees exactly what a straight run saw
    out = replace(ck, params=_copy(ck.params), history=list(ck.history))
    if out.validated_step != out.step:
        val = validation_epe(out.params, val_set)
        out.history.append((out.step, val))
        if val < out.best_val:
            out.best_val, out.best_step, out.best_params = val, out.step, _copy(out.params)
    out.params = _copy(out.best_params)
    return out


def finetune(
    base: Checkpoint,
    config: TrainConfig,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    carry_adam: bool = False,
    **kwargs,
) -> Checkpoint:
    """Continue training from ``base`` with fresh counters and, unless
    ``carry_adam``, fresh optimizer moments."""
    adam = base.adam.copy() if (carry_adam and base.adam is not None) else AdamState(lr=config.lr)
    start = Checkpoint(base.config, _copy(base.params), adam, lr=config.lr)
    return train(base.config, config, train_set, val_set, start=start, **kwargs)
