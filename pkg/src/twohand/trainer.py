"""Adam optimisation, final-upsampler pretraining and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import Config
from .errors import MissingGradientError, TrainingDiverged
from .losses import JointRegressor, LossWeights, total_loss
from .meshtopo import DenseMatchingEncoding, MeshHierarchy
from .metrics import EvalProtocol, evaluate
from .model import ModelConfig, ModelParams, build_params, forward, load_params, save_checkpoint
from .synthdata import HandRig, mirror, pose_hand, POSE_DIM

LOG_COLUMNS = ("step", "epoch", "lr", "total", "vertex", "joint", "normal", "edge", "eval_mpvpe_mm")


@dataclass
class AdamState:
    lr: float = 1e-3
    lr_decayed: float = 1e-4
    decay_step: int = 1500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: Config) -> "AdamState":
        return cls(cfg.lr, cfg.lr_decayed, cfg.decay_step)

    def learning_rate(self, step: int | None = None) -> float:
        """Two-phase schedule: ``lr`` before ``decay_step`` (0-based), ``lr_decayed`` after."""
        s = self.step if step is None else step
        return self.lr if s < self.decay_step else self.lr_decayed

    def arrays(self) -> dict:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    def load_arrays(self, arrays: dict) -> None:
        self.m = {k[len("adam.m."):]: a.copy() for k, a in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: a.copy() for k, a in arrays.items() if k.startswith("adam.v.")}


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update of every parameter in ``params`` from its ``.grad``."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradientError(p.name)
    lr = state.learning_rate()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------- final_up fit

def pretrain_final_up(hierarchy: MeshHierarchy, n_meshes: int = 200, ridge: float = 1e-4,
                      seed: int = 0) -> np.ndarray:
    """Least-squares fit of the coarsest-to-full linear map on randomly posed templates.

    Solves ``min_A sum_m ||A X_m - Y_m||^2 + ridge ||A - A_0||^2`` where ``X_m``
    is the finest-level pooled mesh, ``Y_m`` the full mesh and ``A_0`` the
    one-hot cluster assignment.
    """
    rig = HandRig.from_template(hierarchy.template)
    rng = np.random.default_rng([seed, 7])
    top = hierarchy.n_levels - 1
    xs, ys = [], []
    for i in range(n_meshes):
        v = pose_hand(rig, rng.uniform(-1, 1, POSE_DIM))
        if i % 2:
            v = mirror(v)
        v = v + rng.uniform(-0.1, 0.1, 3)
        xs.append(hierarchy.pool(v, top))
        ys.append(v)
    x = np.concatenate(xs, axis=1)  # (N_top, 3M)
    y = np.concatenate(ys, axis=1)  # (N, 3M)
    a0 = hierarchy.final_up_init
    lhs = x @ x.T + ridge * np.eye(x.shape[0])
    rhs = y @ x.T + ridge * a0
    return np.linalg.solve(lhs, rhs.T).T


# ------------------------------------------------------------------ training

@dataclass
class TrainContext:
    hierarchy: MeshHierarchy
    encoding: DenseMatchingEncoding
    regressor: JointRegressor
    weights: LossWeights = LossWeights()
    protocol: EvalProtocol = EvalProtocol()


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    log: list
    epochs_done: int


def predict(params: ModelParams, samples, ctx: TrainContext) -> list[dict]:
    out = []
    for s in samples:
        pred = forward(s.pyramid, ctx.hierarchy, ctx.encoding, params)
        out.append({h: pred.full[h].value.copy() for h in pred.full})
    return out


def eval_mpvpe(params, samples, ctx: TrainContext) -> float:
    return evaluate(predict(params, samples, ctx), list(samples), ctx.regressor, ctx.protocol).mpvpe


def initial_params(cfg: Config, ctx: TrainContext) -> ModelParams:
    """Fresh parameters with the pretrained, frozen final upsampler."""
    params = build_params(ModelConfig.from_config(cfg, ctx.hierarchy), ctx.hierarchy, seed=cfg.seed,
                          stable=True)
    params.final_up.value[...] = pretrain_final_up(ctx.hierarchy, cfg.pretrain_meshes,
                                                   cfg.pretrain_ridge, cfg.seed)
    return params


def _write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def save_training_checkpoint(path, params, state: AdamState, epoch: int, cfg: Config) -> None:
    header = {"train.epoch": epoch, "train.step": state.step, "config.hash": cfg.hash()}
    save_checkpoint(path, params, header, state.arrays())


def load_training_checkpoint(path, hierarchy, cfg: Config) -> tuple[ModelParams, AdamState, int]:
    params, header, arrays = load_params(path, hierarchy)
    state = AdamState.from_config(cfg)
    state.step = int(header.get("train.step", 0))
    state.load_arrays(arrays)
    return params, state, int(header.get("train.epoch", 0))


def train(cfg: Config, train_set, test_set, ctx: TrainContext, params: ModelParams | None = None,
          out_dir=None, resume=None, progress=None) -> TrainResult:
    """Mini-batch Adam with per-sample gradient accumulation.

    Stops after ``cfg.epochs`` epochs or ``cfg.max_steps`` steps, whichever is
    first. Epoch ``e`` visits samples in the order drawn from ``rng([seed, e])``,
    so a run resumed from an epoch checkpoint continues exactly.
    """
    samples = list(train_set)
    if not samples:
        raise ValueError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start_epoch = 0
    if resume is not None:
        params, state, start_epoch = load_training_checkpoint(resume, ctx.hierarchy, cfg)
    else:
        params = params if params is not None else initial_params(cfg, ctx)
        state = AdamState.from_config(cfg)
    trainable = params.store.trainable()
    rows = []
    epoch = start_epoch
    bsz = cfg.batch_size
    test_samples = list(test_set) if test_set is not None else []
    while epoch < cfg.epochs and state.step < cfg.max_steps:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        for lo in range(0, len(order), bsz):
            if state.step >= cfg.max_steps:
                break
            batch = [samples[i] for i in order[lo:lo + bsz]]
            params.store.zero_grad()
            parts = dict.fromkeys(("vertex", "joint", "normal", "edge"), 0.0)
            total = 0.0
            for s in batch:
                pred = forward(s.pyramid, ctx.hierarchy, ctx.encoding, params)
                terms = total_loss(pred, s, ctx.hierarchy, ctx.regressor, ctx.weights)
                value = terms.total.item()
                if not math.isfinite(value):
                    rows.append({"step": state.step, "epoch": epoch, "lr": state.learning_rate(),
                                 "total": value})
                    if out is not None:
                        _write_log(out / "run_log.csv", rows)
                    raise TrainingDiverged(state.step, value)
                terms.total.backward(1.0 / len(batch))
                total += value / len(batch)
                for k, v in terms.parts.items():
                    parts[k] += v / len(batch)
            row = {"step": state.step, "epoch": epoch, "lr": state.learning_rate(), "total": total, **parts}
            adam_step(trainable, state)
            if test_samples and cfg.eval_every and state.step % cfg.eval_every == 0:
                row["eval_mpvpe_mm"] = eval_mpvpe(params, test_samples, ctx)
            rows.append(row)
            if progress is not None:
                progress(row)
        epoch += 1
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_training_checkpoint(out / f"checkpoint_epoch{epoch:04d}.bin", params, state, epoch, cfg)
    if out is not None:
        _write_log(out / "run_log.csv", rows)
        save_training_checkpoint(out / "final.bin", params, state, epoch, cfg)
    return TrainResult(params, state, rows, epoch)


def context_from_config(cfg: Config) -> TrainContext:
    """Template, hierarchy, encoding, regressor and loss weights named by ``cfg``."""
    from .losses import uniform_patch_regressor
    from .meshtopo import bundled_template, coarsen, dense_matching_encoding

    template = bundled_template(cfg.template)
    hierarchy = coarsen(template)
    weights = LossWeights(cfg.w_vertex, cfg.w_joint, cfg.w_normal, cfg.w_edge)
    return TrainContext(hierarchy, dense_matching_encoding(hierarchy),
                        uniform_patch_regressor(template.vertices), weights)
