"""Adam training loop over the forecaster parameters.

A batch is a set of scenes; every non-SDV actor in the batch contributes
one composite-loss term (see priors.total_loss_grad). Gradients are
clipped to a global norm before each Adam update. Everything is driven by
explicit RNG streams spawned from the experiment seed, so a (config, seed)
pair fully determines the final checkpoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:  # py >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import InvalidConfig, NonFiniteGradient, NonFiniteLoss, ShapeMismatch
from .forecaster import Architecture, default_architecture, init_params
from .priors import (
    LOSS_MODES,
    EstimatorConfig,
    LossWeights,
    RewardConfig,
    prepare_scene,
    total_loss_grad,
)
from .scene_gen import load_dataset


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moment estimates plus hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ShapeMismatch("Adam moment vectors disagree in shape")
        if self.step < 0:
            raise InvalidConfig("Adam step count must be >= 0")


def init_adam(n_params: int, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m=np.zeros(n_params), v=np.zeros(n_params),
                     step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam update; returns fresh (state, params)."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ShapeMismatch(
            f"params {params.shape}, grad {grad.shape}, moments {state.m.shape}"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m=m, v=v, step=t, lr=state.lr, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)
    return new_state, new_params


def clip_gradient(grad: np.ndarray, max_norm: float):
    """Scale grad down to max_norm if longer; returns (grad, original norm)."""
    norm = float(np.linalg.norm(grad))
    if norm > max_norm and norm > 0.0:
        grad = grad * (max_norm / norm)
    return grad, norm


# --- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    epochs: int = 25
    batch_scenes: int = 8
    clip_norm: float = 10.0
    eval_every: int = 0  # 0 = never evaluate during training

    def __post_init__(self):
        if self.lr <= 0.0:
            raise InvalidConfig("lr must be positive")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.batch_scenes < 1:
            raise InvalidConfig("batch_scenes must be >= 1")
        if self.clip_norm <= 0.0:
            raise InvalidConfig("clip_norm must be positive")
        if self.eval_every < 0:
            raise InvalidConfig("eval_every must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    """One training run: dataset, loss mode, reward/estimator knobs, seed."""

    train_dir: str
    mode: str
    seed: int
    eval_dir: str | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise InvalidConfig(f"unknown loss mode {self.mode!r}")
        if not isinstance(self.seed, int):
            raise InvalidConfig("seed must be an integer")


def _take(section: dict, name: str, allowed: dict):
    """Pop known keys (with defaults); reject unknown ones loudly."""
    unknown = set(section) - set(allowed)
    if unknown:
        raise InvalidConfig(f"[{name}] has unknown keys: {sorted(unknown)}")
    return {k: section.get(k, d) for k, d in allowed.items() if k in section}


def config_from_dict(raw: dict) -> ExperimentConfig:
    known_sections = {"dataset", "loss", "rewards", "estimator", "optim", "generate"}
    unknown = {k for k in raw if k not in known_sections and k != "seed"}
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    if "seed" not in raw:
        raise InvalidConfig("config must set a top-level seed")
    ds = raw.get("dataset", {})
    ds_vals = _take(ds, "dataset", {"train_dir": None, "eval_dir": None})
    if "train_dir" not in ds_vals:
        raise InvalidConfig("[dataset] must set train_dir")
    loss = _take(raw.get("loss", {}), "loss",
                 {"mode": "mle_only", "beta": 0.1, "gamma": 0.1})
    mode = loss.pop("mode", "mle_only")
    rewards = RewardConfig(**_take(
        raw.get("rewards", {}), "rewards",
        {"r_d": 1.0, "r_tp": 1.0, "r_fp": -1.0, "r_tn": 0.1, "r_fn": -1.0}))
    estimator = EstimatorConfig(**_take(
        raw.get("estimator", {}), "estimator",
        {"samples": 16, "attribution": "waypoint", "baseline": "none"}))
    optim = OptimConfig(**_take(
        raw.get("optim", {}), "optim",
        {"lr": 1e-3, "epochs": 25, "batch_scenes": 8, "clip_norm": 10.0,
         "eval_every": 0}))
    return ExperimentConfig(
        train_dir=ds_vals["train_dir"],
        eval_dir=ds_vals.get("eval_dir"),
        mode=mode,
        seed=int(raw["seed"]),
        weights=LossWeights(beta=float(loss.get("beta", 0.1)),
                            gamma=float(loss.get("gamma", 0.1))),
        rewards=rewards,
        estimator=estimator,
        optim=optim,
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc
    return config_from_dict(raw)


# --- history ------------------------------------------------------------------

HISTORY_COLUMNS = (
    "epoch", "loss_total", "loss_sym", "loss_prior",
    "eval_minade", "eval_meanade", "eval_fle",
)


@dataclass
class HistoryRow:
    epoch: int
    loss_total: float
    loss_sym: float
    loss_prior: float
    eval_minade: float | None = None
    eval_meanade: float | None = None
    eval_fle: float | None = None


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [",".join(HISTORY_COLUMNS)]
        for r in self.rows:
            cells = [str(r.epoch)] + [
                repr(v) if v is not None else ""
                for v in (r.loss_total, r.loss_sym, r.loss_prior,
                          r.eval_minade, r.eval_meanade, r.eval_fle)
            ]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())


# --- training loop ------------------------------------------------------------

def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def train(
    config: ExperimentConfig,
    params0: np.ndarray | None = None,
    arch: Architecture | None = None,
    progress=None,
):
    """Run the configured experiment; returns (params, TrainingHistory).

    progress, if given, is called as progress(epoch, HistoryRow) after
    every epoch.
    """
    arch = arch or default_architecture()
    root = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, loss_ss = root.spawn(3)
    params = (params0.copy() if params0 is not None
              else init_params(arch, np.random.default_rng(init_ss)))
    if params.shape != (arch.param_count,):
        raise ShapeMismatch(f"params shape {params.shape} != ({arch.param_count},)")

    scenes = load_dataset(config.train_dir)
    prepared = [prepare_scene(s, mode=config.mode) for s in scenes]
    eval_scenes = load_dataset(config.eval_dir) if config.eval_dir else None

    adam = init_adam(arch.param_count, lr=config.optim.lr)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    loss_rng = np.random.default_rng(loss_ss)
    history = TrainingHistory()

    for epoch in range(config.optim.epochs):
        order = shuffle_rng.permutation(len(prepared))
        tot = sym = prior = 0.0
        n_batches = 0
        for b, batch_idx in enumerate(_chunks(order, config.optim.batch_scenes)):
            actors = [pa for i in batch_idx for pa in prepared[i]]
            if not actors:
                continue
            try:
                loss, grad, parts = total_loss_grad(
                    params, actors, config.weights, config.estimator,
                    config.rewards, loss_rng, mode=config.mode, arch=arch,
                )
            except NonFiniteGradient as exc:
                raise NonFiniteLoss(f"epoch {epoch} batch {b}: {exc}") from exc
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch} batch {b}: loss={loss}")
            grad, _ = clip_gradient(grad, config.optim.clip_norm)
            adam, params = adam_step(adam, params, grad)
            tot += loss
            sym += parts["sym"]
            prior += parts["prior"]
            n_batches += 1
        row = HistoryRow(
            epoch=epoch,
            loss_total=tot / max(1, n_batches),
            loss_sym=sym / max(1, n_batches),
            loss_prior=prior / max(1, n_batches),
        )
        do_eval = (
            eval_scenes is not None
            and config.optim.eval_every > 0
            and ((epoch + 1) % config.optim.eval_every == 0
                 or epoch == config.optim.epochs - 1)
        )
        if do_eval:
            from .metrics import evaluate, overall_means

            report = evaluate(params, eval_scenes, arch=arch)
            minade, meanade, fle = overall_means(report)
            row.eval_minade = minade
            row.eval_meanade = meanade
            row.eval_fle = fle
        history.rows.append(row)
        if progress is not None:
            progress(epoch, row)
    return params, history


__all__ = [
    "AdamState",
    "init_adam",
    "adam_step",
    "clip_gradient",
    "OptimConfig",
    "ExperimentConfig",
    "config_from_dict",
    "load_config",
    "HISTORY_COLUMNS",
    "HistoryRow",
    "TrainingHistory",
    "train",
]
