"""Adam training loop with inverse-time learning-rate decay.

A run is fully determined by (model initialisation, train/test cases,
:class:`TrainConfig`). Node resampling happens once per run from a generator
derived from ``cfg.seed``; batches are drawn uniformly with replacement from
a second derived generator whose state is checkpointed, so an interrupted
run resumes onto exactly the same parameter trajectory.
"""

from __future__ import annotations

import copy
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .dataset import CaseRecord, ResampledBatch, build_resampled
from .errors import ConfigError, LoadError, ResumeError, TrainingError, UsageError
from .model import model_from_dict, model_to_dict

PathLike = Union[str, Path]

STATE_FORMAT_VERSION = 1
# fields that must agree between a checkpoint and the config used to resume it
RESUME_KEYS = ("batch_size", "lr0", "decay_coefficient", "seed", "resample_N", "eval_every")


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr0: float = 2e-3
    decay_coefficient: float = 2e-4
    iterations: int = 1000
    seed: int = 0
    resample_N: int = 256
    eval_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not self.decay_coefficient >= 0:
            raise ConfigError(f"decay_coefficient must be >= 0, got {self.decay_coefficient}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.resample_N < 1:
            raise ConfigError(f"resample_N must be >= 1, got {self.resample_N}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)


def lr_at(t: int, cfg: TrainConfig) -> float:
    """Inverse-time decay ``lr0 / (1 + decay * t)``."""
    if t < 0:
        raise UsageError(f"iteration must be >= 0, got {t}")
    return cfg.lr0 / (1.0 + cfg.decay_coefficient * t)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Sequence[ad.Parameter], **kw) -> "AdamState":
        return cls({p.name: np.zeros_like(p.value) for p in params},
                   {p.name: np.zeros_like(p.value) for p in params}, **kw)

    def to_dict(self) -> dict:
        return {
            "t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "m": {k: a.ravel().tolist() for k, a in self.m.items()},
            "v": {k: a.ravel().tolist() for k, a in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: dict, params: Sequence[ad.Parameter]) -> "AdamState":
        shapes = {p.name: p.shape for p in params}
        if set(d["m"]) != set(shapes) or set(d["v"]) != set(shapes):
            raise LoadError("optimizer moments do not match the model's parameters")
        m = {k: np.array(d["m"][k], dtype=np.float64).reshape(shapes[k]) for k in shapes}
        v = {k: np.array(d["v"][k], dtype=np.float64).reshape(shapes[k]) for k in shapes}
        return cls(m, v, int(d["t"]), d["beta1"], d["beta2"], d["eps"])


def adam_step(params: Sequence[ad.Parameter], state: AdamState, lr: float,
              grads: Optional[dict] = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Gradients come from ``grads`` when given, else from each ``param.grad``.
    """
    for p in params:
        g = p.grad if grads is None else grads[p.name]
        if g.shape != p.shape:
            raise UsageError(f"gradient for {p.name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad if grads is None else grads[p.name]
        m = b1 * state.m[p.name] + (1.0 - b1) * g
        v = b2 * state.v[p.name] + (1.0 - b2) * (g * g)
        state.m[p.name], state.v[p.name] = m, v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# history


@dataclass
class HistoryRecord:
    iteration: int
    train_loss: float
    test_loss: float
    lr: float
    train_loss_components: list
    test_loss_components: list
    wall_time: float = 0.0

    def to_json(self, with_time: bool = False) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec: HistoryRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise TrainingError(
                f"history iterations must increase: {rec.iteration} after {self.records[-1].iteration}"
            )
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, k) -> HistoryRecord:
        return self.records[k]

    @property
    def iterations(self) -> list[int]:
        return [r.iteration for r in self.records]

    def best(self) -> HistoryRecord:
        return min(self.records, key=lambda r: (r.test_loss, r.iteration))

    def to_jsonl(self, path: PathLike, with_time: bool = False):
        """One JSON object per eval point. Wall time is left out by default so
        repeated runs produce byte-identical files."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(with_time)) + "\n")

    def to_list(self, with_time: bool = False) -> list[dict]:
        return [r.to_json(with_time) for r in self.records]

    @classmethod
    def from_list(cls, rows: list[dict]) -> "TrainHistory":
        h = cls()
        for row in rows:
            h.append(HistoryRecord(**row))
        return h


# ---------------------------------------------------------------------------
# run state


def _derived_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(resample generator, batch generator) for a run seed."""
    s_resample, s_batch = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(s_resample), np.random.default_rng(s_batch)


@dataclass
class TrainingState:
    """Everything needed to continue a run bit-for-bit."""

    model: object
    cfg: TrainConfig
    adam: AdamState
    iteration: int
    batch_rng: np.random.Generator
    history: TrainHistory
    best_iteration: Optional[int] = None
    best_test_loss: float = math.inf
    best_parameters: Optional[dict] = None
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def best_model(self):
        """Copy of the model carrying the best-test-loss parameters."""
        m = copy.deepcopy(self.model)
        if self.best_parameters is not None:
            for p in m.parameters():
                p.value = self.best_parameters[p.name].copy()
        return m

    def to_dict(self) -> dict:
        best = None
        if self.best_parameters is not None:
            best = {k: v.ravel().tolist() for k, v in self.best_parameters.items()}
        return {
            "format_version": STATE_FORMAT_VERSION,
            "kind": "training_state",
            "train_config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "model": model_to_dict(self.model),
            "adam": self.adam.to_dict(),
            "batch_rng": self.batch_rng.bit_generator.state,
            "history": self.history.to_list(),
            "best": {"iteration": self.best_iteration, "test_loss": self.best_test_loss,
                     "parameters": best},
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingState":
        if d.get("kind") != "training_state" or d.get("format_version") != STATE_FORMAT_VERSION:
            raise LoadError("not a training-state checkpoint of a supported version")
        model = model_from_dict(d["model"])
        params = model.parameters()
        rng = np.random.default_rng()
        rng.bit_generator.state = d["batch_rng"]
        best = d["best"]
        best_params = None
        if best["parameters"] is not None:
            best_params = {p.name: np.array(best["parameters"][p.name]).reshape(p.shape) for p in params}
        return cls(
            model=model,
            cfg=TrainConfig.from_dict(d["train_config"]),
            adam=AdamState.from_dict(d["adam"], params),
            iteration=int(d["iteration"]),
            batch_rng=rng,
            history=TrainHistory.from_list(d["history"]),
            best_iteration=best["iteration"],
            best_test_loss=best["test_loss"],
            best_parameters=best_params,
            train_ids=d.get("train_ids", []),
            test_ids=d.get("test_ids", []),
        )

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "TrainingState":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise LoadError(f"{path}: cannot read training state ({exc})") from exc
        return cls.from_dict(doc)


# ---------------------------------------------------------------------------
# loop


def _with_sdf(model) -> bool:
    return model.config.trunk_features == 4


def prepare_arrays(model, cases: Sequence[CaseRecord], N: int, rng) -> ResampledBatch:
    if model.stats is None:
        raise UsageError("model stats must be fitted before training")
    return build_resampled(cases, N, rng, model.stats, with_sdf=_with_sdf(model))


def scaled_losses(model, data: ResampledBatch, chunk: int = 32) -> tuple[float, np.ndarray]:
    """Scaled MSE over all cases, nodes and components, plus per-component MSE."""
    if len(data) == 0:
        return math.nan, np.full(data.targets.shape[-1], math.nan)
    sq = np.zeros(data.targets.shape[-1])
    for s in range(0, len(data), chunk):
        out = model.forward_scaled(data.branch_inputs[s:s + chunk], data.trunk_inputs[s:s + chunk]).data
        d = out - data.targets[s:s + chunk]
        sq += (d * d).sum(axis=(0, 1))
    count = data.targets.shape[0] * data.targets.shape[1]
    comp = sq / count
    return float(sq.sum() / (count * len(sq))), comp


def loss_and_grad(model, batch: ResampledBatch) -> float:
    """Forward and backward on one batch; gradients land on ``param.grad``."""
    tape = ad.Tape()
    out = model.forward_scaled(batch.branch_inputs, batch.trunk_inputs, tape)
    loss = ad.mse(out, ad.Tensor(batch.targets))
    value = loss.item()
    if not math.isfinite(value):
        return value
    tape.backward(loss)
    return value


def _run(state: TrainingState, train_data: ResampledBatch, test_data: ResampledBatch,
         stop_at: Optional[int], progress: Optional[Callable[[str], None]]) -> TrainingState:
    cfg = state.cfg
    model = state.model
    params = model.parameters()
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    t0 = time.perf_counter()

    def evaluate(t: int):
        tr, tr_c = scaled_losses(model, train_data)
        te, te_c = scaled_losses(model, test_data)
        if not math.isfinite(tr):
            raise TrainingError(f"non-finite train loss at iteration {t}")
        rec = HistoryRecord(t, tr, te, lr_at(t, cfg), tr_c.tolist(), te_c.tolist(),
                            time.perf_counter() - t0)
        state.history.append(rec)
        score = te if math.isfinite(te) else tr
        if score < state.best_test_loss:
            state.best_test_loss = score
            state.best_iteration = t
            state.best_parameters = {p.name: p.value.copy() for p in params}
        if progress is not None:
            progress(f"iter {t:>7d}  train {tr:.4e}  test {te:.4e}  lr {rec.lr:.3e}")

    if state.iteration == 0 and len(state.history) == 0:
        evaluate(0)
    n_train = len(train_data)
    while state.iteration < end:
        t = state.iteration
        idx = state.batch_rng.integers(0, n_train, size=cfg.batch_size)
        batch = train_data.take(idx)
        value = loss_and_grad(model, batch)
        if not math.isfinite(value):
            raise TrainingError(
                f"non-finite loss at iteration {t} on cases {sorted(set(batch.ids))}"
            )
        adam_step(params, state.adam, lr_at(t, cfg))
        state.iteration = t + 1
        if state.iteration % cfg.eval_every == 0 or state.iteration == cfg.iterations:
            evaluate(state.iteration)
    return state


def _stderr_progress(msg: str):
    print(msg, file=sys.stderr, flush=True)


def train(model, train_cases: Sequence[CaseRecord], test_cases: Sequence[CaseRecord],
          cfg: TrainConfig, stop_at: Optional[int] = None,
          progress: Optional[Callable[[str], None]] = None) -> TrainingState:
    """Train ``model`` in place.

    ``stop_at`` halts after that many iterations (for interrupt/resume);
    the returned state can be saved and handed to :func:`resume`.
    """
    if len(train_cases) == 0:
        raise UsageError("training set is empty")
    rs_rng, batch_rng = _derived_rngs(cfg.seed)
    train_data = prepare_arrays(model, train_cases, cfg.resample_N, rs_rng)
    test_data = prepare_arrays(model, test_cases, cfg.resample_N, rs_rng)
    state = TrainingState(
        model=model, cfg=cfg, adam=AdamState.zeros(model.parameters()), iteration=0,
        batch_rng=batch_rng, history=TrainHistory(),
        train_ids=[c.id for c in train_cases], test_ids=[c.id for c in test_cases],
    )
    return _run(state, train_data, test_data, stop_at, progress)


def resume(checkpoint: Union[TrainingState, PathLike, dict], train_cases: Sequence[CaseRecord],
           test_cases: Sequence[CaseRecord], cfg: TrainConfig, stop_at: Optional[int] = None,
           progress: Optional[Callable[[str], None]] = None) -> TrainingState:
    """Continue a checkpointed run; identical to never having stopped.

    ``cfg.iterations`` may exceed the original target; every other field in
    ``RESUME_KEYS`` must match the checkpoint.
    """
    if isinstance(checkpoint, TrainingState):
        state = checkpoint
    elif isinstance(checkpoint, dict):
        state = TrainingState.from_dict(checkpoint)
    else:
        state = TrainingState.load(checkpoint)
    old = state.cfg
    diffs = [k for k in RESUME_KEYS if getattr(old, k) != getattr(cfg, k)]
    if diffs:
        detail = ", ".join(f"{k}: checkpoint {getattr(old, k)!r} vs {getattr(cfg, k)!r}" for k in diffs)
        raise ResumeError(f"config mismatch on resume ({detail})")
    if cfg.iterations < state.iteration:
        raise ResumeError(f"checkpoint is at iteration {state.iteration}, beyond target {cfg.iterations}")
    ids = ([c.id for c in train_cases], [c.id for c in test_cases])
    if state.train_ids and (list(state.train_ids), list(state.test_ids)) != ids:
        raise ResumeError("train/test cases differ from the checkpointed run")
    state.cfg = cfg
    rs_rng, _ = _derived_rngs(cfg.seed)
    train_data = prepare_arrays(state.model, train_cases, cfg.resample_N, rs_rng)
    test_data = prepare_arrays(state.model, test_cases, cfg.resample_N, rs_rng)
    return _run(state, train_data, test_data, stop_at, progress)
