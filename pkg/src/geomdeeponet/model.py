"""Geom-DeepONet and the vanilla DeepONet baseline.

Geom-DeepONet::

    B_a = branch_stage1(params)                     (b, h)
    T_a = trunk_dense(x, y, z, sdf)                 (b, i, h)
    F   = B_a[:, None, :] * T_a                     intermediate fusion
    T_b = trunk_siren(F)        -> (b, i, h, c)
    B_b = branch_stage2(B_a)    -> (b, h, c)
    out = sum_h B_b * T_b       -> (b, i, c)

Vanilla DeepONet: ``out[b, i] = sum_h branch(params)[b, h] * trunk(x, y, z)[b, i, h]``.

Both trunks act on each node independently, so any node count is accepted
at prediction time.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .dataset import CaseRecord, NormalizationStats
from .errors import ConfigError, DimensionError, LoadError, UsageError

FORMAT_VERSION = 1
PathLike = Union[str, Path]


def _check_widths(name: str, widths, end: int):
    if not widths or any(int(w) < 1 for w in widths):
        raise ConfigError(f"{name} must be a non-empty list of positive widths, got {widths}")
    if widths[-1] != end:
        raise ConfigError(f"{name} must end at width {end}, got {widths[-1]}")


def _dense_count(fan_in: int, widths) -> int:
    total = 0
    for w in widths:
        total += fan_in * w + w
        fan_in = w
    return total


@dataclass
class GeomConfig:
    n_params: int
    c: int = 1
    h: int = 32
    branch_stage1_widths: list = field(default_factory=list)
    branch_stage2_widths: list = field(default_factory=list)
    trunk_dense_widths: list = field(default_factory=list)
    trunk_siren_widths: list = field(default_factory=list)
    omega0: float = 30.0
    dense_activation: str = "tanh"

    kind = "geom"
    trunk_features = 4

    def __post_init__(self):
        if self.n_params < 1 or self.h < 1 or self.c < 1:
            raise ConfigError(f"n_params, h, c must be >= 1 (got {self.n_params}, {self.h}, {self.c})")
        if not self.branch_stage1_widths:
            filled = GeomConfig.default(self.n_params, self.c, self.h)
            self.branch_stage1_widths = filled.branch_stage1_widths
            self.branch_stage2_widths = filled.branch_stage2_widths
            self.trunk_dense_widths = filled.trunk_dense_widths
            self.trunk_siren_widths = filled.trunk_siren_widths
        self.branch_stage1_widths = [int(w) for w in self.branch_stage1_widths]
        self.branch_stage2_widths = [int(w) for w in self.branch_stage2_widths]
        self.trunk_dense_widths = [int(w) for w in self.trunk_dense_widths]
        self.trunk_siren_widths = [int(w) for w in self.trunk_siren_widths]
        hc = self.h * self.c
        _check_widths("branch_stage1_widths", self.branch_stage1_widths, self.h)
        _check_widths("branch_stage2_widths", self.branch_stage2_widths, hc)
        _check_widths("trunk_dense_widths", self.trunk_dense_widths, self.h)
        _check_widths("trunk_siren_widths", self.trunk_siren_widths, hc)
        if not self.omega0 > 0:
            raise ConfigError(f"omega0 must be positive, got {self.omega0}")
        if self.dense_activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.dense_activation!r}")

    @classmethod
    def default(cls, n_params: int, c: int = 1, h: int = 32, scale: int = 1) -> "GeomConfig":
        """Baseline widths; 25568 parameters for ``n_params=4, c=1``.

        ``scale=2`` doubles every layer (including ``h``) for the larger model.
        """
        h = h * scale
        w = 32 * scale
        s = 112 * scale
        return cls(
            n_params=n_params, c=c, h=h,
            branch_stage1_widths=[w, w, h],
            branch_stage2_widths=[w, h * c],
            trunk_dense_widths=[w, h],
            trunk_siren_widths=[s, s, h * c],
        )

    @classmethod
    def desk(cls, n_params: int, c: int = 1, h: int = 32, width: int = 32) -> "GeomConfig":
        """Narrow trunk for CPU-scale experiments (one hidden SIREN layer)."""
        return cls(
            n_params=n_params, c=c, h=h,
            branch_stage1_widths=[width, h],
            branch_stage2_widths=[width, h * c],
            trunk_dense_widths=[width, h],
            trunk_siren_widths=[width, h * c],
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass
class VanillaConfig:
    n_params: int
    h: int = 32
    branch_widths: list = field(default_factory=lambda: [32, 32, 32])
    trunk_widths: list = field(default_factory=lambda: [130, 130, 32])
    dense_activation: str = "tanh"

    kind = "vanilla"
    trunk_features = 3
    c = 1

    def __post_init__(self):
        if self.n_params < 1 or self.h < 1:
            raise ConfigError(f"n_params and h must be >= 1 (got {self.n_params}, {self.h})")
        self.branch_widths = [int(w) for w in self.branch_widths]
        self.trunk_widths = [int(w) for w in self.trunk_widths]
        _check_widths("branch_widths", self.branch_widths, self.h)
        _check_widths("trunk_widths", self.trunk_widths, self.h)
        if self.dense_activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.dense_activation!r}")

    @classmethod
    def desk(cls, n_params: int, h: int = 32, width: int = 32) -> "VanillaConfig":
        return cls(n_params=n_params, h=h, branch_widths=[width, h], trunk_widths=[width, width, h])

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "geom")
    try:
        if kind == "geom":
            return GeomConfig(**d)
        if kind == "vanilla":
            return VanillaConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc
    raise ConfigError(f"unknown model kind {kind!r}")


def param_count(config) -> int:
    """Closed-form count of weights and biases."""
    if isinstance(config, GeomConfig):
        return (
            _dense_count(config.n_params, config.branch_stage1_widths)
            + _dense_count(config.h, config.branch_stage2_widths)
            + _dense_count(config.trunk_features, config.trunk_dense_widths)
            + _dense_count(config.h, config.trunk_siren_widths)
        )
    return _dense_count(config.n_params, config.branch_widths) + _dense_count(
        config.trunk_features, config.trunk_widths
    )


# ---------------------------------------------------------------------------
# layer stacks


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _make_dense(prefix: str, fan_in: int, widths, rng) -> list[tuple[Parameter, Parameter]]:
    layers = []
    for k, w in enumerate(widths):
        layers.append((
            Parameter(f"{prefix}.{k}.weight", _glorot(rng, fan_in, w)),
            Parameter(f"{prefix}.{k}.bias", np.zeros(w)),
        ))
        fan_in = w
    return layers


def _make_siren(prefix: str, fan_in: int, widths, omega0: float, rng):
    layers = []
    for k, w in enumerate(widths):
        lim = 1.0 / fan_in if k == 0 else math.sqrt(6.0 / fan_in) / omega0
        layers.append((
            Parameter(f"{prefix}.{k}.weight", rng.uniform(-lim, lim, size=(fan_in, w))),
            Parameter(f"{prefix}.{k}.bias", np.zeros(w)),
        ))
        fan_in = w
    return layers


def _run_dense(x, layers, act, last_active: bool):
    for k, (w, b) in enumerate(layers):
        x = ad.affine(x, w, b)
        if last_active or k < len(layers) - 1:
            x = act(x)
    return x


def _run_siren(x, layers, omega0):
    """Sine on every layer but the last, which stays linear."""
    for k, (w, b) in enumerate(layers):
        x = ad.affine(x, w, b)
        if k < len(layers) - 1:
            x = ad.sine_activation(x, omega0)
    return x


class _Network:
    config: object
    stats: Optional[NormalizationStats]
    stages: dict

    def parameters(self) -> list[Parameter]:
        return [p for stage in self.stages.values() for layer in stage for p in layer]

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def _bind(self, tape: Optional[Tape]) -> dict:
        bound = {}
        for name, stage in self.stages.items():
            if tape is None:
                bound[name] = [(Tensor(w.value), Tensor(b.value)) for w, b in stage]
            else:
                bound[name] = [(tape.watch(w), tape.watch(b)) for w, b in stage]
        return bound

    def _check_inputs(self, branch_in, trunk_in):
        branch_in = np.asarray(branch_in, dtype=np.float64)
        trunk_in = np.asarray(trunk_in, dtype=np.float64)
        f = self.config.trunk_features
        if branch_in.ndim != 2 or branch_in.shape[1] != self.config.n_params:
            raise DimensionError(
                f"branch input must be (b, {self.config.n_params}), got {branch_in.shape}"
            )
        if trunk_in.ndim != 3 or trunk_in.shape[2] != f or trunk_in.shape[0] != branch_in.shape[0]:
            raise DimensionError(
                f"trunk input must be ({branch_in.shape[0]}, i, {f}), got {trunk_in.shape}"
            )
        return branch_in, trunk_in

    # -- user-facing prediction ------------------------------------------
    def _trunk_features(self, points, sdf):
        if self.config.trunk_features == 4:
            return self.stats.scale_trunk(points, sdf)
        return self.stats.scale_coords(points)

    def predict_points(self, params, points, sdf=None) -> np.ndarray:
        """Descaled ``(n, c)`` prediction for one design at arbitrary points."""
        if self.stats is None:
            raise UsageError("model has no fitted normalization stats")
        if params.family is not self.stats.family:
            raise UsageError(
                f"model trained on {self.stats.family.value}, case is {params.family.value}"
            )
        if self.config.trunk_features == 4 and sdf is None:
            raise UsageError("Geom-DeepONet prediction needs per-point sdf")
        branch = self.stats.scale_branch(params.as_array())[None, :]
        trunk = self._trunk_features(points, sdf)[None]
        out = self.forward_scaled(branch, trunk).data[0]
        return self.stats.descale_fields(out)

    def predict_case(self, case: CaseRecord) -> np.ndarray:
        return self.predict_points(case.params, case.points, case.sdf)

    def forward_scaled(self, branch_in, trunk_in, tape: Optional[Tape] = None) -> Tensor:
        """Scaled-space output with shape ``(b, i, c)``."""
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {p.name: p.value for p in self.parameters()}


class GeomDeepONet(_Network):
    def __init__(self, config: GeomConfig, rng: np.random.Generator, stats: Optional[NormalizationStats] = None):
        self.config = config
        self.stats = stats
        cfg = config
        self.stages = {
            "branch1": _make_dense("branch1", cfg.n_params, cfg.branch_stage1_widths, rng),
            "branch2": _make_dense("branch2", cfg.h, cfg.branch_stage2_widths, rng),
            "trunk_dense": _make_dense("trunk_dense", cfg.trunk_features, cfg.trunk_dense_widths, rng),
            "trunk_siren": _make_siren("trunk_siren", cfg.h, cfg.trunk_siren_widths, cfg.omega0, rng),
        }
        assert self.n_parameters == param_count(cfg)

    def encode(self, branch_in, trunk_in, tape=None, siren_identity: bool = False):
        """Return the intermediate tensors ``(B_a, T_a, F, B_b, T_b)``."""
        branch_in, trunk_in = self._check_inputs(branch_in, trunk_in)
        cfg = self.config
        P = self._bind(tape)
        act = ad.ACTIVATIONS[cfg.dense_activation]
        b, i = trunk_in.shape[:2]
        b_alpha = _run_dense(Tensor(branch_in), P["branch1"], act, last_active=True)
        t_alpha = _run_dense(Tensor(trunk_in), P["trunk_dense"], act, last_active=True)
        fused = ad.fuse(b_alpha, t_alpha)
        if siren_identity:
            t_beta = fused
        else:
            t_beta = _run_siren(fused, P["trunk_siren"], cfg.omega0)
        b_beta = _run_dense(b_alpha, P["branch2"], act, last_active=False)
        return b_alpha, t_alpha, fused, b_beta, t_beta

    def forward_scaled(self, branch_in, trunk_in, tape=None, siren_identity: bool = False) -> Tensor:
        cfg = self.config
        if siren_identity and cfg.c != 1:
            raise UsageError("the identity-SIREN diagnostic is defined for c == 1 only")
        b_alpha, t_alpha, fused, b_beta, t_beta = self.encode(branch_in, trunk_in, tape, siren_identity)
        b, i = t_alpha.shape[:2]
        t_beta = ad.reshape(t_beta, (b, i, cfg.h, cfg.c))
        b_beta = ad.reshape(b_beta, (b, cfg.h, cfg.c))
        return ad.contract_vector(b_beta, t_beta)

    def forward(self, branch_in, trunk_in) -> np.ndarray:
        """Descaled prediction for already-scaled inputs."""
        if self.stats is None:
            raise UsageError("model has no fitted normalization stats")
        return self.stats.descale_fields(self.forward_scaled(branch_in, trunk_in).data)


class VanillaDeepONet(_Network):
    def __init__(self, config: VanillaConfig, rng: np.random.Generator, stats: Optional[NormalizationStats] = None):
        self.config = config
        self.stats = stats
        self.stages = {
            "branch": _make_dense("branch", config.n_params, config.branch_widths, rng),
            "trunk": _make_dense("trunk", config.trunk_features, config.trunk_widths, rng),
        }
        assert self.n_parameters == param_count(config)

    def forward_scaled(self, branch_in, trunk_in, tape=None) -> Tensor:
        branch_in, trunk_in = self._check_inputs(branch_in, trunk_in)
        P = self._bind(tape)
        act = ad.ACTIVATIONS[self.config.dense_activation]
        b = _run_dense(Tensor(branch_in), P["branch"], act, last_active=False)
        t = _run_dense(Tensor(trunk_in), P["trunk"], act, last_active=True)
        out = ad.dot_hidden(b, t)
        return ad.reshape(out, out.shape + (1,))

    def forward(self, branch_in, trunk_in) -> np.ndarray:
        if self.stats is None:
            raise UsageError("model has no fitted normalization stats")
        return self.stats.descale_fields(self.forward_scaled(branch_in, trunk_in).data)[..., 0]


def init_geom(config: GeomConfig, rng: np.random.Generator, stats=None) -> GeomDeepONet:
    return GeomDeepONet(config, rng, stats)


def init_vanilla(config: VanillaConfig, rng: np.random.Generator, stats=None) -> VanillaDeepONet:
    return VanillaDeepONet(config, rng, stats)


def build_model(config, rng, stats=None):
    if isinstance(config, GeomConfig):
        return GeomDeepONet(config, rng, stats)
    return VanillaDeepONet(config, rng, stats)


def forward_geom(model: GeomDeepONet, branch_in, trunk_in) -> np.ndarray:
    return model.forward(branch_in, trunk_in)


def forward_vanilla(model: VanillaDeepONet, branch_in, trunk_in) -> np.ndarray:
    return model.forward(branch_in, trunk_in)


def predict_case(model, case: CaseRecord) -> np.ndarray:
    return model.predict_case(case)


# ---------------------------------------------------------------------------
# checkpoints


def model_to_dict(model) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "stats": None if model.stats is None else model.stats.to_dict(),
        "parameter_count": param_count(model.config),
        "parameters": {
            p.name: {"shape": list(p.shape), "values": p.value.ravel().tolist()}
            for p in model.parameters()
        },
    }


def model_from_dict(doc: dict):
    if doc.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    try:
        config = config_from_dict(doc["config"])
    except ConfigError as exc:
        raise LoadError(str(exc)) from exc
    expected = param_count(config)
    if doc.get("parameter_count") != expected:
        raise LoadError(
            f"checkpoint header lists {doc.get('parameter_count')} parameters, config implies {expected}"
        )
    stats = None if doc.get("stats") is None else NormalizationStats.from_dict(doc["stats"])
    model = build_model(config, np.random.default_rng(0), stats)
    stored = doc["parameters"]
    names = {p.name for p in model.parameters()}
    if set(stored) != names:
        raise LoadError(f"parameter names differ from config: {sorted(set(stored) ^ names)[:5]}")
    total = 0
    for p in model.parameters():
        entry = stored[p.name]
        values = np.array(entry["values"], dtype=np.float64)
        if tuple(entry["shape"]) != p.shape or values.size != p.size:
            raise LoadError(f"parameter {p.name}: stored shape {entry['shape']} != {list(p.shape)}")
        p.value = values.reshape(p.shape)
        p.grad = np.zeros_like(p.value)
        total += values.size
    if total != expected:
        raise LoadError(f"checkpoint holds {total} values, expected {expected}")
    return model


def save_model(model, path: PathLike, extra: Optional[dict] = None) -> Path:
    doc = model_to_dict(model)
    if extra:
        doc.update(extra)
    path = Path(path)
    path.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: PathLike) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"{path}: cannot read checkpoint ({exc})") from exc


def load_model(path: PathLike):
    return model_from_dict(load_checkpoint(path))
