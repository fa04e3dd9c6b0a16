"""Case storage, manufactured labels, resampling, scaling and data splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import FittingError, GeometryError, ParseError, UsageError
from .geometry import DesignParams, ShapeFamily, make_solid, param_names, sample_design, sample_interior

PathLike = Union[str, Path]

# manufactured-field constants (normative)
SURFACE_OFFSET = 0.2
RIPPLE = 0.1
DISPLACEMENT_SCALE = 0.01


@dataclass
class CaseRecord:
    id: str
    params: DesignParams
    points: np.ndarray
    sdf: np.ndarray
    fields: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.sdf = np.ascontiguousarray(self.sdf, dtype=np.float64)
        self.fields = np.ascontiguousarray(self.fields, dtype=np.float64)
        if self.fields.ndim == 1:
            self.fields = self.fields[:, None]
        n = len(self.points)
        if n < 1:
            raise UsageError(f"case {self.id!r} has no nodes")
        if self.points.shape != (n, 3):
            raise UsageError(f"case {self.id!r}: points must be (n, 3), got {self.points.shape}")
        if self.sdf.shape != (n,) or self.fields.ndim != 2 or len(self.fields) != n:
            raise UsageError(
                f"case {self.id!r}: node counts disagree (points {n}, sdf {self.sdf.shape}, "
                f"fields {self.fields.shape})"
            )

    @property
    def node_count(self) -> int:
        return len(self.points)

    @property
    def c(self) -> int:
        return self.fields.shape[1]

    @property
    def family(self) -> ShapeFamily:
        return self.params.family

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "family": self.params.family.value,
            "params": self.params.as_dict(),
            "points": self.points.tolist(),
            "sdf": self.sdf.tolist(),
            "fields": self.fields.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CaseRecord":
        params = DesignParams.from_mapping(obj["family"], obj["params"])
        fields_ = np.array(obj["fields"], dtype=np.float64)
        if fields_.ndim != 2:
            raise UsageError(f"case {obj.get('id')!r}: fields must be a list of rows")
        return cls(str(obj["id"]), params, np.array(obj["points"], dtype=np.float64),
                   np.array(obj["sdf"], dtype=np.float64), fields_)


@dataclass
class Dataset:
    cases: list[CaseRecord]
    family: ShapeFamily
    c: int
    seed: Optional[int] = None

    def __post_init__(self):
        self.family = ShapeFamily(self.family)
        for case in self.cases:
            if case.family is not self.family:
                raise UsageError(f"case {case.id!r} is {case.family.value}, dataset is {self.family.value}")
            if case.c != self.c:
                raise UsageError(f"case {case.id!r} has {case.c} components, dataset has {self.c}")

    def __len__(self) -> int:
        return len(self.cases)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cases]

    def by_id(self, ids: Iterable[str]) -> list[CaseRecord]:
        lookup = {c.id: c for c in self.cases}
        missing = [i for i in ids if i not in lookup]
        if missing:
            raise UsageError(f"unknown case ids: {missing[:10]}")
        return [lookup[i] for i in ids]


# ---------------------------------------------------------------------------
# labels


def manufactured_fields(points, sdf, d: DesignParams, c: int = 1) -> np.ndarray:
    """Analytic stand-in for finite-element labels, shape ``(n, c)``.

    The first component mimics a stress concentrated at the surfaces; for
    ``c == 4`` three displacement-like components follow.
    """
    if c not in (1, 4):
        raise UsageError(f"manufactured fields support c in (1, 4), got {c}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    s = np.atleast_1d(np.asarray(sdf, dtype=np.float64))
    if np.any(s > 0):
        raise UsageError("manufactured fields are defined for interior points only (sdf <= 0)")
    solid = make_solid(d)
    lo, hi = solid.bounds
    xh, yh, zh = (2.0 * (pts - lo) / (hi - lo) - 1.0).T
    sh = s / (2.0 * solid.half_extents.min())
    load = d.normalized_load
    two_pi = 2.0 * math.pi
    ripple = 1.0 + RIPPLE * np.sin(two_pi * xh) * np.cos(two_pi * yh) * np.sin(two_pi * zh)
    out = [load * (1.0 + 1.0 / (SURFACE_OFFSET + np.abs(sh))) * ripple]
    if c == 4:
        for coord in (xh, yh, zh):
            out.append(DISPLACEMENT_SCALE * load * coord * (1.0 + sh))
    return np.stack(out, axis=-1)


def von_mises(sigma) -> np.ndarray:
    """Von Mises stress of Voigt vectors ``[sxx, syy, szz, sxy, syz, szx]``."""
    s = np.asarray(sigma, dtype=np.float64)
    sxx, syy, szz, sxy, syz, szx = np.moveaxis(s, -1, 0)
    # 3/2 S:S written via the deviator so hydrostatic states cancel exactly
    tr3 = (sxx + syy + szz) / 3.0
    dxx, dyy, dzz = sxx - tr3, syy - tr3, szz - tr3
    ss = dxx * dxx + dyy * dyy + dzz * dzz + 2.0 * (sxy * sxy + syz * syz + szx * szx)
    return np.sqrt(1.5 * ss)


# ---------------------------------------------------------------------------
# generation


def generate_case(
    family, index: int, seed: int, n_range: tuple[int, int], c: int = 1, max_retries: int = 10
) -> CaseRecord:
    """Generate one case from its derived seed ``seed ^ index``."""
    rng = np.random.default_rng(seed ^ index)
    n_lo, n_hi = n_range
    if not 1 <= n_lo <= n_hi:
        raise UsageError(f"invalid node-count range {n_range}")
    last_err = None
    for _ in range(max_retries):
        d = sample_design(family, rng)
        n = int(rng.integers(n_lo, n_hi + 1))
        try:
            pts, s = sample_interior(d, n, rng)
        except GeometryError as exc:
            last_err = exc
            continue
        return CaseRecord(f"case_{index:05d}", d, pts, s, manufactured_fields(pts, s, d, c))
    raise GeometryError(f"case {index}: {max_retries} degenerate draws, last: {last_err}")


def generate_dataset(family, count: int, seed: int, n_range: tuple[int, int], c: int = 1,
                     workers: int = 1) -> Dataset:
    """``count`` cases from per-case derived seeds.

    With ``workers > 1`` cases are generated in a process pool; the output is
    identical to the serial result because no case depends on another.
    """
    family = ShapeFamily(family)
    if workers < 1:
        raise UsageError(f"workers must be >= 1, got {workers}")
    if workers == 1 or count < 2:
        cases = [generate_case(family, i, seed, n_range, c) for i in range(count)]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cases = list(pool.map(generate_case, [family] * count, range(count), [seed] * count,
                                  [n_range] * count, [c] * count))
    return Dataset(cases, family, c, seed=seed)


# ---------------------------------------------------------------------------
# resampling


def resample(case: CaseRecord, N: int, rng: np.random.Generator):
    """Fixed-size node subset (``N <= n``) or multiset (``N > n``), rows aligned.

    Above ``n`` every node is kept once and the remainder is drawn with
    replacement; the result is shuffled so repeats are not grouped.
    """
    if N < 1:
        raise UsageError(f"resample size must be >= 1, got {N}")
    n = case.node_count
    if N <= n:
        idx = rng.choice(n, size=N, replace=False)
    else:
        idx = np.concatenate([np.arange(n), rng.integers(0, n, size=N - n)])
        rng.shuffle(idx)
    return case.points[idx], case.sdf[idx], case.fields[idx]


def resample_indices_check(idx: np.ndarray, n: int, N: int) -> bool:
    """True when ``idx`` obeys the resampling rule for ``n`` nodes and size ``N``."""
    if len(idx) != N or idx.min() < 0 or idx.max() >= n:
        return False
    if N <= n:
        return len(np.unique(idx)) == N
    return len(np.unique(idx)) == n


# ---------------------------------------------------------------------------
# scaling


@dataclass
class NormalizationStats:
    """Affine scalings fitted on the training cases only."""

    branch_mean: np.ndarray
    branch_std: np.ndarray
    coord_lo: np.ndarray
    coord_hi: np.ndarray
    sdf_scale: float
    out_mean: np.ndarray
    out_std: np.ndarray
    family: ShapeFamily = ShapeFamily.BEAM

    def __post_init__(self):
        for name in ("branch_mean", "branch_std", "coord_lo", "coord_hi", "out_mean", "out_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.sdf_scale = float(self.sdf_scale)
        self.family = ShapeFamily(self.family)

    @property
    def c(self) -> int:
        return len(self.out_mean)

    @property
    def n_params(self) -> int:
        return len(self.branch_mean)

    def scale_branch(self, params) -> np.ndarray:
        return (np.asarray(params, dtype=np.float64) - self.branch_mean) / self.branch_std

    def descale_branch(self, z) -> np.ndarray:
        return np.asarray(z) * self.branch_std + self.branch_mean

    def scale_coords(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return 2.0 * (p - self.coord_lo) / (self.coord_hi - self.coord_lo) - 1.0

    def descale_coords(self, z) -> np.ndarray:
        return (np.asarray(z) + 1.0) * 0.5 * (self.coord_hi - self.coord_lo) + self.coord_lo

    def scale_sdf(self, sdf) -> np.ndarray:
        return np.asarray(sdf, dtype=np.float64) / self.sdf_scale

    def scale_trunk(self, points, sdf) -> np.ndarray:
        """Trunk features ordered (x, y, z, sdf)."""
        return np.concatenate([self.scale_coords(points), self.scale_sdf(sdf)[..., None]], axis=-1)

    def scale_fields(self, fields) -> np.ndarray:
        return (np.asarray(fields, dtype=np.float64) - self.out_mean) / self.out_std

    def descale_fields(self, z) -> np.ndarray:
        return np.asarray(z) * self.out_std + self.out_mean

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "branch_mean": self.branch_mean.tolist(),
            "branch_std": self.branch_std.tolist(),
            "coord_lo": self.coord_lo.tolist(),
            "coord_hi": self.coord_hi.tolist(),
            "sdf_scale": self.sdf_scale,
            "out_mean": self.out_mean.tolist(),
            "out_std": self.out_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            branch_mean=d["branch_mean"], branch_std=d["branch_std"],
            coord_lo=d["coord_lo"], coord_hi=d["coord_hi"], sdf_scale=d["sdf_scale"],
            out_mean=d["out_mean"], out_std=d["out_std"], family=d["family"],
        )


def fit_stats(train_cases: Sequence[CaseRecord]) -> NormalizationStats:
    """Fit input/output scalings on training cases.

    Branch inputs and outputs are standardised (population std); coordinates
    map to [-1, 1] over the training bounding box; SDF is divided by the
    largest interior depth seen in training.
    """
    if len(train_cases) < 2:
        raise FittingError(f"need at least 2 training cases, got {len(train_cases)}")
    family = train_cases[0].family
    names = param_names(family)
    P = np.array([c.params.as_array() for c in train_cases])
    b_mean, b_std = P.mean(axis=0), P.std(axis=0)
    for k in np.nonzero(b_std <= 0)[0]:
        raise FittingError(f"branch parameter {names[k]!r} has zero variance over the training set")
    pts = np.concatenate([c.points for c in train_cases])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    for k in np.nonzero(hi <= lo)[0]:
        raise FittingError(f"coordinate {'xyz'[k]} has zero extent over the training set")
    depth = float(max(np.abs(c.sdf).max() for c in train_cases))
    if depth <= 0:
        raise FittingError("sdf is identically zero over the training set")
    F = np.concatenate([c.fields for c in train_cases])
    o_mean, o_std = F.mean(axis=0), F.std(axis=0)
    for k in np.nonzero(o_std <= 0)[0]:
        raise FittingError(f"output component {k} has zero variance over the training set")
    return NormalizationStats(b_mean, b_std, lo, hi, depth, o_mean, o_std, family)


@dataclass
class ResampledBatch:
    """Scaled, fixed-size arrays for a list of cases (one row per case)."""

    ids: list[str]
    branch_inputs: np.ndarray  # (k, n_params)
    trunk_inputs: np.ndarray  # (k, N, 4) or (k, N, 3)
    targets: np.ndarray  # (k, N, c)

    def take(self, idx) -> "ResampledBatch":
        idx = np.asarray(idx)
        return ResampledBatch([self.ids[i] for i in idx], self.branch_inputs[idx],
                              self.trunk_inputs[idx], self.targets[idx])

    def __len__(self) -> int:
        return len(self.ids)


def build_resampled(
    cases: Sequence[CaseRecord],
    N: int,
    rng: np.random.Generator,
    stats: NormalizationStats,
    with_sdf: bool = True,
) -> ResampledBatch:
    branch, trunk, targets = [], [], []
    for case in cases:
        pts, s, f = resample(case, N, rng)
        branch.append(stats.scale_branch(case.params.as_array()))
        trunk.append(stats.scale_trunk(pts, s) if with_sdf else stats.scale_coords(pts))
        targets.append(stats.scale_fields(f))
    return ResampledBatch([c.id for c in cases], np.array(branch), np.array(trunk), np.array(targets))


# ---------------------------------------------------------------------------
# similarity and splits


def similarity(i: DesignParams, j: DesignParams) -> float:
    """L2 distance between normalised geometric parameters (load excluded)."""
    if i.family is not j.family:
        raise UsageError(f"cannot compare {i.family.value} with {j.family.value}")
    diff = i.normalized_geometric - j.normalized_geometric
    return float(np.sqrt(diff @ diff))


def random_split(ds: Dataset, train_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    if not 0.0 < train_fraction < 1.0:
        raise UsageError(f"train fraction must lie in (0, 1), got {train_fraction}")
    ids = ds.ids
    perm = np.random.default_rng(seed).permutation(len(ids))
    k = int(math.floor(train_fraction * len(ids) + 1e-9))
    return [ids[i] for i in perm[:k]], [ids[i] for i in perm[k:]]


def similarity_to_reference(ds: Dataset, reference: int = 0) -> np.ndarray:
    ref = ds.cases[reference].params
    return np.array([similarity(c.params, ref) for c in ds.cases])


def similarity_split(ds: Dataset, train_fraction: float) -> tuple[list[str], list[str]]:
    """Most similar designs (to case 0) train, the most dissimilar test."""
    if len(ds) < 2:
        raise UsageError("similarity split needs at least 2 cases")
    if not 0.0 < train_fraction < 1.0:
        raise UsageError(f"train fraction must lie in (0, 1), got {train_fraction}")
    s = similarity_to_reference(ds, 0)
    order = np.lexsort((np.arange(len(s)), s))
    k = int(math.floor(train_fraction * len(s) + 1e-9))
    ids = ds.ids
    return [ids[i] for i in order[:k]], [ids[i] for i in order[k:]]


# ---------------------------------------------------------------------------
# IO


def manifest_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name.split(".")[0] + ".manifest.json")


def save_dataset(ds: Dataset, path: PathLike, config: Optional[dict] = None) -> Path:
    """Write cases as JSON Lines plus a sibling ``*.manifest.json``.

    ``config`` (the generating run's settings) is embedded in the manifest.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for case in ds.cases:
            fh.write(json.dumps(case.to_json(), separators=(",", ":")))
            fh.write("\n")
    manifest = {"family": ds.family.value, "c": ds.c, "count": len(ds), "seed": ds.seed}
    if config is not None:
        manifest["config"] = config
    manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    cases = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                cases.append(CaseRecord.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text(encoding="utf-8")) if mpath.exists() else {}
    if not cases and not manifest:
        raise ParseError(f"{path}: empty dataset without manifest")
    family = manifest.get("family", cases[0].family.value if cases else None)
    c = manifest.get("c", cases[0].c if cases else None)
    if "count" in manifest and manifest["count"] != len(cases):
        raise ParseError(f"{path}: manifest lists {manifest['count']} cases, file has {len(cases)}")
    try:
        return Dataset(cases, family, c, seed=manifest.get("seed"))
    except UsageError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_split(path: PathLike, train: list[str], test: list[str], mode: str, **meta):
    doc = {"mode": mode, **meta, "train": list(train), "test": list(test)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_split(path: PathLike) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        doc["train"], doc["test"], doc["mode"]
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: not a split file ({exc})") from exc
    return doc
