"""
Regression dynamic programme for optimal stopping on the skeleton.

Training runs backwards from the last stage: at stage j the continuation
value is regressed on the stage-j features of every training path, a path
stops at j when its reward is at least the fitted continuation value, and
its cash flow is replaced by the stage-j reward. Stage 0 has no history, so
its continuation value is the sample mean of the cash flows.

The deterministic-clock tree (every dT frozen at eps**2) is solved exactly
by exact_tree_dp and serves as the reference for the regression scheme.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import jsonschema
import numpy as np
import scipy.linalg

from .errors import DomainError, ModelFileError, NumericError, TreeSizeError
from .skeleton import Skeleton, SkeletonBatch, as_batch
from .state_models import CoefficientSpec, Functional, RewardPath, StatePath, euler_path, reward_path

logger = logging.getLogger(__name__)

BASIS_FAMILIES = ("polynomial", "piecewise_linear", "constant", "lookup")
RIDGE_FACTOR = 1e-10
MAX_TREE_STAGES = 14
MAX_TREE_LEAVES = 2 ** 20
# column of the raw feature vector holding the state value
STATE_COLUMN = 1

MODEL_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["stages"],
    "properties": {
        "k": {"type": ["integer", "null"]},
        "eps": {"type": ["number", "null"]},
        "feature_names": {"type": "array", "items": {"type": "string"}},
        "stages": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["stage", "family", "degree", "window", "clip_bound", "coefficients"],
                "properties": {
                    "stage": {"type": "integer", "minimum": 0},
                    "family": {"enum": list(BASIS_FAMILIES)},
                    "degree": {"type": "integer", "minimum": 0},
                    "window": {"type": "integer", "minimum": 0},
                    "clip_bound": {"type": ["number", "null"]},
                    "coefficients": {"type": "array", "items": {"type": "number"}},
                    "shift": {"type": "array", "items": {"type": "number"}},
                    "scale": {"type": "array", "items": {"type": "number"}},
                    "keep": {"type": "array", "items": {"type": "boolean"}},
                    "powered": {"type": "array", "items": {"type": "boolean"}},
                    "knots": {"type": "array", "items": {"type": "number"}},
                    "keys": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                    "ridge": {"type": "boolean"},
                    "itm_only": {"type": "boolean"},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class BasisSpec:
    """
    Regression basis for the continuation value.

    family:
        polynomial        powers 1..degree of each standardised raw feature;
                          two-valued features such as the signs enter linearly only
        piecewise_linear  linear terms plus `degree` hinge functions in the state
        constant          intercept only
        lookup            indicator of each distinct feature vector (exact on trees)
    window: number of most recent (dT, eta) pairs in the raw feature vector.
    clip_bound: predictions are clipped to [-clip_bound, clip_bound].

    The class of stopping regions {Z >= U} has VC dimension at most
    n_parameters + 1 for the linear families; nothing enforces a cap.
    """

    family: str = "polynomial"
    degree: int = 2
    window: int = 1
    clip_bound: float = math.inf

    def __post_init__(self):
        if self.family not in BASIS_FAMILIES:
            raise DomainError(f"unknown basis family '{self.family}'; expected one of {BASIS_FAMILIES}")
        if self.degree < 0 or self.window < 0:
            raise DomainError("basis degree and window must be non-negative")
        if not self.clip_bound > 0:
            raise DomainError(f"clip_bound must be positive, got {self.clip_bound}")

    def n_parameters(self, n_raw: int) -> Optional[int]:
        """Upper bound on the coefficients fitted per stage; None for lookup."""
        if self.family == "constant":
            return 1
        if self.family == "polynomial":
            return 1 + n_raw * self.degree
        if self.family == "piecewise_linear":
            return 1 + n_raw + self.degree
        return None


def feature_names(dim: int, window: int) -> List[str]:
    names = ["t", "x", "running_max"]
    for lag in range(window):
        names.append(f"dT[-{lag}]")
        names.extend(f"eta{c}[-{lag}]" for c in range(dim))
    return names


def path_features(s: Union[Skeleton, SkeletonBatch], X: StatePath, window: int) -> np.ndarray:
    """
    Raw feature vectors (N, steps+1, 3 + window*(1+dim)) per path and stage:
    grid time, state, running max of the state, and the last `window`
    (dT, eta) pairs, zero-padded before the first event.
    """
    batch = as_batch(s)
    steps = X.values.shape[1] - 1
    n_paths = X.n_paths
    cols = [X.times, X.values, np.maximum.accumulate(X.values, axis=1)]

    d_t = np.zeros((n_paths, steps + 1))
    d_t[:, 1:] = batch.deltas[:, :steps]
    eta = np.zeros((n_paths, steps + 1, batch.dim))
    eta[:, 1:, :] = batch.signs[:, :steps, :]
    for lag in range(window):
        lagged_t = np.zeros_like(d_t)
        lagged_t[:, lag:] = d_t[:, :steps + 1 - lag]
        cols.append(lagged_t)
        lagged_eta = np.zeros_like(eta)
        lagged_eta[:, lag:, :] = eta[:, :steps + 1 - lag, :]
        cols.extend(lagged_eta[:, :, c] for c in range(batch.dim))
    return np.stack(cols, axis=2)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Rewards (N, e+1) and raw features (N, e+1, r) of a block of paths."""

    rewards: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.rewards.shape != self.features.shape[:2]:
            raise DomainError(
                f"rewards {self.rewards.shape} and features {self.features.shape} disagree"
            )

    @property
    def n_paths(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def stages(self) -> int:
        return int(self.rewards.shape[1] - 1)


def make_bundle(s: Union[Skeleton, SkeletonBatch], X: StatePath,
                rewards: Union[RewardPath, np.ndarray], window: int) -> PathBundle:
    z = rewards.values if isinstance(rewards, RewardPath) else np.asarray(rewards)
    return PathBundle(rewards=z, features=path_features(s, X, window))


@dataclass(frozen=True, eq=False)
class ContinuationModel:
    """Fitted continuation value of one stage."""

    stage: int
    basis: BasisSpec
    coefficients: np.ndarray
    shift: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.ones(0))
    keep: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    powered: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    knots: np.ndarray = field(default_factory=lambda: np.zeros(0))
    keys: Optional[np.ndarray] = None
    ridge: bool = False
    itm_only: bool = False

    def design(self, features: np.ndarray) -> np.ndarray:
        return _design(self.basis, features, self.shift, self.scale, self.keep, self.knots, self.powered)

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        if self.basis.family == "lookup":
            table = {tuple(k): c for k, c in zip(self.keys.tolist(), self.coefficients.tolist())}
            try:
                raw = np.array([table[tuple(row)] for row in features.tolist()])
            except KeyError as e:
                raise DomainError(f"lookup model at stage {self.stage} met an unseen history") from e
        else:
            raw = self.design(features) @ self.coefficients
        bound = self.basis.clip_bound
        return np.clip(raw, -bound, bound)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "stage": self.stage,
            "family": self.basis.family,
            "degree": self.basis.degree,
            "window": self.basis.window,
            "clip_bound": None if math.isinf(self.basis.clip_bound) else self.basis.clip_bound,
            "coefficients": self.coefficients.tolist(),
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "keep": self.keep.tolist(),
            "powered": self.powered.tolist(),
            "knots": self.knots.tolist(),
            "ridge": bool(self.ridge),
            "itm_only": bool(self.itm_only),
        }
        if self.keys is not None:
            out["keys"] = self.keys.tolist()
        return out

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ContinuationModel":
        clip = d.get("clip_bound")
        basis = BasisSpec(d["family"], d["degree"], d["window"], math.inf if clip is None else clip)
        keys = d.get("keys")
        return cls(
            stage=d["stage"], basis=basis, coefficients=np.asarray(d["coefficients"], dtype=float),
            shift=np.asarray(d.get("shift", []), dtype=float),
            scale=np.asarray(d.get("scale", []), dtype=float),
            keep=np.asarray(d.get("keep", []), dtype=bool),
            powered=np.asarray(d.get("powered", d.get("keep", [])), dtype=bool),
            knots=np.asarray(d.get("knots", []), dtype=float),
            keys=None if keys is None else np.asarray(keys, dtype=float),
            ridge=bool(d.get("ridge", False)), itm_only=bool(d.get("itm_only", False)),
        )


@dataclass(frozen=True, eq=False)
class DPResult:
    """Outcome of a backward pass: value, per-stage models and the stopping decisions."""

    value: float
    models: List[ContinuationModel]
    stop_flags: np.ndarray   # (N, e+1)
    tau_index: np.ndarray    # (N,)
    residuals: Optional[List[np.ndarray]] = None
    node_values: Optional[List[np.ndarray]] = None
    ridge_stages: Tuple[int, ...] = ()


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------

def _design(basis: BasisSpec, features: np.ndarray, shift: np.ndarray, scale: np.ndarray,
            keep: np.ndarray, knots: np.ndarray, powered: np.ndarray) -> np.ndarray:
    n = features.shape[0]
    cols = [np.ones((n, 1))]
    if basis.family == "constant":
        return cols[0]
    standard = (features - shift) / scale
    z = standard[:, keep]
    if basis.family == "polynomial":
        if basis.degree:
            cols.append(z)
        # a power of a two-valued column is affine in the column itself
        z_powered = standard[:, powered]
        cols.extend(z_powered ** p for p in range(2, basis.degree + 1))
    else:
        cols.append(z)
        if knots.size:
            x = (features[:, STATE_COLUMN] - shift[STATE_COLUMN]) / scale[STATE_COLUMN]
            cols.append(np.maximum(x[:, None] - knots[None, :], 0.0))
    return np.concatenate(cols, axis=1)


def _solve_normal_equations(design: np.ndarray, targets: np.ndarray, stage: int) -> Tuple[np.ndarray, bool]:
    gram = design.T @ design
    rhs = design.T @ targets
    ridge = bool(np.linalg.matrix_rank(design) < design.shape[1])
    if not ridge:
        try:
            coef = scipy.linalg.solve(gram, rhs, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            ridge = True
    if ridge:
        lam = RIDGE_FACTOR * max(np.trace(gram), 1.0)
        logger.warning(f"Stage {stage}: rank-deficient design {design.shape}, ridge {lam:.3g} applied")
        coef = scipy.linalg.solve(gram + lam * np.eye(gram.shape[0]), rhs, assume_a="sym")
    if not np.all(np.isfinite(coef)):
        raise NumericError(f"non-finite regression coefficients at stage {stage}", stage=stage)
    return coef, ridge


def fit_continuation(stage: int, features: np.ndarray, targets: np.ndarray, basis: BasisSpec,
                     itm_only: bool = False) -> ContinuationModel:
    """Least-squares continuation value of one stage."""
    targets = np.asarray(targets, dtype=float)
    features = np.asarray(features, dtype=float).reshape(targets.shape[0], -1)
    if targets.size == 0:
        raise DomainError(f"no training samples at stage {stage}")

    if basis.family == "constant":
        coef = np.array([targets.mean()])
        return ContinuationModel(stage=stage, basis=basis, coefficients=coef, itm_only=itm_only)

    if basis.family == "lookup":
        keys, inverse = np.unique(features, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        means = np.bincount(inverse, weights=targets) / np.bincount(inverse)
        return ContinuationModel(stage=stage, basis=basis, coefficients=means, keys=keys,
                                 itm_only=itm_only)

    shift = features.mean(axis=0)
    spread = features.std(axis=0)
    keep = spread > 1e-12 * (1.0 + np.abs(shift))
    scale = np.where(keep, spread, 1.0)
    lo, hi = features.min(axis=0), features.max(axis=0)
    two_valued = np.all((features == lo) | (features == hi), axis=0)
    powered = keep & ~two_valued
    knots = np.zeros(0)
    if basis.family == "piecewise_linear" and basis.degree and keep[STATE_COLUMN]:
        x = (features[:, STATE_COLUMN] - shift[STATE_COLUMN]) / scale[STATE_COLUMN]
        knots = np.unique(np.quantile(x, np.arange(1, basis.degree + 1) / (basis.degree + 1)))
    design = _design(basis, features, shift, scale, keep, knots, powered)
    coef, ridge = _solve_normal_equations(design, targets, stage)
    return ContinuationModel(stage=stage, basis=basis, coefficients=coef, shift=shift, scale=scale,
                             keep=keep, powered=powered, knots=knots, ridge=ridge,
                             itm_only=itm_only)


def backward_induction(bundle: PathBundle, basis: BasisSpec, stages: Optional[int] = None,
                       itm_only: bool = False) -> DPResult:
    """Fit continuation models from the last stage back to stage 0."""
    e = bundle.stages if stages is None else stages
    if e > bundle.stages:
        raise DomainError(f"stages={e} exceeds the {bundle.stages} simulated stages")
    if bundle.n_paths < 2:
        raise DomainError(f"need at least 2 training paths, got {bundle.n_paths}")
    z = bundle.rewards
    n = bundle.n_paths

    cash = z[:, e].copy()
    tau = np.full(n, e, dtype=np.int64)
    flags = np.zeros((n, e + 1), dtype=bool)
    flags[:, e] = True
    models: List[Optional[ContinuationModel]] = [None] * e
    ridge_stages = []

    for j in range(e - 1, 0, -1):
        feats = bundle.features[:, j, :]
        mask = z[:, j] > 0 if itm_only else np.ones(n, dtype=bool)
        if mask.sum() < 2:
            mask = np.ones(n, dtype=bool)
        model = fit_continuation(j, feats[mask], cash[mask], basis, itm_only=itm_only)
        stop = z[:, j] >= model.predict(feats)
        if itm_only:
            stop &= z[:, j] > 0
        flags[:, j] = stop
        cash[stop] = z[stop, j]
        tau[stop] = j
        models[j] = model
        if model.ridge:
            ridge_stages.append(j)

    stage0 = BasisSpec("constant", 0, 0, basis.clip_bound)
    model0 = fit_continuation(0, np.zeros((n, 0)), cash, stage0)
    z0 = float(z[0, 0])
    u0 = float(model0.predict(np.zeros((1, 0)))[0])
    if e > 0:
        models[0] = model0
        if z0 >= u0:
            flags[:, 0] = True
            tau[:] = 0
    else:
        flags[:, 0] = True
    value = max(z0, u0)
    logger.debug(f"Backward induction over {e} stages on {n} paths: value={value:.8g}")
    return DPResult(value=value, models=[m for m in models if m is not None], stop_flags=flags,
                    tau_index=tau, ridge_stages=tuple(sorted(ridge_stages)))


def stopping_times(bundle: PathBundle, models: Sequence[ContinuationModel]) -> np.ndarray:
    """First stage j with Z_j >= U_j on every path; the last stage if none."""
    e = len(models)
    if e > bundle.stages:
        raise DomainError(f"{e} models but only {bundle.stages} stages in the bundle")
    z = bundle.rewards
    tau = np.full(bundle.n_paths, e, dtype=np.int64)
    open_paths = np.ones(bundle.n_paths, dtype=bool)
    for j, model in enumerate(models):
        if not open_paths.any():
            break
        idx = np.flatnonzero(open_paths)
        stop = z[idx, j] >= model.predict(bundle.features[idx, j, :])
        if model.itm_only and j > 0:
            stop &= z[idx, j] > 0
        tau[idx[stop]] = j
        open_paths[idx[stop]] = False
    return tau


def stopping_time(features: np.ndarray, rewards: np.ndarray, models: Sequence[ContinuationModel]) -> int:
    """Stopping stage of a single path given its (e+1, r) features and (e+1,) rewards."""
    bundle = PathBundle(rewards=np.asarray(rewards, dtype=float)[None, :],
                        features=np.asarray(features, dtype=float)[None, :, :])
    return int(stopping_times(bundle, models)[0])


def policy_value(rewards: np.ndarray, tau: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    picked = rewards[np.arange(rewards.shape[0]), tau]
    if weights is None:
        return float(picked.mean())
    return float(np.dot(weights, picked) / weights.sum())


def lower_bound_estimate(fresh: PathBundle, models: Sequence[ContinuationModel]) -> Tuple[float, float]:
    """Mean and standard error of Z at the fitted stopping time on independent paths."""
    if fresh.n_paths < 2:
        raise DomainError(f"need at least 2 fresh paths, got {fresh.n_paths}")
    tau = stopping_times(fresh, models)
    picked = fresh.rewards[np.arange(fresh.n_paths), tau]
    se = float(picked.std(ddof=1) / math.sqrt(fresh.n_paths))
    return float(picked.mean()), se


# ---------------------------------------------------------------------------
# Deterministic-clock tree
# ---------------------------------------------------------------------------

def tree_skeletons(eps: float, stages: int, dim: int = 1) -> SkeletonBatch:
    """All (2*dim)**stages sign histories with every dT equal to eps**2, lexicographic order."""
    branches = 2 * dim
    leaves = branches ** stages
    idx = np.arange(leaves)
    digits = np.stack([(idx // branches ** (stages - 1 - k)) % branches for k in range(stages)], axis=1) \
        if stages else np.zeros((1, 0), dtype=np.int64)
    coords = digits // 2
    sign_values = np.where(digits % 2 == 0, 1, -1).astype(np.int8)
    signs = np.zeros((leaves, stages, dim), dtype=np.int8)
    rows, cols = np.meshgrid(np.arange(leaves), np.arange(stages), indexing="ij")
    signs[rows, cols, coords] = sign_values
    deltas = np.full((leaves, stages), eps * eps)
    walks = np.zeros((leaves, dim, stages + 1))
    walks[:, :, 1:] = eps * np.cumsum(signs, axis=1).transpose(0, 2, 1)
    return SkeletonBatch(eps=eps, dim=dim, deltas=deltas, coords=coords.astype(np.int64),
                         signs=signs, times=np.cumsum(deltas, axis=1), walks=walks,
                         idents=[f"tree/{i}" for i in range(leaves)])


def exact_tree_dp(eps: float, stages: int, spec: CoefficientSpec, F: Functional, horizon: float,
                  x0: float, dim: int = 1) -> DPResult:
    """
    Exact Snell envelope on the deterministic-clock tree.

    S_e = Z_e and S_n = max(Z_n, mean of S_{n+1} over the 2*dim children).
    residuals[n] holds max((E[S_{n+1}] - S_n) / eps**2, Z_n - S_n) per node,
    which vanishes for the exact envelope.
    """
    if stages < 0:
        raise DomainError(f"stages must be non-negative, got {stages}")
    branches = 2 * dim
    if stages > MAX_TREE_STAGES or branches ** stages > MAX_TREE_LEAVES:
        raise TreeSizeError(
            f"tree with {stages} stages and {branches} branches exceeds the supported size "
            f"({MAX_TREE_STAGES} stages, {MAX_TREE_LEAVES} leaves)"
        )
    batch = tree_skeletons(eps, stages, dim)
    states = euler_path(spec, batch, x0, stages)
    z = reward_path(F, states, batch, horizon, stages).values

    s_next = z[:, stages]
    node_values: List[np.ndarray] = [np.empty(0)] * (stages + 1)
    node_values[stages] = s_next
    residuals: List[np.ndarray] = [np.empty(0)] * stages
    conts: List[np.ndarray] = [np.empty(0)] * stages
    stop_nodes: List[np.ndarray] = [np.empty(0, dtype=bool)] * stages
    for n in range(stages - 1, -1, -1):
        block = branches ** (stages - n)
        z_n = z[::block, n]
        cont = s_next.reshape(-1, branches).mean(axis=1)
        s_n = np.maximum(z_n, cont)
        residuals[n] = np.maximum((cont - s_n) / (eps * eps), z_n - s_n)
        stop_nodes[n] = z_n >= cont
        conts[n] = cont
        node_values[n] = s_n
        s_next = s_n

    leaves = z.shape[0]
    flags = np.zeros((leaves, stages + 1), dtype=bool)
    flags[:, stages] = True
    for n in range(stages):
        flags[:, n] = np.repeat(stop_nodes[n], branches ** (stages - n))
    tau = np.argmax(flags, axis=1).astype(np.int64)

    features = path_features(batch, states, window=stages)
    lookup = BasisSpec("lookup", 0, stages)
    models = []
    for n in range(stages):
        if n == 0:
            models.append(ContinuationModel(stage=0, basis=BasisSpec("constant", 0, 0),
                                            coefficients=conts[0].copy()))
        else:
            block = branches ** (stages - n)
            models.append(ContinuationModel(stage=n, basis=lookup, coefficients=conts[n].copy(),
                                            keys=features[::block, n, :].copy()))
    value = float(node_values[0][0])
    logger.debug(f"Exact tree DP: {stages} stages, {leaves} leaves, value={value:.12g}")
    return DPResult(value=value, models=models, stop_flags=flags, tau_index=tau,
                    residuals=residuals, node_values=node_values)


def tree_bundle(eps: float, stages: int, spec: CoefficientSpec, F: Functional, horizon: float,
                x0: float, dim: int = 1, window: Optional[int] = None) -> PathBundle:
    """Every leaf of the deterministic-clock tree as an equally weighted path."""
    batch = tree_skeletons(eps, stages, dim)
    states = euler_path(spec, batch, x0, stages)
    rewards = reward_path(F, states, batch, horizon, stages)
    return make_bundle(batch, states, rewards, stages if window is None else window)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _validate_models(doc: Dict[str, Any]):
    try:
        jsonschema.validate(doc, MODEL_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ModelFileError(f"continuation models failed validation: {e.message}") from e


def models_to_dict(models: Sequence[ContinuationModel], k: Optional[int] = None,
                   eps: Optional[float] = None, dim: int = 1) -> Dict[str, Any]:
    window = max((m.basis.window for m in models), default=0)
    doc = {
        "k": k,
        "eps": eps,
        "feature_names": feature_names(dim, window),
        "stages": [m.to_dict() for m in models],
    }
    _validate_models(doc)
    return doc


def export_models(models: Sequence[ContinuationModel], path: Union[str, Path], k: Optional[int] = None,
                  eps: Optional[float] = None, dim: int = 1) -> Path:
    path = Path(path)
    path.write_text(json.dumps(models_to_dict(models, k=k, eps=eps, dim=dim), indent=2))
    return path


def load_models(path: Union[str, Path]) -> List[ContinuationModel]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelFileError(f"{path} is not valid JSON: {e}") from e
    _validate_models(doc)
    return [ContinuationModel.from_dict(d) for d in doc["stages"]]
