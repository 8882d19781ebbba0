"""End-to-end registration and training.

Stages: dense features -> driving points -> cosine potentials -> mean-field
MRF -> Gaussian densification.  The same forward pass serves inference
(plain arrays) and training (parameters tracked on a tape).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .features import (
    FEATURE_KINDS,
    FeatureMap,
    MindConfig,
    init_learned_params,
    intensity_features,
    learned_features,
    mind_features,
    normalize_intensity,
)
from .interp import InterpConfig, densify
from .matching import DisplacementDistribution, SearchRegion, compute_potentials
from .metrics import (
    LnccConfig,
    MetricsReport,
    bending_energy,
    bending_site_count,
    evaluate,
    interior_count,
    lncc,
    w2_pointsets,
)
from .mrf import MrfConfig, build_graph, mean_estimate, mean_field
from .points import DrivingPointSet, foerstner_points, grid_points
from .predictor import PredictorConfig, init_predictor_params, predict_points, sample_driving_features
from .volume import Volume, identity_grid, warp_labels

log = logging.getLogger(__name__)

SELECTORS = ("grid", "foerstner", "predicted")


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


class DivergenceError(RuntimeError):
    pass


@dataclass
class RegistrationConfig:
    features: str = "mind"
    selector: str = "grid"
    search: SearchRegion = field(default_factory=SearchRegion)
    mrf: MrfConfig = field(default_factory=MrfConfig)
    interp: InterpConfig = field(default_factory=InterpConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    lncc: LnccConfig = field(default_factory=LnccConfig)
    mind: MindConfig = field(default_factory=MindConfig)
    foerstner_sigma: float = 1.5
    reg_weight: float = 0.1
    lr: float = 1e-4
    epochs: int = 5
    seed: int = 0

    _SUB = {
        "search": SearchRegion, "mrf": MrfConfig, "interp": InterpConfig,
        "predictor": PredictorConfig, "lncc": LnccConfig, "mind": MindConfig,
    }

    def __post_init__(self):
        if self.features not in FEATURE_KINDS:
            raise ValueError(f"features must be one of {FEATURE_KINDS}, got {self.features!r}")
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}, got {self.selector!r}")

    @property
    def learnable(self) -> bool:
        return self.features == "learned" or self.selector == "predicted"

    def to_dict(self) -> dict:
        return {f.name: (asdict(v) if f.name in self._SUB else v)
                for f in fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, d: dict) -> RegistrationConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in cls._SUB:
                if k == "predictor" and "widths" in v:
                    v = {**v, "widths": tuple(v["widths"])}
                kw[k] = cls._SUB[k](**v)
            else:
                kw[k] = v
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def load(cls, path) -> RegistrationConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RegistrationResult:
    field: Volume
    points: DrivingPointSet
    marginals: np.ndarray
    sparse: np.ndarray
    potentials: np.ndarray
    feat_fixed: FeatureMap
    feat_moving: FeatureMap


def feature_in_channels(kind: str) -> int:
    return {"intensity": 1, "mind": 6, "learned": 8}[kind]


def init_params(cfg: RegistrationConfig, seed: int | None = None) -> ad.ParameterSet:
    """Seeded parameters for every learnable component ``cfg`` selects."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = ad.ParameterSet()
    if cfg.features == "learned":
        params.update(init_learned_params(rng))
    if cfg.selector == "predicted":
        d = feature_in_channels(cfg.features)
        params.update(init_predictor_params(2 + 2 * d, cfg.predictor, rng))
    return params


def _stage(name):
    def wrap(fn):
        def inner(*a, **k):
            try:
                return fn(*a, **k)
            except (StageError, DivergenceError):
                raise
            except Exception as exc:
                raise StageError(f"{name}: {exc}") from exc
        return inner
    return wrap


@_stage("features")
def _features(img: Volume, cfg: RegistrationConfig, params) -> FeatureMap:
    if cfg.features == "intensity":
        return intensity_features(img)
    if cfg.features == "mind":
        return mind_features(img, cfg.mind)
    return learned_features(img, params)


@_stage("points")
def _points(fixed, moving, ff, fm, cfg: RegistrationConfig, params) -> DrivingPointSet:
    p = cfg.predictor
    if cfg.selector == "grid":
        return grid_points(fixed.dims, p.spacing, p.margin)
    if cfg.selector == "foerstner":
        G = grid_points(fixed.dims, p.spacing, p.margin).rest_grid.count
        return foerstner_points(fixed, cfg.foerstner_sigma, float(p.spacing), G, p.spacing, p.margin)
    return predict_points(fixed, moving, ff, fm, params, p)


@_stage("matching")
def _matching(ff, fm, pts, cfg) -> DisplacementDistribution:
    desc = sample_driving_features(ff, pts)
    return compute_potentials(desc, fm, pts, cfg.search)


@_stage("regularization")
def _regularize(dist, pts, cfg):
    graph = build_graph(pts, cfg.mrf)
    q = mean_field(dist, graph, cfg.mrf)
    return q, mean_estimate(q, cfg.search)


@_stage("interpolation")
def _interpolate(pts, sparse, dims, cfg):
    return densify(pts, sparse, dims, cfg.interp)


def forward(fixed: Volume, moving: Volume, cfg: RegistrationConfig, params=None):
    """Run the five stages; returns intermediate values (tensors when tracked)."""
    if fixed.dims != moving.dims:
        raise StageError(f"input: fixed dims {fixed.dims} differ from moving dims {moving.dims}")
    if cfg.learnable and not params:
        raise StageError("input: learnable components selected but no parameters given")
    ff = _features(fixed, cfg, params)
    fm = _features(moving, cfg, params)
    pts = _points(fixed, moving, ff, fm, cfg, params)
    dist = _matching(ff, fm, pts, cfg)
    q, sparse = _regularize(dist, pts, cfg)
    dense = _interpolate(pts, sparse, fixed.dims, cfg)
    return {"feat_fixed": ff, "feat_moving": fm, "points": pts, "dist": dist,
            "marginals": q, "sparse": sparse, "dense": dense}


def register(fixed: Volume, moving: Volume, cfg: RegistrationConfig, params=None) -> RegistrationResult:
    out = forward(fixed, moving, cfg, params)
    pts = out["points"]
    detached = DrivingPointSet(pts.coords, pts.provenance, pts.image_dims, pts.rest_grid)
    return RegistrationResult(
        field=Volume(out["dense"].data),
        points=detached,
        marginals=out["marginals"].data,
        sparse=out["sparse"].data,
        potentials=out["dist"].potentials.data,
        feat_fixed=FeatureMap(ad.Tensor(out["feat_fixed"].values.data), out["feat_fixed"].kind),
        feat_moving=FeatureMap(ad.Tensor(out["feat_moving"].values.data), out["feat_moving"].kind),
    )


def registration_loss(fixed: Volume, moving: Volume, dense, cfg: RegistrationConfig) -> ad.Tensor:
    """-mean LNCC(fixed, moving o phi) + reg_weight * mean bending energy."""
    dims = fixed.dims
    coords = ad.add(identity_grid(dims), ad.transpose(ad.reshape(dense, (3, -1)), (1, 0)))
    mov = normalize_intensity(moving.data[0])[None]
    warped = ad.reshape(ad.transpose(ad.grid_sample(mov, coords), (1, 0)), (1,) + tuple(dims))
    fix = normalize_intensity(fixed.data[0])[None]
    sim = ad.scalar_mul(lncc(fix, warped, cfg.lncc), -1.0 / interior_count(dims, cfg.lncc.radius))
    reg = ad.scalar_mul(bending_energy(dense), cfg.reg_weight / max(bending_site_count(dims), 1))
    return ad.add(sim, reg)


def loss_and_grads(pair, cfg: RegistrationConfig, params: ad.ParameterSet):
    tape = ad.Tape()
    tracked = params.track(tape)
    out = forward(pair.fixed, pair.moving, cfg, tracked)
    loss = registration_loss(pair.fixed, pair.moving, out["dense"], cfg)
    if not loss.tracked:
        return float(loss.data), {}
    grads = tape.backward(loss)
    return float(loss.data), {name: grads[t] for name, t in tracked.items()}


def train(dataset, cfg: RegistrationConfig, epochs: int | None = None, lr: float | None = None,
          params: ad.ParameterSet | None = None, seed: int | None = None):
    """Adam on the unsupervised registration loss, one pair per step.

    Returns ``(params, loss_trace)``; pair order is shuffled per epoch from ``seed``.
    """
    if not cfg.learnable:
        raise ValueError("train needs a learned feature extractor or the predicted selector")
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    seed = cfg.seed if seed is None else seed
    params = init_params(cfg, seed) if params is None else params.copy()
    rng = np.random.default_rng(seed)
    state = None
    trace: list[float] = []
    for epoch in range(epochs):
        for i in rng.permutation(len(dataset)):
            loss, grads = loss_and_grads(dataset[i], cfg, params)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at step {len(trace)}")
            trace.append(loss)
            params, state = ad.adam_step(params, grads, state, lr=lr)
        log.info("epoch %d: mean loss %.5f", epoch, np.mean(trace[-len(dataset):]))
    return params, trace


def evaluate_pair(pair, cfg: RegistrationConfig, params=None) -> tuple[MetricsReport, RegistrationResult]:
    res = register(pair.fixed, pair.moving, cfg, params)
    warped = warp_labels(pair.moving_labels, res.field)
    return evaluate(pair.fixed_labels, warped, res.field), res


def unregistered_report(pair) -> MetricsReport:
    zero = Volume(np.zeros((3,) + pair.fixed.dims))
    return evaluate(pair.fixed_labels, pair.moving_labels, zero)


def aggregate(reports: list[MetricsReport]) -> dict:
    """Mean and population std of every scalar metric across reports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for key in ("dice_mean", "hessian_mean", "std_log_jacobian", "nonpositive_jacobian_fraction"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    labels = sorted({k for r in reports for k in r.dice_per_label})
    out["dice_per_label"] = {
        str(lab): {
            "mean": float(np.mean([r.dice_per_label[lab] for r in reports if lab in r.dice_per_label])),
            "std": float(np.std([r.dice_per_label[lab] for r in reports if lab in r.dice_per_label])),
        }
        for lab in labels
    }
    out["pairs"] = len(reports)
    return out


def w2_specificity_study(params, dataset, cfg: RegistrationConfig) -> dict:
    """Mean W2 between predicted point sets sharing a fixed image vs over all pairs."""
    if len(dataset) < 3:
        raise ValueError(f"w2 study needs at least 3 image pairs, got {len(dataset)}")
    cfg = replace(cfg, selector="predicted")
    sets = [register(p.fixed, p.moving, cfg, params).points for p in dataset]
    ids = [p.fixed_id for p in dataset]
    shared, every = [], []
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            d = w2_pointsets(sets[i], sets[j])
            every.append(d)
            if ids[i] == ids[j]:
                shared.append(d)
    shared_mean = float(np.mean(shared)) if shared else None
    all_mean = float(np.mean(every))
    degenerate = not shared or shared_mean == 0.0
    return {
        "shared_fixed_mean": shared_mean,
        "all_pairs_mean": all_mean,
        "ratio": None if degenerate else all_mean / shared_mean,
        "degenerate": degenerate,
        "shared_fixed_count": len(shared),
        "all_pairs_count": len(every),
    }


def dice_pair(pair, field: Volume) -> float:
    warped = warp_labels(pair.moving_labels, field)
    return evaluate(pair.fixed_labels, warped, field).dice_mean

