"""Training loops, finetuning, metrics, and the experiment matrix."""

from __future__ import annotations

import copy
import json
import logging
import time
import zlib
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import baselines, nn
from .autodiff import Tensor
from .baselines import MtlModel, StlModel
from .data import MultiUnitDataset, Scaler, UnitData, subset
from .model import ContextPosterior, ModelDims, SsmtlModel
from .objective import (ElboBreakdown, Normalization, ObjectiveConfig,
                        loss_for_training, sgvb_dataset_estimate)

log = logging.getLogger(__name__)

MODEL_KINDS = ("stl", "mtl", "ssmtl")


class DivergenceError(RuntimeError):
    """Training produced non-finite losses for too many consecutive steps."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    max_steps: int = 3000
    eval_every: int = 10
    patience: int = 50
    validation_fraction: float = 0.2
    seed: int = 0
    repetitions: int = 1
    hidden: tuple[int, ...] = (64, 64)
    context_dim: int = 4
    latent_dim: int = 5
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


class FinetuneMode(str, Enum):
    SUPERVISED = "supervised"
    UNSUPERVISED = "unsupervised"
    SEMI_SUPERVISED = "semi_supervised"


class ContextInit(str, Enum):
    ZERO = "zero"                    # prior mean (synthetic-data policy)
    MEAN_OF_UNITS = "mean_of_units"  # average of trained context means


@dataclass
class FinetuneConfig:
    mode: FinetuneMode = FinetuneMode.SEMI_SUPERVISED
    epochs: int = 100
    learning_rate: float = 1e-4
    context_init: ContextInit = ContextInit.ZERO
    fixed_variance: float = 0.1
    seed: int = 0
    # finetuning optimizes the plain per-unit sum, mirroring the estimator's
    # unscaled structure; the alpha term is kept active for labeled data
    objective: ObjectiveConfig = field(default_factory=lambda: ObjectiveConfig(
        alpha=1.0, mc_samples=5, normalization=Normalization.RAW))


# -- metrics ---------------------------------------------------------------

def mape(predictions, truths) -> float:
    """Mean absolute percentage error, in percent."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if (t == 0).any():
        raise ValueError("mape undefined for zero truth values")
    return float(100.0 * np.mean(np.abs(p - t) / np.abs(t)))


def percentiles(values: Sequence[float]) -> tuple[float, float, float]:
    """(P10, P50, P90) with linear interpolation on the sorted values."""
    arr = np.asarray(list(values), dtype=np.float64)
    p10, p50, p90 = np.percentile(arr, [10.0, 50.0, 90.0], method="linear")
    return float(p10), float(p50), float(p90)


@dataclass
class ExperimentReport:
    model: str
    ratio: Optional[int]
    per_unit_mape: dict[str, float]
    mean: float
    p10: float
    p50: float
    p90: float
    config_fingerprint: str
    wall_time_s: float = 0.0

    @classmethod
    def from_mapes(cls, model: str, ratio: Optional[int],
                   per_unit: dict[str, float], fingerprint: str,
                   wall_time_s: float = 0.0) -> "ExperimentReport":
        values = list(per_unit.values())
        p10, p50, p90 = percentiles(values)
        return cls(model=model, ratio=ratio, per_unit_mape=dict(per_unit),
                   mean=float(np.mean(values)), p10=p10, p50=p50, p90=p90,
                   config_fingerprint=fingerprint, wall_time_s=wall_time_s)

    def row(self) -> dict:
        return {"model": self.model, "ratio": self.ratio, "mean": self.mean,
                "p10": self.p10, "p50": self.p50, "p90": self.p90}


def seed_for(master: int, *tags) -> np.random.SeedSequence:
    """Stable seed derivation: master entropy plus hashed string/int tags."""
    words = [int(master) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, int):
            words.append(tag & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(tag).encode()))
    return np.random.SeedSequence(words)


def config_fingerprint(obj) -> str:
    def default(o):
        if isinstance(o, Enum):
            return o.value
        if isinstance(o, tuple):
            return list(o)
        return str(o)
    blob = json.dumps(asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj,
                      sort_keys=True, default=default)
    return f"{zlib.crc32(blob.encode()):08x}"


# -- trained-model wrapper ---------------------------------------------------

@dataclass
class TrainedModel:
    kind: str
    payload: object   # SsmtlModel | MtlModel | dict[str, StlModel]
    scaler: Scaler
    train_log: list = field(default_factory=list)

    def predict(self, x_raw, unit_id: str) -> np.ndarray:
        """Predictive mean in original units."""
        x = self.scaler.transform_x(np.atleast_2d(np.asarray(x_raw, dtype=np.float64)))
        if self.kind == "ssmtl":
            mean, _ = self.payload.predict_y(x, unit_id)
        elif self.kind == "mtl":
            mean, _ = self.payload.predict_y(x, unit_id)
        elif self.kind == "stl":
            mean = self.payload[unit_id].predict(x)
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")
        return self.scaler.inverse_y(mean)

    def save(self, path) -> None:
        if self.kind == "stl":
            arrays = baselines.stl_to_arrays(self.payload)
        else:
            arrays = self.payload.to_arrays()
        for key, value in self.scaler.to_dict().items():
            arrays[f"scaler.{key}"] = np.asarray(value, dtype=np.float64)
        nn.save_arrays(path, arrays)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        arrays = nn.load_arrays(path)
        kind = str(arrays["kind"])
        scaler = Scaler(arrays["scaler.x_mean"], arrays["scaler.x_std"],
                        arrays["scaler.y_mean"], arrays["scaler.y_std"])
        if kind == "ssmtl":
            payload = SsmtlModel.from_arrays(arrays)
        elif kind == "mtl":
            payload = MtlModel.from_arrays(arrays)
        elif kind == "stl":
            payload = baselines.stl_from_arrays(arrays)
        else:
            raise ValueError(f"unknown checkpoint kind {kind!r}")
        return cls(kind=kind, payload=payload, scaler=scaler)


# -- validation split ----------------------------------------------------------

def split_validation(dataset: MultiUnitDataset, fraction: float,
                     rng: np.random.Generator) -> tuple[MultiUnitDataset, list]:
    """Hold out a seeded random fraction of each unit's labeled pairs.

    Returns the reduced training dataset and a list of
    (unit_id, x_val, y_val) triples in original row order.
    """
    train_units, held = [], []
    for u in dataset.units:
        n_val = int(np.floor(fraction * u.n_labeled))
        if n_val == 0:
            train_units.append(u)
            continue
        perm = rng.permutation(u.n_labeled)
        val_idx = np.sort(perm[:n_val])
        keep_idx = np.sort(perm[n_val:])
        held.append((u.unit_id, u.x_labeled[val_idx].copy(),
                     u.y_labeled[val_idx].copy()))
        train_units.append(UnitData(
            unit_id=u.unit_id,
            x_labeled=u.x_labeled[keep_idx].copy(),
            y_labeled=u.y_labeled[keep_idx].copy(),
            x_unlabeled=u.x_unlabeled.copy(),
            x_test=u.x_test.copy(),
            y_test=u.y_test.copy(),
            labeled_ids=[u.labeled_ids[i] for i in keep_idx],
            unlabeled_ids=list(u.unlabeled_ids),
            test_ids=list(u.test_ids),
        ))
    return MultiUnitDataset(units=train_units, meta=dict(dataset.meta)), held


# -- multi-unit training -------------------------------------------------------

def train_multiunit(kind: str, dataset: MultiUnitDataset,
                    config: TrainConfig) -> TrainedModel:
    """Train an SSMTL or MTL model with Adam and early stopping.

    The validation score is the mean squared prediction error on held-out
    labeled pairs; the best-scoring parameter snapshot is restored at the
    end.  Raises DivergenceError after 10 consecutive non-finite steps.
    """
    if kind not in ("ssmtl", "mtl"):
        raise ValueError(f"train_multiunit expects 'ssmtl' or 'mtl', got {kind!r}")
    if not dataset.units:
        raise ValueError("empty dataset")
    dataset.assert_no_leakage()

    scaler = dataset.scaler()
    sdata = dataset.standardized(scaler)
    rng = np.random.default_rng(seed_for(config.seed, kind, "train"))
    train_data, validation = split_validation(sdata, config.validation_fraction, rng)

    dx = dataset.units[0].x_labeled.shape[1] if dataset.units[0].n_labeled \
        else dataset.units[0].x_unlabeled.shape[1]
    dy = dataset.units[0].y_labeled.shape[1] if dataset.units[0].n_labeled else 1

    if kind == "ssmtl":
        dims = ModelDims(context=config.context_dim, latent=config.latent_dim,
                         x=dx, y=dy)
        model = SsmtlModel.build(dims, hidden=tuple(config.hidden),
                                 seed=int(rng.integers(2 ** 31)))
        for u in dataset.units:
            model.add_unit(u.unit_id)

        def step_loss(step_rng):
            est = sgvb_dataset_estimate(model, train_data, config.objective, step_rng)
            return loss_for_training(est), est.floats()

        def predict_std(x, unit_id):
            return model.predict_y(x, unit_id)[0]
    else:
        model = MtlModel.build(dx, dy, config.context_dim,
                               hidden=tuple(config.hidden),
                               seed=int(rng.integers(2 ** 31)))
        for u in dataset.units:
            model.add_unit(u.unit_id)

        def step_loss(step_rng):
            loss = baselines.mtl_loss(model, train_data, step_rng)
            return loss, {"total": -loss.item()}

        def predict_std(x, unit_id):
            return model.predict_y(x, unit_id)[0]

    params = model.params()
    adam = nn.AdamState(params, lr=config.learning_rate)
    trained = TrainedModel(kind=kind, payload=model, scaler=scaler)

    def validation_score() -> float:
        if not validation:
            return float("nan")
        se, count = 0.0, 0
        with ad.no_grad():
            for unit_id, x_val, y_val in validation:
                pred = predict_std(x_val, unit_id)
                se += float(np.sum((pred - y_val) ** 2))
                count += y_val.size
        return se / count

    best_score = np.inf
    best_snapshot = None
    best_step = 0
    evals_since_best = 0
    bad_steps = 0
    t0 = time.perf_counter()

    for step in range(1, config.max_steps + 1):
        with ad.fresh_tape() as tape:
            loss, parts = step_loss(rng)
            finite = np.isfinite(loss.data).all() and not tape.poisoned
            if finite:
                ad.zero_grads(params)
                ad.backward(loss)
                ok = nn.adam_step(adam, params, nn.collect_grads(params))
            else:
                ok = False
        if not ok:
            bad_steps += 1
            if bad_steps >= 10:
                raise DivergenceError(
                    f"{kind} training diverged at step {step}: "
                    f"10 consecutive non-finite steps (last loss parts {parts})")
            continue
        bad_steps = 0

        record = {"step": step, **parts,
                  "wall_time_s": time.perf_counter() - t0}
        if validation and step % config.eval_every == 0:
            score = validation_score()
            record["validation_mse"] = score
            if score < best_score:
                best_score = score
                best_step = step
                best_snapshot = [p.data.copy() for p in params]
                evals_since_best = 0
            else:
                evals_since_best += 1
            if evals_since_best >= config.patience:
                trained.train_log.append(record)
                break
        trained.train_log.append(record)

    if best_snapshot is not None:
        for p, saved in zip(params, best_snapshot):
            p.data[...] = saved
        trained.train_log.append({"best_step": best_step,
                                  "best_validation_mse": best_score})
    return trained


def train_stl(dataset: MultiUnitDataset, config: TrainConfig) -> TrainedModel:
    """Fit one RBF kernel ridge regressor per unit on labeled data only."""
    dataset.assert_no_leakage()
    scaler = dataset.scaler()
    sdata = dataset.standardized(scaler)
    models = {}
    for u in sdata.units:
        seed = int(seed_for(config.seed, "stl", u.unit_id).generate_state(1)[0])
        gamma, lam = baselines.stl_hyperparam_search(
            u.x_labeled, u.y_labeled,
            validation_fraction=config.validation_fraction, seed=seed)
        models[u.unit_id] = baselines.stl_fit(u.x_labeled, u.y_labeled, gamma, lam)
    return TrainedModel(kind="stl", payload=models, scaler=scaler)


# -- evaluation -----------------------------------------------------------------

def per_unit_test_mape(trained: TrainedModel,
                       dataset: MultiUnitDataset) -> dict[str, float]:
    out = {}
    for u in dataset.units:
        if u.x_test.shape[0] == 0:
            continue
        pred = trained.predict(u.x_test, u.unit_id)
        out[u.unit_id] = mape(pred, u.y_test)
    return out


def evaluate(trained: TrainedModel, dataset: MultiUnitDataset,
             ratio: Optional[int] = None) -> ExperimentReport:
    t0 = time.perf_counter()
    per_unit = per_unit_test_mape(trained, dataset)
    if not per_unit:
        raise ValueError("dataset has no test rows to evaluate")
    return ExperimentReport.from_mapes(
        trained.kind, ratio, per_unit, fingerprint=config_fingerprint(
            {"kind": trained.kind, "ratio": ratio}),
        wall_time_s=time.perf_counter() - t0)


# -- finetuning -------------------------------------------------------------------

def _filter_for_mode(unit: UnitData, mode: FinetuneMode) -> UnitData:
    keep_labeled = mode in (FinetuneMode.SUPERVISED, FinetuneMode.SEMI_SUPERVISED)
    keep_unlabeled = mode in (FinetuneMode.UNSUPERVISED, FinetuneMode.SEMI_SUPERVISED)
    if keep_labeled and unit.n_labeled == 0:
        raise ValueError(f"{mode.value} finetuning needs labeled data")
    if keep_unlabeled and unit.n_unlabeled == 0:
        raise ValueError(f"{mode.value} finetuning needs unlabeled data")
    empty_x = np.zeros((0, unit.x_labeled.shape[1] if unit.x_labeled.size
                        else unit.x_unlabeled.shape[1]))
    return UnitData(
        unit_id=unit.unit_id,
        x_labeled=unit.x_labeled.copy() if keep_labeled else empty_x.copy(),
        y_labeled=unit.y_labeled.copy() if keep_labeled else np.zeros((0, 1)),
        x_unlabeled=unit.x_unlabeled.copy() if keep_unlabeled else empty_x.copy(),
        x_test=unit.x_test.copy(),
        y_test=unit.y_test.copy(),
        labeled_ids=list(unit.labeled_ids) if keep_labeled else [],
        unlabeled_ids=list(unit.unlabeled_ids) if keep_unlabeled else [],
        test_ids=list(unit.test_ids),
    )


def finetune_unit(trained: TrainedModel, unit: UnitData,
                  config: FinetuneConfig) -> ContextPosterior:
    """Learn a context posterior for a new unit with frozen networks.

    Runs `epochs` full-batch plain gradient descent steps on the
    mode-filtered objective, optimizing only the context mean; the context
    variance stays fixed at `fixed_variance`.  The posterior is registered
    on the model under the unit's id (replacing any previous entry).
    """
    if trained.kind != "ssmtl":
        raise ValueError("finetuning requires an ssmtl model")
    model: SsmtlModel = trained.payload
    filtered = _filter_for_mode(unit, config.mode)
    sunit = MultiUnitDataset(units=[filtered]).standardized(trained.scaler)

    k = model.dims.context
    model.contexts.pop(unit.unit_id, None)
    if config.context_init is ContextInit.MEAN_OF_UNITS and model.contexts:
        m0 = np.mean([p.m.data for p in model.contexts.values()], axis=0)
    else:
        m0 = np.zeros(k)
    log_s = np.full(k, 0.5 * np.log(config.fixed_variance))
    post = ContextPosterior(m0, log_s, train_log_s=False)
    model.contexts[unit.unit_id] = post

    rng = np.random.default_rng(seed_for(config.seed, "finetune", unit.unit_id))
    net_params = model.network_params()
    frozen = [p.requires_grad for p in net_params]
    for p in net_params:
        p.requires_grad = False
    try:
        for _ in range(config.epochs):
            with ad.fresh_tape() as tape:
                est = sgvb_dataset_estimate(model, sunit, config.objective, rng)
                loss = loss_for_training(est)
                if not np.isfinite(loss.data).all() or tape.poisoned:
                    continue
                post.m.zero_grad()
                ad.backward(loss)
                nn.sgd_step([post.m], nn.collect_grads([post.m]),
                            config.learning_rate)
    finally:
        for p, flag in zip(net_params, frozen):
            p.requires_grad = flag
    return post


def zero_context_baseline(trained: TrainedModel, unit: UnitData) -> float:
    """Test MAPE with the context pinned at the prior mean (no finetuning)."""
    model: SsmtlModel = trained.payload
    old = model.contexts.pop(unit.unit_id, None)
    model.contexts[unit.unit_id] = ContextPosterior(
        np.zeros(model.dims.context), np.full(model.dims.context, np.log(0.5)))
    try:
        pred = trained.predict(unit.x_test, unit.unit_id)
        return mape(pred, unit.y_test)
    finally:
        model.contexts.pop(unit.unit_id, None)
        if old is not None:
            model.contexts[unit.unit_id] = old


# -- the experiment matrix -----------------------------------------------------

def run_matrix(dataset: MultiUnitDataset, ratios: Sequence[int],
               models: Sequence[str], config: TrainConfig,
               progress: Optional[Callable[[str], None]] = None
               ) -> tuple[list[ExperimentReport], list[dict]]:
    """Train and evaluate every matrix cell.

    STL and MTL use labeled data only, so they contribute one row each;
    SSMTL contributes one row per unlabeled ratio.  Per-unit MAPEs are
    averaged over repetitions before aggregation.  Cell failures are
    recorded and the matrix continues.
    """
    for m in models:
        if m not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {m!r}")
    reports, failures = [], []
    n_labeled = dataset.units[0].n_labeled if dataset.units else 0

    def note(msg):
        log.info(msg)
        if progress:
            progress(msg)

    def run_cell(cell_name: str, kind: str, cell_data: MultiUnitDataset,
                 ratio: Optional[int]):
        t0 = time.perf_counter()
        per_unit_acc: dict[str, list[float]] = {}
        reps = 1 if kind == "stl" else config.repetitions
        try:
            for rep in range(reps):
                rep_seed = int(seed_for(config.seed, cell_name, rep)
                               .generate_state(1)[0])
                rep_config = copy.deepcopy(config)
                rep_config.seed = rep_seed
                if kind == "stl":
                    trained = train_stl(cell_data, rep_config)
                else:
                    trained = train_multiunit(kind, cell_data, rep_config)
                for unit_id, value in per_unit_test_mape(trained, cell_data).items():
                    per_unit_acc.setdefault(unit_id, []).append(value)
                note(f"{cell_name} rep {rep + 1}/{reps} done")
        except Exception as exc:  # cell failures recorded, matrix continues
            failures.append({"cell": cell_name, "error": f"{type(exc).__name__}: {exc}"})
            note(f"{cell_name} FAILED: {exc}")
            return
        per_unit = {uid: float(np.mean(vals)) for uid, vals in
                    sorted(per_unit_acc.items())}
        reports.append(ExperimentReport.from_mapes(
            kind, ratio, per_unit, fingerprint=config_fingerprint(config),
            wall_time_s=time.perf_counter() - t0))

    if "stl" in models:
        run_cell("stl", "stl", subset(dataset, n_unlabeled=0), None)
    if "mtl" in models:
        run_cell("mtl", "mtl", subset(dataset, n_unlabeled=0), None)
    if "ssmtl" in models:
        for ratio in ratios:
            cell_data = subset(dataset, n_unlabeled=ratio * n_labeled)
            run_cell(f"ssmtl_r{ratio}", "ssmtl", cell_data, ratio)
    return reports, failures
