"""Adam, teacher training, student distillation and experiment drivers.

Random streams are derived with :class:`numpy.random.SeedSequence` from
integer tuples, so every draw is a pure function of the run seed:

* parameters: ``default_rng(run_seed)``
* batch order in epoch ``e``: ``(run_seed, e, 0, 0)``
* long MemKD pairs at step ``s`` of epoch ``e``: ``(run_seed, e, s, 1)``
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import numcore as nc
from .data import Dataset, batch_iter
from .errors import ContractError, DimensionError, NumericError, RunError, TrainingDivergedError
from .losses import (
    KdLossConfig,
    cross_entropy,
    fitnets_hint,
    init_regressor,
    kd_soft_targets,
    memkd_loss,
    total_train_loss,
)
from .metrics import MetricReport, evaluate
from .model import LstmConfig, ModelBundle, init_params, lstm_forward, param_shapes, predict_proba

logger = logging.getLogger(__name__)

METHODS = ("none", "kd", "fitnets", "memkd")
RNG_ALGORITHM = "numpy PCG64 via SeedSequence"
DEFAULT_BETA_GRID = (0.1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 50
    seeds: int = 5
    base_seed: int = 0
    method: str = "none"
    kd: KdLossConfig = field(default_factory=KdLossConfig)
    cache_teacher: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ContractError("patience, max_epochs and batch_size must be at least 1")
        if self.seeds < 1 or self.base_seed < 0:
            raise ContractError("need at least one seed and a non-negative base seed")
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")

    def run_seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.seeds)]

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: nc.ParamSet
    v: nc.ParamSet
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: nc.ParamSet) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: nc.ParamSet, grads: nc.GradSet, state: AdamState, lr: float) -> tuple[nc.ParamSet, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    if set(params) != set(grads):
        raise DimensionError("gradient names do not match parameters")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1, corr2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient {k!r} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step=step)


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunResult:
    role: str
    method: str
    beta: float
    seed: int
    dataset: str
    best_epoch: int = 0
    epochs_trained: int = 0
    val_loss_curve: list[float] = field(default_factory=list)
    val_metrics: MetricReport | None = None
    test_metrics: MetricReport | None = None
    config_digest: str = ""
    first_kd_loss: float | None = None
    failure: str | None = None
    stage: str = "final"
    selected: bool = False
    wall_clock: float = 0.0

    @property
    def ok(self) -> bool:
        return self.failure is None

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready record; wall-clock time is left out so reruns are byte-identical."""
        out = asdict(self)
        out.pop("wall_clock")
        out["rng"] = RNG_ALGORITHM
        return out

    def file_name(self) -> str:
        stem = f"{self.dataset}__{self.method if self.role == 'student' else 'teacher'}__beta{self.beta:g}__seed{self.seed}"
        return stem + ("__grid" if self.stage == "grid" else "") + ".json"


def dump_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run(run_dir, result: RunResult) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / result.file_name()
    dump_json(path, result.to_dict())
    return path


# ---------------------------------------------------------------------------
# training loop


def _batch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, 0, 0])


def pair_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, 1])


def validation_loss(params: nc.ParamSet, config: LstmConfig, data: Dataset, chunk: int = 256) -> float:
    total = 0.0
    for start in range(0, len(data), chunk):
        _, logits = lstm_forward(data.X[start:start + chunk], params, config)
        ce = cross_entropy(logits, data.y[start:start + chunk]).item()
        total += ce * min(chunk, len(data) - start)
    return total / len(data)


Objective = Callable[[nc.ParamSet, np.ndarray, np.ndarray, np.ndarray, int, int], tuple[float, nc.GradSet]]


@dataclass
class FitOutcome:
    params: nc.ParamSet
    best_epoch: int
    epochs: int
    curve: list[float]


def fit(params: nc.ParamSet, objective: Objective, train: Dataset, val_loss: Callable[[nc.ParamSet], float],
        cfg: TrainConfig, seed: int) -> FitOutcome:
    """Adam with early stopping on validation loss; restores the best epoch."""
    state = AdamState.zeros_like(params)
    best_loss, best_params, best_epoch = math.inf, params, 0
    curve: list[float] = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        for step, (Xb, yb, rows) in enumerate(batch_iter(train, cfg.batch_size, _batch_rng(seed, epoch))):
            loss, grads = objective(params, Xb, yb, rows, epoch, step)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, step {step}")
            params, state = adam_step(params, grads, state, cfg.lr)
        vl = val_loss(params)
        if not math.isfinite(vl):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        curve.append(vl)
        if vl < best_loss:
            best_loss, best_params, best_epoch = vl, params, epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    return FitOutcome(best_params, best_epoch, epoch, curve)


def _metrics(params, config: LstmConfig, data: Dataset | None) -> MetricReport | None:
    if data is None or len(data) == 0:
        return None
    return evaluate(predict_proba(params, config, data.X), data.y)


# ---------------------------------------------------------------------------
# teacher


def _ce_objective(config: LstmConfig) -> Objective:
    def objective(params, Xb, yb, rows, epoch, step):
        tape = nc.Tape()
        leaves = tape.watch(params)
        _, logits = lstm_forward(Xb, leaves, config)
        loss = cross_entropy(logits, yb)
        return loss.item(), nc.backward(tape, loss, leaves)

    return objective


def train_teacher(train: Dataset, val: Dataset, cfg: TrainConfig, hidden_dim: int = 100, num_layers: int = 3,
                  test: Dataset | None = None, metadata: dict | None = None) -> tuple[ModelBundle, list[RunResult]]:
    """Train one teacher per seed; keep the one with the best validation AUC-PRC."""
    config = LstmConfig(train.num_channels, hidden_dim, num_layers, train.num_classes)
    results: list[RunResult] = []
    bundles: dict[int, ModelBundle] = {}
    for seed in cfg.run_seeds():
        result = RunResult("teacher", "none", 0.0, seed, train.name, config_digest=cfg.digest(), stage="teacher")
        started = time.perf_counter()
        try:
            out = fit(init_params(config, seed), _ce_objective(config), train,
                      lambda p: validation_loss(p, config, val), cfg, seed)
        except TrainingDivergedError as exc:
            logger.warning("teacher seed %d failed: %s", seed, exc)
            result.failure = str(exc)
            results.append(result)
            continue
        result.best_epoch, result.epochs_trained, result.val_loss_curve = out.best_epoch, out.epochs, out.curve
        result.val_metrics = _metrics(out.params, config, val)
        result.test_metrics = _metrics(out.params, config, test)
        result.wall_clock = time.perf_counter() - started
        meta = {"role": "teacher", "seed": seed, "config_digest": cfg.digest(), "rng": RNG_ALGORITHM}
        meta.update(metadata or {})
        bundles[seed] = ModelBundle(config, out.params, dict(train.label_map), meta)
        results.append(result)
    ok = [r for r in results if r.ok]
    if not ok:
        raise RunError("every teacher seed diverged")
    best = ok[0]
    for r in ok[1:]:
        if r.val_metrics.auc_prc > best.val_metrics.auc_prc:
            best = r
    best.selected = True
    return bundles[best.seed], results


# ---------------------------------------------------------------------------
# student


class TeacherSignals:
    """Frozen-teacher logits and top-layer trajectories for training rows.

    With caching the teacher runs once over the whole training set; without
    it the teacher runs on each batch.  Forward matrix products are
    row-invariant, so both paths give the same bits.
    """

    def __init__(self, teacher: ModelBundle, train: Dataset, cache: bool = True, chunk: int = 256):
        self.teacher = teacher
        self.train = train
        self.cached = cache
        self._logits = self._hidden = None
        if cache:
            logits, hidden = [], []
            for start in range(0, len(train), chunk):
                lg, hd = self._run(train.X[start:start + chunk])
                logits.append(lg)
                hidden.append(hd)
            self._logits = np.concatenate(logits, axis=0)
            self._hidden = np.concatenate(hidden, axis=1)

    def _run(self, X):
        traj, logits = lstm_forward(X, self.teacher.params, self.teacher.config)
        return logits.data, traj.hidden.data

    def __call__(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.cached:
            return self._logits[rows], self._hidden[:, rows, :]
        return self._run(self.train.X[rows])


def _student_objective(config: LstmConfig, method: str, beta: float, kd_cfg: KdLossConfig,
                       signals: TeacherSignals | None, seed: int, first: dict) -> Objective:
    student_keys = list(param_shapes(config))

    def objective(params, Xb, yb, rows, epoch, step):
        tape = nc.Tape()
        leaves = tape.watch(params)
        traj, logits = lstm_forward(Xb, {k: leaves[k] for k in student_keys}, config)
        ce = cross_entropy(logits, yb)
        kd = None
        if method != "none" and beta > 0:
            t_logits, t_hidden = signals(rows)
            if method == "kd":
                kd = kd_soft_targets(t_logits, logits, kd_cfg.tau)
            elif method == "fitnets":
                kd = fitnets_hint(t_hidden, traj, leaves)
            else:
                kd = memkd_loss(t_hidden, traj, kd_cfg, pair_rng(seed, epoch, step))
            if "kd" not in first:
                first["kd"] = kd.item()
        loss = total_train_loss(ce, kd, kd_cfg.alpha, beta)
        return loss.item(), nc.backward(tape, loss, leaves)

    return objective


def distill_student(teacher: ModelBundle, train: Dataset, val: Dataset, cfg: TrainConfig, beta: float, seed: int,
                    hidden_dim: int = 8, num_layers: int = 1, test: Dataset | None = None,
                    initial_params: nc.ParamSet | None = None, stage: str = "final") -> tuple[ModelBundle, RunResult]:
    """Train a student on ``alpha * CE + beta * KD`` for ``cfg.method``.

    ``method == "none"`` is plain cross-entropy training (the Base student).
    The teacher is never updated; its parameter bytes are checked afterwards.
    """
    if teacher.config.num_classes != train.num_classes:
        raise ContractError(f"teacher has {teacher.config.num_classes} classes, data has {train.num_classes}")
    if teacher.config.input_dim != train.num_channels:
        raise ContractError("teacher input width does not match the data")
    method = cfg.method
    beta = 0.0 if method == "none" else float(beta)
    config = LstmConfig(train.num_channels, hidden_dim, num_layers, train.num_classes)
    frozen = teacher.param_bytes()

    params = dict(initial_params) if initial_params is not None else init_params(config, seed)
    if method == "fitnets":
        params.update(init_regressor(hidden_dim, teacher.config.hidden_dim, seed + 1_000_003))
    signals = TeacherSignals(teacher, train, cfg.cache_teacher) if method != "none" and beta > 0 else None

    result = RunResult("student", method, beta, seed, train.name, config_digest=cfg.digest(), stage=stage)
    first: dict = {}
    started = time.perf_counter()
    student_keys = list(param_shapes(config))
    out = fit(params, _student_objective(config, method, beta, cfg.kd, signals, seed, first), train,
              lambda p: validation_loss({k: p[k] for k in student_keys}, config, val), cfg, seed)
    if teacher.param_bytes() != frozen:
        raise ContractError("teacher parameters changed during distillation")
    student_params = {k: out.params[k] for k in student_keys}
    result.best_epoch, result.epochs_trained, result.val_loss_curve = out.best_epoch, out.epochs, out.curve
    result.first_kd_loss = first.get("kd")
    result.val_metrics = _metrics(student_params, config, val)
    result.test_metrics = _metrics(student_params, config, test)
    result.wall_clock = time.perf_counter() - started
    meta = {"role": "student", "method": method, "beta": beta, "seed": seed,
            "config_digest": cfg.digest(), "rng": RNG_ALGORITHM}
    for key in ("target_length", "znormalize"):
        if key in teacher.metadata:
            meta[key] = teacher.metadata[key]
    return ModelBundle(config, student_params, dict(train.label_map), meta), result


def grid_search_beta(teacher: ModelBundle, train: Dataset, val: Dataset, cfg: TrainConfig,
                     grid: Sequence[float] = DEFAULT_BETA_GRID, seed: int | None = None,
                     **student_kwargs) -> tuple[float, list[RunResult]]:
    """One student per beta (single seed); best validation AUC-PRC wins, ties go to the smaller beta."""
    if not len(grid):
        raise ContractError("beta grid is empty")
    seed = cfg.base_seed if seed is None else seed
    results: list[RunResult] = []
    best_beta, best_score = None, -math.inf
    for beta in sorted(float(b) for b in grid):
        try:
            _, res = distill_student(teacher, train, val, cfg, beta, seed, stage="grid", **student_kwargs)
        except TrainingDivergedError as exc:
            logger.warning("beta %g diverged: %s", beta, exc)
            res = RunResult("student", cfg.method, beta, seed, train.name, failure=str(exc), stage="grid")
            results.append(res)
            continue
        results.append(res)
        if res.val_metrics.auc_prc > best_score:
            best_beta, best_score = beta, res.val_metrics.auc_prc
    if best_beta is None:
        raise RunError("every beta in the grid diverged")
    return best_beta, results


# ---------------------------------------------------------------------------
# aggregation


METRIC_NAMES = ("accuracy", "auc_roc", "auc_prc")


@dataclass
class MultiSeedResult:
    runs: list[RunResult]
    mean: dict[str, float]
    std: dict[str, float]
    completed: int
    failed: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_seed": [
                {"seed": r.seed, "failure": r.failure,
                 "metrics": None if r.test_metrics is None else {k: getattr(r.test_metrics, k) for k in METRIC_NAMES}}
                for r in self.runs
            ],
            "mean": self.mean,
            "std": self.std,
            "completed": self.completed,
            "failed": self.failed,
        }


def aggregate(runs: Sequence[RunResult]) -> MultiSeedResult:
    ok = [r for r in runs if r.ok and r.test_metrics is not None]
    mean, std = {}, {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r.test_metrics, name) for r in ok], dtype=np.float64)
        mean[name] = float(values.mean()) if len(values) else float("nan")
        std[name] = float(values.std()) if len(values) else float("nan")
    return MultiSeedResult(list(runs), mean, std, len(ok), len(runs) - len(ok))


def multi_seed(run_fn: Callable[[int], RunResult], seeds: Sequence[int]) -> MultiSeedResult:
    """Run ``run_fn`` per seed; diverged seeds are recorded, not fatal, unless all fail."""
    if not len(seeds):
        raise ContractError("need at least one seed")
    runs = []
    for seed in seeds:
        try:
            runs.append(run_fn(seed))
        except TrainingDivergedError as exc:
            logger.warning("seed %d failed: %s", seed, exc)
            runs.append(RunResult("student", "?", 0.0, seed, "?", failure=str(exc)))
    result = aggregate(runs)
    if result.completed == 0:
        raise RunError("every seed failed")
    return result


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    method: str
    max_rel_error: float
    tolerance: float
    passed: bool
    location: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.location}" if self.location else ""
        return f"{self.method:8s} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:.0e} {status}{where}"


TINY = {"T": 6, "n": 2, "m_t": 4, "m_s": 3, "C": 2, "batch": 2, "teacher_layers": 2}


def tiny_problem(seed: int):
    """Random frozen teacher, student parameters and a 2-sample batch on the tiny preset."""
    rng = np.random.default_rng(seed)
    t_cfg = LstmConfig(TINY["n"], TINY["m_t"], TINY["teacher_layers"], TINY["C"])
    s_cfg = LstmConfig(TINY["n"], TINY["m_s"], 1, TINY["C"])
    teacher = {k: rng.uniform(-1, 1, size=s) for k, s in param_shapes(t_cfg).items()}
    student = {k: rng.uniform(-1, 1, size=s) for k, s in param_shapes(s_cfg).items()}
    X = rng.uniform(-1, 1, size=(TINY["batch"], TINY["T"], TINY["n"]))
    y = np.arange(TINY["batch"]) % TINY["C"]
    return t_cfg, teacher, s_cfg, student, X, y


def _relative_errors(analytic: nc.GradSet, numeric: nc.GradSet, floor: float) -> tuple[float, str]:
    worst, where = 0.0, ""
    for name in numeric:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if not np.all(np.isfinite(err)):
            return math.inf, f"{name} (non-finite)"
        i = int(np.argmax(err))
        if err.flat[i] > worst:
            worst, where = float(err.flat[i]), f"{name}[{i}]"
    return worst, where


def gradient_check_model(method: str, seed: int = 0, step: float = 1e-5, tolerance: float = 1e-4,
                         floor: float = 1e-5, perturb: float = 0.0, beta: float = 1.0) -> GradCheckReport:
    """Compare tape gradients of the training loss with central differences.

    ``perturb`` is added to one analytic gradient entry to self-test the checker.
    """
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    t_cfg, t_params, s_cfg, params, X, y = tiny_problem(seed)
    if method == "fitnets":
        params.update({k: np.random.default_rng(seed + 1).uniform(-1, 1, size=v.shape)
                       for k, v in init_regressor(s_cfg.hidden_dim, t_cfg.hidden_dim, 0).items()})
    traj_t, logits_t = lstm_forward(X, t_params, t_cfg)
    t_logits, t_hidden = logits_t.data, traj_t.hidden.data
    kd_cfg = KdLossConfig()
    student_keys = list(param_shapes(s_cfg))

    def loss_graph(p):
        traj, logits = lstm_forward(X, {k: p[k] for k in student_keys}, s_cfg)
        kd = None
        if method == "kd":
            kd = kd_soft_targets(t_logits, logits, kd_cfg.tau)
        elif method == "fitnets":
            kd = fitnets_hint(t_hidden, traj, p)
        elif method == "memkd":
            kd = memkd_loss(t_hidden, traj, kd_cfg, np.random.default_rng(seed))
        return total_train_loss(cross_entropy(logits, y), kd, 1.0, beta if kd is not None else 0.0)

    try:
        _, analytic = nc.value_and_grad(loss_graph, params)
        numeric = nc.finite_difference_gradient(lambda p: loss_graph(p).item(), params, step)
    except NumericError as exc:
        return GradCheckReport(method, math.inf, tolerance, False, str(exc))
    if perturb:
        first = next(iter(analytic))
        analytic[first] = analytic[first].copy()
        analytic[first].flat[0] += perturb
    worst, where = _relative_errors(analytic, numeric, floor)
    return GradCheckReport(method, worst, tolerance, worst <= tolerance, "" if worst <= tolerance else where)
