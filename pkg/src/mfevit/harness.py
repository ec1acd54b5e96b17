"""Training, evaluation and subject-disjoint cross-validation."""
from __future__ import annotations

import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import FUSION_MODES, ExperimentConfig, ModelConfig, save_config
from .encoder import Params, count_parameters, init_params, save_checkpoint
from .errors import ConfigError, ContractError, NumericError
from .filter import LabelState, RelabelEvent, RelabelLog, apply_filter_epoch, group_of, merge_predictions
from .fusion import ImagePair
from .model import forward, predict_proba
from .pipeline import DatasetManifest, augment, load_arrays

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 4e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    eps: float = 1e-8


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float | None = None,
    betas: tuple[float, float] | None = None,
    weight_decay: float | None = None,
    eps: float | None = None,
) -> OptimizerState:
    """One in-place AdamW update with decoupled weight decay.

    Arguments left as ``None`` fall back to the values stored in ``state``.
    Parameters whose gradient is ``None`` are skipped.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas if betas is None else betas
    wd = state.weight_decay if weight_decay is None else weight_decay
    eps = state.eps if eps is None else eps
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter group {name!r}")
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if wd:
            p *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


class AdamW:
    def __init__(self, params: Params, lr: float = 4e-5, betas=(0.9, 0.999),
                 weight_decay: float = 0.05, eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, betas=tuple(betas), weight_decay=weight_decay, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_step({n: p.data for n, p in self.params.items()},
                   {n: p.grad for n, p in self.params.items()}, self.state)


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict[str, int]

    def fold(self, i: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == i)

    def sizes(self) -> list[int]:
        return [len(self.fold(i)) for i in range(self.k)]

    def splits(self) -> list[tuple[list[str], list[str]]]:
        """(train subjects, test subjects) for every fold."""
        out = []
        for i in range(self.k):
            test = self.fold(i)
            train = sorted(s for s, f in self.assignment.items() if f != i)
            out.append((train, test))
        return out


def make_folds(subjects: Iterable[str], k: int, seed: int | np.random.Generator = 0) -> FoldPlan:
    subjects = sorted(set(subjects))
    if k <= 0 or k > len(subjects):
        raise ConfigError(f"cannot split {len(subjects)} subjects into {k} folds")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    return FoldPlan(k, {subjects[j]: i % k for i, j in enumerate(order)})


def check_disjoint(train_subjects: Iterable[str], test_subjects: Iterable[str]) -> None:
    overlap = set(train_subjects) & set(test_subjects)
    if overlap:
        raise ContractError(f"subjects in both train and test: {sorted(overlap)}")


# --------------------------------------------------------------------------
# datasets held in memory


@dataclass
class Dataset:
    rgb: np.ndarray
    depth: np.ndarray
    expression: np.ndarray
    sample_ids: list[str]
    subject_ids: list[str]
    noisy: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_ids)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, image_size: int) -> "Dataset":
        rgb, depth, recs = load_arrays(manifest, image_size)
        return cls(rgb, depth, np.array([r.expression for r in recs], dtype=np.int64),
                   [r.sample_id for r in recs], [r.subject_id for r in recs],
                   np.array([r.noisy for r in recs], dtype=bool))

    def subset(self, subjects: Iterable[str]) -> "Dataset":
        keep = set(subjects)
        idx = np.array([i for i, s in enumerate(self.subject_ids) if s in keep], dtype=np.int64)
        return Dataset(self.rgb[idx], self.depth[idx], self.expression[idx],
                       [self.sample_ids[i] for i in idx], [self.subject_ids[i] for i in idx],
                       self.noisy[idx])


def _as_dataset(data: Dataset | DatasetManifest, image_size: int) -> Dataset:
    return data if isinstance(data, Dataset) else Dataset.from_manifest(data, image_size)


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), epoch])


# --------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float
    relabels: int
    seconds: float


@dataclass
class TrainResult:
    params: Params
    states: dict[str, LabelState]
    events: list[RelabelEvent]
    history: list[EpochStats]
    step_losses: list[float]


def train_fold(
    train: Dataset | DatasetManifest,
    config: ExperimentConfig,
    seed: int | None = None,
    run_dir: str | Path | None = None,
    params: Params | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Mini-batch AdamW on cross-entropy against each sample's current label.

    After every epoch from ``sf_start_epoch`` on, the sample filter runs on
    the probabilities recorded during that epoch's training passes.
    """
    mc, tc, ac = config.model, config.train, config.augmentation
    seed = tc.seed if seed is None else seed
    data = _as_dataset(train, mc.image_size)
    if len(data) == 0:
        raise ContractError("training set is empty")
    dtype = np.float32 if tc.dtype == "float32" else np.float64
    if params is None:
        params = init_params(mc, seed, dtype=dtype)
    opt = AdamW(params, tc.lr, (tc.beta1, tc.beta2), tc.weight_decay, tc.adam_eps)
    states = {sid: LabelState(sid, int(e)) for sid, e in zip(data.sample_ids, data.expression)}
    rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2]) if mc.dropout > 0 else None
    events: list[RelabelEvent] = []
    history: list[EpochStats] = []
    step_losses: list[float] = []
    relabel_log = metrics = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, run_dir / "config.txt")
        relabel_log = RelabelLog(run_dir / "relabel.log")
        metrics = run_dir / "metrics.csv"
        metrics.write_text("epoch,loss,train_accuracy,relabels,seconds\n")

    n = len(data)
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        probs: dict[str, np.ndarray] = {}
        order = rng.permutation(n)
        losses, correct = [], 0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            rgb, depth = _batch(data, idx, ac, seed, epoch)
            labels = np.array([states[data.sample_ids[i]].current_label for i in idx])
            T.get_tape().reset()
            opt.zero_grad()
            logits = forward(rgb.astype(dtype), depth.astype(dtype), params, mc, rng=drop_rng)
            loss = T.cross_entropy(logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {opt.state.step + 1}")
            T.backward(loss)
            opt.step()
            losses.append(value * len(idx))
            step_losses.append(value)
            z = logits.data - logits.data.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            for row, i in enumerate(idx):
                probs[data.sample_ids[i]] = p[row].astype(np.float64)
            correct += int((merge_predictions(logits.data, mc.num_subclasses) == data.expression[idx]).sum())
        count = 0
        if tc.sf_enabled and mc.num_subclasses > 0:
            res = apply_filter_epoch(states, probs, mc.delta, epoch, tc.sf_start_epoch, mc.num_subclasses)
            count = res.count
            events.extend(res.events)
            if relabel_log is not None:
                relabel_log.append(res.events)
        stats = EpochStats(epoch, sum(losses) / n, correct / n, count, time.perf_counter() - t0)
        history.append(stats)
        logger.info("epoch %d loss %.4f train_acc %.3f relabels %d (%.1fs)",
                    epoch, stats.loss, stats.train_accuracy, count, stats.seconds)
        if metrics is not None:
            with open(metrics, "a") as fh:
                fh.write(f"{epoch},{stats.loss:.6f},{stats.train_accuracy:.6f},{count},{stats.seconds:.3f}\n")
        if on_epoch is not None:
            on_epoch(stats)
    T.get_tape().reset()
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoint.bin", params, mc, {"epochs": tc.epochs, "seed": seed})
    return TrainResult(params, states, events, history, step_losses)


def _batch(data: Dataset, idx, aug, seed: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    if not aug.augment:
        return data.rgb[idx], data.depth[idx]
    rgbs, depths = [], []
    for i in idx:
        sid = data.sample_ids[i]
        pair = ImagePair(data.rgb[i], data.depth[i], sample_id=sid)
        out = augment(pair, aug, sample_rng(seed, sid, epoch))
        rgbs.append(out.rgb)
        depths.append(out.depth)
    return np.stack(rgbs), np.stack(depths)


# --------------------------------------------------------------------------
# evaluation

EXPRESSIONS = ("AN", "DI", "FE", "HA", "SA", "SU")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((6, 6), dtype=np.int64))

    @classmethod
    def from_predictions(cls, truth, predicted) -> "ConfusionMatrix":
        cm = cls()
        np.add.at(cm.counts, (np.asarray(truth, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
        return cm

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def per_class_accuracy(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_text(self) -> str:
        lines = ["truth\\pred," + ",".join(EXPRESSIONS)]
        for name, row in zip(EXPRESSIONS, self.counts):
            lines.append(name + "," + ",".join(str(int(c)) for c in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ConfusionMatrix":
        rows = [line.split(",")[1:] for line in text.strip().splitlines()[1:]]
        return cls(np.array(rows, dtype=np.int64))


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    accuracy: float
    predictions: np.ndarray
    truth: np.ndarray


def evaluate(params: Params, test: Dataset | DatasetManifest, config: ModelConfig) -> EvalResult:
    """Merged-subclass accuracy on un-augmented test samples."""
    data = _as_dataset(test, config.image_size)
    if len(data) == 0:
        raise ContractError("test set is empty")
    dtype = next(iter(params.values())).dtype
    probs = predict_proba(data.rgb.astype(dtype), data.depth.astype(dtype), params, config)
    pred = np.atleast_1d(merge_predictions(probs, config.num_subclasses))
    cm = ConfusionMatrix.from_predictions(data.expression, pred)
    return EvalResult(cm, cm.accuracy, pred, data.expression.copy())


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class SplitLog:
    repeat: int
    fold: int
    train_subjects: list[str]
    test_subjects: list[str]
    accuracy: float
    n_test: int
    confusion: list[list[int]]


@dataclass
class CVResult:
    mean: float
    std: float
    per_class: list[float]
    confusion: ConfusionMatrix
    splits: list[SplitLog]


def split_seed(seed: int, repeat: int, fold: int) -> int:
    return int(np.random.default_rng([seed, repeat, fold]).integers(2**31))


def _run_split(args) -> SplitLog:
    data, config, repeat, fold, train_s, test_s, seed = args
    check_disjoint(train_s, test_s)
    result = train_fold(data.subset(train_s), config, seed=split_seed(seed, repeat, fold))
    ev = evaluate(result.params, data.subset(test_s), config.model)
    return SplitLog(repeat, fold, train_s, test_s, ev.accuracy, len(ev.truth), ev.confusion.counts.tolist())


def cross_validate(
    data: Dataset | DatasetManifest,
    config: ExperimentConfig,
    k: int,
    repeats: int = 1,
    seed: int | None = None,
    jobs: int = 1,
    run_dir: str | Path | None = None,
) -> CVResult:
    """Train and test on every fold of ``repeats`` fresh subject-disjoint fold plans."""
    seed = config.train.seed if seed is None else seed
    data = _as_dataset(data, config.model.image_size)
    subjects = sorted(set(data.subject_ids))
    jobs_args = []
    for r in range(repeats):
        plan = make_folds(subjects, k, np.random.default_rng([seed, r, 7]))
        for f, (train_s, test_s) in enumerate(plan.splits()):
            check_disjoint(train_s, test_s)
            jobs_args.append((data, config, r, f, train_s, test_s, seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            splits = list(pool.map(_run_split, jobs_args))
    else:
        splits = [_run_split(a) for a in jobs_args]
    for s in splits:
        check_disjoint(s.train_subjects, s.test_subjects)
    total = ConfusionMatrix()
    for s in splits:
        total = total + ConfusionMatrix(np.array(s.confusion, dtype=np.int64))
    accs = np.array([s.accuracy for s in splits])
    mean = float(accs.mean())
    std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
    result = CVResult(mean, std, total.per_class_accuracy().tolist(), total, splits)
    if run_dir is not None:
        write_cv_outputs(result, config, run_dir)
    return result


def write_cv_outputs(result: CVResult, config: ExperimentConfig, run_dir: str | Path) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.txt")
    (run_dir / "confusion.csv").write_text(result.confusion.to_text())
    with open(run_dir / "splits.csv", "w") as fh:
        fh.write("repeat,fold,n_test,accuracy,test_subjects\n")
        for s in result.splits:
            fh.write(f"{s.repeat},{s.fold},{s.n_test},{s.accuracy!r},{' '.join(s.test_subjects)}\n")
    summary = {"mean_accuracy": result.mean, "std_accuracy": result.std,
               "per_class_accuracy": result.per_class, "splits": len(result.splits)}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def read_split_accuracies(path: str | Path) -> list[float]:
    rows = Path(path).read_text().strip().splitlines()[1:]
    return [float(r.split(",")[3]) for r in rows]


# --------------------------------------------------------------------------
# parameter accounting


@dataclass(frozen=True)
class ParamRow:
    mode: str
    total: int
    delta_vs_rgb_only: int
    projections: int


def report_parameters(config: ModelConfig) -> list[ParamRow]:
    base = count_parameters(replace(config, fusion_mode="rgb_only")).total
    rows = []
    for mode in FUSION_MODES:
        cfg = replace(config, fusion_mode=mode)
        rows.append(ParamRow(mode, count_parameters(cfg).total,
                             count_parameters(cfg).total - base, cfg.num_streams))
    return rows


def format_parameter_table(rows: Sequence[ParamRow]) -> str:
    lines = [f"{'mode':<12} {'streams':>7} {'parameters':>12} {'vs rgb_only':>12} {'millions':>9}"]
    for r in rows:
        lines.append(f"{r.mode:<12} {r.projections:>7} {r.total:>12,} {r.delta_vs_rgb_only:>+12,} {r.total / 1e6:>9.2f}")
    return "\n".join(lines)


def label_targets_consistent(states: Mapping[str, LabelState], n_sub: int) -> bool:
    return all(group_of(s.current_label, n_sub) == s.original_main for s in states.values())
