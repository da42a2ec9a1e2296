"""Downstream evaluation: ridge regression on frozen embeddings.

Protocols: shuffled k-fold cross-validation, few-shot splits (small
labeled fraction, many repeats), and zero-shot transfer (fit on one
city's rows, score on another's with no target supervision). Features are
standardized with statistics fit on the training rows only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .sources import EmbeddingMatrix


@dataclass
class RidgeModel:
    coef: np.ndarray
    intercept: float
    x_mean: np.ndarray
    x_scale: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        xs = (np.asarray(x, float) - self.x_mean) / self.x_scale
        return xs @ self.coef + self.intercept


def ridge(train_x, train_y, alpha: float, standardize: bool = False) -> RidgeModel:
    """Closed-form ridge with an unpenalized intercept via centering.

    With alpha = 0 a singular system falls back to the minimum-norm
    least-squares solution.
    """
    x = np.asarray(train_x, float)
    y = np.asarray(train_y, float)
    if x.ndim == 1:
        x = x[:, None]
    if alpha < 0:
        raise ConfigError("ridge penalty must be >= 0")
    if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
        raise ConfigError("need at least one training row with matching labels")

    if standardize:
        x_mean = x.mean(axis=0)
        x_scale = x.std(axis=0)
        x_scale = np.where(x_scale > 0, x_scale, 1.0)
    else:
        x_mean = np.zeros(x.shape[1])
        x_scale = np.ones(x.shape[1])
    xs = (x - x_mean) / x_scale

    xc_mean = xs.mean(axis=0)
    y_mean = y.mean()
    xc = xs - xc_mean
    yc = y - y_mean
    if alpha == 0.0:
        coef, *_ = np.linalg.lstsq(xc, yc, rcond=None)
    else:
        gram = xc.T @ xc + alpha * np.eye(xc.shape[1])
        coef = np.linalg.solve(gram, xc.T @ yc)
    intercept = y_mean - float(xc_mean @ coef)
    return RidgeModel(coef=coef, intercept=intercept, x_mean=x_mean, x_scale=x_scale)


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    r2: Optional[float]  # None when the target is constant

    @property
    def r2_defined(self) -> bool:
        return self.r2 is not None


def metrics(y, y_hat) -> Metrics:
    y = np.asarray(y, float)
    y_hat = np.asarray(y_hat, float)
    if y.shape != y_hat.shape or y.size == 0:
        raise ConfigError("metrics need equal, nonzero-length vectors")
    err = y - y_hat
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return Metrics(mae, rmse, None)
    r2 = 1.0 - float((err**2).sum()) / ss_tot
    return Metrics(mae, rmse, r2)


@dataclass
class SplitResult:
    name: str
    n_train: int
    n_test: int
    scores: Metrics


@dataclass
class EvalReport:
    protocol: str
    source: str
    splits: list[SplitResult]
    mae: float
    rmse: float
    r2: Optional[float]
    mae_std: float = 0.0
    rmse_std: float = 0.0
    r2_std: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def table(self) -> str:
        rows = [
            f"protocol: {self.protocol}   source: {self.source}",
            f"aggregate: MAE={self.mae:.6g}  RMSE={self.rmse:.6g}  "
            + (f"R2={self.r2:.6g}" if self.r2 is not None else "R2=undefined"),
        ]
        for k, v in sorted(self.metadata.items()):
            rows.append(f"  {k} = {v}")
        for s in self.splits:
            r2 = f"{s.scores.r2:.6g}" if s.scores.r2 is not None else "undefined"
            rows.append(
                f"  {s.name}: train={s.n_train} test={s.n_test} "
                f"MAE={s.scores.mae:.6g} RMSE={s.scores.rmse:.6g} R2={r2}"
            )
        return "\n".join(rows)


def _aggregate(protocol, source, splits, metadata) -> EvalReport:
    maes = np.array([s.scores.mae for s in splits])
    rmses = np.array([s.scores.rmse for s in splits])
    r2s = [s.scores.r2 for s in splits]
    defined = [v for v in r2s if v is not None]
    report = EvalReport(
        protocol=protocol,
        source=source,
        splits=splits,
        mae=float(maes.mean()),
        rmse=float(rmses.mean()),
        r2=float(np.mean(defined)) if defined else None,
        mae_std=float(maes.std()),
        rmse_std=float(rmses.std()),
        r2_std=float(np.std(defined)) if defined else None,
        metadata=dict(metadata),
    )
    if len(defined) != len(r2s):
        report.metadata["r2_undefined_splits"] = len(r2s) - len(defined)
    return report


def _align(emb: EmbeddingMatrix, labels: Mapping[str, float]) -> tuple[np.ndarray, np.ndarray]:
    missing = [r for r in emb.region_ids if r not in labels]
    if missing:
        raise ConfigError(f"labels missing for regions: {missing[:3]} (+{max(0, len(missing) - 3)} more)")
    y = np.array([labels[r] for r in emb.region_ids], dtype=float)
    return emb.matrix, y


def kfold_eval(
    emb: EmbeddingMatrix,
    labels: Mapping[str, float],
    k: int = 5,
    seed: int = 0,
    alpha: float = 1.0,
    standardize: bool = True,
) -> EvalReport:
    """Shuffled k-fold CV; folds partition the regions exactly."""
    x, y = _align(emb, labels)
    n = x.shape[0]
    if k > n:
        raise ConfigError(f"cannot split {n} regions into {k} folds")
    if k < 2:
        raise ConfigError("k-fold needs k >= 2")
    rng = np.random.default_rng([seed, 0xF01D])
    order = rng.permutation(n)
    folds = np.array_split(order, k)
    splits = []
    for i, fold in enumerate(folds):
        test_mask = np.zeros(n, dtype=bool)
        test_mask[fold] = True
        model = ridge(x[~test_mask], y[~test_mask], alpha, standardize=standardize)
        scores = metrics(y[test_mask], model.predict(x[test_mask]))
        splits.append(SplitResult(f"fold{i}", int((~test_mask).sum()), int(test_mask.sum()), scores))
    return _aggregate(
        "kfold", emb.source, splits, {"k": k, "seed": seed, "alpha": alpha, "n": n}
    )


def few_shot_eval(
    emb: EmbeddingMatrix,
    labels: Mapping[str, float],
    ratio: float = 0.10,
    repeats: int = 10,
    seed: int = 0,
    alpha: float = 1.0,
    standardize: bool = True,
) -> EvalReport:
    """Fit on a small random fraction, test on the remainder, many repeats."""
    x, y = _align(emb, labels)
    n = x.shape[0]
    if not (0.0 < ratio <= 1.0):
        raise ConfigError("ratio must lie in (0, 1]")
    resubstitution = ratio == 1.0
    n_train = n if resubstitution else int(round(ratio * n))
    if not resubstitution:
        n_train = min(n_train, n - 1)
    if n_train < 2:
        raise ConfigError(f"too few training rows: {n_train} (ratio {ratio} of {n})")
    splits = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, 0xFE33, r])
        order = rng.permutation(n)
        train_idx = order[:n_train]
        test_idx = order if resubstitution else order[n_train:]
        model = ridge(x[train_idx], y[train_idx], alpha, standardize=standardize)
        scores = metrics(y[test_idx], model.predict(x[test_idx]))
        splits.append(SplitResult(f"repeat{r}", len(train_idx), len(test_idx), scores))
    meta = {"ratio": ratio, "repeats": repeats, "seed": seed, "alpha": alpha, "n": n}
    if resubstitution:
        meta["resubstitution"] = True
    return _aggregate("few-shot", emb.source, splits, meta)


def fit_predictor(
    emb: EmbeddingMatrix, labels: Mapping[str, float], alpha: float = 1.0, standardize: bool = True
) -> RidgeModel:
    x, y = _align(emb, labels)
    return ridge(x, y, alpha, standardize=standardize)


def score_predictor(model: RidgeModel, emb: EmbeddingMatrix, labels: Mapping[str, float]) -> Metrics:
    x, y = _align(emb, labels)
    return metrics(y, model.predict(x))


def zero_shot_eval(
    src_emb: EmbeddingMatrix,
    src_labels: Mapping[str, float],
    dst_emb: EmbeddingMatrix,
    dst_labels: Mapping[str, float],
    alpha: float = 1.0,
    standardize: bool = True,
    after_fit: Optional[Callable[[RidgeModel], None]] = None,
) -> EvalReport:
    """Fit on every source row, score on every destination row.

    Destination labels are only touched after fitting finishes; the
    ``after_fit`` hook fires in between so tests can instrument that no
    target supervision leaked into the model.
    """
    if src_emb.dim != dst_emb.dim:
        raise ConfigError(f"embedding dims differ: {src_emb.dim} vs {dst_emb.dim}")
    model = fit_predictor(src_emb, src_labels, alpha, standardize=standardize)
    if after_fit is not None:
        after_fit(model)
    scores = score_predictor(model, dst_emb, dst_labels)
    splits = [SplitResult("transfer", len(src_emb.region_ids), len(dst_emb.region_ids), scores)]
    meta = {"alpha": alpha, "src": src_emb.source, "dst": dst_emb.source}
    if scores.r2 is None:
        meta["r2_undefined"] = True
    return _aggregate("zero-shot", dst_emb.source, splits, meta)


# -- report files -------------------------------------------------------------


def save_report(report: EvalReport, path: str | Path, run_hash: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if run_hash:
            fh.write(f"# config_hash={run_hash}\n")
        fh.write(f"# protocol={report.protocol} source={report.source}\n")
        for k, v in sorted(report.metadata.items()):
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "n_train", "n_test", "mae", "rmse", "r2"])
        for s in report.splits:
            w.writerow(
                [s.name, s.n_train, s.n_test, repr(s.scores.mae), repr(s.scores.rmse),
                 "" if s.scores.r2 is None else repr(s.scores.r2)]
            )
        w.writerow(
            ["aggregate", "", "", repr(report.mae), repr(report.rmse),
             "" if report.r2 is None else repr(report.r2)]
        )
