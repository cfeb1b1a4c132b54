"""Linear softmax probes on frozen features, the (t, ℓ) sweep and its selection.

Probes use AdamW with decoupled weight decay, like the denoiser.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from loguru import logger
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from diffprobe.config import DenoiserConfig, ProbeSection
from diffprobe.denoiser import readout_table
from diffprobe.features import FeatureGrid, l2_normalize, select_cell
from diffprobe.hashing import derived_rng
from diffprobe.schedule import NoiseSchedule

__all__ = [
    "ProbeError",
    "LinearProbe",
    "ProbeMetrics",
    "SweepResult",
    "fit_probe",
    "evaluate",
    "sweep",
    "probe_cell",
    "write_metrics",
    "write_sweep",
    "accuracy_vs_log_snr",
]

SWEEP_COLUMNS = ["resolution", "block", "ell", "t", "split", "accuracy", "macro_f1"]


class ProbeError(Exception):
    """Raised on invalid probe inputs."""

    pass


@dataclass(frozen=True)
class LinearProbe:
    weight: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)
    normalize: bool
    cell: Optional[Tuple[int, int]] = None

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.shape[1] != self.weight.shape[1]:
            raise ProbeError(
                f"Feature dim {X.shape[1]} does not match probe dim {self.weight.shape[1]}"
            )
        if self.normalize:
            X = l2_normalize(X)
        return X @ self.weight.T + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.logits(X).argmax(axis=1)


def _check_training_labels(
    y: np.ndarray, num_classes: int, class_names: Optional[Dict[int, str]]
) -> None:
    present = set(np.unique(y).tolist())
    if extra := present - set(range(num_classes)):
        raise ProbeError(f"Labels {sorted(extra)} exceed {num_classes} classes")
    for c in range(num_classes):
        if c not in present:
            name = class_names.get(c, str(c)) if class_names else str(c)
            raise ProbeError(f"Class {c} ({name}) has no training examples")


def fit_probe(
    X: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    hyper: ProbeSection,
    seed: int,
    cell: Optional[Tuple[int, int]] = None,
    class_names: Optional[Dict[int, str]] = None,
) -> LinearProbe:
    """
    Minimize mean cross-entropy of W·φ + b with minibatch AdamW.

    Parameters start at zero and minibatch order comes from a stream
    derived from (seed, cell), so a fit is reproducible.
    """
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ProbeError(f"Expected (n, C) features for {len(y)} labels, got {X.shape}")
    _check_training_labels(y, num_classes, class_names)
    if hyper.normalize:
        X = l2_normalize(X)

    features = torch.from_numpy(X)
    targets = torch.from_numpy(y)
    linear = torch.nn.Linear(X.shape[1], num_classes)
    torch.nn.init.zeros_(linear.weight)
    torch.nn.init.zeros_(linear.bias)
    optimizer = torch.optim.AdamW(
        linear.parameters(), lr=hyper.lr, betas=hyper.betas, weight_decay=hyper.weight_decay
    )

    rng = derived_rng(seed, "probe", *(cell or ()))
    for epoch in range(hyper.epochs):
        order = torch.from_numpy(rng.permutation(len(y)))
        for start in range(0, len(y), hyper.batch_size):
            index = order[start : start + hyper.batch_size]
            loss = F.cross_entropy(linear(features[index]), targets[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        logger.debug(f"probe {cell}: epoch {epoch + 1} loss {float(loss):.4f}")

    weight = linear.weight.detach().numpy().copy()
    bias = linear.bias.detach().numpy().copy()
    if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
        raise ProbeError(f"Probe parameters diverged at cell {cell}")
    return LinearProbe(weight=weight, bias=bias, normalize=hyper.normalize, cell=cell)


@dataclass(frozen=True)
class ProbeMetrics:
    accuracy: float
    macro_f1: float
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)
    f1: np.ndarray = field(repr=False)
    support: np.ndarray = field(repr=False)
    confusion: np.ndarray = field(repr=False)


def evaluate(probe: LinearProbe, X: np.ndarray, y: np.ndarray) -> ProbeMetrics:
    """Accuracy, Macro F1 over all classes, per-class P/R/F1 and the confusion matrix."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ProbeError("Cannot evaluate a probe on an empty set")
    predictions = probe.predict(X)
    labels = list(range(probe.num_classes))
    precision, recall, f1, support = precision_recall_fscore_support(
        y, predictions, labels=labels, zero_division=0
    )
    return ProbeMetrics(
        accuracy=float((predictions == y).mean()),
        macro_f1=float(np.mean(f1)),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        confusion=confusion_matrix(y, predictions, labels=labels),
    )


@dataclass
class SweepResult:
    rows: List[Dict] = field(repr=False)
    t_star: int
    ell_star: int
    val_acc: float
    test_acc: float
    test_macro_f1: float
    test_metrics: ProbeMetrics = field(repr=False)
    probe: LinearProbe = field(repr=False)

    @property
    def table(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=SWEEP_COLUMNS)

    @property
    def selection(self) -> Dict:
        return {
            "t_star": self.t_star,
            "ell_star": self.ell_star,
            "val_acc": self.val_acc,
            "test_acc": self.test_acc,
            "test_macro_f1": self.test_macro_f1,
        }


def sweep(
    train: FeatureGrid,
    val: FeatureGrid,
    test: FeatureGrid,
    labels: Dict[str, np.ndarray],
    num_classes: int,
    hyper: ProbeSection,
    denoiser_config: DenoiserConfig,
    seed: int,
    full_test_grid: bool = True,
    class_names: Optional[Dict[int, str]] = None,
) -> SweepResult:
    """
    Fit one probe per (t, ℓ) and select the cell with the best validation
    accuracy. Ties go to the smallest t, then the smallest ℓ.
    """
    info = {i.ell: i for i in readout_table(denoiser_config)}
    cells = sorted((t, ell) for t in train.timesteps for ell in train.ells)
    if not cells:
        raise ProbeError("Sweep grid is empty")

    rows, probes = [], {}
    best: Optional[Tuple[float, int, int]] = None
    for t, ell in cells:
        probe = fit_probe(
            select_cell(train, t, ell), labels["train"], num_classes, hyper, seed,
            cell=(t, ell), class_names=class_names,
        )
        probes[(t, ell)] = probe
        measured = {"val": evaluate(probe, select_cell(val, t, ell), labels["val"])}
        if full_test_grid:
            measured["test"] = evaluate(probe, select_cell(test, t, ell), labels["test"])
        for split_name, metrics in measured.items():
            rows.append(
                {
                    "resolution": info[ell].resolution,
                    "block": info[ell].readout.block,
                    "ell": ell,
                    "t": t,
                    "split": split_name,
                    "accuracy": metrics.accuracy,
                    "macro_f1": metrics.macro_f1,
                }
            )
        val_acc = measured["val"].accuracy
        logger.info(f"probe t={t} ℓ={ell}: val accuracy {val_acc:.4f}")
        if best is None or val_acc > best[0]:
            best = (val_acc, t, ell)

    val_acc, t_star, ell_star = best
    test_metrics = evaluate(
        probes[(t_star, ell_star)], select_cell(test, t_star, ell_star), labels["test"]
    )
    logger.info(
        f"Selected t*={t_star} ℓ*={ell_star}: val {val_acc:.4f}, test accuracy "
        f"{test_metrics.accuracy:.4f}, Macro F1 {test_metrics.macro_f1:.4f}"
    )
    return SweepResult(
        rows=rows,
        t_star=t_star,
        ell_star=ell_star,
        val_acc=val_acc,
        test_acc=test_metrics.accuracy,
        test_macro_f1=test_metrics.macro_f1,
        test_metrics=test_metrics,
        probe=probes[(t_star, ell_star)],
    )


def probe_cell(
    train: FeatureGrid,
    test: FeatureGrid,
    labels: Dict[str, np.ndarray],
    num_classes: int,
    hyper: ProbeSection,
    t: int,
    ell: int,
    seed: int,
    class_names: Optional[Dict[int, str]] = None,
) -> Tuple[LinearProbe, ProbeMetrics]:
    """Fit at a fixed cell and report test metrics; the out-of-distribution protocol."""
    probe = fit_probe(
        select_cell(train, t, ell), labels["train"], num_classes, hyper, seed,
        cell=(t, ell), class_names=class_names,
    )
    return probe, evaluate(probe, select_cell(test, t, ell), labels["test"])


def write_metrics(metrics: ProbeMetrics, directory: Path, class_names: Dict[int, str]) -> None:
    names = [class_names.get(c, str(c)) for c in range(len(metrics.f1))]
    pd.DataFrame(
        {
            "class_id": range(len(names)),
            "class_name": names,
            "precision": metrics.precision,
            "recall": metrics.recall,
            "f1": metrics.f1,
            "support": metrics.support,
        }
    ).to_csv(directory / "per_class.csv", index=False)
    pd.DataFrame(metrics.confusion, index=names, columns=names).to_csv(
        directory / "confusion.csv", index_label="true\\predicted"
    )


def write_sweep(
    result: SweepResult,
    sweep_csv: Path,
    selection_json: Path,
    class_names: Dict[int, str],
) -> None:
    sweep_csv.parent.mkdir(parents=True, exist_ok=True)
    result.table.to_csv(sweep_csv, index=False)
    selection_json.write_text(json.dumps(result.selection, indent=2, sort_keys=True))
    write_metrics(result.test_metrics, sweep_csv.parent, class_names)


def accuracy_vs_log_snr(table: pd.DataFrame, schedule: NoiseSchedule, ell: int) -> pd.DataFrame:
    """Probe accuracy at one readout against the log-SNR of each swept t."""
    at_ell = table[table["ell"] == ell]
    curve = at_ell.pivot_table(index="t", columns="split", values="accuracy").reset_index()
    curve.columns.name = None
    curve.insert(1, "log_snr", schedule.log_snr[curve["t"].to_numpy() - 1])
    return curve.rename(columns={s: f"{s}_accuracy" for s in ("val", "test")})
