"""Evaluation protocol: root alignment, metacarpal rescaling, MPJPE/MPVPE and PCK/AUC."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import MIDDLE_MCP, ROOT_JOINT, JointRegressor
from .storage import format_kv

HANDS = ("left", "right")
MM = 1000.0


def _default_thresholds() -> np.ndarray:
    return np.linspace(0.0, 50.0, 51)


@dataclass(frozen=True)
class EvalProtocol:
    root_joint: int = ROOT_JOINT
    metacarpal: tuple = (ROOT_JOINT, MIDDLE_MCP)
    reference_length: float = 0.095
    thresholds_mm: np.ndarray = field(default_factory=_default_thresholds)

    def __post_init__(self):
        th = np.asarray(self.thresholds_mm, dtype=np.float64)
        if th.ndim != 1 or len(th) < 2 or np.any(np.diff(th) <= 0):
            raise ValueError("PCK thresholds must be strictly increasing")
        if th[0] != 0.0:
            raise ValueError("PCK thresholds must start at 0 mm")
        object.__setattr__(self, "thresholds_mm", th)


def root_align(j_pred, j_gt, root: int = ROOT_JOINT, extra=None):
    """Translate the prediction so its root joint lands on the ground-truth root.

    ``extra`` (e.g. the predicted vertices) receives the same translation and is
    returned alongside.
    """
    j_pred, j_gt = np.asarray(j_pred, float), np.asarray(j_gt, float)
    if j_pred.shape != j_gt.shape:
        raise ValueError(f"joint shapes differ: {j_pred.shape} vs {j_gt.shape}")
    shift = j_gt[root] - j_pred[root]
    if extra is None:
        return j_pred + shift
    return j_pred + shift, np.asarray(extra, float) + shift


def metacarpal_length(joints, protocol: EvalProtocol = EvalProtocol()) -> float:
    a, b = protocol.metacarpal
    return float(np.linalg.norm(joints[b] - joints[a]))


def metacarpal_rescale(points, joints, protocol: EvalProtocol = EvalProtocol(),
                       target_length: float | None = None):
    """Scale ``points`` about the root joint so the metacarpal bone has ``target_length``."""
    joints = np.asarray(joints, float)
    target = protocol.reference_length if target_length is None else target_length
    length = metacarpal_length(joints, protocol)
    if not length > 0:
        raise ValueError("metacarpal length is zero; cannot rescale")
    root = joints[protocol.root_joint]
    return root + (np.asarray(points, float) - root) * (target / length)


def mean_distance_mm(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1).mean() * MM)


def mpjpe(j_pred, j_gt) -> float:
    return mean_distance_mm(j_pred, j_gt)


def mpvpe(v_pred, v_gt) -> float:
    return mean_distance_mm(v_pred, v_gt)


def pck_curve(errors_mm, thresholds_mm) -> np.ndarray:
    e = np.asarray(errors_mm, float).reshape(-1)
    if np.any(e < 0):
        raise ValueError("errors must be nonnegative")
    return (e[None, :] <= np.asarray(thresholds_mm)[:, None]).mean(axis=1)


def pck_auc(errors_mm, protocol: EvalProtocol = EvalProtocol()) -> tuple[np.ndarray, float]:
    th = protocol.thresholds_mm
    curve = pck_curve(errors_mm, th)
    auc = float(np.trapezoid(curve, th) / (th[-1] - th[0]))
    return curve, auc


@dataclass
class HandErrors:
    joint_mm: np.ndarray  # per-joint distances
    vertex_mm: np.ndarray


def hand_errors(v_pred, v_gt, regressor: JointRegressor, protocol: EvalProtocol = EvalProtocol()) -> HandErrors:
    """Per-joint and per-vertex distances for one hand.

    The prediction is taken to live at the reference bone length: it is scaled to
    the ground-truth metacarpal length and then root aligned.
    """
    j_gt = regressor(v_gt)
    j_pred = regressor(v_pred)
    gt_len = metacarpal_length(j_gt, protocol)
    root = j_pred[protocol.root_joint]
    s = gt_len / protocol.reference_length
    v_pred = root + (np.asarray(v_pred) - root) * s
    j_pred = root + (j_pred - root) * s
    j_pred, v_pred = root_align(j_pred, j_gt, protocol.root_joint, extra=v_pred)
    return HandErrors(np.linalg.norm(j_pred - j_gt, axis=1) * MM,
                      np.linalg.norm(v_pred - v_gt, axis=1) * MM)


@dataclass
class EvalReport:
    mpjpe: float
    mpvpe: float
    auc: float
    curve: np.ndarray
    thresholds_mm: np.ndarray
    per_hand: dict
    n_samples: int

    def to_kv(self) -> dict:
        out = {"n_samples": self.n_samples, "mpjpe_mm": f"{self.mpjpe:.6f}",
               "mpvpe_mm": f"{self.mpvpe:.6f}", "pck_auc": f"{self.auc:.6f}"}
        for h, (j, v) in self.per_hand.items():
            out[f"{h}.mpjpe_mm"] = f"{j:.6f}"
            out[f"{h}.mpvpe_mm"] = f"{v:.6f}"
        return out


def evaluate(predictions, samples, regressor: JointRegressor,
             protocol: EvalProtocol = EvalProtocol()) -> EvalReport:
    """``predictions`` is a list of ``{hand: (N, 3)}`` arrays aligned with ``samples``."""
    if len(predictions) != len(samples) or not samples:
        raise ValueError("need one prediction per sample and at least one sample")
    joints = {h: [] for h in HANDS}
    verts = {h: [] for h in HANDS}
    for pred, sample in zip(predictions, samples):
        for h in HANDS:
            e = hand_errors(pred[h], sample.vertices[h], regressor, protocol)
            joints[h].append(e.joint_mm)
            verts[h].append(e.vertex_mm)
    all_j = np.concatenate([np.concatenate(joints[h]) for h in HANDS])
    all_v = np.concatenate([np.concatenate(verts[h]) for h in HANDS])
    curve, auc = pck_auc(all_j, protocol)
    per_hand = {h: (float(np.concatenate(joints[h]).mean()), float(np.concatenate(verts[h]).mean()))
                for h in HANDS}
    return EvalReport(float(all_j.mean()), float(all_v.mean()), auc, curve,
                      protocol.thresholds_mm, per_hand, len(samples))


def write_report(directory, report: EvalReport, header: dict | None = None) -> tuple[Path, Path]:
    """Write ``metrics.txt`` (key-value) and ``pck.csv`` (threshold_mm, pck)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    kv_path, csv_path = d / "metrics.txt", d / "pck.csv"
    kv_path.write_text(format_kv({**(header or {}), **report.to_kv()}))
    with open(csv_path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k} = {v}\n")
        w = csv.writer(fh)
        w.writerow(["threshold_mm", "pck"])
        for t, c in zip(report.thresholds_mm, report.curve):
            w.writerow([f"{t:.6g}", f"{c:.10g}"])
    return kv_path, csv_path


def read_pck_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    reader = csv.reader(rows)
    head = next(reader)
    if head != ["threshold_mm", "pck"]:
        raise ValueError(f"{path}: expected columns threshold_mm,pck")
    data = np.array([[float(a), float(b)] for a, b in reader])
    return data[:, 0], data[:, 1]
