"""Gated recurrent policy classifier, written directly in numpy.

Observation windows are T_obs frames of (dx, dy, dtheta, v) expressed in the
frame of the window's last pose, so the output does not depend on where the
track sits on the map. Training is mini-batch BPTT with Adam.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .labels import NUM_LABELS, LabelerConfig, PolicyLabel, label_window
from .scenario import AgentScript, PoseSample, wrap_angle

log = logging.getLogger(__name__)

MODEL_FORMAT = "trajpred.model/1"
DATASET_FORMAT = "trajpred.dataset/1"
FEATURE_DIM = 4
PROB_FLOOR = 1e-12
# fixed feature scales: meters, meters, radians, m/s
DEFAULT_SCALES = (20.0, 5.0, 0.5, 10.0)


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# features

def window_features(poses: Sequence[PoseSample]) -> np.ndarray:
    """(T, 4) features of a pose window relative to its last pose."""
    arr = np.array([[p.x, p.y, p.theta, p.v] for p in poses], dtype=float)
    return features_from_array(arr)


def features_from_array(arr: np.ndarray) -> np.ndarray:
    """Same as window_features for rows [x, y, theta, v]."""
    last = arr[-1]
    c, s = math.cos(last[2]), math.sin(last[2])
    dx = arr[:, 0] - last[0]
    dy = arr[:, 1] - last[1]
    out = np.empty((len(arr), FEATURE_DIM))
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = np.angle(np.exp(1j * (arr[:, 2] - last[2])))
    out[:, 3] = arr[:, 3]
    return out


# ---------------------------------------------------------------------------
# model

@dataclass(eq=False)
class RecurrentClassifier:
    Wx: np.ndarray   # (4, 3H) input weights for update / reset / candidate gates
    Wh: np.ndarray   # (H, 3H)
    bx: np.ndarray   # (3H,)
    bh: np.ndarray   # (3H,)
    Wo: np.ndarray   # (H, 6)
    bo: np.ndarray   # (6,)
    t_obs: int = 40
    scales: tuple = DEFAULT_SCALES
    meta: dict = field(default_factory=dict)

    PARAMS = ("Wx", "Wh", "bx", "bh", "Wo", "bo")

    def __post_init__(self):
        H = self.hidden
        expect = {"Wx": (FEATURE_DIM, 3 * H), "Wh": (H, 3 * H), "bx": (3 * H,),
                  "bh": (3 * H,), "Wo": (H, NUM_LABELS), "bo": (NUM_LABELS,)}
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAMS}

    @classmethod
    def init(cls, hidden: int = 64, t_obs: int = 40, seed: int = 0,
             scales: tuple = DEFAULT_SCALES) -> "RecurrentClassifier":
        rng = np.random.default_rng(seed)
        H = hidden
        lim_x = math.sqrt(6.0 / (FEATURE_DIM + H))
        lim_h = 1.0 / math.sqrt(H)
        return cls(
            Wx=rng.uniform(-lim_x, lim_x, (FEATURE_DIM, 3 * H)),
            Wh=rng.uniform(-lim_h, lim_h, (H, 3 * H)),
            bx=np.zeros(3 * H), bh=np.zeros(3 * H),
            Wo=rng.uniform(-lim_h, lim_h, (H, NUM_LABELS)),
            bo=np.zeros(NUM_LABELS), t_obs=t_obs, scales=tuple(scales))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(P: dict, X: np.ndarray, keep: bool = False):
    """Run the cell over X (B, T, 4) already scaled; returns logits and the tape."""
    B, T, _ = X.shape
    H = P["Wh"].shape[0]
    h = np.zeros((B, H))
    tape = []
    GX = X @ P["Wx"] + P["bx"]
    for t in range(T):
        gx = GX[:, t]
        gh = h @ P["Wh"] + P["bh"]
        z = _sigmoid(gx[:, :H] + gh[:, :H])
        r = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        ghn = gh[:, 2 * H:]
        n = np.tanh(gx[:, 2 * H:] + r * ghn)
        if keep:
            tape.append((h, z, r, n, ghn))
        h = (1.0 - z) * n + z * h
    logits = h @ P["Wo"] + P["bo"]
    return logits, h, tape


def _backward(P: dict, X: np.ndarray, tape, h_last, dlogits) -> dict[str, np.ndarray]:
    H = P["Wh"].shape[0]
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    grads["Wo"] = h_last.T @ dlogits
    grads["bo"] = dlogits.sum(axis=0)
    dh = dlogits @ P["Wo"].T
    dGX = np.zeros((X.shape[0], X.shape[1], 3 * H))
    Wh_T = P["Wh"].T
    for t in range(len(tape) - 1, -1, -1):
        h_prev, z, r, n, ghn = tape[t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * ghn
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        dgx = np.concatenate([dz_pre, dr_pre, dn_pre], axis=1)
        dgh = np.concatenate([dz_pre, dr_pre, dn_pre * r], axis=1)
        dGX[:, t] = dgx
        grads["Wh"] += h_prev.T @ dgh
        grads["bh"] += dgh.sum(axis=0)
        dh = dh * z + dgh @ Wh_T
    grads["Wx"] = np.einsum("btd,btg->dg", X, dGX)
    grads["bx"] = dGX.sum(axis=(0, 1))
    return grads


def _scale(model: RecurrentClassifier, feats: np.ndarray) -> np.ndarray:
    return feats / np.asarray(model.scales, dtype=float)


def loss_and_grads(P: dict, X: np.ndarray, y: np.ndarray):
    """Mean NLL over a batch of scaled windows and its parameter gradients."""
    logits, h_last, tape = _forward(P, X, keep=True)
    probs = _softmax(logits)
    B = len(y)
    p_true = np.maximum(probs[np.arange(B), y], PROB_FLOOR)
    loss = float(-np.mean(np.log(p_true)))
    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    return loss, _backward(P, X, tape, h_last, dlogits)


def infer_batch(model: RecurrentClassifier, feats: np.ndarray) -> np.ndarray:
    """Class probabilities for a batch of (B, T_obs, 4) feature windows."""
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 3 or feats.shape[1:] != (model.t_obs, FEATURE_DIM):
        raise ShapeError(f"expected (B, {model.t_obs}, {FEATURE_DIM}) windows, got {feats.shape}")
    logits, _, _ = _forward(model.params(), _scale(model, feats))
    return _softmax(logits)


def infer(model: RecurrentClassifier, window: np.ndarray) -> np.ndarray:
    """Policy distribution (6 probabilities) for one (T_obs, 4) feature window."""
    window = np.asarray(window, dtype=float)
    if window.shape != (model.t_obs, FEATURE_DIM):
        raise ShapeError(f"expected a ({model.t_obs}, {FEATURE_DIM}) window, got {window.shape}")
    return infer_batch(model, window[None])[0]


def nll_loss(probs: np.ndarray, label: PolicyLabel | int) -> float:
    return -math.log(max(float(probs[int(label)]), PROB_FLOOR))


# ---------------------------------------------------------------------------
# datasets

@dataclass(eq=False)
class Dataset:
    features: np.ndarray   # (M, T_obs, 4)
    labels: np.ndarray     # (M,) int
    track_ids: np.ndarray  # (M,) int, used for the split
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def histogram(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=NUM_LABELS)
        return {PolicyLabel(k).slug: int(c) for k, c in enumerate(counts)}


def windows_from_track(track: Sequence[PoseSample], t_obs: int, t_pred: int, stride: int = 1,
                       config: LabelerConfig = LabelerConfig()):
    """(features, labels) of every complete window along a track."""
    arr = np.array([[p.x, p.y, p.theta, p.v] for p in track], dtype=float)
    feats, labels = [], []
    for i in range(t_obs - 1, len(track) - t_pred, stride):
        feats.append(features_from_array(arr[i - t_obs + 1:i + 1]))
        labels.append(int(label_window(track, i, t_obs, t_pred, config)))
    return feats, labels


def build_dataset(tracks: Iterable[AgentScript], t_obs: int = 40, t_pred: int = 40,
                  stride: int = 1, config: LabelerConfig = LabelerConfig(),
                  meta: dict | None = None) -> Dataset:
    feats, labels, ids = [], [], []
    for k, track in enumerate(tracks):
        f, lab = windows_from_track(track.track, t_obs, t_pred, stride, config)
        feats.extend(f)
        labels.extend(lab)
        ids.extend([k] * len(lab))
    if not feats:
        raise ValueError("no complete windows in the given tracks")
    info = {"t_obs": t_obs, "t_pred": t_pred, "stride": stride, "labeler": asdict(config)}
    info.update(meta or {})
    return Dataset(np.array(feats), np.array(labels, dtype=np.int64),
                   np.array(ids, dtype=np.int64), info)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    meta = {"format": DATASET_FORMAT, **ds.meta}
    with open(path, "wb") as fh:
        np.savez(fh, features=ds.features, labels=ds.labels, track_ids=ds.track_ids,
                 meta=np.array(json.dumps(meta, sort_keys=True)))


def load_dataset(path: str | Path) -> Dataset:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
        return Dataset(z["features"], z["labels"], z["track_ids"], meta)


def save_model(model: RecurrentClassifier, path: str | Path) -> None:
    meta = {"format": MODEL_FORMAT, "t_obs": model.t_obs, "hidden": model.hidden,
            "scales": list(model.scales), **model.meta}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **model.params())


def load_model(path: str | Path | None = None) -> RecurrentClassifier:
    """Load a model file; None loads the bundled model."""
    if path is None:
        from importlib import resources
        path = resources.files("trajpred").joinpath("data/policy_model.npz")
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != MODEL_FORMAT:
            raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
        params = {k: z[k] for k in RecurrentClassifier.PARAMS}
    extra = {k: v for k, v in meta.items() if k not in ("format", "t_obs", "hidden", "scales")}
    return RecurrentClassifier(**params, t_obs=int(meta["t_obs"]), scales=tuple(meta["scales"]),
                               meta=extra)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    hidden: int = 64
    batch_size: int = 32
    lr: float = 3e-3
    clip: float = 5.0
    val_fraction: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float


def split_by_track(ds: Dataset, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Window indices of the train / validation split; whole tracks go to one side."""
    tracks = np.unique(ds.track_ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(tracks)
    n_val = max(1, int(round(val_fraction * len(tracks)))) if val_fraction > 0 else 0
    val_tracks = set(perm[:n_val].tolist())
    is_val = np.array([t in val_tracks for t in ds.track_ids])
    return np.nonzero(~is_val)[0], np.nonzero(is_val)[0]


def evaluate(model: RecurrentClassifier, feats: np.ndarray, labels: np.ndarray,
             batch: int = 512) -> tuple[float, float]:
    """Mean NLL and accuracy."""
    if len(labels) == 0:
        return float("nan"), float("nan")
    losses, hits = 0.0, 0
    for k in range(0, len(labels), batch):
        probs = infer_batch(model, feats[k:k + batch])
        y = labels[k:k + batch]
        losses += float(-np.sum(np.log(np.maximum(probs[np.arange(len(y)), y], PROB_FLOOR))))
        hits += int(np.sum(np.argmax(probs, axis=1) == y))
    return losses / len(labels), hits / len(labels)


def train(ds: Dataset, config: TrainConfig = TrainConfig(), seed: int = 0,
          callback=None) -> tuple[RecurrentClassifier, list[EpochMetrics]]:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    missing = set(range(NUM_LABELS)) - set(np.unique(ds.labels).tolist())
    if missing:
        log.warning("labels absent from the dataset: %s",
                    ", ".join(PolicyLabel(m).slug for m in sorted(missing)))
    t_obs = ds.features.shape[1]
    model = RecurrentClassifier.init(config.hidden, t_obs, seed)
    model.meta = {"train": asdict(config), "seed": seed, "dataset": ds.meta}
    P = model.params()
    m = {k: np.zeros_like(v) for k, v in P.items()}
    v = {k: np.zeros_like(v_) for k, v_ in P.items()}
    tr_idx, va_idx = split_by_track(ds, config.val_fraction, seed)
    X = ds.features.astype(float) / np.asarray(model.scales)
    y = ds.labels.astype(np.int64)
    rng = np.random.default_rng(seed + 1)
    step = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        t_start = time.perf_counter()
        order = rng.permutation(tr_idx)
        total, count, hits = 0.0, 0, 0
        for k in range(0, len(order), config.batch_size):
            idx = order[k:k + config.batch_size]
            loss, grads = loss_and_grads(P, X[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {step}")
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not math.isfinite(norm):
                raise TrainingDiverged(f"gradient norm became {norm} at epoch {epoch}, step {step}")
            if norm > config.clip:
                for g in grads.values():
                    g *= config.clip / norm
            step += 1
            b1, b2 = config.beta1, config.beta2
            for name, g in grads.items():
                m[name] = b1 * m[name] + (1 - b1) * g
                v[name] = b2 * v[name] + (1 - b2) * g * g
                mhat = m[name] / (1 - b1 ** step)
                vhat = v[name] / (1 - b2 ** step)
                P[name] -= config.lr * mhat / (np.sqrt(vhat) + 1e-8)
            total += loss * len(idx)
            count += len(idx)
        for name, arr in P.items():
            setattr(model, name, arr)
        tr_loss, tr_acc = evaluate(model, ds.features[tr_idx], y[tr_idx])
        va_loss, va_acc = evaluate(model, ds.features[va_idx], y[va_idx])
        metrics = EpochMetrics(epoch, tr_loss, tr_acc, va_loss, va_acc, time.perf_counter() - t_start)
        history.append(metrics)
        log.info("epoch %d train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f",
                 epoch, tr_loss, tr_acc, va_loss, va_acc)
        if callback is not None:
            callback(metrics)
    model.meta["metrics"] = [asdict(h) for h in history]
    return model, history
