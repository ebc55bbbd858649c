"""Loss, metrics, cross-validation, Adam training with early stopping, gradient checks."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .layers import Layer, softmax
from .model import Model, PbbnConfig, build

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 0.001
    max_epochs: int = 200
    early_stop_patience: int = 50
    folds: int = 15
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "early_stop_patience", "folds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience > self.max_epochs:
            raise ValueError("early_stop_patience cannot exceed max_epochs")


# -- loss ---------------------------------------------------------------------------

def _check_labels(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (non-blink) or 1 (blink)")
    return labels.astype(np.int64)


def cross_entropy_logits(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = _check_labels(labels, logits.shape[0])
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


def cross_entropy(probabilities: np.ndarray, labels) -> float:
    """Mean negative log of the true-class probability."""
    p = np.asarray(probabilities, dtype=np.float64)
    labels = _check_labels(labels, p.shape[0])
    # log of a probability row equals the log-softmax of its log: reuse the stable path
    with np.errstate(divide="ignore"):
        logits = np.log(p)
    logits = np.maximum(logits, np.log(np.finfo(np.float64).tiny))
    return cross_entropy_logits(logits, labels)[0]


# -- metrics ----------------------------------------------------------------------

@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Confusion":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(int(np.sum(t & p)), int(np.sum(~t & ~p)), int(np.sum(~t & p)), int(np.sum(t & ~p)))


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both inputs are 0."""
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def metrics(c: Confusion) -> Metrics:
    """Precision, recall and F1 with the blink class as positive.

    A 0/0 ratio evaluates to 0 and is named in ``degenerate``.
    """
    flags = []
    if c.tp + c.fp == 0:
        precision = 0.0
        flags.append("precision")
    else:
        precision = c.tp / (c.tp + c.fp)
    if c.tp + c.fn == 0:
        recall = 0.0
        flags.append("recall")
    else:
        recall = c.tp / (c.tp + c.fn)
    return Metrics(precision, recall, f1_score(precision, recall), tuple(flags))


# -- cross-validation ---------------------------------------------------------------

def kfold_split(n_samples: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """``k`` disjoint validation index sets covering ``range(n_samples)``."""
    if k < 1 or k > n_samples:
        raise ValueError(f"need 1 <= k <= n_samples, got k={k}, n={n_samples}")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return [np.sort(f) for f in np.array_split(perm, k)]


# -- optimisation -----------------------------------------------------------------

class Adam:
    def __init__(self, params: list[np.ndarray], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_f1"])
        for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_f1), 1):
            w.writerow([i, *(repr(float(v)) for v in row)])
        return buf.getvalue()


def predict_proba(model: Model, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = [model.forward(x[i:i + batch_size], "infer") for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 32):
    """Mean loss, confusion counts and probabilities in inference mode."""
    losses, probs = [], []
    for i in range(0, len(x), batch_size):
        logits = model.logits(x[i:i + batch_size], train=False)
        loss, _ = cross_entropy_logits(logits.astype(np.float64), y[i:i + batch_size])
        losses.append(loss * len(logits))
        probs.append(softmax(logits))
    probs = np.concatenate(probs)
    conf = Confusion.from_predictions(y, probs[:, 1] > probs[:, 0])
    return sum(losses) / len(x), conf, probs


def train(model: Model, train_data, val_data, cfg: TrainConfig, callback=None):
    """Mini-batch Adam with early stopping on validation loss.

    Returns the same model with the parameters of its best-validation-loss
    epoch restored, and the per-epoch :class:`History`.
    """
    x, y = train_data
    xv, yv = val_data
    if len(x) == 0 or len(xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    y = _check_labels(y, len(x))
    yv = _check_labels(yv, len(xv))
    expected = model.config.input_shape
    if x.shape[1:] != expected or xv.shape[1:] != expected:
        raise ValueError(f"data shaped {x.shape[1:]} / {xv.shape[1:]}, model expects {expected}")

    names = [n for n, _ in model.named_parameters()]
    opt = Adam([p for _, p in model.named_parameters()], lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.early_stop_patience)
    hist = History()
    best_state = None

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x))
        total = 0.0
        for i in range(0, len(x), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            logits = model.logits(x[idx], train=True)
            loss, dlogits = cross_entropy_logits(logits, y[idx])
            model.backward(dlogits.astype(model.dtype))
            grads = dict(model.named_grads())
            opt.step([grads[n] for n in names])
            total += loss * len(idx)
        val_loss, conf, _ = evaluate(model, xv, yv, cfg.batch_size)
        hist.train_loss.append(total / len(x))
        hist.val_loss.append(val_loss)
        hist.val_f1.append(metrics(conf).f1)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = [(n, a.copy()) for n, a in model.state()]
        log.debug("epoch %d train %.4f val %.4f f1 %.4f", epoch, hist.train_loss[-1], val_loss,
                  hist.val_f1[-1])
        if callback is not None:
            callback(epoch, hist)
        if stop:
            break

    hist.best_epoch = stopper.best_epoch
    model.load_state(dict(best_state))
    return model, hist


@dataclass
class FoldResult:
    fold: int
    metrics: Metrics
    history: History


@dataclass
class CVResult:
    folds: list[FoldResult]
    best_model: Model | None = None

    def summary(self) -> dict[str, tuple[float, float]]:
        """Mean and population standard deviation of each metric across folds."""
        out = {}
        for key in ("precision", "recall", "f1"):
            vals = np.array([getattr(f.metrics, key) for f in self.folds])
            out[key] = (float(vals.mean()), float(vals.std()))
        return out


def cross_validate(config: PbbnConfig, x, y, cfg: TrainConfig, test=None,
                   dtype=np.float32, callback=None) -> CVResult:
    """k-fold training; fold ``i`` is the early-stopping set of model ``i``.

    Metrics are computed on ``test`` when given, otherwise on the held-out fold.
    ``best_model`` is the fold model with the highest F1.
    """
    folds = kfold_split(len(x), cfg.folds, cfg.seed)
    results, best, best_f1 = [], None, -1.0
    for i, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(x)), val_idx)
        if len(train_idx) == 0:
            raise ValueError("each fold needs at least one training sample; lower --folds")
        model = build(config, seed=cfg.seed + i, dtype=dtype)
        model, hist = train(model, (x[train_idx], y[train_idx]), (x[val_idx], y[val_idx]), cfg)
        ex, ey = test if test is not None else (x[val_idx], y[val_idx])
        _, conf, _ = evaluate(model, ex, ey, cfg.batch_size)
        m = metrics(conf)
        results.append(FoldResult(i + 1, m, hist))
        if callback is not None:
            callback(results[-1])
        if m.f1 > best_f1:
            best, best_f1 = model, m.f1
    return CVResult(results, best)


# -- gradient checking -----------------------------------------------------------

def rel_error(a, n, floor=1e-8):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckReport:
    checked: int
    max_rel_error: float
    failures: list[tuple[str, tuple, float, float, float]]  # name, index, analytic, numeric, rel
    tol: float

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def failed_layers(self) -> list[str]:
        return sorted({f[0].rsplit(".", 1)[0] for f in self.failures})


def perturb_state(model: Model, seed: int = 0, scale: float = 0.1) -> Model:
    """Move biases and batch-norm state off their initial values, in place.

    Freshly built models have zero biases and identity batch norms, so a
    channel that ReLU zeroes stays exactly at the kink. Finite differences
    are meaningless there; perturbing the state first avoids it.
    """
    rng = np.random.default_rng([seed, 0xB1A5])
    for layer in model.layers():
        for key, arr in list(layer.params.items()) + list(layer.buffers.items()):
            if key in ("bias", "beta", "running_mean"):
                arr[...] = rng.normal(0.0, scale, arr.shape)
            elif key in ("gamma", "running_var"):
                arr[...] = rng.uniform(0.5, 1.5, arr.shape)
    return model


def grad_check(model: Model, n_params: int = 50, seed: int = 0, h: float = 1e-5,
               tol: float = 1e-4, batch: int = 2, mode: str = "infer") -> GradCheckReport:
    """Compare analytic parameter gradients with central differences on a random batch.

    Every parameter array contributes at least one sampled entry; the rest
    are drawn uniformly. The model must be float64.
    """
    if model.dtype != np.float64:
        raise TypeError("gradient checks need a float64 model (use model.astype(np.float64))")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, *model.config.input_shape))
    y = rng.integers(0, 2, size=batch)
    train = mode == "train"

    def loss_at():
        return cross_entropy_logits(model.logits(x, train=train), y)[0]

    _, dlogits = cross_entropy_logits(model.logits(x, train=train), y)
    model.backward(dlogits)
    params = list(model.named_parameters())
    grads = {n: g.copy() for n, g in model.named_grads()}

    picks = [(name, tuple(rng.integers(0, s) for s in arr.shape)) for name, arr in params]
    sizes = np.array([arr.size for _, arr in params], dtype=float)
    while len(picks) < n_params:
        j = rng.choice(len(params), p=sizes / sizes.sum())
        name, arr = params[j]
        picks.append((name, tuple(rng.integers(0, s) for s in arr.shape)))

    lookup = dict(params)

    def central(arr, idx, step):
        orig = arr[idx]
        arr[idx] = orig + step
        up = loss_at()
        arr[idx] = orig - step
        down = loss_at()
        arr[idx] = orig
        return (up - down) / (2 * step)

    failures, worst = [], 0.0
    for name, idx in picks:
        analytic = grads[name][idx]
        # A ReLU or max-pool switch inside [-h, h] skews the difference quotient;
        # such entries are re-measured with smaller steps. A wrong analytic
        # gradient disagrees at every step size.
        for step in (h, h / 10, h / 100):
            numeric = central(lookup[name], idx, step)
            err = float(rel_error(analytic, numeric))
            if err < tol:
                break
        worst = max(worst, err)
        if err >= tol:
            failures.append((name, idx, float(analytic), float(numeric), err))
    return GradCheckReport(len(picks), worst, failures, tol)


def layer_grad_check(layer: Layer, x: np.ndarray, train: bool = True, seed: int = 0,
                     h: float = 1e-5) -> dict[str, float]:
    """Max relative error of every input/parameter gradient entry of one layer.

    The scalar objective is ``sum(layer(x) * R)`` for a fixed random ``R``.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    out = layer.forward(x, train)
    r = rng.standard_normal(out.shape)
    dx = layer.backward(r)
    grads = {}
    for sub in layer.sublayers():
        prefix = "" if sub is layer else sub.name + "."
        grads.update({(prefix + k, sub, k): v.copy() for k, v in sub.grads.items()})

    def objective():
        return float(np.sum(layer.forward(x, train) * r))

    def numeric(arr):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = objective()
            arr[idx] = orig - h
            down = objective()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        return g

    errors = {"input": float(rel_error(dx, numeric(x)).max())}
    for (label, sub, key), g in grads.items():
        errors[label] = float(rel_error(g, numeric(sub.params[key])).max())
    return errors


TINY_CONFIG = PbbnConfig(pyramids=1, branches=2, base_channels=4, input_h=12, input_w=12,
                         frames=5, channels=1)


def _random_layer_params(layer: Layer, rng) -> None:
    for sub in layer.sublayers():
        for k, v in sub.params.items():
            v[...] = rng.uniform(0.5, 1.5, v.shape) if k == "gamma" else rng.standard_normal(v.shape)
        if "running_var" in sub.buffers:
            sub.buffers["running_mean"][...] = rng.normal(0, 0.1, sub.buffers["running_mean"].shape)
            sub.buffers["running_var"][...] = rng.uniform(0.5, 1.5, sub.buffers["running_var"].shape)


def gradient_suite(seed: int = 0, tol: float = 1e-4) -> list[tuple[str, float, bool]]:
    """Finite-difference checks for every layer kind and two tiny models, in float64.

    Returns ``(label, max relative error, passed)`` per check.
    """
    rng = np.random.default_rng([seed, 0x6C5])
    f64 = np.float64
    cases = [
        ("3DConv stride 2x2x1", L.Conv3D("conv", L.Conv3DSpec(3, 3, 3, 2, 3, 2, 2, 1), f64), (2, 5, 4, 4, 2), True),
        ("3DConv stride 1", L.Conv3D("conv", L.Conv3DSpec(1, 3, 2, 3, 2), f64), (1, 4, 5, 3, 3), True),
        ("DWConv", L.DepthwiseConv3D("dw", L.Conv3DSpec(3, 3, 3, 3, 3, 1, 2, 2), f64), (2, 4, 5, 4, 3), True),
        # infer mode: with batch statistics the depthwise bias gradient is structurally zero,
        # which a relative-error test cannot score (BN train mode is checked on its own)
        ("DWS 3DConv", L.DwsConv3D("dws", L.DwsConv3DSpec(3, 3, 3, 2, 4, 2, 2, 1), dtype=f64), (2, 4, 4, 3, 2), False),
        ("BN train", L.BatchNorm("bn", L.BatchNormSpec(3), f64), (3, 2, 3, 2, 3), True),
        ("BN infer", L.BatchNorm("bn", L.BatchNormSpec(3), f64), (2, 2, 3, 2, 3), False),
        ("ReLU", L.ReLU("relu"), (2, 3, 3, 2, 2), True),
        ("MaxPool", L.MaxPool3D("pool", L.PoolSpec("max", 3, 3, 3, 1, 1, 2)), (2, 4, 4, 5, 2), True),
        ("GAP", L.GlobalAvgPool("gap"), (2, 3, 2, 2, 4), True),
        ("FC", L.Dense("fc", L.DenseSpec(5, 2), f64), (3, 5), True),
    ]
    out = []
    for label, layer, shape, train_mode in cases:
        _random_layer_params(layer, rng)
        x = rng.standard_normal(shape)
        errs = layer_grad_check(layer, x, train=train_mode, seed=seed)
        worst = max(errs.values())
        out.append((label, worst, worst < tol))
    for dws in (False, True):
        cfg = replace(TINY_CONFIG, dws=dws)
        model = perturb_state(build(cfg, seed=seed, dtype=f64), seed=seed)
        rep = grad_check(model, n_params=50, seed=seed, tol=tol)
        out.append((f"model {cfg.name}", rep.max_rel_error, rep.ok))
    return out
