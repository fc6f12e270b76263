"""Instability ground truth, a small trainable predictor, and its two-phase training.

The predictor maps ``[5 patch features, v, w]`` through two tanh layers to a
mean instability; phase 2 appends a log-sigma head on the last hidden layer.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelError, ParameterError, TrainingError
from .terrain import FEATURE_NAMES, Patch, comment_lines, patch_features

log = logging.getLogger(__name__)

V_MAX = 0.5
W_MAX = 0.75
DEFAULT_SIGMA = 0.5
# fixed divisor per input column (5 features, v, w); not learned
INPUT_SCALE = np.array([0.2, 0.2, 0.05, 0.2, 0.5, 0.5, 0.75])


@dataclass(frozen=True)
class Command:
    v: float
    w: float

    def __post_init__(self):
        if abs(self.v) > V_MAX + 1e-12 or abs(self.w) > W_MAX + 1e-12:
            raise ParameterError(f"command ({self.v}, {self.w}) exceeds ({V_MAX}, {W_MAX})")


@dataclass(frozen=True)
class InstabilityEstimate:
    mean: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.sigma)) or self.sigma < 0:
            raise ParameterError(f"invalid estimate ({self.mean}, {self.sigma})")


# --- ground-truth oracle ------------------------------------------------------

def oracle_mean(features, v, w):
    f = np.asarray(features, dtype=float)
    s_sag, s_lat = np.abs(f[..., 0]), np.abs(f[..., 1])
    sig_h, g_max = f[..., 2], f[..., 4]
    v = np.asarray(v, dtype=float)
    w = np.abs(np.asarray(w, dtype=float))
    k = 0.5 + v
    return (1.0 + 3.0 * v + 1.2 * w + 8.0 * s_sag * k + 6.0 * s_lat * k
            + 25.0 * sig_h * k + 4.0 * g_max * v)


def oracle_sigma(features, v, w=0.0):
    f = np.asarray(features, dtype=float)
    return 0.2 + 0.5 * f[..., 2] + 0.3 * np.asarray(v, dtype=float)


def oracle_instability(patch: Patch, cmd: Command, noise_seed: int | None = None) -> float:
    """One draw of instability for ``cmd`` on ``patch``; ``noise_seed=None`` returns the mean."""
    f = patch_features(patch)
    mu = float(oracle_mean(f, cmd.v, cmd.w))
    if noise_seed is None:
        return mu
    z = np.random.default_rng(noise_seed).standard_normal()
    return mu + float(oracle_sigma(f, cmd.v, cmd.w)) * z


class OracleModel:
    """Predictor that returns the oracle's exact mean and sigma."""

    has_sigma = True

    def predict_arrays(self, features, v, w):
        return oracle_mean(features, v, w), oracle_sigma(features, v, w)


# --- trainable model ----------------------------------------------------------

@dataclass
class InstabilityModel:
    widths: tuple = (7, 32, 32, 1)
    params: np.ndarray = None
    sigma_head: bool = False
    default_sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise ModelError(f"bad architecture {self.widths}")
        if self.params is None:
            self.params = np.zeros(self.n_params())
        self.params = np.asarray(self.params, dtype=float)
        if self.params.size != self.n_params():
            raise ModelError(f"expected {self.n_params()} parameters for {self.widths}"
                             f" (sigma head={self.sigma_head}), got {self.params.size}")

    has_sigma = property(lambda self: self.sigma_head)

    def layer_shapes(self):
        shapes = [(self.widths[i + 1], self.widths[i]) for i in range(len(self.widths) - 1)]
        if self.sigma_head:
            shapes.append((1, self.widths[-2]))
        return shapes

    def n_params(self, sigma_head=None):
        sh = self.sigma_head if sigma_head is None else sigma_head
        n = sum(o * i + o for o, i in
                [(self.widths[k + 1], self.widths[k]) for k in range(len(self.widths) - 1)])
        return n + (self.widths[-2] + 1 if sh else 0)

    def unpack(self, params=None):
        """Split a flat vector into [(W, b), ...]; order: each layer's weights
        (row-major, out x in) then its bias, hidden layers first, then the mean
        head, then the log-sigma head if present."""
        p = self.params if params is None else params
        out, k = [], 0
        for o, i in self.layer_shapes():
            W = p[k:k + o * i].reshape(o, i)
            k += o * i
            b = p[k:k + o]
            k += o
            out.append((W, b))
        return out

    @classmethod
    def initialized(cls, seed=0, widths=(7, 32, 32, 1)):
        model = cls(widths=widths)
        rng = np.random.default_rng(seed)
        chunks = []
        shapes = model.layer_shapes()
        for n, (o, i) in enumerate(shapes):
            if n == len(shapes) - 1:
                W = np.zeros((o, i))  # output head starts at zero
            else:
                W = rng.normal(0.0, 1.0 / np.sqrt(i), size=(o, i))
            chunks += [W.ravel(), np.zeros(o)]
        model.params = np.concatenate(chunks)
        return model

    def with_sigma_head(self):
        """Copy with a zero-initialized log-sigma head appended."""
        if self.sigma_head:
            return InstabilityModel(self.widths, self.params.copy(), True, self.default_sigma)
        extra = np.zeros(self.widths[-2] + 1)
        return InstabilityModel(self.widths, np.concatenate([self.params, extra]), True, self.default_sigma)

    # forward / backward ----------------------------------------------------

    def _forward(self, X, params=None):
        layers = self.unpack(params)
        n_hidden = len(self.widths) - 2
        a = X / INPUT_SCALE if X.shape[1] == INPUT_SCALE.size else X
        acts = [a]
        for W, b in layers[:n_hidden]:
            a = np.tanh(a @ W.T + b)
            acts.append(a)
        Wm, bm = layers[n_hidden]
        mean = (a @ Wm.T + bm)[:, 0]
        if self.sigma_head:
            Ws, bs = layers[n_hidden + 1]
            log_sigma = (a @ Ws.T + bs)[:, 0]
        else:
            log_sigma = np.full(X.shape[0], np.log(self.default_sigma))
        return mean, log_sigma, acts

    def forward(self, X, params=None):
        mean, log_sigma, _ = self._forward(np.atleast_2d(X), params)
        return mean, log_sigma

    def _backward(self, acts, d_mean, d_log_sigma, params=None):
        layers = self.unpack(params)
        n_hidden = len(self.widths) - 2
        grads = [None] * len(layers)
        a_last = acts[-1]
        Wm, _ = layers[n_hidden]
        grads[n_hidden] = ((d_mean @ a_last)[None, :], np.array([d_mean.sum()]))
        da = d_mean[:, None] * Wm
        if self.sigma_head:
            Ws, _ = layers[n_hidden + 1]
            grads[n_hidden + 1] = ((d_log_sigma @ a_last)[None, :], np.array([d_log_sigma.sum()]))
            da = da + d_log_sigma[:, None] * Ws
        for li in range(n_hidden - 1, -1, -1):
            dz = da * (1.0 - acts[li + 1] ** 2)
            W, _ = layers[li]
            grads[li] = (dz.T @ acts[li], dz.sum(axis=0))
            da = dz @ W
        return np.concatenate([np.concatenate([gW.ravel(), gb.ravel()]) for gW, gb in grads])

    def loss_and_grad(self, X, y, kind="mse", params=None):
        """Batch loss and its gradient w.r.t. the flat parameter vector."""
        mean, log_sigma, acts = self._forward(X, params)
        n = X.shape[0]
        if kind == "mse":
            r = mean - y
            loss = float(np.mean(r ** 2))
            d_mean = 2.0 * r / n
            d_ls = np.zeros(n)
        elif kind == "nll":
            loss, d_mean, d_ls = gaussian_nll(mean, log_sigma, y, grad=True)
        else:
            raise ValueError(kind)
        return loss, self._backward(acts, d_mean, d_ls, params)

    def predict_arrays(self, features, v, w):
        f = np.atleast_2d(np.asarray(features, dtype=float))
        v = np.broadcast_to(np.asarray(v, dtype=float), f.shape[:1])
        w = np.broadcast_to(np.asarray(w, dtype=float), f.shape[:1])
        X = np.column_stack([f, v, w])
        mean, log_sigma = self.forward(X)
        return mean, np.exp(log_sigma)


def predict(model, patch: Patch, cmd: Command) -> InstabilityEstimate:
    mean, sigma = model.predict_arrays(patch_features(patch)[None], cmd.v, cmd.w)
    return InstabilityEstimate(float(mean[0]), float(sigma[0]))


def gaussian_nll(mean, log_sigma, target, grad=False):
    """Mean over samples of (mean - target)^2 / (2 exp(2 log_sigma)) + log_sigma."""
    mean = np.asarray(mean, dtype=float)
    log_sigma = np.asarray(log_sigma, dtype=float)
    r = mean - np.asarray(target, dtype=float)
    inv_var = np.exp(-2.0 * log_sigma)
    terms = 0.5 * r ** 2 * inv_var + log_sigma
    loss = float(np.mean(terms))
    if not grad:
        return loss
    n = max(terms.size, 1)
    return loss, r * inv_var / n, (1.0 - r ** 2 * inv_var) / n


# --- datasets and training ------------------------------------------------------

@dataclass
class InstabilityDataset:
    features: np.ndarray
    commands: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(-1, 5)
        self.commands = np.asarray(self.commands, dtype=float).reshape(-1, 2)
        self.delta = np.asarray(self.delta, dtype=float).ravel()

    def __len__(self):
        return self.delta.size

    @property
    def inputs(self):
        return np.column_stack([self.features, self.commands])

    def subset(self, idx):
        return InstabilityDataset(self.features[idx], self.commands[idx], self.delta[idx])


DATASET_COLUMNS = FEATURE_NAMES + ("v", "w", "delta")


def save_dataset(ds: InstabilityDataset, path, comments: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for line in comment_lines(comments):
            fh.write(line + "\n")
        wr = csv.writer(fh)
        wr.writerow(DATASET_COLUMNS)
        for f, c, d in zip(ds.features, ds.commands, ds.delta):
            wr.writerow([repr(float(x)) for x in (*f, *c, d)])


def load_dataset(path) -> InstabilityDataset:
    with open(path, newline="") as fh:
        rd = csv.reader(ln for ln in fh if not ln.startswith("#"))
        header = next(rd, None)
        if header is None or tuple(h.strip() for h in header) != DATASET_COLUMNS:
            raise ParameterError(f"{path}: expected columns {','.join(DATASET_COLUMNS)}")
        rows = [[float(x) for x in row] for row in rd if row]
    a = np.array(rows, dtype=float).reshape(-1, 8)
    return InstabilityDataset(a[:, :5], a[:, 5:7], a[:, 7])


@dataclass
class TrainingLog:
    epoch_losses: list = field(default_factory=list)
    initial_loss: float = float("nan")


def _run_epochs(model, ds, kind, epochs, lr, batch_size, seed, log_to):
    if len(ds) == 0:
        raise TrainingError("empty dataset")
    X, y = ds.inputs, ds.delta
    rng = np.random.default_rng(seed)
    log_to.initial_loss, _ = model.loss_and_grad(X, y, kind)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(ds))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss, g = model.loss_and_grad(X[idx], y[idx], kind)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingError(f"loss diverged at step {step} (epoch {epoch})")
            model.params = model.params - lr * g
            step += 1
        full, _ = model.loss_and_grad(X, y, kind)
        if not np.isfinite(full):
            raise TrainingError(f"loss diverged at step {step} (epoch {epoch})")
        log_to.epoch_losses.append(full)
        log.info("%s epoch %d: %.6f", kind, epoch + 1, full)
    return model


def train_phase1(model: InstabilityModel, ds: InstabilityDataset, epochs: int = 10,
                 lr: float = 1e-2, batch_size: int = 32, seed: int = 0, log_to: TrainingLog | None = None):
    """Fit the mean head by MSE with plain minibatch gradient descent.

    Returns a new model; the input model is left untouched.
    """
    if model.sigma_head:
        raise TrainingError("phase 1 expects a model without the sigma head")
    out = InstabilityModel(model.widths, model.params.copy(), False, model.default_sigma)
    return _run_epochs(out, ds, "mse", epochs, lr, batch_size, seed, log_to or TrainingLog())


def train_phase2(model: InstabilityModel, ds: InstabilityDataset, epochs: int = 10,
                 lr: float = 1e-3, batch_size: int = 32, seed: int = 0, log_to: TrainingLog | None = None):
    """Append (if needed) the log-sigma head and train all weights on the Gaussian NLL."""
    out = model.with_sigma_head()
    return _run_epochs(out, ds, "nll", epochs, lr, batch_size, seed, log_to or TrainingLog())


# --- model file -------------------------------------------------------------------

def save_model(model: InstabilityModel, path, comments: dict | None = None) -> None:
    """``INSTAB v1 <w0,w1,...> <0|1>``, optional ``#`` comment lines, then one
    parameter per line in unpack() order."""
    lines = [f"INSTAB v1 {','.join(map(str, model.widths))} {int(model.sigma_head)}"]
    lines += comment_lines(comments)
    lines += [repr(float(p)) for p in model.params]
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> InstabilityModel:
    lines = Path(path).read_text().split("\n")
    head = lines[0].split()
    if len(head) != 4 or head[:2] != ["INSTAB", "v1"]:
        raise ModelError(f"{path}: not an INSTAB v1 file")
    widths = tuple(int(x) for x in head[2].split(","))
    params = np.array([float(x) for x in lines[1:] if x.strip() and not x.startswith("#")])
    return InstabilityModel(widths, params, head[3] == "1")


def sample_oracle_dataset(maps, n_samples: int, seed: int = 0, noise: bool = True) -> InstabilityDataset:
    """Label random (pose, command) pairs on ``maps`` with oracle draws
    (``noise=False`` labels with the oracle mean instead).

    Poses are drawn uniformly over each map (rejecting footprints that leave
    it); commands uniformly over ``[0, 0.5] x [-0.75, 0.75]``.
    """
    from .terrain import extract_patches, features_batch

    rng = np.random.default_rng(seed)
    feats = np.empty((0, 5))
    while feats.shape[0] < n_samples:
        need = n_samples - feats.shape[0]
        k = rng.integers(len(maps), size=2 * need + 8)
        batch = []
        for mi, emap in enumerate(maps):
            sel = k == mi
            if not sel.any():
                continue
            w, h = emap.extent
            cnt = int(sel.sum())
            xs = emap.origin[0] + rng.uniform(0, w, cnt)
            ys = emap.origin[1] + rng.uniform(0, h, cnt)
            yaws = rng.uniform(-np.pi, np.pi, cnt)
            samples, valid = extract_patches(emap, xs, ys, yaws)
            if valid.any():
                batch.append(features_batch(samples[valid]))
        if batch:
            feats = np.vstack([feats] + batch)
    feats = feats[:n_samples]
    v = rng.uniform(0.0, V_MAX, n_samples)
    w = rng.uniform(-W_MAX, W_MAX, n_samples)
    z = rng.standard_normal(n_samples)
    delta = oracle_mean(feats, v, w) + (oracle_sigma(feats, v, w) * z if noise else 0.0)
    return InstabilityDataset(feats, np.column_stack([v, w]), delta)
