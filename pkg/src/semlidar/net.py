"""Probabilistic encoder-decoder over normalised photon histograms.

Fully connected, tanh hidden layers, float64 throughout.  The encoder
emits a mean and a log-variance per latent dimension; the decoder maps a
latent sample to a softmax-normalised histogram.  Every class in the
training label set owns a learnable latent centre (one row of ``centers``,
the linear image of its one-hot label), and the KL term pulls each
posterior towards ``N(center[y], I)``.

Gradients are derived by hand; see ``forward_backward``.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptySignalError, FormatError, LabelError, TrainingError
from .io_util import atomic_write_bytes, atomic_write_text

CHECKPOINT_MAGIC = b"TSPN"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<4sHI")


@dataclass
class TrainConfig:
    latent_dim: int = 16
    enc_hidden: tuple[int, ...] = (128, 64)
    dec_hidden: tuple[int, ...] = (64, 128)
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    beta: float = 1.0
    rec_loss: str = "mse"
    center_scale: float = 1.0
    center_lr_scale: float = 1.0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.enc_hidden = tuple(int(h) for h in self.enc_hidden)
        self.dec_hidden = tuple(int(h) for h in self.dec_hidden)

    def validate(self) -> None:
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be >= 2")
        if any(h < 1 for h in self.enc_hidden + self.dec_hidden):
            raise ConfigError("hidden sizes must be positive")
        for name in ("lr", "batch_size", "epochs", "adam_eps", "center_scale", "center_lr_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.rec_loss not in ("mse", "poisson"):
            raise ConfigError(f"rec_loss must be 'mse' or 'poisson', got {self.rec_loss!r}")
        if not (0 <= self.adam_b1 < 1 and 0 <= self.adam_b2 < 1):
            raise ConfigError("Adam decay constants must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_hidden"] = list(self.enc_hidden)
        d["dec_hidden"] = list(self.dec_hidden)
        return d


@dataclass
class ModelParams:
    """Trainable weights plus the label set the centre rows refer to.

    ``input_gain`` rescales the unit-mass input so typical activations are
    O(1); it is fixed, not trained.
    """

    weights: dict[str, np.ndarray]
    class_ids: tuple[int, ...]
    input_gain: float = 1.0

    @property
    def bin_count(self) -> int:
        return self.weights["enc.W0"].shape[0]

    @property
    def latent_dim(self) -> int:
        return self.weights["enc.Wmu"].shape[1]

    @property
    def n_enc(self) -> int:
        return sum(1 for k in self.weights if k.startswith("enc.W") and k[5:].isdigit())

    @property
    def n_dec(self) -> int:
        return sum(1 for k in self.weights if k.startswith("dec.W") and k[5:].isdigit())

    def label_index(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(v)] for v in np.atleast_1d(labels)], dtype=np.intp)
        except KeyError as e:
            raise LabelError(f"label {e.args[0]} not in training label set {list(self.class_ids)}") from None

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.weights.items()}, self.class_ids, self.input_gain)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}

    def check_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.weights.values())


def init_params(bin_count: int, class_ids, cfg: TrainConfig, rng: np.random.Generator | None = None,
                input_gain: float | None = None) -> ModelParams:
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    d = cfg.latent_dim
    w: dict[str, np.ndarray] = {}

    def dense(n_in, n_out):
        # Glorot uniform
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_in, n_out)), np.zeros(n_out)

    sizes = [bin_count, *cfg.enc_hidden]
    for i in range(len(cfg.enc_hidden)):
        w[f"enc.W{i}"], w[f"enc.b{i}"] = dense(sizes[i], sizes[i + 1])
    w["enc.Wmu"], w["enc.bmu"] = dense(sizes[-1], d)
    w["enc.Wlv"], w["enc.blv"] = dense(sizes[-1], d)
    sizes = [d, *cfg.dec_hidden]
    for i in range(len(cfg.dec_hidden)):
        w[f"dec.W{i}"], w[f"dec.b{i}"] = dense(sizes[i], sizes[i + 1])
    w["dec.Wout"], w["dec.bout"] = dense(sizes[-1], bin_count)
    w["centers"] = cfg.center_scale * rng.standard_normal((len(class_ids), d))
    gain = float(bin_count) if input_gain is None else float(input_gain)
    return ModelParams(w, tuple(int(c) for c in class_ids), gain)


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def normalize_input(counts) -> np.ndarray:
    """L1-normalise a histogram (or each row of a stack of histograms)."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise EmptySignalError("histogram has no counts")
    return c / total


def _check_input(x, p: ModelParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.bin_count:
        raise ConfigError(f"input has {x.shape[-1]} bins, model expects {p.bin_count}")
    return x


def _encode_trace(x, p: ModelParams):
    w = p.weights
    hs = [p.input_gain * x]
    for i in range(p.n_enc):
        hs.append(np.tanh(hs[-1] @ w[f"enc.W{i}"] + w[f"enc.b{i}"]))
    mu = hs[-1] @ w["enc.Wmu"] + w["enc.bmu"]
    lv = hs[-1] @ w["enc.Wlv"] + w["enc.blv"]
    return hs, mu, lv


def encode(x, p: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and log-variance for one input vector or a batch."""
    x = _check_input(x, p)
    _, mu, lv = _encode_trace(x, p)
    return mu, lv


def reparameterize(mu, logvar, eps) -> np.ndarray:
    return np.asarray(mu) + np.exp(0.5 * np.asarray(logvar)) * np.asarray(eps)


def _softmax(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def _decode_trace(z, p: ModelParams):
    w = p.weights
    gs = [np.asarray(z, dtype=np.float64)]
    for i in range(p.n_dec):
        gs.append(np.tanh(gs[-1] @ w[f"dec.W{i}"] + w[f"dec.b{i}"]))
    logits = gs[-1] @ w["dec.Wout"] + w["dec.bout"]
    return gs, _softmax(logits)


def decode(z, p: ModelParams) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != p.latent_dim:
        raise ConfigError(f"latent has {z.shape[-1]} dims, model expects {p.latent_dim}")
    return _decode_trace(z, p)[1]


def rec_loss_terms(x, xhat, kind: str = "mse") -> np.ndarray:
    """Per-sample reconstruction loss.

    ``poisson`` is the Poisson negative log-likelihood of ``x`` under rates
    ``xhat`` with the ``x``-only constant dropped: ``sum(xhat - x log xhat)``.
    """
    if kind == "mse":
        return np.sum((xhat - x) ** 2, axis=-1)
    if kind == "poisson":
        return np.sum(xhat - x * np.log(xhat), axis=-1)
    raise ConfigError(f"unknown reconstruction loss {kind!r}")


def kl_terms(mu, logvar, center) -> np.ndarray:
    """KL(N(mu, diag exp(logvar)) || N(center, I)) per sample."""
    return 0.5 * np.sum(np.exp(logvar) + (mu - center) ** 2 - 1.0 - logvar, axis=-1)


def loss(x, label, p: ModelParams, eps, beta: float = 1.0, rec_loss: str = "mse"):
    """Mean (L_total, L_rec, L_KL) over the given samples."""
    x = _check_input(x, p)
    yi = p.label_index(label)
    _, mu, lv = _encode_trace(np.atleast_2d(x), p)
    z = reparameterize(mu, lv, np.atleast_2d(eps))
    _, xhat = _decode_trace(z, p)
    rec = rec_loss_terms(np.atleast_2d(x), xhat, rec_loss).mean()
    kl = kl_terms(mu, lv, p.weights["centers"][yi]).mean()
    return rec + beta * kl, rec, kl


def forward_backward(p: ModelParams, x, y_idx, eps, beta: float = 1.0, rec_loss: str = "mse"):
    """Batch-mean losses and their exact gradient with respect to every weight.

    ``y_idx`` indexes rows of ``centers`` (not raw class ids).
    Returns ``((L_total, L_rec, L_KL), grads)``.
    """
    w = p.weights
    x = np.atleast_2d(x)
    n = x.shape[0]
    hs, mu, lv = _encode_trace(x, p)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    gs, xhat = _decode_trace(z, p)
    C = w["centers"]
    diff = mu - C[y_idx]
    rec_i = rec_loss_terms(x, xhat, rec_loss)
    kl_i = 0.5 * np.sum(np.exp(lv) + diff**2 - 1.0 - lv, axis=1)
    rec, kl = rec_i.mean(), kl_i.mean()

    g: dict[str, np.ndarray] = {}
    # d(mean loss)/d logits through the softmax
    if rec_loss == "mse":
        dxhat = 2.0 * (xhat - x)
        dlog = xhat * (dxhat - np.sum(xhat * dxhat, axis=1, keepdims=True))
    else:
        dlog = xhat * x.sum(axis=1, keepdims=True) - x
    dlog /= n

    g["dec.Wout"] = gs[-1].T @ dlog
    g["dec.bout"] = dlog.sum(axis=0)
    da = dlog @ w["dec.Wout"].T
    for i in reversed(range(p.n_dec)):
        dpre = da * (1.0 - gs[i + 1] ** 2)
        g[f"dec.W{i}"] = gs[i].T @ dpre
        g[f"dec.b{i}"] = dpre.sum(axis=0)
        da = dpre @ w[f"dec.W{i}"].T
    dz = da

    dmu = dz + (beta / n) * diff
    dlv = dz * eps * 0.5 * std + (beta / n) * 0.5 * (np.exp(lv) - 1.0)
    dC = np.zeros_like(C)
    np.add.at(dC, y_idx, -(beta / n) * diff)
    g["centers"] = dC

    h = hs[-1]
    g["enc.Wmu"] = h.T @ dmu
    g["enc.bmu"] = dmu.sum(axis=0)
    g["enc.Wlv"] = h.T @ dlv
    g["enc.blv"] = dlv.sum(axis=0)
    da = dmu @ w["enc.Wmu"].T + dlv @ w["enc.Wlv"].T
    for i in reversed(range(p.n_enc)):
        dpre = da * (1.0 - hs[i + 1] ** 2)
        g[f"enc.W{i}"] = hs[i].T @ dpre
        g[f"enc.b{i}"] = dpre.sum(axis=0)
        if i:
            da = dpre @ w[f"enc.W{i}"].T
    grads = {k: g[k] for k in w}
    return (rec + beta * kl, rec, kl), grads


def grad(p: ModelParams, x, labels, eps, beta: float = 1.0, rec_loss: str = "mse") -> dict[str, np.ndarray]:
    """Gradient of the batch-mean total loss; ``labels`` are class ids."""
    x = _check_input(np.atleast_2d(x), p)
    if x.shape[0] == 0:
        raise ConfigError("empty batch")
    _, g = forward_backward(p, x, p.label_index(labels), np.atleast_2d(eps), beta, rec_loss)
    return g


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


class Adam:
    """Per-parameter adaptive steps from bias-corrected moment estimates."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, b1=0.9, b2=0.999, eps=1e-8,
                 lr_scale: dict[str, float] | None = None):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.lr_scale = lr_scale or {}
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, gk in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * gk
            v *= self.b2
            v += (1.0 - self.b2) * gk * gk
            lr = self.lr * self.lr_scale.get(k, 1.0)
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class LossTrace:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["epoch", "L_total", "L_rec", "L_KL"])
        for e, t, r, k in self.rows:
            wr.writerow([e, repr(t), repr(r), repr(k)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossTrace":
        rd = csv.DictReader(io.StringIO(text))
        return cls([(int(r["epoch"]), float(r["L_total"]), float(r["L_rec"]), float(r["L_KL"])) for r in rd])

    @property
    def total(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])


def train(x, labels, cfg: TrainConfig, class_ids=None, log=None) -> tuple[ModelParams, LossTrace]:
    """Mini-batch Adam on the mean total loss.

    ``x`` holds normalised histograms (rows), ``labels`` their class ids.
    Row 0 of the trace is the loss at initialisation; row ``e`` the
    full-set loss after epoch ``e``.  Both use one fixed noise draw so
    rows are comparable.  Fully determined by ``cfg.seed``.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if class_ids is None:
        class_ids = np.unique(labels)
    if len(class_ids) < 2:
        raise ConfigError("training needs at least two classes")
    if len(x) == 0:
        raise ConfigError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    p = init_params(x.shape[1], class_ids, cfg, rng)
    y_idx = p.label_index(labels)
    eval_eps = rng.standard_normal((len(x), cfg.latent_dim))
    opt = Adam(p.weights, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps,
               lr_scale={"centers": cfg.center_lr_scale})
    trace = LossTrace()

    def full_loss():
        (t, r, k), _ = forward_backward(p, x, y_idx, eval_eps, cfg.beta, cfg.rec_loss)
        return t, r, k

    trace.rows.append((0, *map(float, full_loss())))
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            eps = rng.standard_normal((len(b), cfg.latent_dim))
            (lt, _, _), g = forward_backward(p, x[b], y_idx[b], eps, cfg.beta, cfg.rec_loss)
            if not np.isfinite(lt):
                raise TrainingError("non-finite loss", epoch=epoch)
            opt.step(p.weights, g)
        row = full_loss()
        if not (np.all(np.isfinite(row)) and p.check_finite()):
            raise TrainingError("non-finite loss", epoch=epoch)
        trace.rows.append((epoch, *map(float, row)))
        if log is not None:
            log(epoch, row)
    return p, trace


def extract_features(counts, p: ModelParams) -> np.ndarray:
    """Encoder means for a stack of raw count histograms (no sampling)."""
    mu, _ = encode(normalize_input(counts), p)
    return mu


def extract_feature(h, p: ModelParams) -> np.ndarray:
    counts = getattr(h, "counts", h)
    return extract_features(np.asarray(counts)[None, :], p)[0]


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------


def params_to_bytes(p: ModelParams, meta: dict | None = None) -> bytes:
    head = {
        "class_ids": list(p.class_ids),
        "input_gain": p.input_gain,
        "arrays": [[k, list(v.shape)] for k, v in p.weights.items()],
        "meta": meta or {},
    }
    hjson = json.dumps(head, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in p.weights.values())
    return _CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hjson)) + hjson + body


def params_from_bytes(buf: bytes, path=None) -> tuple[ModelParams, dict]:
    if len(buf) < _CK_HEADER.size:
        raise FormatError("truncated checkpoint header", offset=len(buf), path=path)
    magic, version, hlen = _CK_HEADER.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0, path=path)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4, path=path)
    off = _CK_HEADER.size
    try:
        head = json.loads(buf[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("unreadable checkpoint header", offset=off, path=path) from None
    off += hlen
    weights = {}
    for name, shape in head["arrays"]:
        n = int(np.prod(shape))
        if len(buf) < off + 8 * n:
            raise FormatError(f"truncated array {name}", offset=len(buf), path=path)
        weights[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", offset=off, path=path)
    return ModelParams(weights, tuple(head["class_ids"]), float(head["input_gain"])), head["meta"]


def save_params(p: ModelParams, path, meta: dict | None = None) -> None:
    atomic_write_bytes(path, params_to_bytes(p, meta))


def load_params(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    return params_from_bytes(path.read_bytes(), path=path)


def save_trace(trace: LossTrace, path) -> None:
    atomic_write_text(path, trace.to_csv())
