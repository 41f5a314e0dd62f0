"""Direct classifier: normalised histogram -> class probabilities.

Same trunk as the encoder (tanh fully connected layers) with a softmax
head, trained with cross-entropy.  This is the conventional inverse-map
recogniser the semantic pipeline is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingError
from .net import Adam, ModelParams, TrainConfig, _softmax, normalize_input

LABEL = "direct classifier"


@dataclass
class BaselineParams:
    weights: dict[str, np.ndarray]
    class_ids: tuple[int, ...]
    input_gain: float

    @property
    def n_hidden(self) -> int:
        return sum(1 for k in self.weights if k.startswith("W") and k[1:].isdigit())

    def as_model(self) -> ModelParams:
        """Wrap for checkpoint IO (shares the TSPN container)."""
        return ModelParams(self.weights, self.class_ids, self.input_gain)

    @classmethod
    def from_model(cls, p: ModelParams) -> "BaselineParams":
        return cls(p.weights, p.class_ids, p.input_gain)


def init_baseline(bin_count: int, class_ids, hidden, rng) -> BaselineParams:
    sizes = [bin_count, *hidden, len(class_ids)]
    w = {}
    for i in range(len(sizes) - 1):
        lim = np.sqrt(6.0 / (sizes[i] + sizes[i + 1]))
        name = "out" if i == len(sizes) - 2 else str(i)
        w[f"W{name}"] = rng.uniform(-lim, lim, size=(sizes[i], sizes[i + 1]))
        w[f"b{name}"] = np.zeros(sizes[i + 1])
    return BaselineParams(w, tuple(int(c) for c in class_ids), float(bin_count))


def _forward(p: BaselineParams, x):
    hs = [p.input_gain * x]
    for i in range(p.n_hidden):
        hs.append(np.tanh(hs[-1] @ p.weights[f"W{i}"] + p.weights[f"b{i}"]))
    return hs, _softmax(hs[-1] @ p.weights["Wout"] + p.weights["bout"])


def predict_proba(p: BaselineParams, x) -> np.ndarray:
    return _forward(p, np.atleast_2d(np.asarray(x, dtype=np.float64)))[1]


def cross_entropy_grad(p: BaselineParams, x, y_idx):
    """Mean cross-entropy and its gradient."""
    n = len(x)
    hs, prob = _forward(p, x)
    ce = -np.mean(np.log(prob[np.arange(n), y_idx] + 1e-300))
    d = prob.copy()
    d[np.arange(n), y_idx] -= 1.0
    d /= n
    g = {"Wout": hs[-1].T @ d, "bout": d.sum(axis=0)}
    da = d @ p.weights["Wout"].T
    for i in reversed(range(p.n_hidden)):
        dpre = da * (1.0 - hs[i + 1] ** 2)
        g[f"W{i}"] = hs[i].T @ dpre
        g[f"b{i}"] = dpre.sum(axis=0)
        if i:
            da = dpre @ p.weights[f"W{i}"].T
    return ce, {k: g[k] for k in p.weights}


def train_baseline(x, labels, cfg: TrainConfig, class_ids=None) -> tuple[BaselineParams, list[float]]:
    """Adam on cross-entropy with the STSP optimiser settings and trunk widths."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if class_ids is None:
        class_ids = np.unique(labels)
    if len(class_ids) < 2:
        raise ConfigError("baseline needs at least two classes")
    rng = np.random.default_rng(cfg.seed)
    p = init_baseline(x.shape[1], class_ids, cfg.enc_hidden, rng)
    lookup = {c: i for i, c in enumerate(p.class_ids)}
    y_idx = np.array([lookup[int(v)] for v in labels], dtype=np.intp)
    opt = Adam(p.weights, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        tot = 0.0
        for start in range(0, len(x), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            ce, g = cross_entropy_grad(p, x[b], y_idx[b])
            if not np.isfinite(ce):
                raise TrainingError("non-finite cross-entropy", epoch=epoch)
            opt.step(p.weights, g)
            tot += ce * len(b)
        trace.append(tot / len(x))
    return p, trace


def baseline_classify_many(counts, p: BaselineParams) -> np.ndarray:
    prob = predict_proba(p, normalize_input(counts))
    # argmax returns the first maximum; class_ids are stored ascending
    order = np.argsort(p.class_ids, kind="stable")
    ids = np.asarray(p.class_ids)[order]
    return ids[np.argmax(prob[:, order], axis=1)]


def baseline_classify(h, p: BaselineParams) -> int:
    counts = getattr(h, "counts", h)
    return int(baseline_classify_many(np.asarray(counts)[None, :], p)[0])
