"""Evaluation protocols: stratified splits, closed-set accuracy per SNR and
open-set accuracy with and without knowledge-base self-update.

Open-set scoring.  A known-class sample is correct iff it is predicted
Known with its own class.  An unknown-class sample is correct iff it is
predicted Unknown, or (update on) it lands on a self-added entry whose
majority truth class, computed once at the end of the stream, is its own.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import skb as skb_mod
from .baseline import LABEL as BASELINE_LABEL
from .baseline import BaselineParams, baseline_classify_many
from .errors import ConfigError, ProtocolError
from .io_util import atomic_write_bytes, atomic_write_text
from .net import ModelParams, extract_features
from .photon import SNR_DEFINITION, Dataset

log = logging.getLogger(__name__)

SEMANTIC = "semantic (SKB matching)"
SEMANTIC_UPDATE = "semantic + SKB update"
SEMANTIC_NO_UPDATE = "semantic, no SKB update"


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    seed: int = 0
    min_cell: int = 10

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or abs(self.train + self.val + self.test - 1) > 1e-9:
            raise ConfigError("split fractions must be non-negative and sum to 1")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "val", "test")}


def split_dataset(ds: Dataset, spec: SplitSpec = SplitSpec()) -> Split:
    """Stratified per (class, SNR) cell; deterministic given ``spec.seed``."""
    parts = ([], [], [])
    levels = ds.snr_levels()
    for cid in ds.class_ids():
        for si, snr in enumerate(levels):
            idx = np.flatnonzero((ds.labels == cid) & (ds.snr_db == snr))
            if len(idx) == 0:
                continue
            if len(idx) < spec.min_cell:
                raise ProtocolError(
                    f"cell (class {int(cid)}, snr {float(snr):g} dB) has {len(idx)} samples; "
                    f"need at least {spec.min_cell}"
                )
            rng = np.random.default_rng([spec.seed, int(cid), si])
            idx = rng.permutation(idx)
            n_tr = int(round(spec.train * len(idx)))
            n_va = int(round(spec.val * len(idx)))
            parts[0].append(idx[:n_tr])
            parts[1].append(idx[n_tr:n_tr + n_va])
            parts[2].append(idx[n_tr + n_va:])
    tr, va, te = (np.sort(np.concatenate(p)) if p else np.empty(0, dtype=np.intp) for p in parts)
    return Split(tr, va, te)


def select(ds: Dataset, idx, classes=None, snr=None) -> np.ndarray:
    """Subset of ``idx`` restricted to the given classes and/or SNR level."""
    idx = np.asarray(idx)
    keep = np.ones(len(idx), dtype=bool)
    if classes is not None:
        keep &= np.isin(ds.labels[idx], np.asarray(list(classes)))
    if snr is not None:
        keep &= ds.snr_db[idx] == np.float32(snr)
    return idx[keep]


# ---------------------------------------------------------------------------
# Result tables and prediction logs
# ---------------------------------------------------------------------------


@dataclass
class ResultRow:
    method: str
    x: float
    accuracy: float
    n: int
    config_hash: str


@dataclass
class ResultTable:
    name: str
    x_label: str
    rows: list[ResultRow] = field(default_factory=list)
    logs: dict[str, list[dict]] = field(default_factory=dict, compare=False)
    meta: dict = field(default_factory=dict, compare=False)

    COLUMNS = ("method", "x", "accuracy", "n", "config_hash")

    def add(self, method, x, accuracy, n, config_hash) -> None:
        acc = float(accuracy)
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.rows.append(ResultRow(method, float(x), acc, int(n), config_hash))

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def series(self, method: str):
        rows = [r for r in self.rows if r.method == method]
        return np.array([r.x for r in rows]), np.array([r.accuracy for r in rows])

    def lookup(self, method: str, x: float) -> ResultRow:
        for r in self.rows:
            if r.method == method and np.isclose(r.x, x):
                return r
        raise KeyError((method, x))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.COLUMNS)
        for r in self.rows:
            wr.writerow([r.method, repr(r.x), repr(r.accuracy), r.n, r.config_hash])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, name: str = "", x_label: str = "x") -> "ResultTable":
        t = cls(name, x_label)
        for r in csv.DictReader(io.StringIO(text)):
            t.rows.append(ResultRow(r["method"], float(r["x"]), float(r["accuracy"]), int(r["n"]),
                                    r["config_hash"]))
        return t


def accuracy_from_log(records: list[dict]) -> float:
    if not records:
        return 0.0
    return sum(1 for r in records if r["correct"]) / len(records)


def write_log(records: list[dict], path) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_text(path, text)


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Closed set
# ---------------------------------------------------------------------------


def confusion_matrix(truth, pred, class_ids) -> np.ndarray:
    pos = {c: i for i, c in enumerate(class_ids)}
    m = np.zeros((len(class_ids), len(class_ids)), dtype=np.int64)
    for t, p in zip(truth, pred):
        m[pos[int(t)], pos[int(p)]] += 1
    return m


def eval_closed(ds: Dataset, split: Split, model: ModelParams, skb: skb_mod.Skb,
                baseline: BaselineParams | None = None, config_hash: str = "",
                features: np.ndarray | None = None) -> ResultTable:
    """Per-SNR test accuracy of SKB matching and, if given, the direct classifier.

    Only classes present in ``skb`` are scored; other classes are ignored.
    """
    classes = skb.class_ids
    test = select(ds, split.test, classes=classes)
    if features is None:
        feats = extract_features(ds.counts[test], model)
    else:
        feats = features[test]
    sem_pred = skb_mod.match_many(feats, skb)
    preds = {SEMANTIC: sem_pred}
    if baseline is not None:
        preds[BASELINE_LABEL] = baseline_classify_many(ds.counts[test], baseline)
    table = ResultTable("closed_set", "snr_db")
    table.meta["snr_definition"] = SNR_DEFINITION
    truth = ds.labels[test].astype(np.int64)
    for method, pred in preds.items():
        table.logs[method] = [
            {"sample": int(i), "truth": int(t), "predicted": int(p), "snr_db": float(ds.snr_db[i]),
             "correct": bool(t == p)}
            for i, t, p in zip(test, truth, pred)
        ]
        for snr in ds.snr_levels():
            sel = ds.snr_db[test] == snr
            if not sel.any():
                continue
            table.add(method, float(snr), np.mean(pred[sel] == truth[sel]), int(sel.sum()), config_hash)
    return table


# ---------------------------------------------------------------------------
# Open set
# ---------------------------------------------------------------------------


@dataclass
class OpenSetProtocol:
    known_classes: list[int]
    unknown_classes: list[int]
    update: bool = True
    tau_target: float = 0.95
    order_seed: int = 0
    maturity: int = 20
    radius: float = 0.15
    var_floor: float = skb_mod.VAR_FLOOR

    def validate(self) -> None:
        overlap = set(self.known_classes) & set(self.unknown_classes)
        if overlap:
            raise ProtocolError(f"classes {sorted(overlap)} are both known and unknown")
        if len(self.known_classes) < 2:
            raise ProtocolError("need at least two known classes")
        if not 0 < self.tau_target < 1:
            raise ProtocolError("tau_target must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StreamResult:
    records: list[dict]
    skb: skb_mod.Skb
    mapping: dict[int, int]
    tau: float
    promotions: list[skb_mod.Promotion]

    @property
    def accuracy(self) -> float:
        return accuracy_from_log(self.records)

    def sub_accuracy(self, known: bool) -> float:
        return accuracy_from_log([r for r in self.records if r["is_known"] == known])


def majority_mapping(records: list[dict], promotions: list[skb_mod.Promotion]) -> dict[int, int]:
    """Truth class for each self-added entry: majority over its members and
    the samples later predicted to it; ties go to the lowest class id."""
    votes: dict[int, Counter] = {p.class_id: Counter(t for t in p.tags) for p in promotions}
    for r in records:
        if r["decision"] == "known" and r["predicted"] in votes:
            votes[r["predicted"]][r["truth"]] += 1
    return {cid: min(v.items(), key=lambda kv: (-kv[1], kv[0]))[0] for cid, v in votes.items()}


def score_records(records: list[dict], mapping: dict[int, int], update: bool) -> None:
    for r in records:
        if r["is_known"]:
            r["correct"] = r["decision"] == "known" and r["predicted"] == r["truth"]
        elif r["decision"] == "unknown":
            r["correct"] = True
        else:
            r["correct"] = bool(update and mapping.get(r["predicted"]) == r["truth"])


def run_stream(features: np.ndarray, truths: np.ndarray, sample_ids: np.ndarray, known: set[int],
               skb0: skb_mod.Skb, tau: float, protocol: OpenSetProtocol, order_seed) -> StreamResult:
    """Classify a shuffled stream, updating the SKB when ``protocol.update``."""
    order = np.random.default_rng(order_seed).permutation(len(features))
    kb = skb0
    buf = skb_mod.UnknownBuffer(protocol.maturity, protocol.radius, protocol.var_floor)
    trained = set(int(c) for c in skb0.class_ids)
    records, promotions = [], []
    for pos in order:
        z = features[pos]
        truth = int(truths[pos])
        d = skb_mod.detect(z, kb, tau)
        rec = {
            "sample": int(sample_ids[pos]),
            "truth": truth,
            "is_known": truth in known,
            "max_p": d.max_likelihood,
            "decision": "known" if d.known else "unknown",
            "predicted": d.class_id if d.known else None,
            "self_added": bool(d.known and d.class_id not in trained),
        }
        records.append(rec)
        if not d.known and protocol.update:
            buf, kb, promo = skb_mod.absorb_unknown(z, buf, kb, tag=truth)
            if promo is not None:
                promotions.append(promo)
    mapping = majority_mapping(records, promotions) if protocol.update else {}
    score_records(records, mapping, protocol.update)
    return StreamResult(records, kb, mapping, tau, promotions)


def calibrate_for(ds: Dataset, split: Split, features: np.ndarray, skb: skb_mod.Skb, known, snr, target):
    val = select(ds, split.val, classes=known, snr=snr)
    return skb_mod.calibrate_tau(features[val], skb, target)


def open_stream_indices(ds: Dataset, split: Split, known, unknown, snr) -> np.ndarray:
    """Test-split samples of known classes plus every sample of the unknown
    classes at the given SNR level."""
    k = select(ds, split.test, classes=known, snr=snr)
    u = select(ds, np.arange(len(ds)), classes=unknown, snr=snr) if len(unknown) else np.empty(0, np.intp)
    return np.concatenate([k, u]).astype(np.intp)


def eval_open(ds: Dataset, split: Split, model: ModelParams, skb0: skb_mod.Skb, protocol: OpenSetProtocol,
              sweep: str = "snr", config_hash: str = "", features: np.ndarray | None = None) -> ResultTable:
    """Open-set accuracy for one sweep.

    ``sweep="snr"``: one unknown class (the first listed), every SNR level.
    ``sweep="unknowns"``: top SNR level, the first 1..K unknown classes.
    A run with no unknown classes is the closed-set protocol, so detection
    is disabled (threshold 0) and the result equals plain SKB matching.
    Thresholds, cluster mappings and sub-accuracies go to ``table.meta``.
    """
    protocol.validate()
    known = list(protocol.known_classes)
    if set(int(c) for c in skb0.class_ids) - set(known):
        raise ProtocolError("skb0 contains classes outside the known set")
    if set(int(c) for c in model.class_ids) & set(protocol.unknown_classes):
        raise ProtocolError("model was trained on an unknown class")
    if features is None:
        features = extract_features(ds.counts, model)
    method = SEMANTIC_UPDATE if protocol.update else SEMANTIC_NO_UPDATE
    levels = ds.snr_levels()
    if sweep == "snr":
        table = ResultTable("open_set_vs_snr", "snr_db")
        first = protocol.unknown_classes[:1]
        runs = [(float(snr), snr, first, [protocol.order_seed, 0, si]) for si, snr in enumerate(levels)]
    elif sweep == "unknowns":
        table = ResultTable("open_set_vs_unknowns", "unknown classes")
        top = levels.max()
        counts = range(1, len(protocol.unknown_classes) + 1) if protocol.unknown_classes else [0]
        runs = [(float(k), top, protocol.unknown_classes[:k], [protocol.order_seed, 1, k]) for k in counts]
    else:
        raise ConfigError(f"unknown sweep {sweep!r}")
    table.meta["snr_definition"] = SNR_DEFINITION
    table.meta["runs"] = []
    for x, snr, unknown, seed in runs:
        idx = open_stream_indices(ds, split, known, unknown, snr)
        if unknown:
            tau = calibrate_for(ds, split, features, skb0, known, snr, protocol.tau_target)
        else:
            tau = 0.0
        res = run_stream(features[idx], ds.labels[idx], idx, set(known), skb0, tau, protocol, seed)
        table.logs[f"{method}|{x:g}"] = res.records
        table.add(method, x, res.accuracy, len(res.records), config_hash)
        table.meta["runs"].append({
            "method": method, "x": x, "snr_db": float(snr), "unknown_classes": [int(u) for u in unknown],
            "tau": tau, "accuracy": res.accuracy, "known_accuracy": res.sub_accuracy(True),
            "unknown_accuracy": res.sub_accuracy(False), "entries_added": len(res.promotions),
            "mapping": {str(k): v for k, v in res.mapping.items()}, "order_seed": seed,
        })
    return table


def merge_tables(tables: list[ResultTable]) -> ResultTable:
    """Concatenate same-named tables (e.g. update on and off)."""
    out = ResultTable(tables[0].name, tables[0].x_label)
    out.meta.update({k: v for k, v in tables[0].meta.items() if k != "runs"})
    out.meta["runs"] = []
    for t in tables:
        if t.name != out.name:
            raise ConfigError(f"cannot merge {t.name} into {out.name}")
        out.rows.extend(t.rows)
        out.logs.update(t.logs)
        out.meta["runs"].extend(t.meta.get("runs", []))
    return out


def audit_skb_sources(features: np.ndarray, ds: Dataset, split: Split, skb: skb_mod.Skb) -> bool:
    """True iff every trained entry equals the statistics of its class's
    validation features (and nothing else)."""
    for e in skb.entries:
        if e.provenance != skb_mod.Provenance.TRAINED:
            continue
        val = select(ds, split.val, classes=[e.class_id])
        ref = skb_mod.build_skb(features[val], ds.labels[val]).entry(e.class_id)
        if not (np.array_equal(ref.center, e.center) and np.array_equal(ref.var, e.var)
                and ref.support == e.support):
            return False
    return True


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _plot(table: ResultTable, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "semlidar", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in table.methods():
            x, y = table.series(m)
            ax.plot(x, y, marker="o", label=m)
        ax.set_xlabel(table.x_label)
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def emit_report(tables: list[ResultTable], out_dir) -> list[Path]:
    """Write ``<name>.csv`` and, for non-empty tables, ``<name>.svg``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in tables:
        p = out_dir / f"{t.name}.csv"
        atomic_write_text(p, t.to_csv())
        written.append(p)
        if not t.rows:
            log.warning("table %s is empty; no plot written", t.name)
            continue
        svg = out_dir / f"{t.name}.svg"
        _plot(t, svg)
        written.append(svg)
    return written
