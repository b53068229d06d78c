"""Dual-task training with batch focus, entity-level evaluation, TTN grid, gate analysis."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Corpus, Sentence, Vocab, encode_batch, iobes_to_spans, split_tag
from .errors import ConfigError, TrainingDiverged
from .model import COMPONENTS, ModelConfig, NerModel, total_loss
from .optim import AdamState, adam_step, clip_grad_norm
from .sharing import ALL_CODES

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 0.01
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 5
    min_epochs: int = 1
    seed: int = 0
    fraction: float = 1.0
    clip: float = 5.0
    eval_batch_size: int = 64
    sort_window: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.sort_window < 0:
            raise ConfigError("sort_window must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 1 <= self.min_epochs <= self.max_epochs:
            raise ConfigError("min_epochs must be in [1, max_epochs]")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("fraction must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from ints and strings."""
    h = 0x811C9DC5
    for p in parts:
        for byte in str(p).encode() + b"\x00":
            h = ((h ^ byte) * 0x01000193) & 0xFFFFFFFF
    return h


# ---------------------------------------------------------------- schedule

def make_schedule(source: Corpus | None, target: Corpus, batch_size: int,
                  seed: int, sort_window: int = 0) -> list[tuple[str, list[int]]]:
    """Task-pure batches of both corpora in a seeded random interleaving.

    With ``sort_window`` > 0 each run of ``sort_window`` batches of the
    shuffled order is sorted by sentence length before cutting, so batches
    hold sentences of similar length and carry less padding.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    schedule = []
    for task, corpus in (("source", source), ("target", target)):
        if corpus is None or len(corpus) == 0:
            continue
        order = rng.permutation(len(corpus))
        if sort_window > 0:
            lengths = np.array([len(s) for s in corpus.sentences])
            span = sort_window * batch_size
            order = np.concatenate([
                chunk[np.argsort(lengths[chunk], kind="stable")]
                for chunk in (order[i: i + span] for i in range(0, len(order), span))
            ])
        for i in range(0, len(order), batch_size):
            schedule.append((task, order[i: i + batch_size].tolist()))
    perm = rng.permutation(len(schedule))
    return [schedule[i] for i in perm]


# ---------------------------------------------------------------- evaluation

@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_type: dict[str, dict[str, float]] = field(default_factory=dict)
    n_gold: int = 0
    n_pred: int = 0
    n_correct: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    if n_pred:
        p = 100.0 * tp / n_pred
    else:
        p = 100.0 if n_gold == 0 else 0.0
    if n_gold:
        r = 100.0 * tp / n_gold
    else:
        r = 100.0 if n_pred == 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def span_metrics(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> Metrics:
    """Exact span-and-type matching over aligned gold/predicted tag sequences."""
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sequences but {len(pred)} predictions")
    tp = defaultdict(int)
    ng = defaultdict(int)
    npred = defaultdict(int)
    for g, p in zip(gold, pred):
        if len(g) != len(p):
            raise ValueError("gold and predicted sequences differ in length")
        gs, ps = iobes_to_spans(g), iobes_to_spans(p)
        for s in gs:
            ng[s[2]] += 1
        for s in ps:
            npred[s[2]] += 1
        for s in gs & ps:
            tp[s[2]] += 1
    T, G, P = sum(tp.values()), sum(ng.values()), sum(npred.values())
    p, r, f = prf(T, P, G)
    per_type = {}
    for ty in sorted(set(ng) | set(npred)):
        tp_, pp, rr = tp[ty], npred[ty], ng[ty]
        a, b, c = prf(tp_, pp, rr)
        per_type[ty] = {"precision": a, "recall": b, "f1": c, "support": rr, "predicted": pp}
    gold_types = [ty for ty in per_type if ng[ty] > 0]
    if gold_types:
        mp = sum(per_type[t]["precision"] for t in gold_types) / len(gold_types)
        mr = sum(per_type[t]["recall"] for t in gold_types) / len(gold_types)
        mf = sum(per_type[t]["f1"] for t in gold_types) / len(gold_types)
    else:
        mp, mr, mf = p, r, f
    return Metrics(p, r, f, mp, mr, mf, per_type, G, P, T)


def evaluate(model: NerModel, corpus: Corpus | Sequence[Sentence], batch_size: int = 64,
             return_predictions: bool = False):
    sents = corpus.sentences if isinstance(corpus, Corpus) else list(corpus)
    pred = model.predict(sents, batch_size=batch_size)
    m = span_metrics([s.tags for s in sents], pred)
    return (m, pred) if return_predictions else m


# ---------------------------------------------------------------- training

class EarlyStopping:
    """Track the best dev score; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainResult:
    best_epoch: int
    best_dev_f1: float
    best_state: dict[str, np.ndarray]
    history: list[dict]
    seconds: float


def train(model: NerModel, source: Corpus | None, target: Corpus, dev: Corpus, cfg: TrainConfig,
          log_path: str | Path | None = None, diverge_dir: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train with shuffled batch focus and early stopping on target dev micro F1.

    Each batch updates the shared parameters plus those of its own task.
    The model ends holding the best checkpoint.
    """
    if source is not None and "source" not in model.tasks:
        raise ConfigError("source corpus given but the model has no source task")
    if "source" not in model.tasks:
        source = None
    t0 = time.perf_counter()
    state = AdamState.for_store(model.store, lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    best_state = model.store.snapshot()
    history = []
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    corpora = {"source": source, "target": target}
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            schedule = make_schedule(source, target, cfg.batch_size, derive_seed(cfg.seed, "sched", epoch),
                                     cfg.sort_window)
            rng = np.random.default_rng(derive_seed(cfg.seed, "dropout", epoch))
            losses = {"source": 0.0, "target": 0.0}
            tokens = {"source": 0, "target": 0}
            for task, idx in schedule:
                sents = [corpora[task].sentences[i] for i in idx]
                batch = encode_batch(sents, model.vocab, task)
                with ad.Tape():
                    res = model.forward_train(batch, task, rng)
                    loss = total_loss(model, res.loss, cfg.lam)
                    value = loss.item()
                    if not math.isfinite(value):
                        ckpt = None
                        if diverge_dir is not None:
                            ckpt = str(Path(diverge_dir) / "diverged.npz")
                            model.save(ckpt)
                        raise TrainingDiverged(
                            f"non-finite loss at epoch {epoch} ({task} batch)", ckpt)
                    ad.backward(loss)
                masks = ("shared", task)
                clip_grad_norm(model.store, model.store.names(masks), cfg.clip)
                adam_step(model.store, state, masks)
                losses[task] += res.loss.item()
                tokens[task] += res.n_tokens
            dev_m = evaluate(model, dev, cfg.eval_batch_size)
            rec = {
                "epoch": epoch,
                "target_loss": losses["target"] / max(tokens["target"], 1),
                "source_loss": losses["source"] / max(tokens["source"], 1) if source else None,
                "dev_f1": dev_m.f1,
            }
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
                logf.flush()
            if on_epoch:
                on_epoch(rec)
            log.info("epoch %d target loss %.4f dev F1 %.2f", epoch, rec["target_loss"], dev_m.f1)
            improved = dev_m.f1 > stopper.best
            stop = stopper.update(epoch, dev_m.f1)
            if improved:
                best_state = model.store.snapshot()
            if stop and epoch >= cfg.min_epochs:
                break
    finally:
        if logf:
            logf.close()
    model.store.restore(best_state)
    return TrainResult(stopper.best_epoch, stopper.best, best_state, history,
                       time.perf_counter() - t0)


# ---------------------------------------------------------------- experiments

@dataclass
class RunResult:
    mode: str
    seed: int
    metrics: Metrics | None
    best_epoch: int = 0
    dev_f1: float = float("nan")
    seconds: float = 0.0
    error: str | None = None


def run_single(mode: str, model_cfg: ModelConfig, train_cfg: TrainConfig, vocab: Vocab,
               source: Corpus | None, target: Corpus, dev: Corpus, test: Corpus,
               word_init: np.ndarray | None = None, seed_key: str | None = None) -> tuple[RunResult, NerModel]:
    """Build, train and test one model; ``seconds`` is the wall time of all three."""
    t0 = time.perf_counter()
    cfg = ModelConfig(**{**asdict(model_cfg), "mode": mode})
    init_seed = derive_seed(train_cfg.seed, seed_key or cfg.mode)
    model = NerModel(cfg, vocab, seed=init_seed,
                     word_init=None if word_init is None else word_init.copy())
    res = train(model, source if cfg.mode != "baseline" else None, target, dev, train_cfg)
    m = evaluate(model, test, train_cfg.eval_batch_size)
    return RunResult(cfg.mode, train_cfg.seed, m, res.best_epoch, res.best_dev_f1,
                     time.perf_counter() - t0), model


@dataclass
class GridResult:
    rows: list[RunResult]
    extras: list[RunResult] = field(default_factory=list)

    def ttn_rows(self) -> list[RunResult]:
        return [r for r in self.rows if r.metrics is not None]

    def summary(self, key: str = "f1") -> dict:
        vals = [getattr(r.metrics, key) for r in self.ttn_rows()]
        ranked = sorted(self.ttn_rows(), key=lambda r: getattr(r.metrics, key), reverse=True)
        return {
            "n": len(vals),
            "mean": float(np.mean(vals)) if vals else float("nan"),
            "std": float(np.std(vals)) if vals else float("nan"),
            "best": ranked[0].mode if ranked else None,
            "worst": ranked[-1].mode if ranked else None,
        }


def run_ttn_grid(source: Corpus, target: Corpus, dev: Corpus, test: Corpus, vocab: Vocab,
                 model_cfg: ModelConfig, train_cfg: TrainConfig, codes: Sequence[str] = ALL_CODES,
                 extra_modes: Sequence[str] = (), word_init: np.ndarray | None = None,
                 on_result: Callable[[RunResult], None] | None = None) -> GridResult:
    """Train every TTN code (plus ``extra_modes``) from its own seed-derived init."""
    rows, extras = [], []
    for mode in [f"ttn:{c}" for c in codes] + list(extra_modes):
        try:
            r, _ = run_single(mode, model_cfg, train_cfg, vocab, source, target, dev, test, word_init)
        except (TrainingDiverged, FloatingPointError, ValueError) as exc:
            log.warning("%s failed: %s", mode, exc)
            r = RunResult(mode, train_cfg.seed, None, error=str(exc))
        (rows if mode.startswith("ttn:") else extras).append(r)
        if on_result:
            on_result(r)
    return GridResult(rows, extras)


def format_grid_table(result: GridResult, k: int = 3, title: str | None = None) -> str:
    """Best-k / worst-k / average layout with the extra (baseline, DTN) rows."""
    def line(name, m):
        return f"{name:<12}{m.precision:>10.2f}{m.recall:>10.2f}{m.f1:>10.2f}"

    ok = sorted(result.ttn_rows(), key=lambda r: r.metrics.f1, reverse=True)
    out = []
    if title:
        out.append(title)
    out.append(f"{'Model':<12}{'Precision':>10}{'Recall':>10}{'F1':>10}")
    base = [r for r in result.extras if r.mode == "baseline" and r.metrics]
    for r in base:
        out.append(line("Baseline", r.metrics))
    out.append("Highest Performance TTN")
    for r in ok[:k]:
        out.append(line(r.mode[4:], r.metrics))
    out.append("Lowest Performance TTN")
    for r in ok[-k:] if len(ok) > k else []:
        out.append(line(r.mode[4:], r.metrics))
    if ok:
        mp = np.mean([r.metrics.precision for r in ok])
        mr = np.mean([r.metrics.recall for r in ok])
        s = result.summary()
        out.append(f"{'Avg.':<12}{mp:>10.2f}{mr:>10.2f}{s['mean']:>10.2f} +/- {s['std']:.2f}")
    for r in result.extras:
        if r.mode == "baseline":
            continue
        name = {"dtn": "DTN", "dtn-hs": "DTN (HS)"}.get(r.mode, r.mode)
        out.append(line(name, r.metrics) if r.metrics else f"{name:<12} failed: {r.error}")
    failed = [r for r in result.rows if r.metrics is None]
    for r in failed:
        out.append(f"{r.mode[4:]:<12} failed: {r.error}")
    return "\n".join(out) + "\n"


def write_grid_csv(result: GridResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "seed", "precision", "recall", "f1", "macro_f1", "best_epoch",
                    "dev_f1", "seconds", "error"])
        for r in result.rows + result.extras:
            m = r.metrics
            w.writerow([r.mode, r.seed,
                        *(f"{x:.6f}" for x in ((m.precision, m.recall, m.f1, m.macro_f1) if m else
                                                (math.nan,) * 4)),
                        r.best_epoch, f"{r.dev_f1:.6f}", f"{r.seconds:.2f}", r.error or ""])


# ---------------------------------------------------------------- gates

@dataclass
class GateTraceRecord:
    sentence_id: int
    token_index: int
    token: str
    gold_tag: str
    component: str
    gate: str
    mean_value: float
    task: str = "target"


TRACE_COLUMNS = ["sentence_id", "token_index", "token", "gold_tag", "component", "gate", "mean_value"]


def collect_gate_traces(model: NerModel, corpus: Corpus | Sequence[Sentence],
                        batch_size: int = 64) -> list[GateTraceRecord]:
    """One record per token, component and gate from a greedy pass over ``corpus``."""
    if not model.gated:
        raise ConfigError("gate traces need a dtn or dtn-hs model")
    sents = corpus.sentences if isinstance(corpus, Corpus) else list(corpus)
    out = []
    for start in range(0, len(sents), batch_size):
        chunk = sents[start: start + batch_size]
        _, gates, _ = model.decode_batch(chunk, capture_gates=True)
        for b, s in enumerate(chunk):
            for t, (tok, tag) in enumerate(zip(s.tokens, s.tags)):
                for comp in COMPONENTS:
                    g1, g2 = gates[comp]
                    for gname, g in (("g1", g1), ("g2", g2)):
                        if g is None:
                            continue
                        out.append(GateTraceRecord(start + b, t, tok, tag, comp, gname,
                                                   float(np.mean(g[t, b]))))
    return out


def write_traces_csv(records: Iterable[GateTraceRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in records:
            w.writerow([r.sentence_id, r.token_index, r.token, r.gold_tag, r.component, r.gate,
                        repr(r.mean_value)])
            n += 1
    return n


def read_traces_csv(path: str | Path) -> list[GateTraceRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [GateTraceRecord(int(r["sentence_id"]), int(r["token_index"]), r["token"], r["gold_tag"],
                            r["component"], r["gate"], float(r["mean_value"])) for r in rows]


def _tag_group(tag: str) -> str:
    prefix, kind = split_tag(tag)
    return "O" if kind is None else kind


def aggregate_gates(records: Sequence[GateTraceRecord], by: str = "tag",
                    gate: str = "g1") -> dict[str, dict[str, float]]:
    """Mean gate value per group and component.

    ``by="tag"``: rows are entity types of the gold tag, plus ``"Overall"``
    over every token (outside tokens included).  ``by="component"``: one
    ``"Overall"`` row.  ``by="token"``: one row per ``sentence:token``.
    """
    if by not in ("tag", "component", "token"):
        raise ConfigError(f"cannot group gates by {by!r}")
    sums: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(lambda: [0.0, 0]))
    for r in records:
        if r.gate != gate:
            continue
        keys = ["Overall"]
        if by == "tag":
            grp = _tag_group(r.gold_tag)
            if grp != "O":
                keys.append(grp)
        elif by == "token":
            keys = [f"{r.sentence_id}:{r.token_index}"]
        for k in keys:
            acc = sums[k][r.component]
            acc[0] += r.mean_value
            acc[1] += 1
    table = {row: {c: s / n for c, (s, n) in cols.items()} for row, cols in sums.items()}
    order = sorted(k for k in table if k != "Overall")
    if "Overall" in table:
        order.append("Overall")
    return {k: table[k] for k in order}


def format_gate_table(table: dict[str, dict[str, float]],
                      components: Sequence[str] = COMPONENTS) -> str:
    names = {"char_enc": "Char Enc", "word_enc": "Word Enc", "decoder": "Decoder"}
    header = "Component".ljust(18) + "".join(names.get(c, c).rjust(10) for c in components)
    lines = [header]
    for row, cols in table.items():
        cells = "".join((f"{cols[c]:.2f}" if c in cols else "-").rjust(10) for c in components)
        lines.append(row.ljust(18) + cells)
    return "\n".join(lines) + "\n"


def write_gate_table_csv(table: dict[str, dict[str, float]], path: str | Path,
                         components: Sequence[str] = COMPONENTS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["group", *components])
        for row, cols in table.items():
            w.writerow([row, *(f"{cols[c]:.6f}" if c in cols else "" for c in components)])
