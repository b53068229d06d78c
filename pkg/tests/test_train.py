from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import tunable_ner.train as tr
from tunable_ner.data import Corpus, Sentence
from tunable_ner.errors import ConfigError, TrainingDiverged
from tunable_ner.model import forward_train, total_loss
from tunable_ner.sharing import ALL_CODES
from tunable_ner.train import (EarlyStopping, GateTraceRecord, GridResult, RunResult, TrainConfig,
                               aggregate_gates, collect_gate_traces, derive_seed, evaluate,
                               format_gate_table, format_grid_table, make_schedule, prf,
                               read_traces_csv, run_ttn_grid, span_metrics, train,
                               write_grid_csv, write_traces_csv)

from helpers import tiny_model, tiny_world
from oracles import micro_prf

FIXTURES = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def world():
    return tiny_world()


def corpus_of(n, task="target"):
    return Corpus(task, "train", [Sentence(["w"], ["O"]) for _ in range(n)])


# ---------------------------------------------------------------- config

def test_train_config_validation():
    for bad in ({"patience": 0}, {"batch_size": 0}, {"min_epochs": 5, "max_epochs": 3},
                {"lam": -1.0}, {"fraction": 0.0}, {"lr": 0.0}, {"sort_window": -1}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})
    assert TrainConfig().lam == 0.01


def test_derive_seed_stable():
    assert derive_seed(0, "ttn:IIS") == derive_seed(0, "ttn:IIS")
    assert derive_seed(0, "ttn:IIS") != derive_seed(0, "ttn:ISI")
    assert derive_seed(1, "a") != derive_seed(0, "a")
    assert 0 <= derive_seed("x", 3) < 2 ** 32


# ---------------------------------------------------------------- schedule

def test_schedule_counts():
    sched = make_schedule(corpus_of(6, "source"), corpus_of(4), 2, seed=0)
    assert len(sched) == 5
    assert Counter(t for t, _ in sched) == {"source": 3, "target": 2}
    for task in ("source", "target"):
        idx = sorted(i for t, b in sched if t == task for i in b)
        assert idx == list(range(6 if task == "source" else 4))
    assert sched == make_schedule(corpus_of(6, "source"), corpus_of(4), 2, seed=0)
    assert [t for t, _ in make_schedule(None, corpus_of(5), 2, 1)] == ["target"] * 3
    with pytest.raises(ConfigError):
        make_schedule(None, corpus_of(3), 0, 0)


def test_sorted_windows_reduce_padding():
    corpus = varied(200)
    lengths = [len(s) for s in corpus.sentences]

    def padded(sched):
        return sum(max(lengths[i] for i in b) * len(b) for _, b in sched)

    plain = make_schedule(None, corpus, 10, seed=4)
    sorted_ = make_schedule(None, corpus, 10, seed=4, sort_window=5)
    assert padded(sorted_) < padded(plain)
    assert sorted_ == make_schedule(None, corpus, 10, seed=4, sort_window=5)


def test_schedule_first_position_frequency():
    # 3 source batches and 1 target batch: target leads a quarter of the time
    src, tgt = corpus_of(6, "source"), corpus_of(2)
    n = 1000
    hits = sum(make_schedule(src, tgt, 2, seed)[0][0] == "target" for seed in range(n))
    assert abs(hits / n - 0.25) < 4 * np.sqrt(0.25 * 0.75 / n)


def varied(n, task="target"):
    return Corpus(task, "train", [Sentence(["w"] * (1 + (7 * i) % 5), ["O"] * (1 + (7 * i) % 5))
                                  for i in range(n)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 20), st.integers(1, 20), st.integers(1, 7), st.integers(0, 2 ** 31),
       st.integers(0, 3))
def test_schedule_covers_every_index_once(n_src, n_tgt, bs, seed, window):
    sched = make_schedule(varied(n_src, "source") if n_src else None, varied(n_tgt), bs, seed, window)
    for task, n in (("source", n_src), ("target", n_tgt)):
        idx = [i for t, b in sched if t == task for i in b]
        assert sorted(idx) == list(range(n))
    assert all(1 <= len(b) <= bs for _, b in sched)


# ---------------------------------------------------------------- metrics

def test_prf_conventions():
    assert prf(0, 0, 0) == (100.0, 100.0, 100.0)
    assert prf(0, 0, 3) == (0.0, 0.0, 0.0)
    assert prf(0, 2, 0) == (0.0, 0.0, 0.0)


def test_span_metrics_examples():
    gold = [["S-PER", "O", "B-PER", "E-PER"]]
    m = span_metrics(gold, gold)
    assert (m.precision, m.recall, m.f1) == (100.0, 100.0, 100.0)
    m = span_metrics(gold, [["S-PER", "O", "O", "O"]])
    assert (m.precision, m.recall) == (100.0, 50.0)
    assert m.f1 == pytest.approx(66.67, abs=5e-3)
    m = span_metrics([["S-PER", "S-LOC"]], [["S-PER", "S-PER"]])
    # macro averages PER (P 50, R 100) and LOC (P 0, R 0) over gold types
    assert m.macro_precision == pytest.approx(25.0) and m.macro_recall == pytest.approx(50.0)
    assert m.per_type["PER"]["support"] == 1
    with pytest.raises(ValueError):
        span_metrics(gold, [])


TAGS = ["O", "B-A", "I-A", "E-A", "S-A", "B-B", "I-B", "E-B", "S-B"]


def test_span_metrics_match_oracle_on_random_corpus():
    rng = np.random.default_rng(7)
    gold, pred = [], []
    for _ in range(50):
        n = int(rng.integers(1, 12))
        gold.append([TAGS[i] for i in rng.integers(0, len(TAGS), n)])
        pred.append([TAGS[i] for i in rng.integers(0, len(TAGS), n)])
    m = span_metrics(gold, pred)
    for got, want in zip((m.precision, m.recall, m.f1), micro_prf(gold, pred)):
        assert abs(got - want) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.tuples(st.sampled_from(TAGS), st.sampled_from(TAGS)), min_size=1,
                         max_size=7), min_size=1, max_size=5))
def test_span_metrics_property(pairs):
    gold = [[g for g, _ in s] for s in pairs]
    pred = [[p for _, p in s] for s in pairs]
    m = span_metrics(gold, pred)
    assert np.allclose((m.precision, m.recall, m.f1), micro_prf(gold, pred), atol=1e-9)
    for v in (m.precision, m.recall, m.f1, m.macro_f1):
        assert 0.0 <= v <= 100.0


def test_evaluate_matches_oracle(world):
    _, tgt, vocab = world
    m = tiny_model(vocab, "baseline", jitter=0.8)
    metrics, pred = evaluate(m, tgt, batch_size=7, return_predictions=True)
    assert pred == m.predict(tgt.sentences)
    want = micro_prf([s.tags for s in tgt.sentences], pred)
    assert np.allclose((metrics.precision, metrics.recall, metrics.f1), want, atol=1e-9)


# ---------------------------------------------------------------- training

def test_early_stopping_semantics():
    es = EarlyStopping(2)
    assert [es.update(e, s) for e, s in enumerate([50, 60, 59, 58], 1)] == [False, False, False, True]
    assert es.best_epoch == 2 and es.best == 60


def test_train_restores_best_checkpoint(world, monkeypatch):
    _, tgt, vocab = world
    m = tiny_model(vocab, "baseline")
    scores = iter([50.0, 60.0, 59.0, 58.0, 70.0])
    snaps = []

    def fake_evaluate(model, corpus, batch_size=64):
        snaps.append(model.store.snapshot())
        return tr.Metrics(0, 0, next(scores), 0, 0, 0)

    monkeypatch.setattr(tr, "evaluate", fake_evaluate)
    cfg = TrainConfig(patience=2, max_epochs=10, lr=0.01, batch_size=8)
    res = train(m, None, tgt, tgt, cfg)
    assert len(res.history) == 4 and res.best_epoch == 2 and res.best_dev_f1 == 60.0
    assert all(np.array_equal(m.store[n].value, v) for n, v in snaps[1].items())
    assert not all(np.array_equal(m.store[n].value, v) for n, v in snaps[3].items())


def test_min_epochs_delays_stop(world, monkeypatch):
    _, tgt, vocab = world
    monkeypatch.setattr(tr, "evaluate", lambda *a, **k: tr.Metrics(0, 0, 0.0, 0, 0, 0))
    res = train(tiny_model(vocab, "baseline"), None, tgt, tgt,
                TrainConfig(patience=1, min_epochs=4, max_epochs=10))
    assert len(res.history) == 4 and res.best_epoch == 1


def test_memorization(world):
    _, tgt, vocab = world
    m = tiny_model(vocab, "baseline", word_dim=8, char_hidden=6, word_hidden=12, decoder_hidden=12)
    five = Corpus("mem", "train", tgt.sentences[:5])
    res = train(m, None, five, five, TrainConfig(lr=0.05, batch_size=5, max_epochs=200, patience=200))
    assert res.best_dev_f1 == 100.0
    assert evaluate(m, five).f1 == 100.0


@pytest.mark.parametrize("mode", ["ttn:III", "ttn:SSS", "dtn"])
def test_target_batches_never_move_source_params(world, mode):
    _, tgt, vocab = world
    m = tiny_model(vocab, mode, jitter=0.1)
    source_only = {n: m.store[n].value.copy() for n in m.store.names(["source"])}
    shared = {n: m.store[n].value.copy() for n in m.store.names(["shared", "target"])}
    res = train(m, None, tgt, tgt, TrainConfig(max_epochs=2, patience=5, lr=0.05, batch_size=4))
    assert res.best_epoch >= 1
    assert all(np.array_equal(m.store[n].value, v) for n, v in source_only.items())
    assert any(not np.array_equal(m.store[n].value, v) for n, v in shared.items())


def test_training_is_deterministic(world, tmp_path):
    src, tgt, vocab = world
    runs = []
    for k in range(2):
        m = tiny_model(vocab, "ttn:SHI", dropout=0.3)
        log = tmp_path / f"log{k}.jsonl"
        res = train(m, src, tgt, tgt, TrainConfig(max_epochs=3, batch_size=4, seed=5), log_path=log)
        runs.append((res.history, m.store.snapshot(), log.read_bytes()))
    assert runs[0][0] == runs[1][0] and runs[0][2] == runs[1][2]
    assert all(np.array_equal(runs[0][1][n], runs[1][1][n]) for n in runs[0][1])


def test_hard_only_ignores_lambda(world):
    src, tgt, vocab = world
    m = tiny_model(vocab, "ttn:HHH", jitter=0.2)
    ce = forward_train(m, tgt.sentences[:4], "target", None, "eval").loss
    assert total_loss(m, ce, 0.0).item() == total_loss(m, ce, 3.0).item() == ce.item()
    hist = []
    for lam in (0.0, 1.0):
        h = train(tiny_model(vocab, "ttn:HHH"), src, tgt, tgt,
                  TrainConfig(lam=lam, max_epochs=2, batch_size=6)).history
        hist.append(h)
    assert hist[0] == hist[1]


def test_divergence_saves_checkpoint(world, tmp_path):
    _, tgt, vocab = world
    m = tiny_model(vocab, "baseline")
    m.store["head.target.b"].value[0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(m, None, tgt, tgt, TrainConfig(max_epochs=2), diverge_dir=tmp_path)
    assert info.value.checkpoint and Path(info.value.checkpoint).exists()


def test_source_corpus_needs_source_task(world):
    src, tgt, vocab = world
    with pytest.raises(ConfigError):
        train(tiny_model(vocab, "baseline"), src, tgt, tgt, TrainConfig(max_epochs=1))


# ---------------------------------------------------------------- grid

@pytest.fixture(scope="module")
def small_grid(world):
    src, tgt, vocab = world
    seen = []
    cfg = TrainConfig(max_epochs=1, batch_size=10)
    g = run_ttn_grid(src, tgt, tgt, tgt, vocab, tiny_model(vocab, "baseline").config, cfg,
                     extra_modes=["baseline", "dtn-hs"], on_result=seen.append)
    return g, seen


def test_grid_full_rows(small_grid):
    g, seen = small_grid
    assert [r.mode for r in g.rows] == [f"ttn:{c}" for c in ALL_CODES]
    assert len(g.ttn_rows()) == 27 and [r.mode for r in g.extras] == ["baseline", "dtn-hs"]
    assert len(seen) == 29


def test_grid_summary_recomputes(small_grid):
    g, _ = small_grid
    f1 = np.array([r.metrics.f1 for r in g.rows])
    s = g.summary()
    assert s["n"] == 27
    assert s["mean"] == pytest.approx(f1.mean()) and s["std"] == pytest.approx(f1.std())
    assert max(g.rows, key=lambda r: r.metrics.f1).metrics.f1 == f1.max()
    assert {r.mode for r in g.rows if r.metrics.f1 == f1.max()} >= {s["best"]}


def test_grid_report_layout(small_grid, tmp_path):
    g, _ = small_grid
    text = format_grid_table(g, k=3)
    lines = text.splitlines()
    assert lines[0].split() == ["Model", "Precision", "Recall", "F1"]
    assert lines[1].startswith("Baseline")
    hi, lo = lines.index("Highest Performance TTN"), lines.index("Lowest Performance TTN")
    assert lo - hi == 4
    assert lines[lo + 4].startswith("Avg.") and "+/-" in lines[lo + 4]
    assert lines[-1].startswith("DTN (HS)")
    write_grid_csv(g, tmp_path / "grid.csv")
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 30


def test_grid_records_failures(world, monkeypatch):
    src, tgt, vocab = world
    real = tr.run_single

    def flaky(mode, *a, **k):
        if mode == "ttn:HHH":
            raise TrainingDiverged("boom")
        return real(mode, *a, **k)

    monkeypatch.setattr(tr, "run_single", flaky)
    g = run_ttn_grid(src, tgt, tgt, tgt, vocab, tiny_model(vocab, "baseline").config,
                     TrainConfig(max_epochs=1, batch_size=10), codes=["HHH", "III"])
    assert g.rows[0].metrics is None and g.rows[0].error == "boom"
    assert len(g.ttn_rows()) == 1
    assert "HHH" in format_grid_table(g) and "failed" in format_grid_table(g)


def test_summary_of_fixed_rows():
    def row(mode, f1):
        return RunResult(mode, 0, tr.Metrics(f1, f1, f1, 0, 0, 0))
    g = GridResult([row("ttn:III", 80.0), row("ttn:HHH", 90.0), row("ttn:SSS", 70.0)])
    assert g.summary() == {"n": 3, "mean": 80.0, "std": pytest.approx(np.sqrt(200 / 3)),
                           "best": "ttn:HHH", "worst": "ttn:SSS"}


# ---------------------------------------------------------------- gates

def test_aggregate_constant_gates():
    recs = [GateTraceRecord(0, i, "t", tag, c, "g1", 0.5)
            for i, tag in enumerate(["O", "S-A", "B-B", "E-B"]) for c in tr.COMPONENTS]
    table = aggregate_gates(recs)
    assert list(table) == ["A", "B", "Overall"]
    assert all(v == 0.5 for cols in table.values() for v in cols.values())
    assert aggregate_gates([]) == {}
    with pytest.raises(ConfigError):
        aggregate_gates(recs, by="sentence")


def test_reference_gate_table_from_fixture():
    recs = read_traces_csv(FIXTURES / "gate_trace_fixture.csv")
    table = aggregate_gates(recs, by="tag")
    text = format_gate_table(table)
    lines = text.splitlines()
    assert lines[0].split() == ["Component", "Char", "Enc", "Word", "Enc", "Decoder"]
    assert lines[1].split() == ["Medication", "Name", "0.64", "0.91", "0.77"]
    assert lines[2].split() == ["Overall", "0.65", "0.32", "0.82"]


def test_overall_equals_weighted_group_mean():
    rng = np.random.default_rng(3)
    tags = ["O", "S-A", "B-B", "I-B", "E-B", "S-C"]
    recs = [GateTraceRecord(s, i, "t", tags[int(rng.integers(len(tags)))], c, "g1", float(rng.random()))
            for s in range(4) for i in range(6) for c in tr.COMPONENTS]
    overall = aggregate_gates(recs, by="component")["Overall"]
    per_token = aggregate_gates(recs, by="token")
    for c in tr.COMPONENTS:
        vals = [r.mean_value for r in recs if r.component == c]
        assert overall[c] == pytest.approx(np.mean(vals), abs=1e-12)
        assert np.mean([row[c] for row in per_token.values()]) == pytest.approx(overall[c], abs=1e-12)
        by_tag = aggregate_gates(recs, by="tag")
        assert by_tag["Overall"][c] == pytest.approx(overall[c], abs=1e-12)


@pytest.mark.parametrize("mode,gates", [("dtn", {"g1", "g2"}), ("dtn-hs", {"g1"})])
def test_collect_traces(world, mode, gates, tmp_path):
    _, tgt, vocab = world
    m = tiny_model(vocab, mode, jitter=0.3)
    recs = collect_gate_traces(m, tgt, batch_size=6)
    n_tokens = tgt.n_tokens()
    assert len(recs) == n_tokens * 3 * len(gates)
    assert {r.gate for r in recs} == gates
    assert all(0.0 < r.mean_value < 1.0 for r in recs)
    assert write_traces_csv(recs, tmp_path / "t.csv") == len(recs)
    back = read_traces_csv(tmp_path / "t.csv")
    assert [(r.sentence_id, r.token, r.mean_value) for r in back] == \
           [(r.sentence_id, r.token, r.mean_value) for r in recs]
    with pytest.raises(ConfigError):
        collect_gate_traces(tiny_model(vocab, "ttn:SSS"), tgt)
