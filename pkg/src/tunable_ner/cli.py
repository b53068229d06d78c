"""Command-line entry points: convert, synth, train, grid, gates."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (Corpus, SynthSpec, Vocab, convert_corpus,
                   load_pretrained_embeddings, pretrained_words, read_conll_columns,
                   subsample_corpus, synth_splits, write_conll)
from .errors import ConfigError, DataError, ParseError, TrainingDiverged
from .model import COMPONENTS, ModelConfig, NerModel, normalize_mode
from .train import (TrainConfig, aggregate_gates, collect_gate_traces, derive_seed, evaluate,
                    format_gate_table, format_grid_table, run_ttn_grid, train, write_grid_csv,
                    write_traces_csv)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("tunable_ner")

DATA_KEYS = ("source_train", "target_train", "target_dev", "target_test")


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict[str, str]
    output_dir: Path
    scheme: str = "iobes"
    embeddings: str | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such config file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw, base=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "ExperimentConfig":
        allowed = {"model", "train", "data", "output_dir", "scheme", "embeddings"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "data" not in raw or "output_dir" not in raw:
            raise ConfigError("config needs 'data' and 'output_dir'")
        data = dict(raw["data"])
        bad = set(data) - set(DATA_KEYS)
        if bad:
            raise ConfigError(f"unknown data keys: {sorted(bad)}")
        for k in ("target_train", "target_dev", "target_test"):
            if k not in data:
                raise ConfigError(f"data.{k} is required")
        model_d = dict(raw.get("model", {}))
        if "mode" in model_d:
            raise ConfigError("mode is a command-line flag, not a config key")
        train_d = dict(raw.get("train", {}))
        for k in ("seed", "fraction"):
            if k in train_d:
                raise ConfigError(f"{k} is a command-line flag, not a config key")
        resolve = lambda p: str(p if Path(p).is_absolute() else (base / p))
        scheme = raw.get("scheme", "iobes")
        if scheme not in ("bio", "iobes"):
            raise ConfigError(f"scheme must be 'bio' or 'iobes', got {scheme!r}")
        emb = raw.get("embeddings")
        cfg = cls(ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d),
                  {k: resolve(v) for k, v in data.items()}, Path(resolve(raw["output_dir"])),
                  scheme, resolve(emb) if emb else None)
        cfg.validate_paths()
        return cfg

    def validate_paths(self) -> None:
        for k, p in self.data.items():
            if not Path(p).is_file():
                raise DataError(f"data.{k}: {p} does not exist")
        if self.embeddings and not Path(self.embeddings).is_file():
            raise DataError(f"embeddings: {self.embeddings} does not exist")


@dataclass
class PreparedData:
    source: Corpus | None
    target: Corpus
    dev: Corpus
    test: Corpus
    vocab: Vocab
    word_init: np.ndarray | None
    coverage: float | None


def _read(path: str, split: str, scheme: str) -> Corpus:
    c = read_conll_columns(path, split=split)
    if scheme == "bio":
        c, _ = convert_corpus(c, "bio", "iobes")
    return c


def prepare_data(cfg: ExperimentConfig, fraction: float, seed: int, with_source: bool) -> PreparedData:
    source = _read(cfg.data["source_train"], "train", cfg.scheme) \
        if with_source and "source_train" in cfg.data else None
    if with_source and source is None:
        raise ConfigError("transfer modes need data.source_train")
    full = _read(cfg.data["target_train"], "train", cfg.scheme)
    target = subsample_corpus(full, fraction, derive_seed(seed, "subsample"))
    dev = _read(cfg.data["target_dev"], "dev", cfg.scheme)
    test = _read(cfg.data["target_test"], "test", cfg.scheme)
    train_sets = {"target": target}
    if source is not None:
        train_sets["source"] = source
    extra = pretrained_words(cfg.embeddings) if cfg.embeddings else ()
    # tag sets follow the full target training set so the fraction does not change the head
    tagsets = {"target": full.tagset}
    if source is not None:
        tagsets["source"] = source.tagset
    vocab = Vocab.build(train_sets, extra_words=extra, tagsets=tagsets)
    word_init, coverage = None, None
    if cfg.embeddings:
        word_init, coverage = load_pretrained_embeddings(
            cfg.embeddings, vocab, cfg.model.word_dim, np.random.default_rng(derive_seed(seed, "emb")))
    return PreparedData(source, target, dev, test, vocab, word_init, coverage)


def run_dir_name(mode: str, fraction: float, seed: int) -> str:
    m = normalize_mode(mode).replace(":", "-")
    return f"{m}_{fraction:g}_{seed}"


def _atomic_dir(final: Path):
    final.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))


def _publish(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


# ---------------------------------------------------------------- commands

def cmd_convert(in_path: str, out_path: str, scheme_from: str = "bio", scheme_to: str = "iobes") -> dict:
    """Rewrite the last column of a CoNLL file; every other byte is kept."""
    corpus = read_conll_columns(in_path)  # validates, with line numbers
    converted, changed = convert_corpus(corpus, scheme_from, scheme_to)
    new_tags = iter(t for s in converted.sentences for t in s.tags)
    lines = Path(in_path).read_text(encoding="utf-8").splitlines(keepends=True)
    out = []
    last_field = re.compile(r"(\S+)(\s*)$")
    for line in lines:
        stripped = line.strip()
        if not stripped or stripped.split()[0] == "-DOCSTART-":
            out.append(line)
            continue
        tag = next(new_tags)
        m = last_field.search(line)
        out.append(line if m.group(1) == tag else line[: m.start(1)] + tag + m.group(2))
    tmp = Path(out_path).with_name(f".{Path(out_path).name}.tmp")
    tmp.write_text("".join(out), encoding="utf-8")
    os.replace(tmp, out_path)
    return {"sentences": len(corpus), "tokens": corpus.n_tokens(), "changed": changed}


def cmd_synth(spec: SynthSpec, out_dir: str | Path, seed: int,
              sizes: dict[str, int] | None = None) -> list[Path]:
    spec.validate()
    sizes = sizes or {"train": 5000, "dev": 500, "test": 1000}
    splits = synth_splits(spec, sizes, seed)
    out_dir = Path(out_dir)
    tmp = _atomic_dir(out_dir / "synth")
    written = []
    for task, by_split in splits.items():
        for split, corpus in by_split.items():
            write_conll(corpus, tmp / f"{task}_{split}.conll")
            written.append(out_dir / f"{task}_{split}.conll")
    (tmp / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    out_dir.mkdir(parents=True, exist_ok=True)
    for f in sorted(tmp.iterdir()):
        os.replace(f, out_dir / f.name)
    tmp.rmdir()
    return written


def cmd_train(cfg: ExperimentConfig, mode: str, fraction: float, seed: int) -> Path:
    """One experiment end to end; returns the run directory."""
    mode = normalize_mode(mode)
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed, "fraction": fraction})
    mcfg = ModelConfig(**{**asdict(cfg.model), "mode": mode})
    data = prepare_data(cfg, fraction, seed, with_source=mode != "baseline")
    final = cfg.output_dir / run_dir_name(mode, fraction, seed)
    tmp = _atomic_dir(final)
    try:
        model = NerModel(mcfg, data.vocab, seed=derive_seed(seed, mode), word_init=data.word_init)
        try:
            res = train(model, data.source, data.target, data.dev, tcfg,
                        log_path=tmp / "train.log", diverge_dir=tmp)
        except TrainingDiverged as exc:
            failed = cfg.output_dir / (final.name + ".diverged")
            _publish(tmp, failed)
            if exc.checkpoint:
                exc.checkpoint = str(failed / Path(exc.checkpoint).name)
            raise
        metrics, preds = evaluate(model, data.test, tcfg.eval_batch_size, return_predictions=True)
        model.save(tmp / "model.npz")
        write_conll(data.test, tmp / "predictions.conll", preds)
        payload = {
            "mode": mode,
            "ttn_code": mode[4:] if mode.startswith("ttn:") else None,
            "fraction": fraction,
            "seed": seed,
            "best_epoch": res.best_epoch,
            "epochs_run": len(res.history),
            "dev_f1": res.best_dev_f1,
            "n_params": model.n_params(),
            "n_target_train": len(data.target),
            "n_source_train": len(data.source) if data.source else 0,
            "embedding_coverage": data.coverage,
            "test": metrics.to_dict(),
        }
        (tmp / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except BaseException:
        if tmp.exists():
            shutil.rmtree(tmp)
        raise
    _publish(tmp, final)
    return final


def cmd_grid(cfg: ExperimentConfig, fraction: float, seeds: list[int],
             extras: list[str] = ()) -> Path:
    """Every TTN code (and ``extras``) per seed; writes runs.csv, report.txt, summary.json."""
    extras = [normalize_mode(m) for m in extras]
    final = cfg.output_dir / f"grid_{fraction:g}"
    tmp = _atomic_dir(final)
    try:
        report, summary = [], {"fraction": fraction, "seeds": {}}
        for seed in seeds:
            tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed, "fraction": fraction})
            data = prepare_data(cfg, fraction, seed, with_source=True)
            result = run_ttn_grid(data.source, data.target, data.dev, data.test, data.vocab,
                                  cfg.model, tcfg, extra_modes=extras, word_init=data.word_init,
                                  on_result=lambda r: log.info("%s F1 %.2f", r.mode,
                                                               r.metrics.f1 if r.metrics else float("nan")))
            write_grid_csv(result, tmp / f"runs_seed{seed}.csv")
            report.append(format_grid_table(result, title=f"fraction {fraction:g}, seed {seed}"))
            s = result.summary()
            s["extras"] = {r.mode: (r.metrics.f1 if r.metrics else None) for r in result.extras}
            summary["seeds"][str(seed)] = s
        (tmp / "report.txt").write_text("\n".join(report))
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _publish(tmp, final)
    return final


def write_token_gates(records, path: Path, gates: list[str]) -> int:
    """Wide per-token CSV: one row per token, one column per component and gate."""
    cols = [f"{c}_{g}" for g in gates for c in COMPONENTS]
    rows: dict[tuple[int, int], dict] = {}
    for r in records:
        row = rows.setdefault((r.sentence_id, r.token_index),
                              {"sentence_id": r.sentence_id, "token_index": r.token_index,
                               "token": r.token, "gold_tag": r.gold_tag})
        row[f"{r.component}_{r.gate}"] = repr(r.mean_value)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["sentence_id", "token_index", "token", "gold_tag", *cols])
        w.writeheader()
        for key in sorted(rows):
            w.writerow(rows[key])
    return len(rows)


def cmd_gates(checkpoint: str | Path, corpus_path: str | Path, out_dir: str | Path,
              group_by: str = "tag", scheme: str = "iobes") -> dict:
    model = NerModel.load(checkpoint)
    if not model.gated:
        raise ConfigError(f"{checkpoint} is a {model.config.mode} model; gate analysis needs dtn or dtn-hs")
    corpus = _read(str(corpus_path), "eval", scheme)
    records = collect_gate_traces(model, corpus)
    gates = ["g1"] if model.config.mode == "dtn-hs" else ["g1", "g2"]
    out_dir = Path(out_dir)
    tmp = _atomic_dir(out_dir / "gates")
    try:
        n_tok = write_token_gates(records, tmp / "gate_tokens.csv", gates)
        write_traces_csv(records, tmp / "gate_trace.csv")
        tables = {g: aggregate_gates(records, by=group_by, gate=g) for g in gates}
        with open(tmp / "gate_aggregate.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["gate", "group", *COMPONENTS])
            for g, table in tables.items():
                for row, vals in table.items():
                    w.writerow([g, row, *(f"{vals[c]:.6f}" if c in vals else "" for c in COMPONENTS)])
        text = "".join(f"[{g}]\n" + format_gate_table(t) for g, t in tables.items())
        (tmp / "gate_report.txt").write_text(text)
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, out_dir / f.name)
        tmp.rmdir()
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return {"tokens": n_tok, "report": text}


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _fraction(s: str) -> float:
    v = float(s)
    if v > 1.0:
        v /= 100.0
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must be in (0, 1] or a percentage, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tunable-ner", description="Transfer-learning NER experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("convert", help="convert the tag column between BIO and IOBES")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--from", dest="scheme_from", choices=("bio", "iobes"), default="bio")
    c.add_argument("--to", dest="scheme_to", choices=("bio", "iobes"), default="iobes")

    s = sub.add_parser("synth", help="write a synthetic source/target corpus pair")
    s.add_argument("spec", nargs="?", help="JSON synthetic spec (defaults when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-size", type=int, default=5000)
    s.add_argument("--dev-size", type=int, default=500)
    s.add_argument("--test-size", type=int, default=1000)

    t = sub.add_parser("train", help="train and evaluate one model")
    t.add_argument("config")
    t.add_argument("--mode", default="baseline", help="baseline | ttn:CODE | dtn | dtn-hs")
    t.add_argument("--fraction", type=_fraction, default=1.0)
    t.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("grid", help="run all 27 TTN configurations")
    g.add_argument("config")
    g.add_argument("--fraction", type=_fraction, default=1.0)
    g.add_argument("--seeds", type=int, default=1, help="number of seeds (0..S-1)")
    g.add_argument("--baseline", action="store_true")
    g.add_argument("--dtn", action="store_true")
    g.add_argument("--dtn-hs", action="store_true")

    a = sub.add_parser("gates", help="gate activations of a DTN checkpoint")
    a.add_argument("checkpoint")
    a.add_argument("corpus")
    a.add_argument("--group-by", choices=("tag", "component", "token"), default="tag")
    a.add_argument("--out", required=True)
    a.add_argument("--scheme", choices=("bio", "iobes"), default="iobes")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "convert":
            stats = cmd_convert(args.input, args.output, args.scheme_from, args.scheme_to)
            print(f"{stats['sentences']} sentences, {stats['tokens']} tokens, "
                  f"{stats['changed']} tags changed")
        elif args.command == "synth":
            spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
            files = cmd_synth(spec, args.out, args.seed,
                              {"train": args.train_size, "dev": args.dev_size, "test": args.test_size})
            for f in files:
                print(f)
        elif args.command == "train":
            cfg = ExperimentConfig.load(args.config)
            run = cmd_train(cfg, args.mode, args.fraction, args.seed)
            m = json.loads((run / "metrics.json").read_text())["test"]
            print(f"{run}: P {m['precision']:.2f} R {m['recall']:.2f} F1 {m['f1']:.2f} "
                  f"(macro F1 {m['macro_f1']:.2f})")
        elif args.command == "grid":
            cfg = ExperimentConfig.load(args.config)
            extras = [m for m, on in (("baseline", args.baseline), ("dtn", args.dtn),
                                      ("dtn-hs", args.dtn_hs)) if on]
            out = cmd_grid(cfg, args.fraction, list(range(args.seeds)), extras)
            print((out / "report.txt").read_text())
        elif args.command == "gates":
            res = cmd_gates(args.checkpoint, args.corpus, args.out, args.group_by, args.scheme)
            print(res["report"], end="")
    except (ParseError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if args.command == "gates" else EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        if exc.checkpoint:
            print(f"diagnostic checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
