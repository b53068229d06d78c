"""Character encoder -> word encoder -> decoder/tagger, with transfer between tasks."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, Sentence, Vocab, encode_batch
from .errors import ConfigError
from .layers import EmbeddingTable, LinearLayer, dropout_apply, embed_lookup
from .optim import ParamStore
from .sharing import (TASKS, Component, GatedComponent, LayerSpec, SharingScheme, SoftPair,
                      build_component, parse_config_code, soft_penalty_total)

FORMAT_VERSION = 1
COMPONENTS = ("char_enc", "word_enc", "decoder")


@dataclass
class ModelConfig:
    word_dim: int = 100
    char_dim: int = 25
    tag_dim: int = 50
    char_hidden: int = 50
    word_hidden: int = 100
    decoder_hidden: int = 50
    dropout: float = 0.5
    mode: str = "baseline"
    scalar_gates: bool = False
    freeze_word_emb: bool = False

    def __post_init__(self):
        for f in ("word_dim", "char_dim", "tag_dim", "char_hidden", "word_hidden", "decoder_hidden"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        self.mode = normalize_mode(self.mode)

    @property
    def ttn(self):
        return parse_config_code(self.mode[4:]) if self.mode.startswith("ttn:") else None

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def normalize_mode(mode: str) -> str:
    m = mode.strip().lower()
    if m in ("baseline", "dtn", "dtn-hs"):
        return m
    if m.startswith("ttn:"):
        return "ttn:" + parse_config_code(m[4:]).code
    raise ConfigError(f"unknown mode {mode!r}; expected baseline, ttn:CODE, dtn or dtn-hs")


class TaskHead:
    """Tag embeddings (with a BOS row) and the output projection of one task."""

    def __init__(self, store: ParamStore, task: str, n_tags: int, cfg: ModelConfig,
                 rng: np.random.Generator):
        self.n_tags = n_tags
        self.tag_emb = EmbeddingTable.create(store, f"head.{task}.tag_emb", n_tags + 1,
                                             cfg.tag_dim, task, rng)
        self.proj = LinearLayer.create(store, f"head.{task}", cfg.decoder_hidden, n_tags, task, rng)

    @property
    def bos(self) -> int:
        return self.n_tags


@dataclass
class ForwardResult:
    loss: Tensor
    logits: Tensor
    n_tokens: int


class NerModel:
    """The tagger for one target task and (optionally) one source task."""

    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0,
                 tasks: Sequence[str] | None = None, word_init: np.ndarray | None = None):
        self.config = config
        self.vocab = vocab
        if tasks is None:
            tasks = ("target",) if config.mode == "baseline" else TASKS
        self.tasks = tuple(t for t in TASKS if t in tasks)
        if "target" not in self.tasks:
            raise ConfigError("a model always has the target task")
        for t in self.tasks:
            if t not in vocab.tags:
                raise ConfigError(f"vocabulary has no tag set for task {t!r}")
        self.seed = seed
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        cfg = config

        if word_init is None:
            word_init = rng.uniform(-0.25, 0.25, size=(len(vocab.words), cfg.word_dim))
        elif word_init.shape != (len(vocab.words), cfg.word_dim):
            raise ConfigError(f"word_init shape {word_init.shape} does not match vocabulary/config")
        self.word_emb = EmbeddingTable(self.store.add("word_emb", word_init, "shared"),
                                       trainable=not cfg.freeze_word_emb)

        specs = {
            "char_enc": LayerSpec("char", len(vocab.chars), cfg.char_hidden, cfg.char_dim),
            "word_enc": LayerSpec("word", 2 * cfg.char_hidden + cfg.word_dim, cfg.word_hidden),
            "decoder": LayerSpec("decoder", 2 * cfg.word_hidden + cfg.tag_dim, cfg.decoder_hidden),
        }
        if cfg.mode == "baseline":
            schemes = dict.fromkeys(COMPONENTS, SharingScheme.INDEPENDENT)
            mode = "ttn"
        elif cfg.mode.startswith("ttn:"):
            ttn = cfg.ttn
            schemes = {"char_enc": ttn.char, "word_enc": ttn.word, "decoder": ttn.decoder}
            mode = "ttn"
        else:
            schemes = dict.fromkeys(COMPONENTS)
            mode = cfg.mode
        self.components: dict[str, Component] = {
            name: build_component(name, specs[name], mode, schemes[name], self.store, rng,
                                  tasks=self.tasks, scalar_gates=cfg.scalar_gates)
            for name in COMPONENTS
        }
        self.heads = {t: TaskHead(self.store, t, vocab.n_tags(t), cfg, rng) for t in self.tasks}

    # ------------------------------------------------------------ structure

    @property
    def soft_pairs(self) -> list[SoftPair]:
        return [p for c in self.components.values() for p in c.soft_pairs]

    @property
    def gated(self) -> bool:
        return self.config.mode in ("dtn", "dtn-hs")

    def n_params(self) -> int:
        return self.store.size()

    # ------------------------------------------------------------ encoders

    def _encode(self, batch: Batch, task: str, mode: str, rng) -> Tensor:
        cfg = self.config
        drop = cfg.dropout
        char_out = self.components["char_enc"].forward(task, batch.char_ids, batch.char_mask)
        pad_row = Tensor(np.zeros((1, char_out.shape[1])))
        char_words = ad.take_rows(ad.concat([char_out, pad_row], axis=0), batch.token_slot)
        char_words = dropout_apply(char_words, drop, mode, rng)
        wemb = dropout_apply(embed_lookup(self.word_emb, batch.word_ids), drop, mode, rng)
        m = ad.concat([char_words, wemb], axis=-1)
        h = self.components["word_enc"].forward(task, m, batch.mask)
        return dropout_apply(h, drop, mode, rng)

    def forward_train(self, batch: Batch, task: str, rng: np.random.Generator | None = None,
                      mode: str = "train") -> ForwardResult:
        """Teacher-forced pass; returns the summed token cross entropy."""
        if task not in self.tasks:
            raise ConfigError(f"model has no {task} task")
        if batch.tag_ids is None:
            raise ConfigError("batch has no gold tags")
        if mode == "train" and rng is None and self.config.dropout > 0:
            raise ConfigError("training-mode forward with dropout needs an rng")
        head = self.heads[task]
        h = self._encode(batch, task, mode, rng)
        prev = embed_lookup(head.tag_emb, batch.prev_tag_ids)
        o = self.components["decoder"].forward(task, ad.concat([h, prev], axis=-1), batch.mask)
        o = dropout_apply(o, self.config.dropout, mode, rng)
        logits = head.proj(o)
        T, B, n = logits.shape
        flat = ad.reshape(logits, (T * B, n))
        valid = np.flatnonzero(batch.mask.reshape(-1) > 0)
        rows = ad.take_rows(flat, valid)
        loss, _ = ad.softmax_cross_entropy_rows(rows, batch.tag_ids.reshape(-1)[valid])
        return ForwardResult(loss, logits, int(valid.size))

    def total_loss(self, ce: Tensor, lam: float) -> Tensor:
        return total_loss(self, ce, lam)

    # ------------------------------------------------------------ inference

    def decode_batch(self, sentences: Sequence[Sentence], capture_gates: bool = False):
        """Greedy left-to-right tagging of the target task.

        Returns predicted tag ids per sentence and, with ``capture_gates``,
        per-component gate arrays ``{component: (g1 [T,B,g], g2 or None)}``
        indexed like the padded batch.
        """
        batch = encode_batch(sentences, self.vocab, None)
        head = self.heads["target"]
        gates: dict[str, list] = {}
        h = self._encode(batch, "target", "eval", None)
        if capture_gates:
            self._collect_char_gates(batch, gates)
            wc = self.components["word_enc"]
            if isinstance(wc, GatedComponent):
                tr = wc.last_trace
                gates["word_enc"] = [tr.g1, tr.g2]
        T, B = batch.mask.shape
        dec = self.components["decoder"]
        prev = np.full(B, head.bos, dtype=np.intp)
        state = None
        out = np.zeros((T, B), dtype=np.intp)
        g1s, g2s = [], []
        for t in range(T):
            x = ad.concat([ad.index_time(h, t), embed_lookup(head.tag_emb, prev)], axis=-1)
            o, state = dec.step("target", x, state)
            logits = head.proj(o).value
            pred = np.argmax(logits, axis=-1)
            out[t] = pred
            prev = pred
            if capture_gates and isinstance(dec, GatedComponent):
                g1s.append(dec.last_trace.g1)
                g2s.append(dec.last_trace.g2)
        if g1s:
            gates["decoder"] = [np.stack(g1s), None if g2s[0] is None else np.stack(g2s)]
        preds = [out[: len(s), b].tolist() for b, s in enumerate(sentences)]
        return (preds, gates, batch) if capture_gates else preds

    def _collect_char_gates(self, batch: Batch, gates: dict) -> None:
        cc = self.components["char_enc"]
        if not isinstance(cc, GatedComponent):
            return
        tr = cc.last_trace
        # per-token rows -> padded [T, B, g] layout
        slot = batch.token_slot

        def place(g):
            if g is None:
                return None
            padded = np.concatenate([g, np.zeros((1, g.shape[1]))], axis=0)
            return padded[slot]

        gates["char_enc"] = [place(tr.g1), place(tr.g2)]

    def greedy_decode(self, sentence: Sentence | Sequence[str]) -> list[str]:
        tokens = sentence.tokens if isinstance(sentence, Sentence) else list(sentence)
        if not tokens:
            raise ValueError("cannot decode an empty sentence")
        ids = self.decode_batch([Sentence(tokens, ["O"] * len(tokens))])[0]
        names = self.vocab.tag_names("target")
        return [names[i] for i in ids]

    def predict(self, sentences: Sequence[Sentence], batch_size: int = 64) -> list[list[str]]:
        names = self.vocab.tag_names("target")
        out = []
        for i in range(0, len(sentences), batch_size):
            for ids in self.decode_batch(sentences[i: i + batch_size]):
                out.append([names[k] for k in ids])
        return out

    # ------------------------------------------------------------ persistence

    def meta(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": asdict(self.config),
            "tasks": list(self.tasks),
            "seed": self.seed,
            "vocab": self.vocab.to_json(),
            "partitions": self.store.partition,
        }

    def save(self, path: str | Path) -> None:
        arrays = {f"p:{n}": t.value for n, t in self.store.tensors.items()}
        arrays["meta"] = np.frombuffer(json.dumps(self.meta(), sort_keys=True).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "NerModel":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta.get("format_version") != FORMAT_VERSION:
                raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
            model = cls(ModelConfig(**meta["config"]), Vocab.from_json(meta["vocab"]),
                        seed=meta["seed"], tasks=meta["tasks"])
            names = {k[2:] for k in z.files if k.startswith("p:")}
            if names != set(model.store.tensors):
                raise ConfigError(f"{path}: parameter names do not match the model structure")
            for n in names:
                model.store[n].value[...] = z[f"p:{n}"]
        return model


def total_loss(model: NerModel, ce: Tensor, lam: float) -> Tensor:
    """Cross entropy of the focused batch plus ``lam`` times the soft-sharing penalty."""
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    pairs = model.soft_pairs
    if not pairs or lam == 0.0:
        return ce
    return ad.add_scalars(ce, ad.scale(soft_penalty_total(pairs), lam))


def extract_target_model(model: NerModel) -> NerModel:
    """Copy of ``model`` holding only what the target path reads."""
    pruned = NerModel(model.config, model.vocab, seed=model.seed, tasks=("target",))
    for n, t in pruned.store.tensors.items():
        t.value[...] = model.store[n].value
    return pruned


def forward_train(model: NerModel, sentences: Sequence[Sentence], task: str,
                  rng: np.random.Generator | None = None, mode: str = "train") -> ForwardResult:
    return model.forward_train(encode_batch(sentences, model.vocab, task), task, rng, mode)


def greedy_decode(model: NerModel, sentence) -> list[str]:
    return model.greedy_decode(sentence)
