"""Corpora, IOBES tags, vocabularies, pretrained vectors and synthetic data."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
BOS_TAG = "<bos>"
DOCSTART = "-DOCSTART-"
PREFIXES = ("B", "I", "E", "S")


@dataclass
class Sentence:
    tokens: list[str]
    tags: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise DataError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")
        if not self.tokens:
            raise DataError("empty sentence")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    name: str
    split: str
    sentences: list[Sentence]

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def tagset(self) -> list[str]:
        """Sorted tags present, closed under prefix/type decomposition."""
        types = set()
        for s in self.sentences:
            for t in s.tags:
                if t != "O":
                    types.add(split_tag(t)[1])
        return ["O"] + [f"{p}-{ty}" for ty in sorted(types) for p in PREFIXES]

    @property
    def entity_types(self) -> list[str]:
        return sorted({split_tag(t)[1] for t in self.tagset if t != "O"})

    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, sep, kind = tag.partition("-")
    if not sep or prefix not in ("B", "I", "E", "S") or not kind:
        raise DataError(f"malformed tag {tag!r}")
    return prefix, kind


# ---------------------------------------------------------------- CoNLL files

def read_conll_columns(path: str | Path, token_col: int = 0, tag_col: int = -1,
                       name: str | None = None, split: str = "train") -> Corpus:
    """Read whitespace-separated columns, blank lines between sentences."""
    path = Path(path)
    sentences: list[Sentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    width = None
    need = max(token_col, tag_col) + 1 if tag_col >= 0 else max(token_col + 1, 2)
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                if tokens:
                    sentences.append(Sentence(tokens, tags))
                    tokens, tags = [], []
                continue
            cols = line.split()
            if cols[0] == DOCSTART:
                continue
            if len(cols) < need:
                raise ParseError(f"expected at least {need} columns, found {len(cols)}", lineno)
            if width is None:
                width = len(cols)
            elif len(cols) != width:
                raise ParseError(f"ragged row: {len(cols)} columns, previous rows had {width}",
                                 lineno)
            tokens.append(cols[token_col])
            tags.append(cols[tag_col])
    if tokens:
        sentences.append(Sentence(tokens, tags))
    if not sentences:
        raise DataError(f"{path}: empty corpus")
    return Corpus(name or path.stem, split, sentences)


def format_conll(sentences: Iterable[Sentence], predictions: Sequence[Sequence[str]] | None = None) -> str:
    lines = []
    for k, s in enumerate(sentences):
        for i, (tok, tag) in enumerate(zip(s.tokens, s.tags)):
            if predictions is None:
                lines.append(f"{tok} {tag}")
            else:
                lines.append(f"{tok} {tag} {predictions[k][i]}")
        lines.append("")
    return "\n".join(lines) + ("\n" if lines else "")


def write_conll(corpus: Corpus | Iterable[Sentence], path: str | Path,
                predictions: Sequence[Sequence[str]] | None = None) -> None:
    sents = corpus.sentences if isinstance(corpus, Corpus) else list(corpus)
    Path(path).write_text(format_conll(sents, predictions), encoding="utf-8")


# ---------------------------------------------------------------- tag schemes

def bio_to_iobes(tags: Sequence[str]) -> list[str]:
    """Convert BIO to IOBES.  An ``I-`` that does not continue a span is read as ``B-``."""
    fixed = []
    prev_type = None
    for i, tag in enumerate(tags):
        prefix, kind = split_tag(tag)
        if prefix in ("E", "S"):
            raise DataError(f"{tag!r} is not a BIO tag")
        if prefix == "I" and prev_type != kind:
            log.debug("position %d: %s without a preceding span, read as B-%s", i, tag, kind)
            prefix = "B"
        fixed.append((prefix, kind))
        prev_type = kind
    out = []
    for i, (prefix, kind) in enumerate(fixed):
        if prefix == "O":
            out.append("O")
            continue
        continues = i + 1 < len(fixed) and fixed[i + 1] == ("I", kind)
        if prefix == "B":
            out.append(f"B-{kind}" if continues else f"S-{kind}")
        else:
            out.append(f"I-{kind}" if continues else f"E-{kind}")
    return out


def iobes_to_bio(tags: Sequence[str]) -> list[str]:
    out = []
    for tag in tags:
        prefix, kind = split_tag(tag)
        if prefix == "O":
            out.append("O")
        elif prefix in ("B", "S"):
            out.append(f"B-{kind}")
        else:
            out.append(f"I-{kind}")
    return out


def iobes_to_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Entity spans ``(start, end_inclusive, type)`` from possibly malformed IOBES.

    Repair rules: any tag that cannot continue the open span closes it (the
    span is kept, ending at the previous token); an ``I-`` that opens
    nothing starts a span; an ``E-`` with nothing to end is a singleton.
    """
    spans = set()
    start, kind = None, None

    def close(end):
        nonlocal start, kind
        if start is not None:
            spans.add((start, end, kind))
        start, kind = None, None

    for i, tag in enumerate(tags):
        if tag == "O":
            close(i - 1)
            continue
        try:
            prefix, t = split_tag(tag)
        except DataError:
            close(i - 1)
            continue
        if prefix == "B":
            close(i - 1)
            start, kind = i, t
        elif prefix == "I":
            if start is None or kind != t:
                close(i - 1)
                start, kind = i, t
        elif prefix == "E":
            if start is None or kind != t:
                close(i - 1)
                start, kind = i, t
            close(i)
        else:
            close(i - 1)
            spans.add((i, i, t))
    close(len(tags) - 1)
    return spans


def is_valid_iobes(tags: Sequence[str]) -> bool:
    open_type = None
    for tag in tags:
        try:
            prefix, kind = split_tag(tag)
        except DataError:
            return False
        if open_type is None:
            if prefix in ("I", "E"):
                return False
            if prefix == "B":
                open_type = kind
        else:
            if prefix not in ("I", "E") or kind != open_type:
                return False
            if prefix == "E":
                open_type = None
    return open_type is None


def convert_corpus(corpus: Corpus, scheme_from: str, scheme_to: str) -> tuple[Corpus, int]:
    """Return the converted corpus and the number of tags that changed."""
    if (scheme_from, scheme_to) == ("bio", "iobes"):
        fn = bio_to_iobes
    elif (scheme_from, scheme_to) == ("iobes", "bio"):
        fn = iobes_to_bio
    elif scheme_from == scheme_to and scheme_from in ("bio", "iobes"):
        fn = list
    else:
        raise ConfigError(f"unsupported conversion {scheme_from} -> {scheme_to}")
    changed = 0
    out = []
    for s in corpus.sentences:
        new = fn(s.tags)
        changed += sum(a != b for a, b in zip(s.tags, new))
        out.append(Sentence(list(s.tokens), new))
    return Corpus(corpus.name, corpus.split, out), changed


# ---------------------------------------------------------------- subsampling

def subsample_corpus(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Sentence-level sample of ``ceil(fraction * N)`` sentences, original order kept."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = len(corpus)
    if fraction == 1.0:
        return Corpus(corpus.name, corpus.split, list(corpus.sentences))
    k = math.ceil(round(fraction * n, 9))
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return Corpus(corpus.name, corpus.split, [corpus.sentences[i] for i in idx])


# ---------------------------------------------------------------- vocabularies

@dataclass
class Vocab:
    words: dict[str, int]
    chars: dict[str, int]
    tags: dict[str, dict[str, int]]
    _word_cache: dict[str, int] = field(default_factory=dict, repr=False, compare=False)
    _char_cache: dict[str, list[int]] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, train: dict[str, Corpus], extra_words: Iterable[str] = (),
              tagsets: dict[str, Sequence[str]] | None = None) -> "Vocab":
        """Vocabulary over the training corpora of every task.

        ``train`` maps task name ("target"/"source") to its training corpus.
        Characters are collected jointly so character tables can be shared.
        """
        words = {PAD: 0, UNK: 1}
        chars = {PAD: 0, UNK: 1}
        for task in sorted(train):
            for s in train[task].sentences:
                for tok in s.tokens:
                    words.setdefault(normalize_word(tok), len(words))
                    for ch in tok:
                        chars.setdefault(ch, len(chars))
        for w in extra_words:
            words.setdefault(normalize_word(w), len(words))
        tags = {}
        for task in sorted(train):
            names = list(tagsets[task]) if tagsets and task in tagsets else train[task].tagset
            m = {t: i for i, t in enumerate(names)}
            m[BOS_TAG] = len(m)
            tags[task] = m
        return cls(words, chars, tags)

    def n_tags(self, task: str) -> int:
        """Number of predictable tags (the BOS entry excluded)."""
        return len(self.tags[task]) - 1

    def tag_names(self, task: str) -> list[str]:
        inv = sorted(self.tags[task].items(), key=lambda kv: kv[1])
        return [t for t, _ in inv if t != BOS_TAG]

    def word_id(self, token: str) -> int:
        i = self._word_cache.get(token)
        if i is None:
            i = self._word_cache[token] = self.words.get(normalize_word(token), 1)
        return i

    def char_ids(self, token: str) -> list[int]:
        ids = self._char_cache.get(token)
        if ids is None:
            ids = self._char_cache[token] = [self.chars.get(ch, 1) for ch in token]
        return ids

    def to_json(self) -> dict:
        return {"words": self.words, "chars": self.chars, "tags": self.tags}

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(dict(d["words"]), dict(d["chars"]), {k: dict(v) for k, v in d["tags"].items()})


def normalize_word(token: str) -> str:
    return token.lower()


def load_pretrained_embeddings(path: str | Path, vocab: Vocab, dim: int,
                               rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Word table initialised from a ``word v1 ... vd`` text file.

    Rows of words missing from the file are drawn from U(-0.25, 0.25).
    Returns the matrix and the fraction of non-special vocabulary rows
    that were found.
    """
    table = rng.uniform(-0.25, 0.25, size=(len(vocab.words), dim))
    found = set()
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if len(parts) - 1 != dim:
                if lineno == 1 and len(parts) == 2:
                    continue  # word2vec-style header
                raise ConfigError(
                    f"{path}:{lineno}: vector has {len(parts) - 1} dims, config says {dim}"
                )
            idx = vocab.words.get(normalize_word(parts[0]))
            if idx is None or idx in found:
                continue
            table[idx] = np.asarray(parts[1:], dtype=np.float64)
            found.add(idx)
    n = max(len(vocab.words) - 2, 1)
    coverage = len(found - {0, 1}) / n
    log.info("pretrained coverage %.1f%% (%d/%d)", 100 * coverage, len(found), n)
    return table, coverage


def pretrained_words(path: str | Path) -> set[str]:
    out = set()
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            w = line.split(" ", 1)[0]
            if w:
                out.add(normalize_word(w))
    return out


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    """Padded, time-major arrays for a list of sentences of one task."""

    sentences: list[Sentence]
    word_ids: np.ndarray      # [T, B]
    mask: np.ndarray          # [T, B] float 0/1
    char_ids: np.ndarray      # [L, N] for the N distinct tokens, time-major
    char_mask: np.ndarray     # [L, N]
    token_slot: np.ndarray    # [T, B] -> row in [0, N) or N for padding
    tag_ids: np.ndarray | None  # [T, B] gold tags, -1 at padding
    prev_tag_ids: np.ndarray | None  # [T, B] teacher-forced previous tags

    @property
    def lengths(self) -> list[int]:
        return [len(s) for s in self.sentences]


def encode_batch(sentences: Sequence[Sentence], vocab: Vocab, task: str | None) -> Batch:
    if not sentences:
        raise DataError("empty batch")
    B = len(sentences)
    T = max(len(s) for s in sentences)
    word_ids = np.zeros((T, B), dtype=np.intp)
    mask = np.zeros((T, B))
    token_slot = np.empty((T, B), dtype=np.intp)
    # the character encoder sees each distinct token string once per batch
    slots: dict[str, int] = {}
    for s in sentences:
        for tok in s.tokens:
            if not tok:
                raise DataError("zero-length token")
            slots.setdefault(tok, len(slots))
    N = len(slots)
    token_slot.fill(N)
    L = max(len(w) for w in slots)
    char_ids = np.zeros((L, N), dtype=np.intp)
    char_mask = np.zeros((L, N))
    for w, n in slots.items():
        cids = vocab.char_ids(w)
        char_ids[: len(cids), n] = cids
        char_mask[: len(cids), n] = 1.0
    tag_ids = prev = None
    if task is not None:
        tmap = vocab.tags[task]
        tag_ids = np.full((T, B), -1, dtype=np.intp)
        prev = np.full((T, B), tmap[BOS_TAG], dtype=np.intp)
    word_id = vocab.word_id
    for b, s in enumerate(sentences):
        n = len(s.tokens)
        word_ids[:n, b] = [word_id(tok) for tok in s.tokens]
        mask[:n, b] = 1.0
        token_slot[:n, b] = [slots[tok] for tok in s.tokens]
        if task is not None:
            try:
                tag_ids[:n, b] = [tmap[tag] for tag in s.tags]
            except KeyError as exc:
                raise DataError(f"tag {exc.args[0]!r} unknown for task {task!r}") from None
            prev[1:n, b] = tag_ids[: n - 1, b]
    return Batch(list(sentences), word_ids, mask, char_ids, char_mask, token_slot, tag_ids, prev)


# ---------------------------------------------------------------- synthetic corpora

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


@dataclass
class SynthSpec:
    """Recipe for a pair of related tagging tasks."""

    source_types: list[str] = field(default_factory=lambda: ["DRUG", "DOSE", "FREQ", "ROUTE", "PROBLEM"])
    target_types: list[str] = field(default_factory=lambda: ["DRUG", "DOSE", "FREQ", "FORM"])
    overlap: float = 0.8
    lexicon_size: int = 150
    vocab_size: int = 400
    n_templates: int = 60
    min_len: int = 5
    max_len: int = 14
    max_entity_len: int = 3
    trigger_prob: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must be in [0, 1], got {self.overlap}")
        if not self.source_types or not self.target_types:
            raise ConfigError("both tasks need at least one entity type")
        for name in ("lexicon_size", "vocab_size", "n_templates", "min_len", "max_entity_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_len < self.min_len:
            raise ConfigError("max_len < min_len")
        if not 0.0 <= self.trigger_prob <= 1.0:
            raise ConfigError("trigger_prob must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def _syllables(rng, n):
    return "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(n))


def _word_pool(rng, n, suffixes, used):
    out = []
    while len(out) < n:
        w = _syllables(rng, int(rng.integers(1, 3))) + suffixes[int(rng.integers(len(suffixes)))]
        if w not in used:
            used.add(w)
            out.append(w)
    return out


@dataclass
class _World:
    lexicons: dict[str, dict[str, list[tuple[str, ...]]]]
    templates: dict[str, list[list[str]]]
    triggers: dict[str, list[str]]


def _build_world(spec: SynthSpec) -> _World:
    rng = np.random.default_rng(spec.seed)
    used: set[str] = set()
    filler = _word_pool(rng, spec.vocab_size, ["", "", "s", "ed", "er"], used)
    all_types = sorted(set(spec.source_types) | set(spec.target_types))
    triggers = {ty: _word_pool(rng, 3, [""], used) for ty in all_types}
    # each type has characteristic endings; neighbouring types share one
    ends = {}
    for k, ty in enumerate(all_types):
        own = [_syllables(rng, 1)[:2] + c for c in rng.choice(list(_CONSONANTS), size=2)]
        ends[ty] = own
    for k, ty in enumerate(all_types):
        ends[ty] = ends[ty] + [ends[all_types[(k + 1) % len(all_types)]][0]]

    lex = {"source": {}, "target": {}}
    n_shared = int(round(spec.overlap * spec.lexicon_size))
    for ty in all_types:
        n_pool = 2 * spec.lexicon_size
        heads = _word_pool(rng, n_pool, ends[ty], used)
        mods = _word_pool(rng, max(4, spec.lexicon_size // 4), [""], used)
        pool = []
        for h in heads:
            n_tok = int(rng.integers(1, spec.max_entity_len + 1))
            words = [str(m) for m in rng.choice(mods, size=n_tok - 1)] + [h]
            pool.append(tuple(words))
        src = pool[: spec.lexicon_size]
        rest = pool[spec.lexicon_size:]
        if ty in spec.source_types:
            lex["source"][ty] = src
        if ty in spec.target_types:
            if ty in spec.source_types:
                lex["target"][ty] = src[:n_shared] + rest[: spec.lexicon_size - n_shared]
            else:
                lex["target"][ty] = rest[: spec.lexicon_size]

    def make_template(types):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        body = [str(w) for w in rng.choice(filler, size=n)]
        n_slots = int(rng.integers(1, 4))
        for _ in range(n_slots):
            ty = types[int(rng.integers(len(types)))]
            pos = int(rng.integers(0, len(body) + 1))
            slot = [f"[{ty}]"]
            if rng.random() < spec.trigger_prob:
                slot = [str(rng.choice(triggers[ty]))] + slot
            body[pos:pos] = slot
        return body

    shared_types = [t for t in spec.target_types if t in spec.source_types]
    n_common = int(round(spec.overlap * spec.n_templates))
    common = [make_template(shared_types or spec.target_types) for _ in range(n_common)]
    templates = {
        "source": common + [make_template(spec.source_types) for _ in range(spec.n_templates - n_common)],
        "target": common + [make_template(spec.target_types) for _ in range(spec.n_templates - n_common)],
    }
    # common templates may name types a task lacks; remap those slots
    for task, types in (("source", spec.source_types), ("target", spec.target_types)):
        fixed = []
        for tpl in templates[task]:
            out = []
            for tok in tpl:
                if tok.startswith("[") and tok[1:-1] not in types:
                    tok = f"[{types[hash_str(tok) % len(types)]}]"
                out.append(tok)
            fixed.append(out)
        templates[task] = fixed
    return _World(lex, templates, triggers)


def hash_str(s: str) -> int:
    """Stable string hash (Python's ``hash`` is salted per process)."""
    h = 0
    for ch in s:
        h = (h * 131 + ord(ch)) % 1_000_003
    return h


def _realize(template, lexicon, rng) -> Sentence:
    tokens, tags = [], []
    for tok in template:
        if tok.startswith("[") and tok.endswith("]"):
            ty = tok[1:-1]
            entries = lexicon[ty]
            ent = entries[int(rng.integers(len(entries)))]
            if len(ent) == 1:
                tags.append(f"S-{ty}")
            else:
                tags.extend([f"B-{ty}"] + [f"I-{ty}"] * (len(ent) - 2) + [f"E-{ty}"])
            tokens.extend(ent)
        else:
            tokens.append(tok)
            tags.append("O")
    return Sentence(tokens, tags)


def synth_generate(spec: SynthSpec, n_sentences: int, seed: int,
                   n_target: int | None = None) -> tuple[Corpus, Corpus]:
    """Generate (source, target) corpora of ``n_sentences`` each (or ``n_target`` target).

    The lexicons and templates depend only on ``spec``; ``seed`` drives the
    sampling of sentences, so different seeds give different splits of the
    same underlying tasks.
    """
    spec.validate()
    world = _build_world(spec)
    rng = np.random.default_rng([spec.seed, seed])
    out = []
    for task, n in (("source", n_sentences), ("target", n_sentences if n_target is None else n_target)):
        tpls = world.templates[task]
        sents = [_realize(tpls[int(rng.integers(len(tpls)))], world.lexicons[task], rng)
                 for _ in range(n)]
        out.append(Corpus(f"synth-{task}", "train", sents))
    return out[0], out[1]


def synth_lexicons(spec: SynthSpec) -> dict[str, dict[str, list[tuple[str, ...]]]]:
    return _build_world(spec).lexicons


def synth_splits(spec: SynthSpec, sizes: dict[str, int], seed: int) -> dict[str, dict[str, Corpus]]:
    """Train/dev/test corpora for both tasks; ``sizes`` maps split -> sentence count."""
    out: dict[str, dict[str, Corpus]] = {"source": {}, "target": {}}
    for k, split in enumerate(("train", "dev", "test")):
        if split not in sizes:
            continue
        src, tgt = synth_generate(spec, sizes[split], seed * 1000 + k)
        src.split = tgt.split = split
        out["source"][split] = src
        out["target"][split] = tgt
    return out
