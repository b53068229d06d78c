"""Per-component parameter sharing between a source and a target task.

A component (character encoder, word encoder or decoder) is built from
*branches*: the recurrent network of one task, or of both tasks when the
storage is shared.

* Independent: one branch per task, no coupling.
* Hard: a single branch that both tasks run through.
* Soft: one branch per task, coupled by the squared l2 distance between
  their parameters.
* Gated (DTN): soft pair + hard branch + target-only branch, blended for the
  target task by learned sigmoid gates; the source task sums its hard and
  soft outputs.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .errors import ConfigError
from .layers import EmbeddingTable, LstmCell, bilstm_final_batch, bilstm_full_batch, embed_lookup, lstm_step, run_lstm
from .optim import ParamStore

TASKS = ("target", "source")


class SharingScheme(enum.Enum):
    INDEPENDENT = "I"
    HARD = "H"
    SOFT = "S"


@dataclass(frozen=True)
class TTNConfig:
    char: SharingScheme
    word: SharingScheme
    decoder: SharingScheme

    @property
    def code(self) -> str:
        return self.char.value + self.word.value + self.decoder.value

    def __str__(self) -> str:
        return self.code


def parse_config_code(code: str) -> TTNConfig:
    """``"IIS"`` -> (Independent, Independent, Soft) for (char enc, word enc, decoder)."""
    if not isinstance(code, str) or len(code) != 3:
        raise ConfigError(f"sharing code must have 3 letters, got {code!r}")
    try:
        return TTNConfig(*(SharingScheme(c) for c in code.upper()))
    except ValueError:
        raise ConfigError(f"sharing code {code!r} may only use I, H and S") from None


ALL_CODES = ["".join(p) for p in itertools.product("IHS", repeat=3)]


# ---------------------------------------------------------------- branches

class Branch:
    """The recurrent network of one component for one storage slot."""

    def tensors(self) -> dict[str, Tensor]:
        raise NotImplementedError


class BiLstmBranch(Branch):
    def __init__(self, fwd: LstmCell, bwd: LstmCell, final_only: bool):
        self.fwd, self.bwd, self.final_only = fwd, bwd, final_only

    @classmethod
    def create(cls, store, prefix, d_in, hidden, partition, rng, final_only):
        return cls(LstmCell.create(store, f"{prefix}.lstm_fwd", d_in, hidden, partition, rng),
                   LstmCell.create(store, f"{prefix}.lstm_bwd", d_in, hidden, partition, rng),
                   final_only)

    @property
    def output_dim(self) -> int:
        return 2 * self.fwd.hidden_dim

    def run(self, x: Tensor, mask: np.ndarray) -> Tensor:
        if self.final_only:
            return bilstm_final_batch(self.fwd, self.bwd, x, mask)
        return bilstm_full_batch(self.fwd, self.bwd, x, mask)

    def tensors(self):
        out = {f"lstm_fwd.{k}": v for k, v in self.fwd.tensors().items()}
        out.update({f"lstm_bwd.{k}": v for k, v in self.bwd.tensors().items()})
        return out


class LstmBranch(Branch):
    def __init__(self, cell: LstmCell):
        self.cell = cell

    @classmethod
    def create(cls, store, prefix, d_in, hidden, partition, rng):
        return cls(LstmCell.create(store, f"{prefix}.lstm", d_in, hidden, partition, rng))

    @property
    def output_dim(self) -> int:
        return self.cell.hidden_dim

    def run(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return run_lstm(self.cell, x, mask)

    def step(self, x: Tensor, state):
        h = self.cell.hidden_dim
        if state is None:
            z = np.zeros((x.shape[0], h))
            state = (Tensor(z), Tensor(z.copy()))
        h_new, c_new = lstm_step(self.cell, x, *state)
        return h_new, (h_new, c_new)

    def tensors(self):
        return {f"lstm.{k}": v for k, v in self.cell.tensors().items()}


@dataclass
class SoftPair:
    """Target and source parameters of one soft-shared component, matched by name."""

    name: str
    target: dict[str, Tensor]
    source: dict[str, Tensor]

    def __post_init__(self):
        if set(self.target) != set(self.source):
            raise ad.PairingError(f"{self.name}: tensor names differ between the two sides")
        for k in self.target:
            if self.target[k].shape != self.source[k].shape:
                raise ad.PairingError(f"{self.name}.{k}: {self.target[k].shape} vs {self.source[k].shape}")


def soft_penalty_total(pairs: list[SoftPair]) -> Tensor:
    """Sum of squared l2 distances over all registered soft pairs (unweighted)."""
    if not pairs:
        return Tensor(0.0)
    target, source = {}, {}
    for p in pairs:
        for k in p.target:
            target[f"{p.name}.{k}"] = p.target[k]
            source[f"{p.name}.{k}"] = p.source[k]
    return ad.l2_distance_sq(target, source)


# ---------------------------------------------------------------- layer specs

@dataclass(frozen=True)
class LayerSpec:
    """Which recurrent network a component runs and its sizes.

    ``kind`` is ``"char"`` (BiLSTM over characters, final states),
    ``"word"`` (BiLSTM, all states) or ``"decoder"`` (forward LSTM).
    For ``"char"`` ``input_dim`` is the character vocabulary size and
    ``emb_dim`` the character embedding size.
    """

    kind: str
    input_dim: int
    hidden: int
    emb_dim: int = 0

    @property
    def output_dim(self) -> int:
        return self.hidden if self.kind == "decoder" else 2 * self.hidden

    @property
    def rnn_input_dim(self) -> int:
        return self.emb_dim if self.kind == "char" else self.input_dim

    def make_branch(self, store, prefix, partition, rng) -> Branch:
        if self.kind == "decoder":
            return LstmBranch.create(store, prefix, self.input_dim, self.hidden, partition, rng)
        if self.kind in ("char", "word"):
            return BiLstmBranch.create(store, prefix, self.rnn_input_dim, self.hidden, partition,
                                       rng, final_only=self.kind == "char")
        raise ConfigError(f"unknown layer kind {self.kind!r}")

    def make_table(self, store, name, partition, rng) -> EmbeddingTable:
        return EmbeddingTable.create(store, name, self.input_dim, self.emb_dim, partition, rng)


def _embed_chars(table: EmbeddingTable, char_ids: np.ndarray) -> Tensor:
    return embed_lookup(table, char_ids)


# ---------------------------------------------------------------- components

class Component:
    name: str
    spec: LayerSpec
    soft_pairs: list[SoftPair]

    def forward(self, task: str, x, mask: np.ndarray) -> Tensor:
        raise NotImplementedError

    def step(self, task: str, x: Tensor, state):
        raise NotImplementedError


class SchemedComponent(Component):
    """A component under one fixed TTN scheme."""

    def __init__(self, name: str, spec: LayerSpec, scheme: SharingScheme, store: ParamStore,
                 rng: np.random.Generator, tasks=TASKS):
        self.name, self.spec, self.scheme = name, spec, scheme
        self.tasks = tuple(tasks)
        self.branches: dict[str, Branch] = {}
        self.tables: dict[str, EmbeddingTable] = {}
        self.soft_pairs = []
        if scheme is SharingScheme.HARD:
            prefix, part = f"{name}.shared", "shared"
            br = spec.make_branch(store, prefix, part, rng)
            tab = spec.make_table(store, f"{prefix}.char_emb", part, rng) if spec.kind == "char" else None
            for task in self.tasks:
                self.branches[task] = br
                if tab is not None:
                    self.tables[task] = tab
            return
        tag = "soft." if scheme is SharingScheme.SOFT else ""
        for task in self.tasks:
            prefix = f"{name}.{tag}{task}"
            self.branches[task] = spec.make_branch(store, prefix, task, rng)
            if spec.kind == "char":
                self.tables[task] = spec.make_table(store, f"{prefix}.char_emb", task, rng)
        if scheme is SharingScheme.SOFT and set(self.tasks) == set(TASKS):
            self.soft_pairs.append(SoftPair(name, self._side("target"), self._side("source")))

    def _side(self, task):
        d = dict(self.branches[task].tensors())
        if task in self.tables:
            d["char_emb"] = self.tables[task].matrix
        return d

    def _branch(self, task) -> Branch:
        try:
            return self.branches[task]
        except KeyError:
            raise ConfigError(f"component {self.name} has no {task} path") from None

    def forward(self, task, x, mask):
        br = self._branch(task)
        if self.spec.kind == "char":
            x = _embed_chars(self.tables[task], x)
        return br.run(x, mask)

    def step(self, task, x, state):
        return self._branch(task).step(x, state)


@dataclass
class GateTrace:
    """Gate activations of one gated component for the most recent target pass."""

    g1: np.ndarray
    g2: np.ndarray | None


class GatedComponent(Component):
    """Soft pair, hard branch and (full variant) a target-only branch, mixed by gates.

    target: o_shared = (1 - g1) * h_hard + g1 * h_soft
            o_target = (1 - g2) * h_ind + g2 * o_shared   (full variant)
    source: o_source = h_hard + h_soft_source
    """

    def __init__(self, name: str, spec: LayerSpec, store: ParamStore, rng: np.random.Generator,
                 hard_soft_only: bool = False, scalar_gates: bool = False, tasks=TASKS):
        self.name, self.spec = name, spec
        self.hard_soft_only = hard_soft_only
        self.scalar_gates = scalar_gates
        self.tasks = tuple(tasks)
        self.gate2_clamp: float | None = None
        self.last_trace: GateTrace | None = None
        p = f"{name}.dtn"
        self.table = spec.make_table(store, f"{p}.char_emb", "shared", rng) if spec.kind == "char" else None
        self.hard = spec.make_branch(store, f"{p}.hard", "shared", rng)
        self.soft = {t: spec.make_branch(store, f"{p}.soft.{t}", t, rng) for t in self.tasks}
        self.ind = None if hard_soft_only else spec.make_branch(store, f"{p}.ind", "target", rng)
        d_out = spec.output_dim
        d_in = spec.rnn_input_dim
        g = 1 if scalar_gates else d_out
        # zero gate weights and biases: both gates start at 0.5
        self.Q = store.add(f"{p}.gate.Q", np.zeros((d_out, g)), "target")
        self.R = store.add(f"{p}.gate.R", np.zeros((d_out, g)), "target")
        self.S = store.add(f"{p}.gate.S", np.zeros((d_in, g)), "target")
        self.b_g1 = store.add(f"{p}.gate.b_g1", np.zeros(g), "target")
        if not hard_soft_only:
            self.T = store.add(f"{p}.gate.T", np.zeros((d_out, g)), "target")
            self.U = store.add(f"{p}.gate.U", np.zeros((d_out, g)), "target")
            self.V = store.add(f"{p}.gate.V", np.zeros((d_in, g)), "target")
            self.b_g2 = store.add(f"{p}.gate.b_g2", np.zeros(g), "target")
        self.soft_pairs = []
        if set(self.tasks) == set(TASKS):
            self.soft_pairs.append(SoftPair(name, self.soft["target"].tensors(),
                                            self.soft["source"].tensors()))

    def _widen(self, g: Tensor, d: int) -> Tensor:
        if not self.scalar_gates:
            return g
        return ad.matmul(g, Tensor(np.ones((1, d))))

    def gate_inputs(self, x, mask) -> tuple[Tensor, Tensor]:
        """(RNN input, gate input a_target).  For characters a_target is the mean embedding."""
        if self.spec.kind != "char":
            return x, x
        emb = _embed_chars(self.table, x)
        return emb, ad.masked_mean(emb, mask)

    def combine_target(self, a: Tensor, h_soft: Tensor, h_hard: Tensor, h_ind: Tensor | None) -> Tensor:
        d = self.spec.output_dim
        pre1 = ad.add(ad.add(ad.matmul(h_soft, self.Q), ad.matmul(h_hard, self.R)), ad.matmul(a, self.S))
        g1 = ad.sigmoid(ad.add_bias(pre1, self.b_g1))
        o_shared = ad.blend(self._widen(g1, d), h_hard, h_soft)
        if self.hard_soft_only:
            self.last_trace = GateTrace(g1.value, None)
            return o_shared
        pre2 = ad.add(ad.add(ad.matmul(h_ind, self.T), ad.matmul(o_shared, self.U)), ad.matmul(a, self.V))
        g2 = ad.sigmoid(ad.add_bias(pre2, self.b_g2))
        if self.gate2_clamp is not None:
            g2 = Tensor(np.full(g2.shape, float(self.gate2_clamp)))
        self.last_trace = GateTrace(g1.value, g2.value)
        return ad.blend(self._widen(g2, d), h_ind, o_shared)

    def forward_target(self, x, mask) -> Tensor:
        inp, a = self.gate_inputs(x, mask)
        h_soft = self.soft["target"].run(inp, mask)
        h_hard = self.hard.run(inp, mask)
        h_ind = None if self.ind is None else self.ind.run(inp, mask)
        return self.combine_target(a, h_soft, h_hard, h_ind)

    def forward_source(self, x, mask) -> Tensor:
        if "source" not in self.soft:
            raise ConfigError(f"component {self.name} has no source path")
        inp, _ = self.gate_inputs(x, mask)
        return ad.add(self.hard.run(inp, mask), self.soft["source"].run(inp, mask))

    def forward(self, task, x, mask):
        if task == "target":
            return self.forward_target(x, mask)
        if task == "source":
            return self.forward_source(x, mask)
        raise ConfigError(f"unknown task {task!r}")

    def step(self, task, x, state):
        if task != "target":
            raise ConfigError("stepwise decoding is only defined for the target task")
        state = state or {}
        hs, new = {}, {}
        parts = [("soft", self.soft["target"]), ("hard", self.hard)]
        if self.ind is not None:
            parts.append(("ind", self.ind))
        for key, br in parts:
            hs[key], new[key] = br.step(x, state.get(key))
        return self.combine_target(x, hs["soft"], hs["hard"], hs.get("ind")), new


def build_component(name: str, spec: LayerSpec, mode: str, scheme: SharingScheme | None,
                    store: ParamStore, rng: np.random.Generator, tasks=TASKS,
                    scalar_gates: bool = False) -> Component:
    if mode in ("dtn", "dtn-hs"):
        return GatedComponent(name, spec, store, rng, hard_soft_only=mode == "dtn-hs",
                              scalar_gates=scalar_gates, tasks=tasks)
    if scheme is None:
        raise ConfigError("a sharing scheme is required outside gated modes")
    return SchemedComponent(name, spec, scheme, store, rng, tasks=tasks)


def check_dims(x: Tensor, d: int, what: str) -> None:
    if x.shape[-1] != d:
        raise DimensionError(f"{what}: expected last dim {d}, got {x.shape}")
