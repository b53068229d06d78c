"""Small fixtures shared by model, trainer and CLI tests."""
import numpy as np

from tunable_ner.data import SynthSpec, Vocab, synth_generate
from tunable_ner.model import ModelConfig, NerModel

TINY_SPEC = SynthSpec(lexicon_size=20, vocab_size=40, n_templates=8, min_len=3, max_len=6)
TINY_DIMS = dict(word_dim=5, char_dim=4, tag_dim=3, char_hidden=3, word_hidden=4,
                 decoder_hidden=3, dropout=0.0)
MODES = ["baseline", "ttn:III", "ttn:HHH", "ttn:SSS", "ttn:IHS", "dtn", "dtn-hs"]


def tiny_world(n_source=30, n_target=20, seed=1):
    src, tgt = synth_generate(TINY_SPEC, n_source, seed=seed, n_target=n_target)
    return src, tgt, Vocab.build({"source": src, "target": tgt})


def tiny_model(vocab, mode, seed=3, jitter=0.0, **over):
    model = NerModel(ModelConfig(**{**TINY_DIMS, **over, "mode": mode}), vocab, seed=seed)
    if jitter:
        rng = np.random.default_rng(seed + 100)
        for t in model.store.tensors.values():
            t.value[...] += rng.normal(0.0, jitter, t.shape)
    return model
