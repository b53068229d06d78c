"""Independent reference implementations used only by the tests.

They are written declaratively (a span is checked position by position)
rather than as the left-to-right state machines used by the package.
"""
from __future__ import annotations


def _parts(tag):
    if tag == "O" or "-" not in tag:
        return "O", None
    p, t = tag.split("-", 1)
    return p, t


def bio_spans(tags):
    """Chunks of a BIO sequence; an I-X not preceded by B-X/I-X starts a chunk."""
    n = len(tags)
    types = {_parts(t)[1] for t in tags} - {None}
    out = set()
    for x in types:
        def is_(k, *prefixes):
            return 0 <= k < n and _parts(tags[k]) in {(p, x) for p in prefixes}

        for i in range(n):
            starts = is_(i, "B") or (is_(i, "I") and not is_(i - 1, "B", "I"))
            if not starts:
                continue
            j = i
            while is_(j + 1, "I"):
                j += 1
            out.add((i, j, x))
    return out


def iobes_spans(tags):
    """Spans of IOBES with the documented repair: a span (i, j, X) exists iff
    i can start, j can end and every step in between continues."""
    n = len(tags)
    types = {_parts(t)[1] for t in tags} - {None}
    out = set()
    for x in types:
        def is_(k, *prefixes):
            return 0 <= k < n and _parts(tags[k]) in {(p, x) for p in prefixes}

        def opens_after(k):
            return is_(k, "B", "I")

        for i in range(n):
            start = is_(i, "B", "S") or (is_(i, "I", "E") and not opens_after(i - 1))
            if not start:
                continue
            for j in range(i, n):
                end = is_(j, "E", "S") or (is_(j, "B", "I") and not is_(j + 1, "I", "E"))
                inner = all(is_(k, "I", "E") and opens_after(k - 1) for k in range(i + 1, j + 1))
                if end and inner:
                    out.add((i, j, x))
    return out


def micro_prf(gold_seqs, pred_seqs):
    tp = n_gold = n_pred = 0
    for g, p in zip(gold_seqs, pred_seqs):
        gs, ps = iobes_spans(g), iobes_spans(p)
        n_gold += len(gs)
        n_pred += len(ps)
        tp += len([s for s in ps if s in gs])
    p = 100.0 * tp / n_pred if n_pred else (100.0 if n_gold == 0 else 0.0)
    r = 100.0 * tp / n_gold if n_gold else (100.0 if n_pred == 0 else 0.0)
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f
