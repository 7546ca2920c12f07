"""Tabular autoregressive policy with exact log-probabilities and closed-form gradients."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .compile import BOS, EOS


class UnknownToken(KeyError):
    pass


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


@dataclass
class DecodeResult:
    tokens: list[str]
    truncated: bool


class TabularPolicy:
    """Order-1 (bigram) or order-2 (trigram) table of next-token logits.

    Rows are indexed by the conditioning context (the previous one or two
    tokens), columns by the next token. Order-1 tables hold all ``V`` rows;
    order-2 rows are allocated when first trained, and contexts without a row
    score with zero logits (uniform). The vocabulary is kept sorted so that
    ``argmax`` breaks ties lexicographically.
    """

    def __init__(self, vocab: Iterable[str], order: int = 1, logits: np.ndarray | None = None,
                 contexts: Sequence[tuple[str, ...]] | None = None):
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        self.vocab = sorted(set(vocab) | {BOS, EOS})
        self.index = {t: i for i, t in enumerate(self.vocab)}
        self.order = order
        V = len(self.vocab)
        if order == 1:
            ctxs = [(t,) for t in self.vocab]
        else:
            ctxs = [tuple(c) for c in (contexts or [])]
        self._rows: dict[tuple[int, ...], int] = {
            tuple(self.index[t] for t in c): r for r, c in enumerate(ctxs)
        }
        cap = max(len(ctxs), 16)
        self._table = np.zeros((cap, V))
        self._n = len(ctxs)
        if logits is not None:
            logits = np.asarray(logits, dtype=float)
            if logits.shape != (self._n, V):
                raise ValueError(f"logits shape {logits.shape} != {(self._n, V)}")
            self._table[: self._n] = logits

    # -- table access ---------------------------------------------------
    @property
    def V(self) -> int:
        return len(self.vocab)

    @property
    def logits(self) -> np.ndarray:
        return self._table[: self._n]

    @property
    def contexts(self) -> list[tuple[str, ...]]:
        out = [()] * self._n
        for key, r in self._rows.items():
            out[r] = tuple(self.vocab[i] for i in key)
        return out

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.vocab, self.order, self.logits.copy(), None if self.order == 1 else self.contexts)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        out = []
        for t in tokens:
            try:
                out.append(self.index[t])
            except KeyError:
                raise UnknownToken(t) from None
        return out

    def _row(self, key: tuple[int, ...], create: bool) -> int:
        r = self._rows.get(key)
        if r is None and create:
            if self._n == len(self._table):
                self._table = np.vstack([self._table, np.zeros_like(self._table)])
            r = self._n
            self._rows[key] = r
            self._n += 1
        return -1 if r is None else r

    def _context_keys(self, prompt_ids: list[int], seq_ids: list[int]) -> list[tuple[int, ...]]:
        hist = [self.index[BOS]] * self.order + prompt_ids
        full = hist + seq_ids
        start = len(hist)
        return [tuple(full[start + p - self.order: start + p]) for p in range(len(seq_ids))]

    def rows_for(self, prompt: Sequence[str], seq: Sequence[str], create: bool = False):
        p_ids, s_ids = self.ids(prompt), self.ids(seq)
        rows = np.array([self._row(k, create) for k in self._context_keys(p_ids, s_ids)], dtype=int)
        return rows, np.array(s_ids, dtype=int)

    def _row_logits(self, rows: np.ndarray) -> np.ndarray:
        z = np.zeros((len(rows), self.V))
        have = rows >= 0
        z[have] = self._table[rows[have]]
        return z

    # -- scoring ----------------------------------------------------------
    def token_logprobs(self, prompt: Sequence[str], seq: Sequence[str]) -> np.ndarray:
        rows, nxt = self.rows_for(prompt, seq)
        lp = log_softmax(self._row_logits(rows))
        return lp[np.arange(len(nxt)), nxt]

    def logprob(self, prompt: Sequence[str], seq: Sequence[str]) -> float:
        """Sum of next-token log-probabilities of ``seq`` given ``prompt``."""
        return float(self.token_logprobs(prompt, seq).sum())

    def conditional(self, context: Sequence[str]) -> np.ndarray:
        """Next-token distribution after the last ``order`` tokens of ``context``."""
        ids = [self.index[BOS]] * self.order + self.ids(context)
        r = self._row(tuple(ids[-self.order:]), False)
        z = self._table[r] if r >= 0 else np.zeros(self.V)
        return np.exp(log_softmax(z))

    def logprob_grad(self, prompt: Sequence[str], seq: Sequence[str], weights: np.ndarray | None = None):
        """Rows and per-row gradient of ``sum_t w_t log p(seq_t)`` w.r.t. the logits.

        Returns ``(rows, grad)`` with ``grad[k]`` the gradient for table row
        ``rows[k]`` (rows may repeat). Rows are created as needed.
        """
        rows, nxt = self.rows_for(prompt, seq, create=True)
        p = np.exp(log_softmax(self._table[rows]))
        g = -p
        g[np.arange(len(nxt)), nxt] += 1.0
        if weights is not None:
            g *= np.asarray(weights, dtype=float)[:, None]
        return rows, g

    def score_rows(self, rows: np.ndarray, nxt: np.ndarray, grad: bool = False):
        """Log-probability of ``nxt`` under precomputed ``rows`` (all must exist).

        With ``grad=True`` also returns the per-row gradient ``onehot - softmax``.
        """
        lp = log_softmax(self._table[rows])
        total = float(lp[np.arange(len(nxt)), nxt].sum())
        if not grad:
            return total
        g = -np.exp(lp)
        g[np.arange(len(nxt)), nxt] += 1.0
        return total, g

    def apply(self, rows: np.ndarray, grad: np.ndarray, step: float) -> None:
        """``logits[rows] += step * grad`` with repeated rows accumulated."""
        np.add.at(self._table, rows, step * grad)

    def greedy_decode(self, prompt: Sequence[str], max_len: int = 128) -> DecodeResult:
        context = list(prompt)
        out: list[str] = []
        for _ in range(max_len):
            tok = self.vocab[int(np.argmax(self.conditional(context)))]
            out.append(tok)
            if tok == EOS:
                return DecodeResult(out, False)
            context.append(tok)
        return DecodeResult(out, True)

    # -- persistence ------------------------------------------------------
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.order, self.vocab, self.contexts]).encode())
        h.update(np.ascontiguousarray(self.logits).tobytes())
        return h.hexdigest()[:16]

    def save(self, path: str | Path, config_hash: str = "") -> None:
        buf = io.BytesIO()
        np.savez(
            buf,
            logits=self.logits,
            meta=np.array(json.dumps({"vocab": self.vocab, "order": self.order,
                                      "contexts": None if self.order == 1 else self.contexts,
                                      "config_hash": config_hash})),
        )
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "TabularPolicy":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            logits = data["logits"]
        ctxs = meta["contexts"]
        return cls(meta["vocab"], meta["order"], logits, [tuple(c) for c in ctxs] if ctxs else None)
