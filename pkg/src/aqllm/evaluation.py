"""BERTScore over a pluggable token embedder, plus benchmark statistics.

Scores use greedy cosine matching with no IDF weighting and no baseline
rescaling. ``HashEmbedder`` gives deterministic per-token vectors so the
arithmetic can be tested without model weights; any contextual embedder
with the same ``embed`` method can replace it.
"""

from __future__ import annotations

import csv
import hashlib
import math
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import DegenerateEmbeddingError, EvaluationError, PreconditionError, ShapeError
from .stats import IQR_FACTOR, percentile

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split into word runs and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class EmbeddedText:
    tokens: tuple[str, ...]
    embeddings: np.ndarray  # shape (len(tokens), d)

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=float)
        if emb.ndim != 2 or emb.shape[0] != len(self.tokens):
            raise ShapeError(f"{len(self.tokens)} tokens but embeddings of shape {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise DegenerateEmbeddingError("non-finite embedding entries")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "embeddings", emb)


class Embedder(Protocol):
    def embed(self, text: str) -> EmbeddedText: ...


class HashEmbedder:
    """Unit vector per token, seeded from a hash of the token text."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        v = self._cache.get(token)
        if v is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            v = rng.standard_normal(self.dim)
            v /= np.linalg.norm(v)
            self._cache[token] = v
        return v

    def embed(self, text: str) -> EmbeddedText:
        tokens = tokenize(text)
        emb = np.array([self.vector(t) for t in tokens]).reshape(len(tokens), self.dim)
        return EmbeddedText(tuple(tokens), emb)


class OneHotEmbedder:
    """Distinct tokens get orthogonal basis vectors (shared vocabulary across calls)."""

    def __init__(self, dim: int = 4096):
        self.dim = dim
        self.vocab: dict[str, int] = {}

    def embed(self, text: str) -> EmbeddedText:
        tokens = tokenize(text)
        emb = np.zeros((len(tokens), self.dim))
        for i, t in enumerate(tokens):
            if t not in self.vocab:
                if len(self.vocab) >= self.dim:
                    raise EvaluationError("one-hot vocabulary exhausted")
                self.vocab[t] = len(self.vocab)
            emb[i, self.vocab[t]] = 1.0
        return EmbeddedText(tuple(tokens), emb)


class TransformerEmbedder:
    """Contextual token embeddings from a Hugging Face encoder (live mode).

    Special tokens are dropped, as in the usual BERTScore setup. Loading the
    model needs its weights locally or network access.
    """

    def __init__(self, model_name: str = "roberta-large", layer: int | None = None, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EvaluationError("transformers/torch are required for TransformerEmbedder") from exc
        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name).to(device).eval()
        self.layer = layer
        self.device = device

    def embed(self, text: str) -> EmbeddedText:
        enc = self.tokenizer(text, return_tensors="pt", truncation=True, return_special_tokens_mask=True)
        special = enc.pop("special_tokens_mask")[0].bool()
        with self._torch.no_grad():
            out = self.model(**{k: v.to(self.device) for k, v in enc.items()}, output_hidden_states=True)
        hidden = out.hidden_states[self.layer] if self.layer is not None else out.last_hidden_state
        keep = ~special
        ids = enc["input_ids"][0][keep].tolist()
        tokens = tuple(self.tokenizer.convert_ids_to_tokens(ids))
        return EmbeddedText(tokens, hidden[0][keep.to(hidden.device)].cpu().numpy())


def similarity_matrix(candidate: EmbeddedText, reference: EmbeddedText) -> np.ndarray:
    """Cosine similarity of every candidate token with every reference token."""
    c, r = candidate.embeddings, reference.embeddings
    if c.shape[0] == 0 or r.shape[0] == 0:
        raise ShapeError("cannot compare an empty text")
    if c.shape[1] != r.shape[1]:
        raise ShapeError(f"embedding dimensions differ: {c.shape[1]} vs {r.shape[1]}")
    cn = np.linalg.norm(c, axis=1)
    rn = np.linalg.norm(r, axis=1)
    if np.any(cn == 0) or np.any(rn == 0):
        raise DegenerateEmbeddingError("zero-norm token embedding")
    s = (c @ r.T) / np.outer(cn, rn)
    return np.clip(s, -1.0, 1.0)


def _check(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.size == 0:
        raise ShapeError(f"similarity matrix must be non-empty 2-D, got shape {s.shape}")
    return s


def bert_precision(s: np.ndarray) -> float:
    """Mean over candidate tokens of the best reference match."""
    return float(np.mean(_check(s).max(axis=1)))


def bert_recall(s: np.ndarray) -> float:
    """Mean over reference tokens of the best candidate match."""
    return float(np.mean(_check(s).max(axis=0)))


def bert_f1(p: float, r: float) -> float:
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


@dataclass(frozen=True)
class BertScore:
    precision: float
    recall: float
    f1: float

    def as_tuple(self) -> tuple[float, float, float]:
        return self.precision, self.recall, self.f1


def score_text(candidate: str, reference: str, embedder: Embedder) -> BertScore:
    try:
        c = embedder.embed(candidate)
        r = embedder.embed(reference)
    except EvaluationError:
        raise
    except Exception as exc:
        raise EvaluationError(f"embedder failed: {exc}") from exc
    s = similarity_matrix(c, r)
    p, rec = bert_precision(s), bert_recall(s)
    return BertScore(p, rec, bert_f1(p, rec))


@dataclass(frozen=True)
class IterationStats:
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    outliers: tuple[float, ...] = ()

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def iteration_stats(scores: Sequence[float]) -> IterationStats:
    """Boxplot summary; outliers lie beyond 1.5 IQR from the quartiles."""
    if len(scores) == 0:
        raise PreconditionError("no scores")
    q1, med, q3 = (percentile(scores, p) for p in (0.25, 0.5, 0.75))
    lo, hi = q1 - IQR_FACTOR * (q3 - q1), q3 + IQR_FACTOR * (q3 - q1)
    outliers = tuple(x for x in scores if x < lo or x > hi)
    return IterationStats(len(scores), min(scores), q1, med, q3, max(scores), math.fsum(scores) / len(scores), outliers)


@dataclass(frozen=True)
class VariantComparison:
    mean_delta: float
    normal_min: float
    refined_min: float
    normal_max: float
    refined_max: float
    separated: bool  # q3(normal) < q1(refined)
    disjoint: bool  # max(normal) < min(refined)


def compare_prompt_variants(normal: Sequence[float], refined: Sequence[float]) -> VariantComparison:
    if not normal or not refined:
        raise PreconditionError("both variants need at least one score")
    a, b = iteration_stats(normal), iteration_stats(refined)
    return VariantComparison(b.mean - a.mean, a.min, b.min, a.max, b.max, a.q3 < b.q1, a.max < b.min)


# --- CSV interfaces ----------------------------------------------------------------

SCORE_COLUMNS = ["iteration", "day", "population_class", "precision", "recall", "f1"]


@dataclass(frozen=True)
class ScoreRow:
    iteration: str
    day: str
    population_class: str
    score: BertScore

    def csv_row(self) -> list[str]:
        return [self.iteration, self.day, self.population_class] + [f"{x:.6f}" for x in self.score.as_tuple()]


def write_scores_csv(rows: Iterable[ScoreRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for row in rows:
            w.writerow(row.csv_row())
    return path


def read_scores_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


BOX_COLUMNS = ["group", "n", "min", "q1", "median", "q3", "max", "mean", "outliers"]


def boxplot_rows(groups: Mapping[str, Sequence[float]]) -> list[list[str]]:
    rows = []
    for name in sorted(groups):
        st = iteration_stats(groups[name])
        rows.append([name, str(st.n)] + [f"{x:.6f}" for x in (st.min, st.q1, st.median, st.q3, st.max, st.mean)]
                    + [" ".join(f"{x:.6f}" for x in st.outliers)])
    return rows


def write_boxplot_csv(groups: Mapping[str, Sequence[float]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BOX_COLUMNS)
        w.writerows(boxplot_rows(groups))
    return path


def group_scores(rows: Iterable[Mapping[str, str]], metric: str = "f1", by: Sequence[str] = ("day", "population_class"),
                 include_total: bool = True) -> dict[str, list[float]]:
    """Group score rows for boxplots: one group per ``by`` combination, plus ``total``."""
    groups: dict[str, list[float]] = defaultdict(list)
    for row in rows:
        value = float(row[metric])
        key = "/".join(row[k] for k in by) if by else "all"
        groups[key].append(value)
        if include_total:
            groups["total"].append(value)
    return dict(groups)


# Live-mode reference values, reported next to recomputed ones; never gates.
PUBLISHED_REFERENCE = {
    "min_triple_jan10_lung": (0.808, 0.778, 0.793),
    "lafd_min_normal_f1": 0.8233,
    "lafd_min_refined_f1": 0.8337,
    "lafd_mean_delta_f1": 0.0068,
}
