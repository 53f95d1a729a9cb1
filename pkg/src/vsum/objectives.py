"""Classifier head and the training loss algebra.

The supervised objective is binary cross-entropy on frame highlight scores
plus the autoencoder's reconstruction and consistency terms, summed without
weights; cross-entropy applies only to labeled videos. Fully unlabeled
training swaps cross-entropy for a within-shot diversity penalty. Optional
per-term multipliers exist for ablations and default to 1.0, which
reproduces the plain objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError, UsageError
from .summarize import ShotSegmentation

MODES = ("supervised", "semi", "unsupervised")

PROB_EPS = 1e-7  # cross-entropy clamp; scores of exactly 0 or 1 are undefined


@dataclass
class ClassifierParams:
    w: Tensor   # d x 1
    b: Tensor   # 1 x 1

    def tensors(self):
        return [self.w, self.b]


@dataclass
class LabelSet:
    """Binary frame labels, or the explicit absence of them."""

    y: np.ndarray | None
    present: bool

    @classmethod
    def of(cls, labels) -> "LabelSet":
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        bad = ~((y == 0.0) | (y == 1.0))
        if bad.any():
            raise UsageError(f"labels must be binary; offending value {y[bad][0]!r}")
        return cls(y=y, present=True)

    @classmethod
    def absent(cls) -> "LabelSet":
        return cls(y=None, present=False)


@dataclass
class LossReport:
    """Per-step loss components; None marks a term the mode did not compute."""

    total: float
    mode: str
    cls: float | None = None
    rec: float | None = None
    con: float | None = None
    div: float | None = None

    def as_dict(self) -> dict:
        return {"mode": self.mode, "cls": self.cls, "rec": self.rec,
                "con": self.con, "div": self.div, "total": self.total}


def init_classifier(d: int, rng: np.random.Generator, dtype=None) -> ClassifierParams:
    return ClassifierParams(
        w=dc.uniform_matrix(d, 1, rng, dtype=dtype),
        b=dc.zeros(1, 1, requires_grad=True, dtype=dtype),
    )


def classify(z: Tensor, p: ClassifierParams) -> Tensor:
    """Sigmoid highlight score per frame: T x d features to T x 1 probabilities."""
    if z.shape[1] != p.w.shape[0]:
        raise ShapeError(f"classifier weights {p.w.shape} do not match features {z.shape}")
    return dc.sigmoid(dc.add_bias(dc.matmul(z, p.w), p.b))


def cls_loss(y_hat: Tensor, labels: LabelSet) -> Tensor:
    """Mean binary cross-entropy over frames; probabilities clamped away from {0,1}."""
    if not labels.present:
        raise UsageError("cls_loss called on an unlabeled video")
    t_len = y_hat.shape[0]
    if y_hat.shape != (t_len, 1) or labels.y.size != t_len:
        raise ShapeError(f"scores {y_hat.shape} do not pair with {labels.y.size} labels")
    y = labels.y.reshape(-1, 1)
    p = dc.clamp(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    pos = dc.mul(dc.Tensor(y, dtype=y_hat.dtype), dc.log(p))
    one = np.ones_like(y)
    neg = dc.mul(dc.Tensor(one - y, dtype=y_hat.dtype),
                 dc.log(dc.sub(dc.Tensor(one, dtype=y_hat.dtype), p)))
    return dc.scale(dc.sum_all(dc.add(pos, neg)), -1.0 / t_len)


def _cosine_matrix(x: np.ndarray) -> np.ndarray:
    # zero-norm frames get similarity 0 against everything
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = x / safe[:, None]
    sims = unit @ unit.T
    sims[norms == 0.0, :] = 0.0
    sims[:, norms == 0.0] = 0.0
    return sims


def div_loss(x, scores: Tensor, seg: ShotSegmentation,
             hard_top_k: int | None = None) -> Tensor:
    """Within-shot pairwise cosine similarity, weighted by score products.

    Sums d(x_t, x_t') * w_t * w_t' over ordered frame pairs t != t' inside
    each shot, with w the highlight scores; minimizing it pushes jointly
    high-scoring, mutually similar frames apart. ``hard_top_k`` switches to
    an unweighted sum over each shot's k highest-scoring frames (ablation
    only; that variant is piecewise constant in the scores).
    """
    feats = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    t_len = feats.shape[0]
    if seg.n_frames != t_len:
        raise ShapeError(f"segmentation covers {seg.n_frames} frames, features have {t_len}")
    if scores.shape != (t_len, 1):
        raise ShapeError(f"scores shape {scores.shape}, expected ({t_len}, 1)")
    sims = _cosine_matrix(feats)
    if hard_top_k is not None:
        total = 0.0
        raw = scores.data[:, 0]
        for a, b in seg.shots():
            keep = a + np.argsort(raw[a:b])[::-1][:hard_top_k]
            for t in keep:
                for t2 in keep:
                    if t != t2:
                        total += sims[t, t2]
        return dc.Tensor([[total]], dtype=scores.dtype)
    parts = []
    for a, b in seg.shots():
        if b - a < 2:
            continue
        block = sims[a:b, a:b].copy()
        np.fill_diagonal(block, 0.0)
        w = dc.slice_rows(scores, a, b)
        quad = dc.matmul(dc.transpose(w), dc.matmul(dc.Tensor(block, dtype=scores.dtype), w))
        parts.append(quad)
    if not parts:
        return dc.Tensor([[0.0]], dtype=scores.dtype)
    total = parts[0]
    for p in parts[1:]:
        total = dc.add(total, p)
    return total


def combine_total(mode: str, cls=None, rec=None, con=None, div=None, weights=None):
    """Sum the mode's loss terms; works on floats and on scalar tensors.

    supervised/semi: cls + rec + con, with cls skipped when the video is
    unlabeled (semi) and required in supervised mode. unsupervised:
    rec + con + div. ``weights`` maps term name to multiplier; a weight of 0
    drops the term entirely, and terms passed as None are treated as absent.
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    w = {"cls": 1.0, "rec": 1.0, "con": 1.0, "div": 1.0}
    if weights:
        w.update(weights)

    def scaled(term, name):
        if isinstance(term, Tensor):
            return term if w[name] == 1.0 else dc.scale(term, w[name])
        return w[name] * term

    terms = []
    if mode == "unsupervised":
        if div is None:
            raise UsageError("unsupervised mode requires the diversity term")
    else:
        if cls is None and mode == "supervised":
            raise UsageError("supervised mode requires labels for every video")
        if cls is not None and w["cls"] != 0.0:
            terms.append(scaled(cls, "cls"))
    if rec is not None and w["rec"] != 0.0:
        terms.append(scaled(rec, "rec"))
    if con is not None and w["con"] != 0.0:
        terms.append(scaled(con, "con"))
    if mode == "unsupervised" and div is not None and w["div"] != 0.0:
        terms.append(scaled(div, "div"))
    if not terms:
        raise UsageError(f"no loss terms active in mode {mode!r}")
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t) if isinstance(total, Tensor) else total + t
    return total


def total_loss(mode: str, cls=None, rec=None, con=None, div=None,
               weights=None) -> LossReport:
    """Combine components into a LossReport; accepts floats or scalar tensors."""
    def val(t):
        if t is None:
            return None
        return t.item() if isinstance(t, Tensor) else float(t)

    total = combine_total(mode, cls=cls, rec=rec, con=con, div=div, weights=weights)
    return LossReport(total=val(total), mode=mode, cls=val(cls), rec=val(rec),
                      con=val(con), div=val(div) if mode == "unsupervised" else None)
