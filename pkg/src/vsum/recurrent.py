"""Shared-weight LSTM autoencoder over feature sequences.

One LSTM encoder is shared by two call sites: it compresses both the raw
feature sequence and the attended sequence into final-hidden-state
embeddings. A separate LSTM decoder, driven by zero inputs from the raw
embedding, reconstructs the features through a linear readout. The two
losses here are the summed squared reconstruction error and the squared
distance between the paired embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError


@dataclass
class LstmParams:
    """Stacked-gate LSTM weights. Gate order along columns is (i, f, g, o)."""

    w_gates: Tensor   # (d_in + units) x 4*units
    b_gates: Tensor   # 1 x 4*units
    units: int

    def __post_init__(self):
        if self.units < 1:
            raise ShapeError("LSTM needs at least one unit")
        if self.w_gates.shape[1] != 4 * self.units or self.b_gates.shape != (1, 4 * self.units):
            raise ShapeError(
                f"gate shapes {self.w_gates.shape}/{self.b_gates.shape} do not match "
                f"4*units={4 * self.units}")

    @property
    def input_dim(self) -> int:
        return self.w_gates.shape[0] - self.units

    def tensors(self):
        return [self.w_gates, self.b_gates]


@dataclass
class AutoencoderParams:
    """Encoder shared by both branches; decoder plus readout reconstruct features."""

    encoder: LstmParams
    decoder: LstmParams
    out_proj: Tensor   # units x d

    def tensors(self):
        return self.encoder.tensors() + self.decoder.tensors() + [self.out_proj]


def init_lstm(d_in: int, units: int, rng: np.random.Generator, dtype=None,
              forget_bias: float = 1.0) -> LstmParams:
    w = dc.uniform_matrix(d_in + units, 4 * units, rng, dtype=dtype)
    b = dc.zeros(1, 4 * units, requires_grad=True, dtype=dtype)
    # positive forget bias so early training carries state
    b.data[0, units:2 * units] = forget_bias
    return LstmParams(w_gates=w, b_gates=b, units=units)


# The decoder runs on zero inputs, so the video embedding it starts from is
# its only content; a high forget bias keeps that state alive over a whole
# rollout instead of decaying within a few steps.
DECODER_FORGET_BIAS = 4.0


def init_autoencoder(d: int, units: int, rng: np.random.Generator,
                     dtype=None) -> AutoencoderParams:
    return AutoencoderParams(
        encoder=init_lstm(d, units, rng, dtype=dtype),
        decoder=init_lstm(d, units, rng, dtype=dtype, forget_bias=DECODER_FORGET_BIAS),
        out_proj=dc.uniform_matrix(units, d, rng, dtype=dtype),
    )


def lstm_step(x_t: Tensor, h: Tensor, c: Tensor,
              p: LstmParams) -> tuple[Tensor, Tensor]:
    """One cell update from row vectors x_t (1 x d_in), h and c (1 x units)."""
    u = p.units
    if x_t.shape != (1, p.input_dim):
        raise ShapeError(f"lstm_step: input shape {x_t.shape}, expected (1, {p.input_dim})")
    if h.shape != (1, u) or c.shape != (1, u):
        raise ShapeError(f"lstm_step: state shapes {h.shape}/{c.shape}, expected (1, {u})")
    z = dc.add_bias(dc.matmul(dc.concat_cols([x_t, h]), p.w_gates), p.b_gates)
    i = dc.sigmoid(dc.slice_cols(z, 0, u))
    f = dc.sigmoid(dc.slice_cols(z, u, 2 * u))
    g = dc.tanh(dc.slice_cols(z, 2 * u, 3 * u))
    o = dc.sigmoid(dc.slice_cols(z, 3 * u, 4 * u))
    c_next = dc.add(dc.mul(f, c), dc.mul(i, g))
    h_next = dc.mul(o, dc.tanh(c_next))
    return h_next, c_next


def encode_sequence(seq: Tensor, p: LstmParams) -> Tensor:
    """Run the cell left-to-right from zero state; the final h is the embedding."""
    t_len = seq.shape[0]
    h = dc.zeros(1, p.units, dtype=seq.dtype)
    c = dc.zeros(1, p.units, dtype=seq.dtype)
    for t in range(t_len):
        h, c = lstm_step(dc.slice_rows(seq, t, t + 1), h, c, p)
    return h


def decode_sequence(e: Tensor, t_len: int, p_dec: LstmParams,
                    out_proj: Tensor) -> Tensor:
    """Reconstruct t_len feature rows from an embedding.

    The decoder starts from h = e, c = 0 and is fed a zero vector at every
    step; each hidden state is projected to feature width by ``out_proj``.
    """
    if t_len < 1:
        raise ShapeError("decode_sequence: need at least one step")
    if e.shape != (1, p_dec.units):
        raise ShapeError(f"embedding shape {e.shape} does not match decoder units {p_dec.units}")
    h = e
    c = dc.zeros(1, p_dec.units, dtype=e.dtype)
    zero_in = dc.zeros(1, p_dec.input_dim, dtype=e.dtype)
    rows = []
    for _ in range(t_len):
        h, c = lstm_step(zero_in, h, c, p_dec)
        rows.append(dc.matmul(h, out_proj))
    return dc.concat_rows(rows)


def rec_loss(x_hat: Tensor, x: Tensor, mean_over_frames: bool = False) -> Tensor:
    """Sum over frames of the squared reconstruction error.

    ``mean_over_frames`` divides by T for stability experiments; the default
    is the plain sum.
    """
    if x_hat.shape != x.shape:
        raise ShapeError(f"rec_loss: shapes {x_hat.shape} and {x.shape} differ")
    total = dc.sum_all(dc.square(dc.sub(x_hat, x)))
    if mean_over_frames:
        total = dc.scale(total, 1.0 / x.shape[0])
    return total


def con_loss(e_x: Tensor, e_z: Tensor) -> Tensor:
    """Squared distance between the two branch embeddings."""
    if e_x.shape != e_z.shape:
        raise ShapeError(f"con_loss: embedding shapes {e_x.shape} and {e_z.shape} differ")
    return dc.sum_all(dc.square(dc.sub(e_x, e_z)))
