"""Layers used by the note and time-series models.

All layers are stateless functions over explicit parameter containers,
so the same parameters can be shared across many inputs (the per-note
encoder applies one set of weights to every note in a patient file).
Inputs may carry any number of leading batch axes unless noted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, DataError
from .tensor import Tensor, concat, stack

# -- parameter containers -----------------------------------------------------


@dataclass
class Conv1dParams:
    """kernels: [K, C_in, C_out], bias: [C_out]."""

    kernels: Tensor
    bias: Tensor


@dataclass
class BatchNormParams:
    """Per-channel scale/shift plus running statistics.

    gamma/beta are trainable; the running statistics are plain arrays
    updated in place during train-mode forwards and read in eval mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.99


@dataclass
class GruDirectionParams:
    """Gate weights for one direction: W_* [D, H], U_* [H, H], b_* [H]."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    def weight_tensors(self) -> list[Tensor]:
        return [self.w_z, self.u_z, self.w_r, self.u_r, self.w_h, self.u_h]

    def all_tensors(self) -> dict[str, Tensor]:
        return {
            "w_z": self.w_z, "u_z": self.u_z, "b_z": self.b_z,
            "w_r": self.w_r, "u_r": self.u_r, "b_r": self.b_r,
            "w_h": self.w_h, "u_h": self.u_h, "b_h": self.b_h,
        }


@dataclass
class BiGruParams:
    fwd: GruDirectionParams
    bwd: GruDirectionParams


@dataclass
class DenseParams:
    """weight: [D, n_out], bias: [n_out]."""

    weight: Tensor
    bias: Tensor


# -- convolution ---------------------------------------------------------------


def conv1d(x: Tensor, params: Conv1dParams) -> Tensor:
    """Same-length cross-correlation along the lexical axis.

    x: [..., L, C_in] -> [..., L, C_out]. Zero padding of (K-1)/2 on each
    side; kernel size must be odd. out[i] = sum_k x[i + k - K//2] . W[k].
    """
    kernels = params.kernels
    k_size, c_in, _ = kernels.shape
    if k_size % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {k_size}")
    if x.shape[-1] != c_in:
        raise ConfigurationError(
            f"input has {x.shape[-1]} channels, kernel expects {c_in}"
        )
    length = x.shape[-2]
    if length < 1:
        raise ConfigurationError("conv1d needs at least one position")
    pad = (k_size - 1) // 2
    padded = x.pad_axis(pad, pad, axis=-2)
    out = None
    for k in range(k_size):
        window = padded[..., k : k + length, :]
        term = window @ kernels[k]
        out = term if out is None else out + term
    return out + params.bias


# -- regularization ------------------------------------------------------------


def spatial_dropout(
    x: Tensor, p: float, *, training: bool, rng: np.random.Generator | None = None
) -> Tensor:
    """Drop entire channels (feature maps), inverted-dropout scaling.

    x: [..., L, C]. In train mode each channel of each sample is zeroed
    with probability p and survivors are scaled by 1/(1-p); eval mode is
    the exact identity.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("train-mode dropout requires an explicit rng")
    mask_shape = x.shape[:-2] + (1, x.shape[-1])
    keep = (rng.random(mask_shape) >= p).astype(np.float64)
    return x * (keep / (1.0 - p))


def dropout(
    x: Tensor, p: float, *, training: bool, rng: np.random.Generator | None = None
) -> Tensor:
    """Plain elementwise inverted dropout (used before fusion heads)."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("train-mode dropout requires an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(np.float64)
    return x * (keep / (1.0 - p))


# -- batch normalization ---------------------------------------------------------


def batchnorm(x: Tensor, params: BatchNormParams, *, training: bool) -> Tensor:
    """Normalize per channel over all leading axes of [..., L, C].

    Train mode uses batch statistics and updates the running ones by
    exponential moving average (running variance uses the unbiased batch
    variance); eval mode uses the running statistics.
    """
    axes = tuple(range(x.data.ndim - 1))
    if training:
        count = int(np.prod(x.shape[:-1]))
        if count < 2:
            raise DataError(
                f"batchnorm train mode needs >= 2 values per channel, got {count}"
            )
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        xhat = centered / (var + params.eps).sqrt()
        mom = params.momentum
        params.running_mean *= mom
        params.running_mean += (1.0 - mom) * mu.data.reshape(-1)
        unbiased = var.data.reshape(-1) * (count / (count - 1))
        params.running_var *= mom
        params.running_var += (1.0 - mom) * unbiased
    else:
        scale = 1.0 / np.sqrt(params.running_var + params.eps)
        xhat = (x - params.running_mean) * scale
    return params.gamma * xhat + params.beta


# -- pooling --------------------------------------------------------------------


def global_avg_pool(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Per-channel mean over (unmasked) positions: [..., L, C] -> [..., C]."""
    if mask is None:
        return x.mean(axis=-2)
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise DataError("global_avg_pool: some input has every position masked")
    weights = mask.astype(np.float64)[..., None]
    return (x * weights).sum(axis=-2) / counts[..., None]


# -- recurrent layers -------------------------------------------------------------


def gru_step(x: Tensor, h_prev: Tensor, params: GruDirectionParams) -> Tensor:
    """One GRU step. x: [..., D], h_prev: [..., H] -> [..., H].

    z = sigma(W_z x + U_z h + b_z); r = sigma(W_r x + U_r h + b_r);
    cand = tanh(W_h x + U_h (r*h) + b_h); h' = (1-z)*h + z*cand.
    """
    z = (x @ params.w_z + h_prev @ params.u_z + params.b_z).sigmoid()
    r = (x @ params.w_r + h_prev @ params.u_r + params.b_r).sigmoid()
    cand = (x @ params.w_h + (r * h_prev) @ params.u_h + params.b_h).tanh()
    return (1.0 - z) * h_prev + z * cand


def bigru(
    seq: Tensor,
    params: BiGruParams,
    seq_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Bidirectional GRU over [B, T, D] (or [T, D]).

    Returns (outputs [B, T, 2H], final [B, 2H]); per-step outputs are the
    concatenation [h_fwd; h_bwd]. Masked steps copy the previous hidden
    state through unchanged, so `final` holds the forward state at the
    last unmasked step and the backward state at the first unmasked step.
    Hidden states start at zero.
    """
    squeeze = seq.data.ndim == 2
    if squeeze:
        seq = seq.reshape((1,) + seq.shape)
        if seq_mask is not None:
            seq_mask = np.asarray(seq_mask, dtype=bool)[None, :]
    batch, steps, _ = seq.shape
    if steps == 0:
        raise DataError("bigru: empty sequence")
    hidden = params.fwd.b_z.shape[0]
    if seq_mask is not None:
        seq_mask = np.asarray(seq_mask, dtype=bool)
        if not seq_mask.any(axis=1).all():
            raise DataError("bigru: some sequence has every step masked")

    def run(direction: GruDirectionParams, order: range) -> list[Tensor]:
        h = Tensor(np.zeros((batch, hidden)))
        states: list[Tensor] = []
        for t in order:
            h_new = gru_step(seq[:, t, :], h, direction)
            if seq_mask is not None:
                m = seq_mask[:, t].astype(np.float64)[:, None]
                h_new = h_new * m + h * (1.0 - m)
            h = h_new
            states.append(h)
        return states

    states_f = run(params.fwd, range(steps))
    states_b = run(params.bwd, range(steps - 1, -1, -1))
    states_b.reverse()
    outputs = stack(
        [concat([hf, hb], axis=-1) for hf, hb in zip(states_f, states_b)], axis=1
    )
    final = concat([states_f[-1], states_b[0]], axis=-1)
    if squeeze:
        outputs = outputs.reshape(outputs.shape[1:])
        final = final.reshape(final.shape[1:])
    return outputs, final


# -- dense head --------------------------------------------------------------------


def dense(x: Tensor, params: DenseParams) -> Tensor:
    return x @ params.weight + params.bias


def dense_sigmoid(x: Tensor, params: DenseParams) -> Tensor:
    """Sigmoid head: [..., D] -> probabilities strictly inside (0, 1).

    float64 sigmoid rounds to exactly 0/1 for |logit| > ~37; the output
    is nudged back into the open interval so downstream log-losses stay
    finite.
    """
    out = dense(x, params).sigmoid().clip(1e-15, 1.0 - 1e-15)
    return out.reshape(out.shape[:-1])


# -- weight decay -------------------------------------------------------------------


def l2_penalty(weights, lam: float) -> Tensor:
    """lam * sum of squares over the given weight tensors.

    Callers pass kernel and recurrent weight matrices only; biases and
    normalization parameters are excluded by convention.
    """
    if lam < 0:
        raise ConfigurationError(f"decay coefficient must be >= 0, got {lam}")
    weights = list(weights)
    if lam == 0.0 or not weights:
        return Tensor(0.0)
    total = None
    for w in weights:
        term = (w * w).sum()
        total = term if total is None else total + term
    return total * lam
