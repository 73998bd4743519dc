"""The three model graphs over ndcore layers.

Notes-HCR: a per-note encoder (stacked Conv1D / SpatialDropout /
BatchNorm / ReLU blocks with residual connections, then masked global
average pooling) shared across all notes of a stay, feeding a
bidirectional GRU over the note sequence and a sigmoid head.

CTS-RNN: a two-layer bidirectional GRU over hourly physiology channels
concatenated with their missingness indicators.

MM-HCR: both branches, their final vectors concatenated before dropout
and the sigmoid head.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .embed import EmbeddingMatrix
from .errors import ConfigurationError, DataError
from .ndcore import (
    BatchNormParams,
    BiGruParams,
    Conv1dParams,
    DenseParams,
    GruDirectionParams,
    Tensor,
    bigru,
    batchnorm,
    concat,
    conv1d,
    dense_sigmoid,
    global_avg_pool,
    parameter,
    spatial_dropout,
)
from .ndcore.layers import dropout
from .notesproc import OOV_ID, PAD_ID, PatientFile
from .cohort import ClinicalTimeSeries, N_TS_VARIABLES, standardize_values

NOTES_HCR = "notes-hcr"
CTS_RNN = "cts-rnn"
MM_HCR = "mm-hcr"
MODEL_KINDS = (NOTES_HCR, CTS_RNN, MM_HCR)


@dataclass(frozen=True)
class ModelConfig:
    note_len: int = 500
    embed_dim: int = 200
    conv_blocks: int = 3
    filters: int = 200
    kernel_size: int = 3
    spatial_dropout: float = 0.5
    conv_decay: float = 1e-5
    temporal_hidden: int = 64
    cts_features: int = N_TS_VARIABLES
    cts_hidden: tuple[int, int] = (32, 16)
    cts_decay: float = 1e-3
    fusion_dropout: float = 0.3
    use_masks: bool = True
    train_embeddings: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99

    def validate(self) -> None:
        extents = (
            self.note_len, self.embed_dim, self.conv_blocks, self.filters,
            self.kernel_size, self.temporal_hidden, self.cts_features,
            *self.cts_hidden,
        )
        if any(e < 1 for e in extents):
            raise ConfigurationError("all model extents must be positive")
        for p in (self.spatial_dropout, self.fusion_dropout):
            if not 0.0 <= p < 1.0:
                raise ConfigurationError(f"dropout probability {p} outside [0, 1)")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel size must be odd for same padding")

    def hash(self) -> str:
        text = ",".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# -- parameter containers -----------------------------------------------------------


@dataclass
class ConvBlockParams:
    conv: Conv1dParams
    norm: BatchNormParams
    shortcut: Conv1dParams | None  # 1x1 projection when channel counts differ


@dataclass
class SemanticalParams:
    blocks: list[ConvBlockParams]


@dataclass
class NotesHcrParams:
    semantical: SemanticalParams
    temporal: BiGruParams
    head: DenseParams
    embedding: Tensor | None = None  # present only when fine-tuning embeddings


@dataclass
class CtsRnnParams:
    layer1: BiGruParams
    layer2: BiGruParams
    head: DenseParams


@dataclass
class MmHcrParams:
    semantical: SemanticalParams
    temporal: BiGruParams
    cts_layer1: BiGruParams
    cts_layer2: BiGruParams
    head: DenseParams
    embedding: Tensor | None = None


# -- initialization -------------------------------------------------------------------


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=shape))


def _init_conv(rng, kernel: int, c_in: int, c_out: int) -> Conv1dParams:
    return Conv1dParams(
        kernels=_glorot(rng, (kernel, c_in, c_out)),
        bias=parameter(np.zeros(c_out)),
    )


def _init_bn(channels: int, cfg: ModelConfig) -> BatchNormParams:
    return BatchNormParams(
        gamma=parameter(np.ones(channels)),
        beta=parameter(np.zeros(channels)),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        eps=cfg.bn_eps,
        momentum=cfg.bn_momentum,
    )


def _init_gru_direction(rng, dim_in: int, hidden: int) -> GruDirectionParams:
    return GruDirectionParams(
        w_z=_glorot(rng, (dim_in, hidden)), u_z=_glorot(rng, (hidden, hidden)),
        b_z=parameter(np.zeros(hidden)),
        w_r=_glorot(rng, (dim_in, hidden)), u_r=_glorot(rng, (hidden, hidden)),
        b_r=parameter(np.zeros(hidden)),
        w_h=_glorot(rng, (dim_in, hidden)), u_h=_glorot(rng, (hidden, hidden)),
        b_h=parameter(np.zeros(hidden)),
    )


def _init_bigru(rng, dim_in: int, hidden: int) -> BiGruParams:
    return BiGruParams(
        fwd=_init_gru_direction(rng, dim_in, hidden),
        bwd=_init_gru_direction(rng, dim_in, hidden),
    )


def _init_semantical(rng, cfg: ModelConfig) -> SemanticalParams:
    blocks = []
    c_in = cfg.embed_dim
    for _ in range(cfg.conv_blocks):
        shortcut = None
        if c_in != cfg.filters:
            shortcut = _init_conv(rng, 1, c_in, cfg.filters)
        blocks.append(
            ConvBlockParams(
                conv=_init_conv(rng, cfg.kernel_size, c_in, cfg.filters),
                norm=_init_bn(cfg.filters, cfg),
                shortcut=shortcut,
            )
        )
        c_in = cfg.filters
    return SemanticalParams(blocks=blocks)


def _maybe_embedding(cfg: ModelConfig, embeddings: EmbeddingMatrix | None) -> Tensor | None:
    if not cfg.train_embeddings:
        return None
    if embeddings is None:
        raise ConfigurationError("train_embeddings requires an embedding matrix")
    return parameter(embeddings.vectors.copy())


def init_notes_hcr(
    cfg: ModelConfig, seed: int = 0, embeddings: EmbeddingMatrix | None = None
) -> NotesHcrParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    return NotesHcrParams(
        semantical=_init_semantical(rng, cfg),
        temporal=_init_bigru(rng, cfg.filters, cfg.temporal_hidden),
        head=DenseParams(
            weight=_glorot(rng, (2 * cfg.temporal_hidden, 1)),
            bias=parameter(np.zeros(1)),
        ),
        embedding=_maybe_embedding(cfg, embeddings),
    )


def init_cts_rnn(cfg: ModelConfig, seed: int = 0) -> CtsRnnParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    h1, h2 = cfg.cts_hidden
    return CtsRnnParams(
        layer1=_init_bigru(rng, 2 * cfg.cts_features, h1),
        layer2=_init_bigru(rng, 2 * h1, h2),
        head=DenseParams(
            weight=_glorot(rng, (2 * h2, 1)), bias=parameter(np.zeros(1))
        ),
    )


def init_mm_hcr(
    cfg: ModelConfig, seed: int = 0, embeddings: EmbeddingMatrix | None = None
) -> MmHcrParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    h1, h2 = cfg.cts_hidden
    fused = 2 * cfg.temporal_hidden + 2 * h2
    return MmHcrParams(
        semantical=_init_semantical(rng, cfg),
        temporal=_init_bigru(rng, cfg.filters, cfg.temporal_hidden),
        cts_layer1=_init_bigru(rng, 2 * cfg.cts_features, h1),
        cts_layer2=_init_bigru(rng, 2 * h1, h2),
        head=DenseParams(weight=_glorot(rng, (fused, 1)), bias=parameter(np.zeros(1))),
        embedding=_maybe_embedding(cfg, embeddings),
    )


def init_model(
    kind: str, cfg: ModelConfig, seed: int = 0, embeddings: EmbeddingMatrix | None = None
):
    if kind == NOTES_HCR:
        return init_notes_hcr(cfg, seed, embeddings)
    if kind == CTS_RNN:
        return init_cts_rnn(cfg, seed)
    if kind == MM_HCR:
        return init_mm_hcr(cfg, seed, embeddings)
    raise ConfigurationError(f"unknown model kind {kind!r}")


# -- parameter walking ------------------------------------------------------------------


def _conv_entries(prefix: str, p: Conv1dParams) -> dict[str, Tensor]:
    return {f"{prefix}.kernels": p.kernels, f"{prefix}.bias": p.bias}


def _bigru_entries(prefix: str, p: BiGruParams) -> dict[str, Tensor]:
    out = {}
    for direction, dp in (("fwd", p.fwd), ("bwd", p.bwd)):
        for name, tensor in dp.all_tensors().items():
            out[f"{prefix}.{direction}.{name}"] = tensor
    return out


def named_parameters(params) -> dict[str, Tensor]:
    """Flat name -> trainable tensor map, stable order."""
    out: dict[str, Tensor] = {}
    if isinstance(params, (NotesHcrParams, MmHcrParams)):
        for i, block in enumerate(params.semantical.blocks):
            out.update(_conv_entries(f"semantical.block{i}.conv", block.conv))
            if block.shortcut is not None:
                out.update(_conv_entries(f"semantical.block{i}.shortcut", block.shortcut))
            out[f"semantical.block{i}.norm.gamma"] = block.norm.gamma
            out[f"semantical.block{i}.norm.beta"] = block.norm.beta
        out.update(_bigru_entries("temporal", params.temporal))
    if isinstance(params, (CtsRnnParams, MmHcrParams)):
        layer1 = params.layer1 if isinstance(params, CtsRnnParams) else params.cts_layer1
        layer2 = params.layer2 if isinstance(params, CtsRnnParams) else params.cts_layer2
        out.update(_bigru_entries("cts.layer1", layer1))
        out.update(_bigru_entries("cts.layer2", layer2))
    out["head.weight"] = params.head.weight
    out["head.bias"] = params.head.bias
    if getattr(params, "embedding", None) is not None:
        out["embedding.vectors"] = params.embedding
    return out


def named_buffers(params) -> dict[str, np.ndarray]:
    """Non-trainable state (batchnorm running statistics)."""
    out: dict[str, np.ndarray] = {}
    if isinstance(params, (NotesHcrParams, MmHcrParams)):
        for i, block in enumerate(params.semantical.blocks):
            out[f"semantical.block{i}.norm.running_mean"] = block.norm.running_mean
            out[f"semantical.block{i}.norm.running_var"] = block.norm.running_var
    return out


def decayed_weights(params, cfg: ModelConfig) -> list[tuple[Tensor, float]]:
    """(weight tensor, decay coefficient) pairs for the L2 penalty:
    convolution kernels decay at conv_decay, time-series GRU matrices at
    cts_decay; biases and norm parameters are never decayed."""
    out: list[tuple[Tensor, float]] = []
    if isinstance(params, (NotesHcrParams, MmHcrParams)):
        for block in params.semantical.blocks:
            out.append((block.conv.kernels, cfg.conv_decay))
            if block.shortcut is not None:
                out.append((block.shortcut.kernels, cfg.conv_decay))
    if isinstance(params, (CtsRnnParams, MmHcrParams)):
        layer1 = params.layer1 if isinstance(params, CtsRnnParams) else params.cts_layer1
        layer2 = params.layer2 if isinstance(params, CtsRnnParams) else params.cts_layer2
        for layer in (layer1, layer2):
            for direction in (layer.fwd, layer.bwd):
                out.extend((w, cfg.cts_decay) for w in direction.weight_tensors())
    return out


def parameter_count(params) -> int:
    return sum(t.size for t in named_parameters(params).values())


# -- embedding lookup ---------------------------------------------------------------------


def lookup_note_embeddings(
    ids: np.ndarray, embeddings: EmbeddingMatrix, trainable: Tensor | None
) -> Tensor:
    """Token-id array of any shape -> embedded Tensor [..., d].

    PAD and OOV positions come out as zero vectors. With a trainable
    embedding tensor the lookup is differentiable and the pad row never
    receives gradient (its forward contribution is masked to zero).
    """
    ids = np.asarray(ids)
    if ids.min(initial=0) < OOV_ID or ids.max(initial=0) >= embeddings.vocab_size:
        raise DataError("token id out of vocabulary range")
    safe = np.where(ids == OOV_ID, PAD_ID, ids)
    real = (safe != PAD_ID).astype(np.float64)[..., None]
    if trainable is None:
        return Tensor(embeddings.vectors[safe] * real)
    return trainable[safe] * real


# -- forward passes ------------------------------------------------------------------------


def semantical_forward(
    notes: Tensor,
    params: SemanticalParams,
    cfg: ModelConfig,
    *,
    training: bool,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Embedded notes [N, L, d] (or [L, d]) -> document vectors [N, filters].

    Each block runs Conv1D, SpatialDropout, BatchNorm, then adds the
    block input (identity shortcut, or a 1x1 projection when channel
    counts differ) and applies ReLU after the addition. A masked global
    average pool over the lexical axis produces the document vector.
    """
    if mask is not None and cfg.use_masks:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DataError("semantical_forward: a note has no unmasked tokens")
    x = notes
    for block in params.blocks:
        y = conv1d(x, block.conv)
        y = spatial_dropout(y, cfg.spatial_dropout, training=training, rng=rng)
        y = batchnorm(y, block.norm, training=training)
        shortcut = x if block.shortcut is None else conv1d(x, block.shortcut)
        x = (y + shortcut).relu()
    return global_avg_pool(x, mask=mask if cfg.use_masks else None)


def temporal_forward(doc_vectors: Tensor, params: BiGruParams) -> Tensor:
    """Document vectors [B, T, filters] (or [T, filters]) -> patient
    vector [B, 2 * hidden]: the bidirectional GRU's final state."""
    if doc_vectors.shape[-2] == 0:
        raise DataError("temporal_forward: empty note sequence")
    _, final = bigru(doc_vectors, params)
    return final


def notes_hcr_batch_forward(
    ids: np.ndarray,
    token_masks: np.ndarray,
    embeddings: EmbeddingMatrix,
    params: NotesHcrParams,
    cfg: ModelConfig,
    *,
    training: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """ids [B, T, L] -> probabilities [B]. All notes share the encoder."""
    n_files, n_notes, note_len = ids.shape
    embedded = lookup_note_embeddings(ids, embeddings, params.embedding)
    flat = embedded.reshape((n_files * n_notes, note_len, embeddings.dim))
    docs = semantical_forward(
        flat, params.semantical, cfg,
        training=training, rng=rng,
        mask=token_masks.reshape(n_files * n_notes, note_len),
    )
    docs = docs.reshape((n_files, n_notes, cfg.filters))
    patient = temporal_forward(docs, params.temporal)
    return dense_sigmoid(patient, params.head)


def notes_hcr_forward(
    file: PatientFile,
    embeddings: EmbeddingMatrix,
    params: NotesHcrParams,
    cfg: ModelConfig,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One patient file -> scalar mortality probability."""
    if not file.notes:
        raise DataError(f"hadm {file.hadm_id}: empty patient file")
    ids = np.stack([n.tokens for n in file.notes])[None, :, :]
    masks = np.stack([n.mask for n in file.notes])[None, :, :]
    probs = notes_hcr_batch_forward(
        ids, masks, embeddings, params, cfg, training=training, rng=rng
    )
    return probs.reshape(())


def _cts_input(values: np.ndarray, obs_masks: np.ndarray, cfg: ModelConfig) -> Tensor:
    if values.shape[-2] == 0:
        raise DataError("cts_rnn: empty time series")
    if values.shape[-1] != cfg.cts_features:
        raise ConfigurationError(
            f"time series has {values.shape[-1]} channels, "
            f"config expects {cfg.cts_features}"
        )
    return Tensor(np.concatenate([values, obs_masks.astype(np.float64)], axis=-1))


def cts_rnn_batch_forward(
    values: np.ndarray,
    obs_masks: np.ndarray,
    params: CtsRnnParams,
    cfg: ModelConfig,
    *,
    training: bool,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """values/obs_masks [B, T, F] -> (features [B, 2*h2], probabilities [B]).

    values are already standardized; the input concatenates them with
    their missingness indicators, layer 1 emits per-step outputs that
    layer 2 consumes.
    """
    x = _cts_input(values, obs_masks, cfg)
    step_outputs, _ = bigru(x, params.layer1)
    _, features = bigru(step_outputs, params.layer2)
    dropped = dropout(features, cfg.fusion_dropout, training=training, rng=rng)
    return features, dense_sigmoid(dropped, params.head)


def cts_rnn_forward(
    ts: ClinicalTimeSeries,
    params: CtsRnnParams,
    cfg: ModelConfig,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """One imputed series (all physiology channels) -> (features, probability)."""
    features, probs = cts_rnn_batch_forward(
        standardize_values(ts.values)[None], ts.mask[None], params, cfg,
        training=training, rng=rng,
    )
    return features.reshape(features.shape[1:]), probs.reshape(())


def mm_hcr_batch_forward(
    ids: np.ndarray,
    token_masks: np.ndarray,
    values: np.ndarray,
    obs_masks: np.ndarray,
    embeddings: EmbeddingMatrix,
    params: MmHcrParams,
    cfg: ModelConfig,
    *,
    training: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Fused branch: [patient vector || cts features] -> dropout -> sigmoid.
    values are already standardized, as in cts_rnn_batch_forward."""
    n_files, n_notes, note_len = ids.shape
    embedded = lookup_note_embeddings(ids, embeddings, params.embedding)
    flat = embedded.reshape((n_files * n_notes, note_len, embeddings.dim))
    docs = semantical_forward(
        flat, params.semantical, cfg,
        training=training, rng=rng,
        mask=token_masks.reshape(n_files * n_notes, note_len),
    )
    docs = docs.reshape((n_files, n_notes, cfg.filters))
    patient = temporal_forward(docs, params.temporal)

    x = _cts_input(values, obs_masks, cfg)
    step_outputs, _ = bigru(x, params.cts_layer1)
    _, cts_features = bigru(step_outputs, params.cts_layer2)

    fused = concat([patient, cts_features], axis=-1)
    dropped = dropout(fused, cfg.fusion_dropout, training=training, rng=rng)
    return dense_sigmoid(dropped, params.head)


def mm_hcr_forward(
    file: PatientFile,
    ts: ClinicalTimeSeries | None,
    embeddings: EmbeddingMatrix,
    params: MmHcrParams,
    cfg: ModelConfig,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if not file.notes:
        raise DataError(f"hadm {file.hadm_id}: empty patient file")
    if ts is None:
        raise DataError(
            f"hadm {file.hadm_id}: multi-modal model requires the time series"
        )
    ids = np.stack([n.tokens for n in file.notes])[None, :, :]
    masks = np.stack([n.mask for n in file.notes])[None, :, :]
    probs = mm_hcr_batch_forward(
        ids, masks, standardize_values(ts.values)[None], ts.mask[None],
        embeddings, params, cfg, training=training, rng=rng,
    )
    return probs.reshape(())


# -- checkpoint wiring ---------------------------------------------------------------------


def params_to_entries(params) -> dict[str, np.ndarray]:
    entries = {name: t.data for name, t in named_parameters(params).items()}
    entries.update(named_buffers(params))
    return entries


def load_params_from_entries(kind: str, cfg: ModelConfig, entries: dict[str, np.ndarray]):
    """Rebuild a parameter container and overwrite it with saved arrays."""
    embeddings = None
    if cfg.train_embeddings:
        if "embedding.vectors" not in entries:
            raise DataError("checkpoint lacks the fine-tuned embedding matrix")
        embeddings = EmbeddingMatrix(entries["embedding.vectors"])
    params = init_model(kind, cfg, seed=0, embeddings=embeddings)
    targets = named_parameters(params)
    buffers = named_buffers(params)
    expected = set(targets) | set(buffers)
    if expected != set(entries):
        missing = sorted(expected - set(entries))
        extra = sorted(set(entries) - expected)
        raise DataError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, tensor in targets.items():
        if entries[name].shape != tensor.data.shape:
            raise DataError(f"checkpoint entry {name}: wrong shape")
        tensor.data = entries[name].copy()
    for name, buf in buffers.items():
        if entries[name].shape != buf.shape:
            raise DataError(f"checkpoint entry {name}: wrong shape")
        buf[...] = entries[name]
    return params
