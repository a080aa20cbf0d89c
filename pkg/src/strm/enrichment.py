"""Spatio-temporal feature enrichment for clips of patch features.

Two residual stages: per-frame self-attention over patch rows followed by a
pointwise refiner (spatial enrichment), then mixer-style linear mixing first
across the frame axis and then across channels (temporal enrichment). With
all weights zero both stages are exact identities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Param, ShapeError, Tape, Tensor, seeded_init

__all__ = [
    "PLEParams",
    "FLEParams",
    "init_ple_params",
    "init_fle_params",
    "ple_forward",
    "ple_forward_batch",
    "pool_frames",
    "fle_forward",
    "fle_forward_batch",
    "ple_patch_diagnostics",
]


@dataclass
class PLEParams:
    """Weights for patch-level enrichment: attention projections plus a
    three-layer pointwise refiner (no biases anywhere)."""

    query_proj: Param  # D x D
    key_proj: Param  # D x D
    value_proj: Param  # D x D
    refine1: Param  # D x hidden
    refine2: Param  # hidden x hidden
    refine3: Param  # hidden x D

    def all(self) -> list[Param]:
        return [self.query_proj, self.key_proj, self.value_proj,
                self.refine1, self.refine2, self.refine3]

    @property
    def channels(self) -> int:
        return self.query_proj.value.shape[0]


@dataclass
class FLEParams:
    """Weights for frame-level enrichment: two frame-mixing matrices shared
    across channels, then two channel-mixing matrices shared across frames."""

    token_mix1: Param  # L x L
    token_mix2: Param  # L x L
    channel_mix1: Param  # D x D
    channel_mix2: Param  # D x D

    def all(self) -> list[Param]:
        return [self.token_mix1, self.token_mix2, self.channel_mix1, self.channel_mix2]

    @property
    def frames(self) -> int:
        return self.token_mix1.value.shape[0]

    @property
    def channels(self) -> int:
        return self.channel_mix1.value.shape[0]


def _glorot(name: str, rows: int, cols: int, seed_key) -> Param:
    return Param(name, seeded_init((rows, cols), rows, cols, seed_key))


def init_ple_params(channels: int, hidden: int, seed_for) -> PLEParams:
    """Build freshly initialized patch-enrichment weights.

    `seed_for(name)` maps a parameter name to a deterministic seed.
    """
    return PLEParams(
        query_proj=_glorot("ple.query_proj", channels, channels, seed_for("ple.query_proj")),
        key_proj=_glorot("ple.key_proj", channels, channels, seed_for("ple.key_proj")),
        value_proj=_glorot("ple.value_proj", channels, channels, seed_for("ple.value_proj")),
        refine1=_glorot("ple.refine1", channels, hidden, seed_for("ple.refine1")),
        refine2=_glorot("ple.refine2", hidden, hidden, seed_for("ple.refine2")),
        refine3=_glorot("ple.refine3", hidden, channels, seed_for("ple.refine3")),
    )


def init_fle_params(frames: int, channels: int, seed_for) -> FLEParams:
    return FLEParams(
        token_mix1=_glorot("fle.token_mix1", frames, frames, seed_for("fle.token_mix1")),
        token_mix2=_glorot("fle.token_mix2", frames, frames, seed_for("fle.token_mix2")),
        channel_mix1=_glorot("fle.channel_mix1", channels, channels, seed_for("fle.channel_mix1")),
        channel_mix2=_glorot("fle.channel_mix2", channels, channels, seed_for("fle.channel_mix2")),
    )


def ple_forward(tape: Tape, patches: Tensor, params: PLEParams) -> Tensor:
    """Spatially enrich one frame's patch rows.

    Patch rows attend to each other with scaled dot-product attention and a
    residual, then a pointwise three-layer refiner (ReLU between layers,
    linear final layer) is applied per patch with a second residual. Shape
    [patches x channels] is preserved.
    """
    if patches.ndim != 2 or patches.shape[1] != params.channels:
        raise ShapeError(
            f"ple_forward needs [patches x {params.channels}], got {patches.shape}"
        )
    channels = params.channels
    q = tape.matmul(patches, params.query_proj.value)
    k = tape.matmul(patches, params.key_proj.value)
    v = tape.matmul(patches, params.value_proj.value)
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(channels))
    attended = tape.add(tape.matmul(tape.softmax_rows(scores), v), patches)
    hidden = tape.relu(tape.matmul(attended, params.refine1.value))
    hidden = tape.relu(tape.matmul(hidden, params.refine2.value))
    refined = tape.matmul(hidden, params.refine3.value)
    return tape.add(refined, attended)


def ple_forward_batch(tape: Tape, frames: Tensor, params: PLEParams) -> Tensor:
    """Patch enrichment for a stack of frames at once.

    Same computation as ple_forward applied to every [patches x channels]
    slice of a [frames x patches x channels] block; attention never crosses
    frame boundaries.
    """
    if frames.ndim != 3 or frames.shape[2] != params.channels:
        raise ShapeError(
            f"ple_forward_batch needs [n x patches x {params.channels}], "
            f"got {frames.shape}")
    n, n_patches, channels = frames.shape
    flat = tape.reshape(frames, (n * n_patches, channels))
    q = tape.reshape(tape.matmul(flat, params.query_proj.value), frames.shape)
    k = tape.reshape(tape.matmul(flat, params.key_proj.value), frames.shape)
    v = tape.reshape(tape.matmul(flat, params.value_proj.value), frames.shape)
    scores = tape.scale(tape.bmm(q, tape.transpose_last2(k)), 1.0 / math.sqrt(channels))
    attended = tape.add(tape.bmm(tape.softmax_last(scores), v), frames)
    flat_att = tape.reshape(attended, (n * n_patches, channels))
    hidden = tape.relu(tape.matmul(flat_att, params.refine1.value))
    hidden = tape.relu(tape.matmul(hidden, params.refine2.value))
    refined = tape.reshape(tape.matmul(hidden, params.refine3.value), frames.shape)
    return tape.add(refined, attended)


def fle_forward_batch(tape: Tape, clips: Tensor, params: FLEParams) -> Tensor:
    """Frame enrichment for a stack of clips at once.

    Same computation as fle_forward applied to every [frames x channels]
    slice of a [clips x frames x channels] block.
    """
    if clips.ndim != 3 or clips.shape[1:] != (params.frames, params.channels):
        raise ShapeError(
            f"fle_forward_batch needs [n x {params.frames} x {params.channels}], "
            f"got {clips.shape}")
    n = clips.shape[0]
    frames, channels = params.frames, params.channels
    flipped = tape.reshape(tape.transpose_last2(clips), (n * channels, frames))
    mixed = tape.add(
        tape.matmul(tape.relu(tape.matmul(flipped, params.token_mix1.value)),
                    params.token_mix2.value),
        flipped,
    )
    unflipped = tape.reshape(
        tape.transpose_last2(tape.reshape(mixed, (n, channels, frames))),
        (n * frames, channels))
    out = tape.add(
        tape.matmul(tape.relu(tape.matmul(unflipped, params.channel_mix1.value)),
                    params.channel_mix2.value),
        unflipped,
    )
    return tape.reshape(out, (n, frames, channels))


def pool_frames(tape: Tape, frame_features: list[Tensor]) -> Tensor:
    """Average each frame's patch rows and stack frames into [frames x channels]."""
    if not frame_features:
        raise ShapeError("pool_frames needs at least one frame")
    shape = frame_features[0].shape
    for f in frame_features:
        if f.shape != shape:
            raise ShapeError(f"inconsistent frame shapes: {shape} vs {f.shape}")
    return tape.stack([tape.mean(f, axis=0) for f in frame_features])


def fle_forward(tape: Tape, frames: Tensor, params: FLEParams) -> Tensor:
    """Temporally enrich pooled frame features.

    First mixes across the frame axis (weights shared over channels), then
    across channels (weights shared over frames), each with a ReLU branch
    and a residual. Shape [frames x channels] is preserved.
    """
    if frames.ndim != 2 or frames.shape != (params.frames, params.channels):
        raise ShapeError(
            f"fle_forward needs [{params.frames} x {params.channels}], got {frames.shape}"
        )
    flipped = tape.transpose(frames)  # channels x frames
    mixed = tape.add(
        tape.matmul(tape.relu(tape.matmul(flipped, params.token_mix1.value)),
                    params.token_mix2.value),
        flipped,
    )
    unflipped = tape.transpose(mixed)  # frames x channels
    return tape.add(
        tape.matmul(tape.relu(tape.matmul(unflipped, params.channel_mix1.value)),
                    params.channel_mix2.value),
        unflipped,
    )


def ple_patch_diagnostics(patches: np.ndarray, params: PLEParams | None):
    """Per-frame attention diagnostics for export: pre-softmax score rows and
    the per-patch L2 activation magnitudes after enrichment.

    With no enrichment weights the activations are the raw patches and the
    score matrix is zero. Returns (scores [P2 x P2], patch_norms [P2]).
    """
    x = np.asarray(patches, dtype=np.float64)
    if params is None:
        n_patches = x.shape[0]
        return np.zeros((n_patches, n_patches)), np.sqrt((x * x).sum(axis=1))
    tape = Tape()
    xt = Tensor(x)
    q = tape.matmul(xt, params.query_proj.value)
    k = tape.matmul(xt, params.key_proj.value)
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(params.channels))
    enriched = ple_forward(tape, xt, params)
    norms = np.sqrt((enriched.data * enriched.data).sum(axis=1))
    return scores.data.copy(), norms
