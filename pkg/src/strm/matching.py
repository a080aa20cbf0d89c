"""Tuple-based temporal matching between query and support clips.

Sub-sequences are strictly increasing frame-index tuples. A query is scored
against a class by embedding every tuple, building a query-conditioned class
prototype via cross-attention over all support tuples, and averaging the
Euclidean distances; a separate similarity head scores classes by the best
cosine match between projected tuple codes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Param, ShapeError, Tape, Tensor, seeded_init

__all__ = [
    "TupleIndex",
    "TupleEmbedParams",
    "QCParams",
    "init_trm_params",
    "init_qc_params",
    "enumerate_tuples",
    "tuple_count",
    "select_tuples",
    "tuple_repr",
    "tuple_matrix",
    "ClassSupportEmbeds",
    "embed_class_supports",
    "trm_distance",
    "trm_logits",
    "encode_tuple_codes",
    "encode_class_supports",
    "qc_similarity",
    "qc_logits",
]

TupleIndex = tuple[int, ...]  # strictly increasing zero-based frame indices


@dataclass
class TupleEmbedParams:
    """Key/value projections from concatenated tuple features, one pair per
    tuple cardinality."""

    key_proj: Param  # (omega * D) x embed_dim
    value_proj: Param  # (omega * D) x embed_dim

    def all(self) -> list[Param]:
        return [self.key_proj, self.value_proj]

    @property
    def embed_dim(self) -> int:
        return self.key_proj.value.shape[1]


@dataclass
class QCParams:
    """Projection of concatenated tuple features to ReLU codes, per cardinality."""

    class_proj: Param  # (omega * D) x code_dim

    def all(self) -> list[Param]:
        return [self.class_proj]


def init_trm_params(omega: int, channels: int, embed_dim: int, seed_for) -> TupleEmbedParams:
    rows = omega * channels
    return TupleEmbedParams(
        key_proj=Param(f"trm.{omega}.key_proj",
                       seeded_init((rows, embed_dim), rows, embed_dim,
                                   seed_for(f"trm.{omega}.key_proj"))),
        value_proj=Param(f"trm.{omega}.value_proj",
                         seeded_init((rows, embed_dim), rows, embed_dim,
                                     seed_for(f"trm.{omega}.value_proj"))),
    )


def init_qc_params(omega: int, channels: int, code_dim: int, seed_for) -> QCParams:
    rows = omega * channels
    return QCParams(
        class_proj=Param(f"qc.{omega}.class_proj",
                         seeded_init((rows, code_dim), rows, code_dim,
                                     seed_for(f"qc.{omega}.class_proj"))),
    )


def enumerate_tuples(frames: int, omegas: Sequence[int]) -> list[TupleIndex]:
    """All strictly increasing index tuples over `frames`, for every requested
    cardinality, in lexicographic order within each cardinality."""
    out: list[TupleIndex] = []
    for omega in omegas:
        if not 1 <= omega <= frames:
            raise ShapeError(f"tuple cardinality {omega} invalid for {frames} frames")
        out.extend(itertools.combinations(range(frames), omega))
    return out


def tuple_count(frames: int, omega: int) -> int:
    if not 1 <= omega <= frames:
        raise ShapeError(f"tuple cardinality {omega} invalid for {frames} frames")
    return math.comb(frames, omega)


def select_tuples(
    frames: int,
    omegas: Sequence[int],
    keep_ratio: float = 1.0,
    tuple_seed: int = 0,
) -> dict[int, list[TupleIndex]]:
    """Tuple sets per cardinality, optionally subsampled.

    With keep_ratio 1.0 this is exactly the full lexicographic enumeration.
    Otherwise the first ceil(keep_ratio * count) tuples of a seed-shuffled
    ordering are kept, deterministically in (tuple_seed, cardinality).
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    out: dict[int, list[TupleIndex]] = {}
    for omega in sorted(set(int(w) for w in omegas)):
        full = enumerate_tuples(frames, [omega])
        if keep_ratio == 1.0:
            out[omega] = full
            continue
        rng = np.random.default_rng([int(tuple_seed), omega])
        order = rng.permutation(len(full))
        kept = math.ceil(keep_ratio * len(full))
        out[omega] = [full[i] for i in order[:kept]]
    return out


def tuple_repr(tape: Tape, frames: Tensor, t: TupleIndex) -> Tensor:
    """Concatenate the selected frame rows, in tuple order, into one vector."""
    gathered = tape.gather_rows(frames, t)
    return tape.reshape(gathered, (len(t) * frames.shape[1],))


def tuple_matrix(tape: Tape, frames: Tensor, tuples: Sequence[TupleIndex]) -> Tensor:
    """All tuple representations stacked: row i is tuple i's concatenated frames."""
    omega = len(tuples[0])
    flat_idx = [i for t in tuples for i in t]
    gathered = tape.gather_rows(frames, flat_idx)
    return tape.reshape(gathered, (len(tuples), omega * frames.shape[1]))


@dataclass
class ClassSupportEmbeds:
    """Per-cardinality pooled key/value embeddings of one class's support tuples."""

    keys: dict[int, Tensor]  # omega -> (K * tuples) x embed_dim
    values: dict[int, Tensor]


def embed_class_supports(
    tape: Tape,
    support_frames: Sequence[Tensor],
    tuple_sets: dict[int, list[TupleIndex]],
    trm_params: dict[int, TupleEmbedParams],
) -> ClassSupportEmbeds:
    if not support_frames:
        raise ShapeError("support set is empty")
    keys: dict[int, Tensor] = {}
    values: dict[int, Tensor] = {}
    for omega, tuples in tuple_sets.items():
        params = trm_params[omega]
        mats = [tuple_matrix(tape, sf, tuples) for sf in support_frames]
        pooled = mats[0] if len(mats) == 1 else tape.concat(mats, axis=0)
        keys[omega] = tape.matmul(pooled, params.key_proj.value)
        values[omega] = tape.matmul(pooled, params.value_proj.value)
    return ClassSupportEmbeds(keys=keys, values=values)


def embed_query(
    tape: Tape,
    query_frames: Tensor,
    tuple_sets: dict[int, list[TupleIndex]],
    trm_params: dict[int, TupleEmbedParams],
) -> dict[int, tuple[Tensor, Tensor]]:
    """Key/value embeddings of the query's tuples, per cardinality."""
    out: dict[int, tuple[Tensor, Tensor]] = {}
    for omega, tuples in tuple_sets.items():
        params = trm_params[omega]
        qm = tuple_matrix(tape, query_frames, tuples)
        out[omega] = (tape.matmul(qm, params.key_proj.value),
                      tape.matmul(qm, params.value_proj.value))
    return out


def _distance_from_embeds(
    tape: Tape,
    query_embeds: dict[int, tuple[Tensor, Tensor]],
    embeds: ClassSupportEmbeds,
    trm_params: dict[int, TupleEmbedParams],
) -> Tensor:
    total: Tensor | None = None
    for omega, (q_keys, q_vals) in query_embeds.items():
        params = trm_params[omega]
        scores = tape.scale(
            tape.matmul(q_keys, tape.transpose(embeds.keys[omega])),
            1.0 / math.sqrt(params.embed_dim),
        )
        prototypes = tape.matmul(tape.softmax_rows(scores), embeds.values[omega])
        dist = tape.mean(tape.rows_l2norm(tape.sub(q_vals, prototypes)), axis=0)
        total = dist if total is None else tape.add(total, dist)
    assert total is not None
    return total


def trm_distance(
    tape: Tape,
    query_frames: Tensor,
    support_frames: Sequence[Tensor],
    tuple_sets: dict[int, list[TupleIndex]],
    trm_params: dict[int, TupleEmbedParams],
) -> Tensor:
    """Distance from a query clip to one class's support set.

    For every query tuple, a prototype is aggregated from all support tuples
    of the class (attention over scaled key dot products, pooled across all
    support clips), and the Euclidean distance between the query's value
    embedding and the prototype is averaged per cardinality, then summed
    over cardinalities.
    """
    embeds = embed_class_supports(tape, support_frames, tuple_sets, trm_params)
    query_embeds = embed_query(tape, query_frames, tuple_sets, trm_params)
    return _distance_from_embeds(tape, query_embeds, embeds, trm_params)


def trm_logits(
    tape: Tape,
    query_frames: Tensor,
    class_supports: Sequence[Sequence[Tensor]] | Sequence[ClassSupportEmbeds],
    tuple_sets: dict[int, list[TupleIndex]],
    trm_params: dict[int, TupleEmbedParams],
) -> Tensor:
    """Per-class logits: the negative matching distance to each class."""
    if len(class_supports) < 2:
        raise ShapeError("need at least 2 classes")
    query_embeds = embed_query(tape, query_frames, tuple_sets, trm_params)
    distances = []
    for supports in class_supports:
        if not isinstance(supports, ClassSupportEmbeds):
            supports = embed_class_supports(tape, supports, tuple_sets, trm_params)
        distances.append(_distance_from_embeds(tape, query_embeds, supports, trm_params))
    return tape.scale(tape.stack(distances), -1.0)


def encode_tuple_codes(
    tape: Tape,
    frames_features: Tensor,
    tuple_sets: dict[int, list[TupleIndex]],
    qc_params: dict[int, QCParams],
) -> dict[int, Tensor]:
    """ReLU codes of every tuple representation, per cardinality."""
    return {
        omega: tape.relu(
            tape.matmul(tuple_matrix(tape, frames_features, tuples),
                        qc_params[omega].class_proj.value)
        )
        for omega, tuples in tuple_sets.items()
    }


def _similarity_from_codes(
    tape: Tape,
    query_codes: dict[int, Tensor],
    support_codes: dict[int, Tensor],
) -> Tensor:
    total: Tensor | None = None
    for omega, q_codes in query_codes.items():
        sims = tape.cosine_matrix(q_codes, support_codes[omega])
        best = tape.mean(tape.max_rows(sims), axis=0)
        total = best if total is None else tape.add(total, best)
    assert total is not None
    return total


def encode_class_supports(
    tape: Tape,
    support_frames: Sequence[Tensor],
    tuple_sets: dict[int, list[TupleIndex]],
    qc_params: dict[int, QCParams],
) -> dict[int, Tensor]:
    """Pooled ReLU codes of all support tuples of one class, per cardinality."""
    if not support_frames:
        raise ShapeError("support set is empty")
    codes: dict[int, Tensor] = {}
    for omega, tuples in tuple_sets.items():
        mats = [tuple_matrix(tape, sf, tuples) for sf in support_frames]
        pooled = mats[0] if len(mats) == 1 else tape.concat(mats, axis=0)
        codes[omega] = tape.relu(tape.matmul(pooled, qc_params[omega].class_proj.value))
    return codes


def qc_similarity(
    tape: Tape,
    query_frames: Tensor,
    support_frames: Sequence[Tensor],
    tuple_sets: dict[int, list[TupleIndex]],
    qc_params: dict[int, QCParams],
) -> Tensor:
    """Query-to-class similarity from tuple codes.

    Every tuple of the query and of the pooled supports is projected to a
    ReLU code; each query tuple takes its best cosine match over all support
    tuples (zero-norm codes score 0), matches are averaged per cardinality
    and summed over cardinalities.
    """
    query_codes = encode_tuple_codes(tape, query_frames, tuple_sets, qc_params)
    support_codes = encode_class_supports(tape, support_frames, tuple_sets, qc_params)
    return _similarity_from_codes(tape, query_codes, support_codes)


def qc_logits(
    tape: Tape,
    query_frames: Tensor,
    class_supports: Sequence[Sequence[Tensor]] | Sequence[dict[int, Tensor]],
    tuple_sets: dict[int, list[TupleIndex]],
    qc_params: dict[int, QCParams],
) -> Tensor:
    """Per-class similarity logits.

    Class supports may be given as frame tensors or as precomputed pooled
    code matrices (omega -> codes) to share work across queries.
    """
    if len(class_supports) < 2:
        raise ShapeError("need at least 2 classes")
    query_codes = encode_tuple_codes(tape, query_frames, tuple_sets, qc_params)
    sims = []
    for supports in class_supports:
        if not isinstance(supports, dict):
            supports = encode_class_supports(tape, supports, tuple_sets, qc_params)
        sims.append(_similarity_from_codes(tape, query_codes, supports))
    return tape.stack(sims)
