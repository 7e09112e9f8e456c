"""Pretraining loop that turns sampled positive pairs into MoCo steps, epoch by epoch."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from medaug import augment, engine
from medaug.cohort import ImageRecord
from medaug.engine import Batch, EncoderState, NegativeQueue, NegativeStrategy

log = logging.getLogger(__name__)


@dataclass
class PretrainSettings:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    sgd_momentum: float = 0.0
    weight_decay: float = 0.0
    temperature: float = 0.2
    momentum: float = 0.999
    queue_size: int = 1024
    warmup_fraction: float = 0.5
    widths: tuple[int, ...] = (256, 128)
    head_width: int = 128
    embed_dim: int = 64
    checkpoint_every: int = 1


def build_batch(records: dict, pairs, spec, seed: int, epoch: int) -> Batch:
    """Views for ``[(query_id, partner_id), ...]`` with per-sample RNG streams."""
    xq, xk, rngs = [], [], []
    for qid, pid in pairs:
        rng = augment.sample_rng(seed, epoch, qid, 1)
        vq, vk = augment.make_positive_pair(records[qid], records[pid], spec, rng)
        xq.append(vq.pixels)
        xk.append(vk.pixels)
        rngs.append(augment.sample_rng(seed, epoch, qid, 2))
    q_ids = np.array([q for q, _ in pairs], dtype=np.int64)
    k_ids = np.array([p for _, p in pairs], dtype=np.int64)
    return Batch(
        xq=engine.as_input(xq),
        xk=engine.as_input(xk),
        query_lat=np.array([engine.lat_code(records[q].laterality) for q in q_ids], dtype=np.int8),
        key_lat=np.array([engine.lat_code(records[p].laterality) for p in k_ids], dtype=np.int8),
        key_image=k_ids,
        key_patient=np.array([records[p].patient_id for p in k_ids], dtype=np.int64),
        query_image=q_ids,
        rngs=rngs,
    )


def init_state(settings: PretrainSettings, input_dim: int, seed: int):
    cfg = engine.EncoderConfig(input_dim, tuple(settings.widths), settings.head_width, settings.embed_dim)
    state = EncoderState.create(
        cfg, np.random.default_rng([int(seed), 0x1E]), settings.momentum, settings.temperature
    )
    queue = NegativeQueue(settings.queue_size, settings.embed_dim)
    return state, queue


def pretrain(
    records: list[ImageRecord],
    sampler,
    spec: augment.AugmentationSpec,
    strategy: NegativeStrategy,
    settings: PretrainSettings,
    seed: int,
    on_step=None,
    on_epoch=None,
    dump_dir=None,
):
    """Run pretraining and return the final ``(state, queue)``.

    ``on_step(step, epoch, result, queue)`` and ``on_epoch(epoch, state, queue)``
    are optional callbacks for logging and checkpointing.
    """
    by_id = {r.image_id: r for r in records}
    input_dim = records[0].pixels.size
    state, queue = init_state(settings, input_dim, seed)
    optimizer = engine.SGD(settings.lr, settings.sgd_momentum, settings.weight_decay)
    warmup = int(np.ceil(settings.warmup_fraction * settings.queue_size))
    queries = np.array(sorted(sampler.active_queries()), dtype=np.int64)
    if len(queries) == 0:
        raise ValueError("no usable queries: every candidate set is empty under the skip policy")
    step = 0
    for epoch in range(1, settings.epochs + 1):
        order = np.random.default_rng([int(seed), 0xE0, epoch]).permutation(queries)
        for start in range(0, len(order), settings.batch_size):
            pairs = []
            for qid in order[start : start + settings.batch_size]:
                partner = sampler.partner(int(qid), epoch)
                if partner is not None:
                    pairs.append((int(qid), int(partner)))
            if not pairs:
                continue
            batch = build_batch(by_id, pairs, spec, seed, epoch)
            state, queue, result = engine.train_step(
                state, queue, batch, strategy, optimizer, warmup, dump_dir
            )
            step += 1
            if on_step is not None:
                on_step(step, epoch, result, queue)
        if on_epoch is not None:
            on_epoch(epoch, state, queue)
    return state, queue
