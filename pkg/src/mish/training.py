"""Training loop: pair sampling, memory-backed auxiliary pairs, Adam updates and early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mish.corpus import CorpusBundle, dense_matrix, tfidf_neighbors
from mish.memory import (
    CodeMemory,
    estimate_radius,
    sample_false_positive,
    sample_radius_doc,
)
from mish.mih import substring_radii
from mish.model import (
    Adam,
    LossBreakdown,
    ModelParams,
    StepPlan,
    TrainingConfig,
    deterministic_signs,
    encoder_forward,
    objective,
    plan_semantic,
    word_mask,
)

log = logging.getLogger(__name__)


def _substring_masks(layout) -> np.ndarray:
    masks = np.zeros((layout.m, layout.n))
    for i in range(layout.m):
        masks[i, list(layout.positions(i))] = 1.0
    return masks


def attach_auxiliary(plan: StepPlan, query_ids, params, config, memory, rng, docs):
    """Sample, re-encode and validate the false-positive and radius pairs for each query.

    Returns the encoder caches of the surviving auxiliary rows.
    """
    layout = config.layout
    m, n = layout.m, layout.n
    masks = _substring_masks(layout)
    fp_rows, rad_rows = [], []
    for b, qid in enumerate(query_ids):
        z_q = plan.z_q[b]
        r = estimate_radius(memory, z_q, config.k, exclude_id=qid)
        if r is None:
            continue
        if config.alpha1 > 0:
            i = int(rng.integers(m))
            r_i = substring_radii(r, m)[i]
            hit = sample_false_positive(memory, z_q, i, r, r_i, layout, exclude_id=qid)
            if hit is not None:
                fp_rows.append((b, hit[0], i, r, r_i))
        if config.alpha2 > 0 and r > 2 * m - 1:
            hit = sample_radius_doc(memory, z_q, r, rng, exclude_id=qid)
            if hit is not None:
                rad_rows.append((b, hit[0], r))

    cs = cr = None
    if fp_rows:
        cs = encoder_forward(dense_matrix([docs[row[1]] for row in fp_rows], params.vocab_size), params)
        fresh = deterministic_signs(cs.probs)
        keep = []
        for j, (b, _, i, r, r_i) in enumerate(fp_rows):
            pos = masks[i] > 0
            sub = (pos.sum() - fresh[j, pos] @ plan.z_q[b, pos]) / 2
            full = (n - fresh[j] @ plan.z_q[b]) / 2
            if sub <= r_i and full > r:
                keep.append(j)
        if keep:
            keep = np.array(keep)
            cs = _select(cs, keep)
            plan.x_s = cs.x
            plan.z_s = fresh[keep]
            plan.anchor_s = cs.probs.copy()
            plan.s_pair = np.array([fp_rows[j][0] for j in keep], dtype=np.int64)
            plan.s_mask = masks[[fp_rows[j][2] for j in keep]]
        else:
            cs = None
    if rad_rows:
        cr = encoder_forward(dense_matrix([docs[row[1]] for row in rad_rows], params.vocab_size), params)
        fresh = deterministic_signs(cr.probs)
        keep = [
            j
            for j, (b, _, r) in enumerate(rad_rows)
            if (n - fresh[j] @ plan.z_q[b]) / 2 == r
        ]
        if keep:
            keep = np.array(keep)
            cr = _select(cr, keep)
            plan.x_r = cr.x
            plan.z_r = fresh[keep]
            plan.anchor_r = cr.probs.copy()
            plan.r_pair = np.array([rad_rows[j][0] for j in keep], dtype=np.int64)
        else:
            cr = None
    plan.extras.update(fp_sampled=len(fp_rows), radius_sampled=len(rad_rows))
    return cs, cr


def _select(cache, rows):
    return type(cache)(**{k: v[rows] for k, v in vars(cache).items()})


def train_step(
    batch, params: ModelParams, config: TrainingConfig, memory: CodeMemory, rng, optimizer: Adam, docs
) -> LossBreakdown:
    """One update on ``batch`` of ``(query_id, neighbour_id)`` pairs; params change in place."""
    queries = [docs[q] for q, _ in batch]
    positives = [docs[p] for _, p in batch]
    cq = encoder_forward(dense_matrix(queries, params.vocab_size), params)
    cp = encoder_forward(dense_matrix(positives, params.vocab_size), params)
    plan = plan_semantic(queries, positives, params, rng, caches=(cq, cp))
    cs = cr = None
    if config.alpha1 > 0 or config.alpha2 > 0:
        cs, cr = attach_auxiliary(plan, [q for q, _ in batch], params, config, memory, rng, docs)
    breakdown, grads = objective(params, plan, config, caches=[cq, cp, cs, cr])
    optimizer.step(params, grads)
    memory.update(zip((q for q, _ in batch), deterministic_signs(cq.probs)))
    memory.update(zip((p for _, p in batch), deterministic_signs(cp.probs)))
    params.sigma2 = max(0.0, params.sigma2 - config.anneal_step)
    return breakdown


def evaluation_semantic_loss(params: ModelParams, queries, positives, beta: float) -> float:
    """Pairwise reconstruction loss with deterministic codes and no decoder noise."""
    from mish.model import decoder_forward, kl_bernoulli

    v = params.vocab_size
    cq = encoder_forward(dense_matrix(queries, v), params)
    cp = encoder_forward(dense_matrix(positives, v), params)
    targets = word_mask(queries, v)
    z = np.concatenate([deterministic_signs(cq.probs), deterministic_signs(cp.probs)])
    loglik, _ = decoder_forward(z, np.zeros_like(z), np.concatenate([targets, targets]), params)
    kl = sum(kl_bernoulli(p) for p in cq.probs) + sum(kl_bernoulli(p) for p in cp.probs)
    return float((-loglik.sum() + beta * kl) / len(queries))


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train(bundle: CorpusBundle, config: TrainingConfig, callback=None) -> TrainResult:
    """Train on the bundle's train split; keep the parameters with the lowest validation semantic loss."""
    rng = np.random.default_rng(config.seed)
    docs = bundle.docs
    train_ids = np.array(bundle.splits["train"], dtype=np.int64)
    val_ids = np.array(bundle.splits.get("validation", []), dtype=np.int64)
    train_docs = [docs[i] for i in train_ids]
    p = min(config.p, len(train_ids) - 1)
    neighbours = train_ids[tfidf_neighbors(train_docs, bundle.vocab_size, p)]

    val_pairs = None
    if len(val_ids):
        pool = [docs[i] for i in np.concatenate([val_ids, train_ids])]
        nearest = tfidf_neighbors(pool, bundle.vocab_size, 1)[: len(val_ids), 0]
        partner = np.concatenate([val_ids, train_ids])[nearest]
        val_pairs = ([docs[i] for i in val_ids], [docs[i] for i in partner])

    params = ModelParams.init(bundle.vocab_size, config.hidden, config.n_bits, rng, config.sigma2_init)
    memory = CodeMemory(len(train_ids), config.n_bits)
    optimizer = Adam(params, config.lr)
    result = TrainResult(params.copy())
    best = np.inf
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_ids))
        totals = []
        for start in range(0, len(order), config.batch_size):
            rows = order[start : start + config.batch_size]
            picks = rng.integers(p, size=len(rows))
            batch = list(zip(train_ids[rows].tolist(), neighbours[rows, picks].tolist()))
            totals.append(train_step(batch, params, config, memory, rng, optimizer, docs))
        record = {
            "epoch": epoch,
            "total": float(np.mean([t.total for t in totals])),
            "semantic": float(np.mean([t.semantic for t in totals])),
            "false_positive": float(np.mean([t.false_positive for t in totals])),
            "radius": float(np.mean([t.radius for t in totals])),
        }
        if val_pairs is not None:
            record["validation"] = evaluation_semantic_loss(params, *val_pairs, config.beta)
        else:
            record["validation"] = record["semantic"]
        result.history.append(record)
        log.info("epoch %d %s", epoch, record)
        if callback is not None:
            callback(record)
        if record["validation"] < best:
            best = record["validation"]
            result.params = params.copy()
            result.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return result
