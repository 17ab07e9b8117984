"""Variational hashing model with pairwise reconstruction and the multi-index losses.

Everything is plain numpy with hand-written gradients. Bits are sampled as
+-1 and trained with the straight-through estimator: the gradient of a bit
with respect to its probability is 2, since E[bit] = 2p - 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from mish.corpus import SparseDoc, dense_matrix
from mish.hamming import HashCode, SubstringLayout, pack_signs, surrogate_distance

CHECKPOINT_MAGIC = b"MISH"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sBIIHf")

TENSORS = ("e_imp", "W1", "b1", "W2", "b2", "Wout", "bout", "E_word", "b_w")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logsumexp(a, axis=-1):
    top = a.max(axis=axis, keepdims=True)
    return (top + np.log(np.exp(a - top).sum(axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class ModelParams:
    e_imp: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wout: np.ndarray
    bout: np.ndarray
    E_word: np.ndarray
    b_w: np.ndarray
    sigma2: float = 1.0

    def __post_init__(self):
        v, h = self.W1.shape
        n = self.Wout.shape[1]
        expected = {
            "e_imp": (v,),
            "b1": (h,),
            "W2": (h, h),
            "b2": (h,),
            "Wout": (h, n),
            "bout": (n,),
            "E_word": (v, n),
            "b_w": (v,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")

    @property
    def vocab_size(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def n_bits(self) -> int:
        return self.Wout.shape[1]

    @classmethod
    def init(cls, vocab_size: int, hidden: int, n_bits: int, rng, sigma2: float = 1.0):
        def dense(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        return cls(
            e_imp=np.ones(vocab_size),
            W1=dense(vocab_size, hidden),
            b1=np.zeros(hidden),
            W2=dense(hidden, hidden),
            b2=np.zeros(hidden),
            Wout=dense(hidden, n_bits),
            bout=np.zeros(n_bits),
            E_word=dense(vocab_size, n_bits),
            b_w=np.zeros(vocab_size),
            sigma2=sigma2,
        )

    @classmethod
    def zeros(cls, vocab_size: int, hidden: int, n_bits: int, sigma2: float = 0.0):
        return cls(
            np.zeros(vocab_size),
            np.zeros((vocab_size, hidden)),
            np.zeros(hidden),
            np.zeros((hidden, hidden)),
            np.zeros(hidden),
            np.zeros((hidden, n_bits)),
            np.zeros(n_bits),
            np.zeros((vocab_size, n_bits)),
            np.zeros(vocab_size),
            sigma2,
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSORS}

    def copy(self) -> ModelParams:
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()}, sigma2=self.sigma2)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(t) for name, t in self.tensors().items()}

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(
                _CKPT_HEADER.pack(
                    CHECKPOINT_MAGIC,
                    CHECKPOINT_VERSION,
                    self.vocab_size,
                    self.hidden,
                    self.n_bits,
                    self.sigma2,
                )
            )
            for name in TENSORS:
                fh.write(getattr(self, name).astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> ModelParams:
        data = Path(path).read_bytes()
        if len(data) < _CKPT_HEADER.size:
            raise ValueError(f"{path}: truncated checkpoint")
        magic, version, v, h, n, sigma2 = _CKPT_HEADER.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        template = cls.zeros(v, h, n)
        offset = _CKPT_HEADER.size
        arrays = {}
        for name in TENSORS:
            shape = getattr(template, name).shape
            size = int(np.prod(shape))
            if offset + 4 * size > len(data):
                raise ValueError(f"{path}: truncated while reading {name}")
            arrays[name] = (
                np.frombuffer(data, dtype="<f4", count=size, offset=offset)
                .reshape(shape)
                .astype(np.float64)
            )
            offset += 4 * size
        if offset != len(data):
            raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
        return cls(**arrays, sigma2=max(float(sigma2), 0.0))


@dataclass
class TrainingConfig:
    alpha1: float = 3.0
    alpha2: float = 0.01
    beta: float = 0.0
    k: int = 100
    p: int = 10
    lr: float = 0.005
    anneal_step: float = 1e-6
    seed: int = 0
    batch_size: int = 64
    n_bits: int = 32
    m: int | None = None
    hidden: int = 1000
    epochs: int = 30
    patience: int = 5
    sigma2_init: float = 1.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0 or self.beta < 0:
            raise ValueError("alpha1, alpha2 and beta must be non-negative")
        if self.p < 1 or self.k < 1 or self.batch_size < 1:
            raise ValueError("p, k and batch_size must be >= 1")
        if self.m is None:
            self.m = max(1, self.n_bits // 16)
        if self.n_bits % self.m:
            raise ValueError(f"n_bits={self.n_bits} is not divisible by m={self.m}")

    @property
    def layout(self) -> SubstringLayout:
        return SubstringLayout.contiguous(self.n_bits, self.m)

    def replace(self, **changes) -> TrainingConfig:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainingConfig(**values)


# -- encoder -------------------------------------------------------------------


@dataclass
class EncoderCache:
    x: np.ndarray
    u: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    probs: np.ndarray


def encoder_forward(x: np.ndarray, params: ModelParams) -> EncoderCache:
    u = x * params.e_imp
    a1 = u @ params.W1 + params.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params.W2 + params.b2
    h2 = np.maximum(a2, 0.0)
    probs = sigmoid(h2 @ params.Wout + params.bout)
    return EncoderCache(x, u, a1, h1, a2, h2, probs)


def encoder_backward(dprobs: np.ndarray, cache: EncoderCache, params: ModelParams, grads) -> None:
    """Accumulate parameter gradients of the encoder given dL/dprobs."""
    p = cache.probs
    da3 = dprobs * p * (1.0 - p)
    grads["Wout"] += cache.h2.T @ da3
    grads["bout"] += da3.sum(axis=0)
    da2 = (da3 @ params.Wout.T) * (cache.a2 > 0)
    grads["W2"] += cache.h1.T @ da2
    grads["b2"] += da2.sum(axis=0)
    da1 = (da2 @ params.W2.T) * (cache.a1 > 0)
    grads["W1"] += cache.u.T @ da1
    grads["b1"] += da1.sum(axis=0)
    du = da1 @ params.W1.T
    grads["e_imp"] += (du * cache.x).sum(axis=0)


def encode_probs(doc: SparseDoc, params: ModelParams) -> np.ndarray:
    x = dense_matrix([doc], params.vocab_size)
    return encoder_forward(x, params).probs[0]


def encode_codes(docs, params: ModelParams, batch: int = 1024) -> np.ndarray:
    """Deterministic packed codes for a list of documents."""
    out = []
    for start in range(0, len(docs), batch):
        x = dense_matrix(docs[start : start + batch], params.vocab_size)
        out.append(pack_signs(deterministic_signs(encoder_forward(x, params).probs)))
    return np.concatenate(out) if out else np.zeros((0, 1), dtype=np.uint64)


# -- sampling ------------------------------------------------------------------


def deterministic_signs(probs) -> np.ndarray:
    return np.where(np.asarray(probs) >= 0.5, 1.0, -1.0)


def sampled_signs(probs, uniforms) -> np.ndarray:
    return np.where(np.asarray(uniforms) < np.asarray(probs), 1.0, -1.0)


def sample_code(probs, rng) -> HashCode:
    return HashCode.from_signs(sampled_signs(probs, rng.random(len(probs))))


def deterministic_code(probs) -> HashCode:
    return HashCode.from_signs(deterministic_signs(probs))


# -- decoder -------------------------------------------------------------------


@dataclass
class DecoderCache:
    f: np.ndarray
    emb: np.ndarray
    softmax: np.ndarray
    targets: np.ndarray


def word_mask(docs, vocab_size: int) -> np.ndarray:
    mask = np.zeros((len(docs), vocab_size))
    for row, doc in enumerate(docs):
        mask[row, doc.term_ids] = 1.0
    return mask


def decoder_forward(z, noise, targets, params: ModelParams):
    """Per-row ``log p(d | z)`` where ``targets`` marks each row's word set."""
    f = z + noise
    emb = params.E_word * params.e_imp[:, None]
    logits = f @ emb.T + params.b_w
    log_norm = logsumexp(logits, axis=1)
    loglik = (targets * logits).sum(axis=1) - targets.sum(axis=1) * log_norm
    softmax = np.exp(logits - log_norm[:, None])
    return loglik, DecoderCache(f, emb, softmax, targets)


def decoder_backward(dloglik, cache: DecoderCache, params: ModelParams, grads) -> np.ndarray:
    """Accumulate decoder gradients; returns dL/dz."""
    dlogits = dloglik[:, None] * (cache.targets - cache.targets.sum(axis=1, keepdims=True) * cache.softmax)
    grads["b_w"] += dlogits.sum(axis=0)
    demb = dlogits.T @ cache.f
    grads["E_word"] += demb * params.e_imp[:, None]
    grads["e_imp"] += (demb * params.E_word).sum(axis=1)
    return dlogits @ cache.emb


def word_log_likelihood(doc: SparseDoc, code, params: ModelParams, rng) -> float:
    """``log p(doc | code)`` under a noise-infused code; one noise draw per call."""
    z = code.to_signs().astype(np.float64) if isinstance(code, HashCode) else np.asarray(code, float)
    noise = rng.standard_normal(len(z)) * np.sqrt(params.sigma2)
    loglik, _ = decoder_forward(z[None, :], noise[None, :], word_mask([doc], params.vocab_size), params)
    return float(loglik[0])


def kl_bernoulli(probs) -> float:
    """KL divergence from per-bit Bernoulli(probs) to the uniform Bernoulli(0.5) prior."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, 1 - 1e-12)
    return float(np.sum(p * np.log(2 * p) + (1 - p) * np.log(2 * (1 - p))))


def kl_grad(probs) -> np.ndarray:
    p = np.clip(probs, 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


# -- efficiency losses -----------------------------------------------------------


def _signs(code) -> np.ndarray:
    if isinstance(code, HashCode):
        return code.to_signs().astype(np.float64)
    return np.asarray(code, dtype=np.float64)


def false_positive_loss(z_q, z_s, i: int, layout: SubstringLayout) -> float:
    """Negative substring distance between the query and its sampled false positive."""
    if z_s is None:
        return 0.0
    pos = list(layout.positions(i))
    return -surrogate_distance(_signs(z_q)[pos], _signs(z_s)[pos])


def radius_loss(z_q, z_r, r: int, m: int) -> float:
    """Full distance to the code at the k-th radius, active only when ``r > 2m - 1``."""
    if z_r is None or r <= 2 * m - 1:
        return 0.0
    return surrogate_distance(_signs(z_q), _signs(z_r))


def total_loss(semantic: float, false_positive: float, radius: float, alpha1: float, alpha2: float) -> float:
    return semantic + alpha1 * false_positive + alpha2 * radius


# -- batched objective -------------------------------------------------------------


@dataclass
class LossBreakdown:
    total: float
    semantic: float
    false_positive: float
    radius: float
    fp_active: int = 0
    radius_active: int = 0


@dataclass
class StepPlan:
    """Every stochastic and sampled quantity of one step, frozen so the loss is a
    deterministic function of the parameters.

    Codes enter the loss as ``z0 + 2 * (probs - anchor)``: equal to the sampled
    code at the anchor, with the straight-through slope everywhere.
    """

    x_q: np.ndarray
    x_plus: np.ndarray
    targets: np.ndarray
    z_q: np.ndarray
    z_plus: np.ndarray
    noise_q: np.ndarray
    noise_plus: np.ndarray
    anchor_q: np.ndarray
    anchor_plus: np.ndarray
    # rows of the auxiliary documents and the pair each belongs to
    x_s: np.ndarray = None
    z_s: np.ndarray = None
    anchor_s: np.ndarray = None
    s_pair: np.ndarray = None
    s_mask: np.ndarray = None
    x_r: np.ndarray = None
    z_r: np.ndarray = None
    anchor_r: np.ndarray = None
    r_pair: np.ndarray = None
    extras: dict = field(default_factory=dict)


def _empty_aux(n, v):
    return np.zeros((0, v)), np.zeros((0, n)), np.zeros(0, dtype=np.int64)


def objective(params: ModelParams, plan: StepPlan, config: TrainingConfig, caches=None):
    """Mean total loss over the pairs in ``plan`` and its gradient for every tensor.

    ``caches`` optionally supplies encoder forward passes already computed for
    ``(x_q, x_plus, x_s, x_r)``.
    """
    if caches is None:
        caches = [
            encoder_forward(x, params) if x is not None and len(x) else None
            for x in (plan.x_q, plan.x_plus, plan.x_s, plan.x_r)
        ]
    cq, cp, cs, cr = caches
    batch = len(plan.x_q)
    zq = plan.z_q + 2.0 * (cq.probs - plan.anchor_q)
    zp = plan.z_plus + 2.0 * (cp.probs - plan.anchor_plus)

    # semantic: both codes reconstruct the query document
    z_both = np.concatenate([zq, zp])
    noise = np.concatenate([plan.noise_q, plan.noise_plus])
    targets = np.concatenate([plan.targets, plan.targets])
    loglik, dcache = decoder_forward(z_both, noise, targets, params)
    kl_q = sum(kl_bernoulli(p) for p in cq.probs)
    kl_p = sum(kl_bernoulli(p) for p in cp.probs)
    semantic = (-loglik.sum() + config.beta * (kl_q + kl_p)) / batch

    grads = params.zeros_like()
    dz_both = decoder_backward(np.full(len(z_both), -1.0 / batch), dcache, params, grads)
    dzq, dzp = dz_both[:batch].copy(), dz_both[batch:].copy()
    dpq = config.beta * kl_grad(cq.probs) / batch
    dpp = config.beta * kl_grad(cp.probs) / batch

    fp = 0.0
    if cs is not None:
        zs = plan.z_s + 2.0 * (cs.probs - plan.anchor_s)
        zq_rows = zq[plan.s_pair]
        mask = plan.s_mask
        chunk = mask.sum(axis=1)
        fp = float(np.sum(-(chunk - (mask * zq_rows * zs).sum(axis=1)) / 2.0)) / batch
        scale = config.alpha1 * 0.5 / batch
        np.add.at(dzq, plan.s_pair, scale * mask * zs)
        dzs = scale * mask * zq_rows
        encoder_backward(2.0 * dzs, cs, params, grads)

    rad = 0.0
    if cr is not None:
        zr = plan.z_r + 2.0 * (cr.probs - plan.anchor_r)
        zq_rows = zq[plan.r_pair]
        n = zq.shape[1]
        rad = float(np.sum((n - (zq_rows * zr).sum(axis=1)) / 2.0)) / batch
        scale = -config.alpha2 * 0.5 / batch
        np.add.at(dzq, plan.r_pair, scale * zr)
        encoder_backward(2.0 * scale * zq_rows, cr, params, grads)

    encoder_backward(2.0 * dzq + dpq, cq, params, grads)
    encoder_backward(2.0 * dzp + dpp, cp, params, grads)
    total = semantic + config.alpha1 * fp + config.alpha2 * rad
    breakdown = LossBreakdown(
        total,
        semantic,
        fp,
        rad,
        0 if cs is None else len(plan.s_pair),
        0 if cr is None else len(plan.r_pair),
    )
    return breakdown, grads


def semantic_loss(d_q: SparseDoc, d_plus: SparseDoc, params: ModelParams, config: TrainingConfig, rng):
    """Pairwise reconstruction loss of one pair with straight-through samples; returns (loss, grads)."""
    plan = plan_semantic([d_q], [d_plus], params, rng)
    breakdown, grads = objective(params, plan, config.replace(alpha1=0.0, alpha2=0.0))
    return breakdown.semantic, grads


def plan_semantic(queries, positives, params: ModelParams, rng, caches=None) -> StepPlan:
    v, n = params.vocab_size, params.n_bits
    x_q = dense_matrix(queries, v)
    x_p = dense_matrix(positives, v)
    if caches is None:
        caches = encoder_forward(x_q, params), encoder_forward(x_p, params)
    cq, cp = caches
    batch = len(queries)
    u = rng.random((2, batch, n))
    eps = rng.standard_normal((2, batch, n)) * np.sqrt(params.sigma2)
    return StepPlan(
        x_q=x_q,
        x_plus=x_p,
        targets=word_mask(queries, v),
        z_q=sampled_signs(cq.probs, u[0]),
        z_plus=sampled_signs(cp.probs, u[1]),
        noise_q=eps[0],
        noise_plus=eps[1],
        anchor_q=cq.probs.copy(),
        anchor_plus=cp.probs.copy(),
    )


class Adam:
    def __init__(self, params: ModelParams, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: ModelParams, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            getattr(params, name)[...] -= update
