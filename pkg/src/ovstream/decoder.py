"""Trainable decoder: forward pass, loss, analytic gradients, and optimizer.

Two variants map a token matrix to an output embedding:

* ``linear`` -- ``weight @ cls + bias`` on the CLS row only (also covers
  dimension-matching between encoder and label-embedding spaces).
* ``block`` -- a pre-norm single-head transformer block (self-attention plus
  a 2-layer GELU MLP, both with residuals) over all tokens; the post-block
  CLS row is the output.

Both carry one extra learnable scalar, the "other" logit: an
input-independent none-of-the-above score appended to the candidate set
by the loss. Parameters live in float64; checkpoints store float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .core import FormatError, LabelEmbeddingTable, TEMPERATURE

# Sentinel label id for the learned none-of-the-above option.
OTHER_LABEL = -1

LN_EPS = 1e-5

_MAGIC = b"OVCK"
_VERSION = 1


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class DecoderParams:
    """Named parameter tensors for one decoder variant."""

    variant: str  # "linear" | "block"
    d_in: int
    d_out: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "DecoderParams":
        return DecoderParams(
            self.variant, self.d_in, self.d_out,
            {k: v.copy() for k, v in self.tensors.items()},
        )

    @property
    def other_logit(self) -> float:
        return float(self.tensors["other_logit"])

    def names(self) -> list[int]:
        return sorted(self.tensors)

    def validate(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ValueError(f"parameter {name} contains non-finite entries")


def linear_params(d_in: int, d_out: int | None = None, identity: bool = True,
                  rng: np.random.Generator | None = None, scale: float = 0.02) -> DecoderParams:
    """Linear decoder; identity-initialized when square (the frozen decoder is a no-op)."""
    d_out = d_in if d_out is None else d_out
    if identity and d_in == d_out:
        weight = np.eye(d_out, d_in)
    else:
        rng = rng or np.random.default_rng(0)
        weight = scale * rng.standard_normal((d_out, d_in))
    tensors = {
        "weight": weight.astype(np.float64),
        "bias": np.zeros(d_out),
        "other_logit": np.zeros(()),
    }
    return DecoderParams("linear", d_in, d_out, tensors)


def block_params(dim: int, rng: np.random.Generator | None = None,
                 scale: float = 0.02) -> DecoderParams:
    """Pre-norm single-head transformer block with small random projections.

    With small projections the block starts close to the residual-only path,
    so the initial tuned embedding stays near the CLS token.
    """
    rng = rng or np.random.default_rng(0)

    def w(shape):
        return scale * rng.standard_normal(shape)

    tensors = {
        "ln1_gain": np.ones(dim), "ln1_bias": np.zeros(dim),
        "wq": w((dim, dim)), "bq": np.zeros(dim),
        "wk": w((dim, dim)), "bk": np.zeros(dim),
        "wv": w((dim, dim)), "bv": np.zeros(dim),
        "wo": w((dim, dim)), "bo": np.zeros(dim),
        "ln2_gain": np.ones(dim), "ln2_bias": np.zeros(dim),
        "w1": w((dim, 4 * dim)), "b1": np.zeros(4 * dim),
        "w2": w((4 * dim, dim)), "b2": np.zeros(dim),
        "other_logit": np.zeros(()),
    }
    return DecoderParams("block", dim, dim, tensors)


def zeros_like_params(params: DecoderParams) -> DecoderParams:
    return DecoderParams(
        params.variant, params.d_in, params.d_out,
        {k: np.zeros_like(v) for k, v in params.tensors.items()},
    )


# ---------------------------------------------------------------------------
# Primitive layers


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Row-wise layer normalization (works on 1-D or 2-D inputs)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + LN_EPS)
    return gain * xhat + bias


def _layer_norm_fwd(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gain * xhat + bias, (xhat, inv, gain)


def _layer_norm_bwd(dout, cache):
    xhat, inv, gain = cache
    dxhat = dout * gain
    dgain = (dout * xhat).sum(axis=0)
    dbias = dout.sum(axis=0)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))


def _gelu_grad(z):
    phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + erf(z / np.sqrt(2.0))) + z * phi


def _softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Forward / backward


def _forward(tokens: np.ndarray, params: DecoderParams):
    """Decoder forward in float64; returns (output embedding, cache)."""
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"token matrix must be 2-D, got shape {x.shape}")
    if x.shape[1] != params.d_in:
        raise ValueError(f"token dimension {x.shape[1]} != decoder d_in {params.d_in}")
    t = params.tensors

    if params.variant == "linear":
        cls = x[0]
        e = t["weight"] @ cls + t["bias"]
        return e, ("linear", cls)

    if params.variant != "block":
        raise ValueError(f"unknown decoder variant {params.variant!r}")

    y1, ln1 = _layer_norm_fwd(x, t["ln1_gain"], t["ln1_bias"])
    q = y1 @ t["wq"] + t["bq"]
    k = y1 @ t["wk"] + t["bk"]
    v = y1 @ t["wv"] + t["bv"]
    scale = 1.0 / np.sqrt(params.d_in)
    scores = (q @ k.T) * scale
    attn_w = _softmax_rows(scores)
    attn = attn_w @ v
    o = attn @ t["wo"] + t["bo"]
    h = x + o

    y2, ln2 = _layer_norm_fwd(h, t["ln2_gain"], t["ln2_bias"])
    z = y2 @ t["w1"] + t["b1"]
    a = _gelu(z)
    m2 = a @ t["w2"] + t["b2"]
    out = h + m2
    cache = ("block", x, y1, ln1, q, k, v, scale, attn_w, attn, y2, ln2, z, a)
    return out[0], cache


def _backward(d_e: np.ndarray, params: DecoderParams, cache,
              grads: DecoderParams) -> None:
    """Accumulate parameter gradients for dL/d(output embedding) = d_e."""
    t = params.tensors
    g = grads.tensors

    if cache[0] == "linear":
        _, cls = cache
        g["weight"] += np.outer(d_e, cls)
        g["bias"] += d_e
        return

    _, x, y1, ln1, q, k, v, scale, attn_w, attn, y2, ln2, z, a = cache
    T = x.shape[0]
    dout = np.zeros_like(x)
    dout[0] = d_e

    # MLP branch
    dm2 = dout
    g["w2"] += a.T @ dm2
    g["b2"] += dm2.sum(axis=0)
    da = dm2 @ t["w2"].T
    dz = da * _gelu_grad(z)
    g["w1"] += y2.T @ dz
    g["b1"] += dz.sum(axis=0)
    dy2 = dz @ t["w1"].T
    dh_ln, dg2, db2 = _layer_norm_bwd(dy2, ln2)
    g["ln2_gain"] += dg2
    g["ln2_bias"] += db2
    dh = dout + dh_ln

    # Attention branch
    do = dh
    g["wo"] += attn.T @ do
    g["bo"] += do.sum(axis=0)
    dattn = do @ t["wo"].T
    dw = dattn @ v.T
    dv = attn_w.T @ dattn
    dscores = attn_w * (dw - (dw * attn_w).sum(axis=-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (dscores.T @ q) * scale
    g["wq"] += y1.T @ dq
    g["bq"] += dq.sum(axis=0)
    g["wk"] += y1.T @ dk
    g["bk"] += dk.sum(axis=0)
    g["wv"] += y1.T @ dv
    g["bv"] += dv.sum(axis=0)
    dy1 = dq @ t["wq"].T + dk @ t["wk"].T + dv @ t["wv"].T
    _, dg1, db1 = _layer_norm_bwd(dy1, ln1)
    g["ln1_gain"] += dg1
    g["ln1_bias"] += db1


def decode(tokens, params: DecoderParams) -> np.ndarray:
    """Map a token matrix to its output embedding (float32)."""
    e, _ = _forward(tokens, params)
    return e.astype(np.float32)


# ---------------------------------------------------------------------------
# Loss


@dataclass
class TrainingBatch:
    """Samples plus the candidate label set used by the loss."""

    samples: list  # of (token matrix, true label id)
    candidates: set

    def validate(self) -> None:
        if not self.samples:
            raise ValueError("empty training batch")
        for _, label in self.samples:
            if label not in self.candidates:
                raise ValueError(f"true label {label} missing from candidate set")


def augmented_logits(e, table: LabelEmbeddingTable, candidates,
                     other_logit: float) -> dict[int, float]:
    """Cosine logits over the candidates plus the input-independent OTHER logit."""
    labels = sorted(candidates)
    if not labels:
        raise ValueError("empty candidate set")
    v = np.asarray(e, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("zero-norm embedding")
    mat = table.matrix(labels)
    cos = np.clip(mat @ (v / norm), -1.0, 1.0)
    logits = {label: float(TEMPERATURE * c) for label, c in zip(labels, cos)}
    logits[OTHER_LABEL] = float(other_logit)
    return logits


def _ce_terms(e: np.ndarray, label: int, candidates: list[int],
              table: LabelEmbeddingTable, other_logit: float, beta: float):
    """Per-sample loss terms and the gradient wrt (candidate logits, other logit).

    Term 1: cross-entropy with the true label over candidates + OTHER.
    Term 2: cross-entropy with OTHER as target over (candidates + OTHER) \\ label;
    degenerate when the true label is the only candidate (singleton softmax).
    """
    n = len(candidates)
    norm = np.linalg.norm(e)
    if norm == 0.0:
        raise ValueError("zero-norm decoded embedding")
    mat = table.matrix(candidates)
    cos = np.clip(mat @ (e / norm), -1.0, 1.0)
    logits = np.append(TEMPERATURE * cos, other_logit)  # index n = OTHER

    idx = candidates.index(label)
    z1 = logits - logits.max()
    p1 = np.exp(z1) / np.exp(z1).sum()
    loss1 = -np.log(max(p1[idx], 1e-300))
    dlogits = p1.copy()
    dlogits[idx] -= 1.0

    if n > 1:
        keep = [i for i in range(n + 1) if i != idx]
        sub = logits[keep]
        z2 = sub - sub.max()
        p2 = np.exp(z2) / np.exp(z2).sum()
        loss2 = -np.log(max(p2[-1], 1e-300))  # OTHER is last in `keep`
        d2 = p2.copy()
        d2[-1] -= 1.0
        for j, i in enumerate(keep):
            dlogits[i] += beta * d2[j]
    else:
        loss2 = 0.0

    # Back through logits -> embedding: d(100*cos_k)/de
    e_hat = e / norm
    d_e = np.zeros_like(e)
    for k in range(n):
        d_e += dlogits[k] * TEMPERATURE * (mat[k] - cos[k] * e_hat) / norm
    return loss1 + beta * loss2, d_e, dlogits[n]


def combined_loss(batch: TrainingBatch, params: DecoderParams,
                  table: LabelEmbeddingTable, beta: float) -> float:
    """Mean over the batch of true-label CE plus beta times the OTHER-target CE."""
    loss, _ = _loss_and_grads(batch, params, table, beta, want_grads=False)
    return loss


def loss_gradients(batch: TrainingBatch, params: DecoderParams,
                   table: LabelEmbeddingTable, beta: float) -> DecoderParams:
    """Analytic gradients of :func:`combined_loss` wrt every parameter."""
    _, grads = _loss_and_grads(batch, params, table, beta, want_grads=True)
    return grads


def _loss_and_grads(batch, params, table, beta, want_grads):
    if beta < 0:
        raise ValueError("beta must be non-negative")
    batch.validate()
    candidates = sorted(batch.candidates)
    grads = zeros_like_params(params) if want_grads else None
    total = 0.0
    inv_n = 1.0 / len(batch.samples)
    for tokens, label in batch.samples:
        e, cache = _forward(tokens, params)
        loss, d_e, d_other = _ce_terms(e, label, candidates, table,
                                       params.other_logit, beta)
        total += loss * inv_n
        if want_grads:
            grads.tensors["other_logit"] += inv_n * d_other
            _backward(inv_n * d_e, params, cache, grads)
    return total, grads


# ---------------------------------------------------------------------------
# Optimizer (decoupled weight decay, adaptive moments)


@dataclass
class OptimizerState:
    lr: float = 9.375e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


# The "other" logit is a bias-like scalar and is excluded from weight decay.
_NO_DECAY = {"other_logit"}


def optimizer_step(params: DecoderParams, grads: DecoderParams,
                   state: OptimizerState) -> tuple[DecoderParams, OptimizerState]:
    """One decoupled-weight-decay adaptive-moment update, in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, theta in params.tensors.items():
        g = grads.tensors[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if name not in _NO_DECAY:
            update = update + state.weight_decay * theta
        theta -= state.lr * update
    return params, state


def online_update(new_id: int, store, params: DecoderParams,
                  state: OptimizerState, table: LabelEmbeddingTable,
                  sampler_config, rng: np.random.Generator,
                  beta: float = 0.1) -> list[int]:
    """One training iteration on a batch built around a just-inserted sample.

    The store must already hold ``new_id``. Returns the batch sample ids.
    """
    ids = store.compose_batch(new_id, sampler_config, rng)
    store.record_batched(ids, sampler_config)
    samples = [(store.tokens(i), store.label(i)) for i in ids]
    batch = TrainingBatch(samples, set(store.seen_labels()))
    grads = loss_gradients(batch, params, table, beta)
    optimizer_step(params, grads, state)
    return ids


# ---------------------------------------------------------------------------
# Checkpoint format: magic "OVCK", u32 version, u8 variant, u32 d_in, u32 d_out,
# u32 tensor count, then per tensor: u16 name length, utf-8 name, u8 ndim,
# u32 dims, little-endian float32 payload. Parameters round-trip via float32.

_VARIANT_CODES = {"linear": 0, "block": 1}
_VARIANT_NAMES = {v: k for k, v in _VARIANT_CODES.items()}


def save_checkpoint(params: DecoderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IBII", _VERSION, _VARIANT_CODES[params.variant],
                             params.d_in, params.d_out))
        fh.write(struct.pack("<I", len(params.tensors)))
        for name in sorted(params.tensors):
            t = np.ascontiguousarray(params.tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape) if t.ndim else b"")
            fh.write(t.tobytes())


def load_checkpoint(path) -> DecoderParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise FormatError("bad checkpoint magic at offset 0")
    try:
        version, variant_code, d_in, d_out = struct.unpack_from("<IBII", data, 4)
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack_from("<I", data, 17)
        off = 21
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off) if ndim else ()
            off += 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off)
            off += 4 * size
            tensors[name] = arr.reshape(shape).astype(np.float64)
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint near offset {len(data)}") from exc
    return DecoderParams(_VARIANT_NAMES[variant_code], d_in, d_out, tensors)
