"""Graph-attention encoder with a pairwise MLP connectivity head.

Forward pass on a fully connected graph of ``n`` nodes with features ``f``:

* each attention head ``k`` projects ``h -> W_k h``, scores every ordered pair
  with ``LeakyReLU(a_src . W_k h_i + a_dst . W_k h_j)``, normalises the scores
  over ``j`` (self included) with a softmax, aggregates ``W_k h_j`` and applies
  an ELU; head outputs are concatenated;
* the pair ``(i, j)`` is described by ``[z_i, f_i, z_j, f_j]`` and scored by
  ``sigmoid(w2 . relu(W1 x + b1) + b2)``;
* probabilities are symmetrised, ``p_ij = (q_ij + q_ji) / 2``.

Gradients are derived by hand; ``gradients`` returns the exact derivative of
the multi-task loss with respect to every tensor.
"""

from __future__ import annotations

import struct
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import kernels
from .densities import graph_densities
from .errors import DegenerateBatch, InvalidArgument, NumericOverflow
from .graph import EmbGraph

P_CLIP = 1e-7
DENSITY_TERMS = ("avg", "nbr")


@dataclass(frozen=True)
class NetDims:
    input_dim: int = 16
    hidden: int = 32
    heads: int = 2
    layers: int = 1
    mlp_hidden: int = 64
    negative_slope: float = 0.2

    @property
    def encoder_width(self) -> int:
        return self.heads * self.hidden

    @property
    def pair_width(self) -> int:
        return 2 * (self.encoder_width + self.input_dim)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        width = self.input_dim
        for l in range(self.layers):
            out[f"gat{l}.W"] = (self.heads, width, self.hidden)
            out[f"gat{l}.a_src"] = (self.heads, self.hidden)
            out[f"gat{l}.a_dst"] = (self.heads, self.hidden)
            width = self.encoder_width
        out["mlp.W1"] = (self.pair_width, self.mlp_hidden)
        out["mlp.b1"] = (self.mlp_hidden,)
        out["mlp.W2"] = (self.mlp_hidden,)
        out["mlp.b2"] = (1,)
        return out


@dataclass
class ModelParams:
    dims: NetDims
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.dims.shapes()
        if list(self.tensors) != list(shapes):
            raise InvalidArgument("tensor names do not match the architecture")
        for name, shape in shapes.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise InvalidArgument(f"{name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise InvalidArgument(f"{name} contains non-finite values")

    @property
    def encoder_names(self) -> list[str]:
        return [k for k in self.tensors if k.startswith("gat")]

    @property
    def mlp_names(self) -> list[str]:
        return [k for k in self.tensors if k.startswith("mlp")]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])


def _uniform(shape, fan_in, rng):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_mlp(dims: NetDims, seed) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "mlp.W1": _uniform((dims.pair_width, dims.mlp_hidden), dims.pair_width, rng),
        "mlp.b1": np.zeros(dims.mlp_hidden),
        "mlp.W2": _uniform((dims.mlp_hidden,), dims.mlp_hidden, rng),
        "mlp.b2": np.zeros(1),
    }


def init_params(dims: NetDims, seed) -> ModelParams:
    """Fan-in uniform weights, zero biases. The MLP uses its own child seed."""
    enc_seed, mlp_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(enc_seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in dims.shapes().items():
        if name.startswith("gat"):
            fan_in = shape[1] if name.endswith(".W") else 2 * dims.hidden
            tensors[name] = _uniform(shape, fan_in, rng)
    tensors.update(init_mlp(dims, mlp_seed))
    return ModelParams(dims, tensors)


def reset_mlp(params: ModelParams, seed) -> ModelParams:
    """Fresh MLP head (as ``init_params(dims, seed)`` would draw it); encoder kept."""
    _, mlp_seed = np.random.SeedSequence(seed).spawn(2)
    out = params.copy()
    out.tensors.update(init_mlp(params.dims, mlp_seed))
    return out


@dataclass
class ForwardResult:
    z: np.ndarray
    prob: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    def condensed(self) -> np.ndarray:
        i, j = np.triu_indices(self.prob.shape[0], k=1)
        return self.prob[i, j]


def _check_finite(arr, what, layer):
    if not np.all(np.isfinite(arr)):
        raise NumericOverflow(f"non-finite {what}", layer)


def forward(params: ModelParams, graph: EmbGraph) -> ForwardResult:
    dims = params.dims
    f = graph.node_features
    if f.shape[1] != dims.input_dim:
        raise InvalidArgument(f"graph features have dim {f.shape[1]}, model expects {dims.input_dim}")
    T = params.tensors
    slope = dims.negative_slope
    h = f
    layers = []
    for l in range(dims.layers):
        heads = []
        outs = []
        for k in range(dims.heads):
            wh = h @ T[f"gat{l}.W"][k]
            e = (wh @ T[f"gat{l}.a_src"][k])[:, None] + (wh @ T[f"gat{l}.a_dst"][k])[None, :]
            lr = np.where(e > 0, e, slope * e)
            lr = lr - lr.max(axis=1, keepdims=True)
            alpha = np.exp(lr)
            alpha /= alpha.sum(axis=1, keepdims=True)
            agg = alpha @ wh
            out = np.where(agg > 0, agg, np.expm1(np.minimum(agg, 0.0)))
            heads.append((wh, e, alpha, agg))
            outs.append(out)
        h_in = h
        h = np.concatenate(outs, axis=1)
        _check_finite(h, "activations", f"gat{l}")
        layers.append((h_in, heads))
    z = h
    x = np.concatenate([z, f], axis=1)
    w1 = T["mlp.W1"]
    fw = dims.encoder_width + dims.input_dim
    u = x @ w1[:fw]
    v = x @ w1[fw:]
    logits = kernels.pair_mlp_forward(u, v, T["mlp.b1"], T["mlp.W2"], T["mlp.b2"][0])
    _check_finite(logits, "logits", "mlp")
    q = expit(logits)
    prob = 0.5 * (q + q.T)
    cache = dict(layers=layers, x=x, u=u, v=v, q=q, fw=fw)
    return ForwardResult(z, prob, cache)


def soft_densities(prob: np.ndarray, graph: EmbGraph) -> tuple[np.ndarray, np.ndarray]:
    """Densities with label indicators replaced by ``p_ij`` and ``1 - p_ij``."""
    n = graph.n
    a = graph.edge_cosine.copy()
    np.fill_diagonal(a, 0.0)
    s_avg = np.sum(a * prob, axis=1) / (n - 1)
    s_nbr = np.sum(a * (2.0 * prob - 1.0), axis=1) / (n - 1)
    return s_avg, s_nbr


@dataclass(frozen=True)
class LossBreakdown:
    l_conn: float
    l_s_avg: float
    l_s_nbr: float
    total: float
    lam: float
    terms: tuple[str, ...] = DENSITY_TERMS


def _pair_masks(graph: EmbGraph):
    if graph.labels is None:
        raise InvalidArgument("loss needs a labeled graph")
    same = graph.labels[:, None] == graph.labels[None, :]
    upper = np.triu(np.ones((graph.n, graph.n), dtype=bool), k=1)
    pos = same & upper
    neg = ~same & upper
    if not pos.any():
        raise DegenerateBatch("batch has no positive pairs")
    if not neg.any():
        raise DegenerateBatch("batch has no negative pairs")
    return pos, neg


def _loss_and_dprob(prob: np.ndarray, graph: EmbGraph, lam: float, terms=DENSITY_TERMS):
    pos, neg = _pair_masks(graph)
    n = graph.n
    n_pos, n_neg = pos.sum(), neg.sum()
    pc = np.clip(prob, P_CLIP, 1 - P_CLIP)
    inside = (prob > P_CLIP) & (prob < 1 - P_CLIP)
    # mean of the two class-averaged terms, so p = 0.5 everywhere gives ln 2
    l_conn = -0.5 * (np.sum(np.log(pc[pos])) / n_pos + np.sum(np.log1p(-pc[neg])) / n_neg)

    s_avg, s_nbr, _ = graph_densities(graph.edge_cosine, graph.labels)
    h_avg, h_nbr = soft_densities(prob, graph)
    r_avg, r_nbr = h_avg - s_avg, h_nbr - s_nbr
    l_avg = float(np.mean(r_avg ** 2))
    l_nbr = float(np.mean(r_nbr ** 2))
    w_avg = lam if "avg" in terms else 0.0
    w_nbr = lam if "nbr" in terms else 0.0
    total = l_conn + w_nbr * l_nbr + w_avg * l_avg

    g = np.zeros((n, n))
    g[pos] = -0.5 / (n_pos * pc[pos])
    g[neg] = 0.5 / (n_neg * (1.0 - pc[neg]))
    g *= inside
    a = graph.edge_cosine.copy()
    np.fill_diagonal(a, 0.0)
    coef = (w_avg * 2.0 * r_avg + w_nbr * 4.0 * r_nbr) / (n * (n - 1))
    g += coef[:, None] * a
    breakdown = LossBreakdown(float(l_conn), l_avg, l_nbr, float(total), float(lam), tuple(terms))
    return breakdown, g


def loss(prob: np.ndarray, graph: EmbGraph, lam: float = 10.0, terms=DENSITY_TERMS) -> LossBreakdown:
    """Balanced pair cross-entropy plus ``lam`` times the density MSEs."""
    return _loss_and_dprob(prob, graph, lam, terms)[0]


def _backward(params: ModelParams, fwd: ForwardResult, dprob: np.ndarray,
              names: set[str] | None = None) -> dict[str, np.ndarray]:
    dims = params.dims
    T = params.tensors
    c = fwd.cache
    q, x, fw = c["q"], c["x"], c["fw"]
    grads: dict[str, np.ndarray] = {}

    dq = 0.5 * (dprob + dprob.T)
    dlogit = dq * q * (1.0 - q)
    grads["mlp.b2"] = np.array([dlogit.sum()])
    du, dv, grads["mlp.b1"], grads["mlp.W2"] = kernels.pair_mlp_backward(
        c["u"], c["v"], T["mlp.b1"], T["mlp.W2"], dlogit)
    grads["mlp.W1"] = np.concatenate([x.T @ du, x.T @ dv], axis=0)
    _check_finite(grads["mlp.W1"], "gradient", "mlp")
    if names is not None and not any(n.startswith("gat") for n in names):
        return {k: grads[k] for k in T if k in grads}

    w1 = T["mlp.W1"]
    dx = du @ w1[:fw].T + dv @ w1[fw:].T
    dh = dx[:, :dims.encoder_width]
    slope = dims.negative_slope
    for l in reversed(range(dims.layers)):
        h_in, heads = c["layers"][l]
        dW = np.zeros_like(T[f"gat{l}.W"])
        da_src = np.zeros_like(T[f"gat{l}.a_src"])
        da_dst = np.zeros_like(T[f"gat{l}.a_dst"])
        dh_in = np.zeros_like(h_in)
        for k, (wh, e, alpha, agg) in enumerate(heads):
            dout = dh[:, k * dims.hidden:(k + 1) * dims.hidden]
            dagg = dout * np.where(agg > 0, 1.0, np.exp(np.minimum(agg, 0.0)))
            dalpha = dagg @ wh.T
            dwh = alpha.T @ dagg
            dlr = alpha * (dalpha - np.sum(dalpha * alpha, axis=1, keepdims=True))
            de = dlr * np.where(e > 0, 1.0, slope)
            ds = de.sum(axis=1)
            dt = de.sum(axis=0)
            a_s, a_d = T[f"gat{l}.a_src"][k], T[f"gat{l}.a_dst"][k]
            da_src[k] = wh.T @ ds
            da_dst[k] = wh.T @ dt
            dwh += np.outer(ds, a_s) + np.outer(dt, a_d)
            dW[k] = h_in.T @ dwh
            dh_in += dwh @ T[f"gat{l}.W"][k].T
        grads[f"gat{l}.W"], grads[f"gat{l}.a_src"], grads[f"gat{l}.a_dst"] = dW, da_src, da_dst
        _check_finite(dW, "gradient", f"gat{l}")
        dh = dh_in
    return {k: grads[k] for k in T}


def loss_and_gradients(params: ModelParams, graph: EmbGraph, lam: float = 10.0,
                       terms=DENSITY_TERMS, names=None) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    fwd = forward(params, graph)
    breakdown, dprob = _loss_and_dprob(fwd.prob, graph, lam, terms)
    return breakdown, _backward(params, fwd, dprob, None if names is None else set(names))


def gradients(params: ModelParams, graph: EmbGraph, lam: float = 10.0,
              terms=DENSITY_TERMS) -> dict[str, np.ndarray]:
    """Exact gradient of ``LossBreakdown.total`` for every tensor."""
    return loss_and_gradients(params, graph, lam, terms)[1]


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    lr_max: float
    lr_min: float
    total_steps: int
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, lr_max: float, lr_min: float, total_steps: int,
              names=None) -> "OptimizerState":
        names = list(params.tensors) if names is None else list(names)
        zeros = {k: np.zeros_like(params.tensors[k]) for k in names}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0, lr_max, lr_min, total_steps)


def adam_step(state: OptimizerState, params: ModelParams,
              grads: dict[str, np.ndarray]) -> tuple[ModelParams, OptimizerState]:
    """One Adam update of the tensors tracked by ``state``; others are untouched."""
    b1, b2 = state.betas
    t = state.step + 1
    lr = cosine_lr(state.step, state.total_steps, state.lr_max, state.lr_min)
    new = params.copy()
    m_new, v_new = {}, {}
    for name in state.m:
        g = grads[name]
        if g.shape != params.tensors[name].shape:
            raise InvalidArgument(f"gradient for {name} has the wrong shape")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new.tensors[name] = params.tensors[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[name], v_new[name] = m, v
    st = OptimizerState(m_new, v_new, t, state.lr_max, state.lr_min, state.total_steps,
                        state.betas, state.eps)
    return new, st


# -- model artifact ---------------------------------------------------------

MODEL_MAGIC = b"TTCM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sI5If")


def save_model(path, params: ModelParams, tau: float = float("nan"),
               grid=(0.0, 2.0, 0.01), provenance: dict | None = None) -> None:
    """Write the ``TTCM`` artifact.

    Layout (little-endian): magic, version, dims (input_dim, hidden, heads,
    layers, mlp_hidden as u32; negative_slope as f32), tau and grid
    (lo, hi, step) as f64, the tensors as f32 in declaration order, then a
    u32-length-prefixed JSON provenance blob.
    """
    d = params.dims
    blob = json.dumps(provenance or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, d.input_dim, d.hidden, d.heads,
                              d.layers, d.mlp_hidden, d.negative_slope))
        fh.write(struct.pack("<4d", tau, *grid))
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_model(path) -> tuple[ModelParams, float, tuple[float, float, float], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 32 or raw[:4] != MODEL_MAGIC:
        raise InvalidArgument(f"{path}: not a TTCM model file")
    magic, version, din, hid, heads, layers, mlp_h, slope = _HEADER.unpack_from(raw, 0)
    if version != MODEL_VERSION:
        raise InvalidArgument(f"{path}: unsupported model version {version}")
    dims = NetDims(din, hid, heads, layers, mlp_h, float(np.float32(slope)))
    tau, lo, hi, step = struct.unpack_from("<4d", raw, _HEADER.size)
    off = _HEADER.size + 32
    tensors = {}
    for name, shape in dims.shapes().items():
        size = int(np.prod(shape))
        end = off + 4 * size
        if end > len(raw):
            raise InvalidArgument(f"{path}: truncated while reading {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).astype(np.float64).reshape(shape)
        off = end
    if off + 4 > len(raw):
        raise InvalidArgument(f"{path}: missing provenance block")
    (n_blob,) = struct.unpack_from("<I", raw, off)
    if off + 4 + n_blob != len(raw):
        raise InvalidArgument(f"{path}: size does not match the declared architecture")
    prov = json.loads(raw[off + 4:].decode() or "{}")
    return ModelParams(dims, tensors), tau, (lo, hi, step), prov
