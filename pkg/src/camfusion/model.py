"""The multiview fusion transformer.

Views are tokens of an unordered set: an input projection lifts each
descriptor to ``model_dim``, every block lets each view attend to itself
and then to a memory made of the *other* views' tokens from the block
input, and a single learned latent query pools the set into one vector
that is projected back to the descriptor space and L2-normalized.

All functions accept batched tokens of shape ``(B, n, model_dim)``; a
single instance is ``B = 1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import tensor as T


@dataclass(frozen=True)
class ModelConfig:
    descriptor_dim: int = 1024
    model_dim: int = 1024
    num_blocks: int = 8
    num_heads: int = 8
    mlp_hidden: int = 4096
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02
    init_t: float = 10.0
    init_b: float = 10.0

    def __post_init__(self):
        for name in ("descriptor_dim", "model_dim", "num_blocks", "num_heads", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.layer_norm_eps <= 0:
            raise ValueError("layer_norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


# Parameters whose weight decay is disabled: loss scalars, latent query, norms.
def no_decay_names(names) -> frozenset:
    return frozenset(n for n in names
                     if n.startswith("loss.") or n == "pool.latent" or ".norm" in n
                     or n.startswith("pool.norm"))


def inert_parameter_names(names) -> frozenset:
    """Parameters whose gradient is identically zero by construction.

    Self-attention runs over a one-token sequence, so its softmax weight is
    always 1 and the query/key projections never influence the output. A
    key bias adds the same amount to every score of a query, which softmax
    cancels. These stay in the parameter set to mirror the architecture.
    Batches with fewer than three input views also leave the cross-attention
    query/key projections without gradient (one key per memory); that is a
    property of the batch, not the model, and is not listed here.
    """
    return frozenset(n for n in names
                     if ".self_attn.q." in n or ".self_attn.k." in n or n.endswith(".k.bias"))


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Canonical name -> shape. Pure function of the config."""
    D, M, H = cfg.descriptor_dim, cfg.model_dim, cfg.mlp_hidden
    shapes = {"input.weight": (D, M), "input.bias": (M,)}

    def attn(prefix):
        for p in "qkvo":
            shapes[f"{prefix}.{p}.weight"] = (M, M)
            shapes[f"{prefix}.{p}.bias"] = (M,)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (M,)
        shapes[f"{prefix}.bias"] = (M,)

    for i in range(cfg.num_blocks):
        b = f"blocks.{i}"
        norm(f"{b}.norm_self")
        attn(f"{b}.self_attn")
        norm(f"{b}.norm_cross_query")
        norm(f"{b}.norm_cross_memory")
        attn(f"{b}.cross_attn")
        norm(f"{b}.norm_mlp")
        shapes[f"{b}.mlp.fc1.weight"] = (M, H)
        shapes[f"{b}.mlp.fc1.bias"] = (H,)
        shapes[f"{b}.mlp.fc2.weight"] = (H, M)
        shapes[f"{b}.mlp.fc2.bias"] = (M,)
    norm("pool.norm")
    attn("pool.attn")
    shapes["pool.latent"] = (M,)
    shapes["output.weight"] = (M, D)
    shapes["output.bias"] = (D,)
    shapes["loss.log_t"] = (1,)
    shapes["loss.b"] = (1,)
    return dict(sorted(shapes.items()))


def init_parameters(cfg: ModelConfig, seed: int = 0) -> dict:
    """Normal(0, init_std) weights and latent, zero biases, unit norm gains."""
    rng = np.random.default_rng([seed, 0x1A7E])
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "loss.log_t":
            value = np.full(shape, math.log(cfg.init_t))
        elif name == "loss.b":
            value = np.full(shape, cfg.init_b)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".weight") or name == "pool.latent":
            value = rng.normal(0.0, cfg.init_std, size=shape)
        else:
            value = np.zeros(shape)
        params[name] = T.Tensor(value, requires_grad=True)
    return params


def _sub(params: dict, prefix: str) -> dict:
    k = len(prefix) + 1
    return {name[k:]: p for name, p in params.items() if name.startswith(prefix + ".")}


def _linear(x, w, b):
    return T.add(T.matmul(x, w), b)


def project_in(descriptors, params: dict) -> T.Tensor:
    """``(..., n, D)`` descriptors -> ``(..., n, model_dim)`` depth-0 tokens."""
    x = T.as_tensor(descriptors)
    w = params["input.weight"]
    if x.shape[-1] != w.shape[0]:
        raise T.ShapeError(f"descriptor dim {x.shape[-1]} != projection input {w.shape[0]}")
    return _linear(x, w, params["input.bias"])


def attention(queries, keys_values, weights: dict, num_heads: int, mask=None) -> T.Tensor:
    """Multi-head scaled dot-product attention with output projection.

    ``queries`` is ``(..., q, M)`` and ``keys_values`` is ``(..., k, M)``;
    ``mask`` (``(..., q, k)`` bool, True = attend) restricts the keys.
    """
    q_in, kv_in = T.as_tensor(queries), T.as_tensor(keys_values)
    if kv_in.shape[-2] == 0:
        raise ValueError("attention over an empty memory")
    M = q_in.shape[-1]
    hd = M // num_heads

    def heads(x):
        lead = x.shape[:-1]
        return T.swapaxes(T.reshape(x, lead + (num_heads, hd)), -2, -3)

    Q = heads(_linear(q_in, weights["q.weight"], weights["q.bias"]))
    K = heads(_linear(kv_in, weights["k.weight"], weights["k.bias"]))
    V = heads(_linear(kv_in, weights["v.weight"], weights["v.bias"]))
    scores = T.mul(T.matmul(Q, T.swapaxes(K, -1, -2)), 1.0 / math.sqrt(hd))
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)  # broadcast over heads
    probs = T.softmax(scores, axis=-1, mask=mask)
    ctx = T.swapaxes(T.matmul(probs, V), -2, -3)
    ctx = T.reshape(ctx, ctx.shape[:-2] + (M,))
    return _linear(ctx, weights["o.weight"], weights["o.bias"])


def _norm(x, p, prefix, eps):
    return T.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"], eps)


def block_forward(E, block_params: dict, cfg: ModelConfig) -> T.Tensor:
    """One multiview block over tokens ``E`` of shape ``(..., n, M)``."""
    E = T.as_tensor(E)
    n, M = E.shape[-2], E.shape[-1]
    eps = cfg.layer_norm_eps
    p = block_params

    # (a) self-attention: each token over the one-token sequence {itself}
    h = _norm(E, p, "norm_self", eps)
    h1 = T.reshape(h, h.shape[:-1] + (1, M))
    sa = attention(h1, h1, _sub(p, "self_attn"), cfg.num_heads)
    x = T.add(E, T.reshape(sa, E.shape))

    # (b) cross-attention to the other views' block-input tokens
    if n > 1:
        q = _norm(x, p, "norm_cross_query", eps)
        memory = _norm(E, p, "norm_cross_memory", eps)
        others = ~np.eye(n, dtype=bool)
        x = T.add(x, attention(q, memory, _sub(p, "cross_attn"), cfg.num_heads, mask=others))

    # (c) MLP
    h = _norm(x, p, "norm_mlp", eps)
    h = T.gelu(_linear(h, p["mlp.fc1.weight"], p["mlp.fc1.bias"]))
    return T.add(x, _linear(h, p["mlp.fc2.weight"], p["mlp.fc2.bias"]))


def latent_pooling(E_final, latent, pooling_params: dict, cfg: ModelConfig) -> T.Tensor:
    """Cross-attention from the learned latent query to the view tokens -> ``(..., M)``."""
    E = T.as_tensor(E_final)
    M = E.shape[-1]
    kv = _norm(E, pooling_params, "norm", cfg.layer_norm_eps)
    q = T.reshape(T.as_tensor(latent), (1, M))
    out = attention(q, kv, _sub(pooling_params, "attn"), cfg.num_heads)
    pooled = T.add(q, out)  # residual on the query path
    return T.reshape(pooled, pooled.shape[:-2] + (M,))


def forward(descriptors, params: dict, cfg: ModelConfig) -> T.Tensor:
    """Batched fusion: ``(B, n, D)`` -> unit-norm ``(B, D)``."""
    x = T.as_tensor(descriptors)
    if x.ndim != 3:
        raise T.ShapeError(f"forward expects (B, n, D), got {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("cannot fuse an empty set of views")
    E = project_in(x, params)
    for i in range(cfg.num_blocks):
        E = block_forward(E, _sub(params, f"blocks.{i}"), cfg)
    pooled = latent_pooling(E, params["pool.latent"], _sub(params, "pool"), cfg)
    out = _linear(pooled, params["output.weight"], params["output.bias"])
    return T.l2_normalize(out, axis=-1)


def fuse(descriptors, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Fuse one instance's ``n×D`` view descriptors into a unit-norm ``D`` vector."""
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"fuse needs a non-empty n×D matrix, got shape {x.shape}")
    return forward(x[None], params, cfg).data[0].copy()


def fuse_many(view_sets, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Fuse a list of ``n_i×D`` matrices, batching instances with equal view counts."""
    out = np.empty((len(view_sets), cfg.descriptor_dim))
    groups: dict = {}
    for i, v in enumerate(view_sets):
        groups.setdefault(len(v), []).append(i)
    for n, idx in sorted(groups.items()):
        if n == 0:
            raise ValueError("cannot fuse an empty set of views")
        batch = np.stack([np.asarray(view_sets[i], dtype=np.float64) for i in idx])
        out[idx] = forward(batch, params, cfg).data
    return out


def loss_scalars(params: dict):
    """``(t, b)`` as differentiable scalars; t is stored as log t."""
    return T.exp(params["loss.log_t"]), params["loss.b"]


def scoring_scale_bias(params: dict) -> tuple:
    """``(t, bias)`` for ``sigmoid(t·s + bias)`` confidence, matching the training logit t·s − b."""
    t = float(np.exp(params["loss.log_t"].data[0]))
    return t, -float(params["loss.b"].data[0])


class CAMFusion:
    """Config plus parameter set; thin convenience wrapper over the functions above."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)

    def fuse(self, descriptors) -> np.ndarray:
        return fuse(descriptors, self.params, self.cfg)

    def fuse_many(self, view_sets) -> np.ndarray:
        return fuse_many(view_sets, self.params, self.cfg)

    def forward(self, descriptors) -> T.Tensor:
        return forward(descriptors, self.params, self.cfg)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))
