"""Transformer-encoder feature extractor with a learnable refinement gate.

An image is cut into patches, linearly embedded, prefixed with a learnable
summary token, and run through pre-norm transformer blocks.  The summary
token's final state is multiplied element-wise by a learnable weight vector
(the refinement gate); the gated vector is both the extracted feature vector
and the input to a linear softmax head used for training.

Everything is float64 numpy with hand-derived gradients; ``backward`` is
checked against the central-difference oracle in the test suite.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .data import FeatureTable, ImageSample
from .errors import DimensionError, DomainError, FormatError, NumericFailure
from .numerics import one_hot, softmax
from .rng import Rng, derive_seed

LN_EPS = 1e-5
LOG_FLOOR = 1e-12

_CKPT_MAGIC = b"ATFX"
_CKPT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (32, 32)
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 3
    final_norm: bool = True

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise DimensionError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise DimensionError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if self.num_patches < 1:
            raise DomainError("configuration yields zero patches")

    @property
    def num_patches(self) -> int:
        h, w = self.image_size
        return (h * w) // (self.patch_size**2)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)


@dataclass
class LayerParams:
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


_LAYER_FIELDS = [
    "ln1_scale", "ln1_shift", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_scale", "ln2_shift", "w1", "b1", "w2", "b2",
]


@dataclass
class ModelParams:
    config: ModelConfig
    patch_proj: np.ndarray
    patch_bias: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    layers: list[LayerParams]
    refine_weights: np.ndarray
    head_weight: np.ndarray
    head_bias: np.ndarray
    final_scale: np.ndarray | None = None
    final_shift: np.ndarray | None = None

    def named_parameters(self):
        """(name, array) pairs in the fixed serialization order."""
        yield "patch_proj", self.patch_proj
        yield "patch_bias", self.patch_bias
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, layer in enumerate(self.layers):
            for name in _LAYER_FIELDS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        if self.config.final_norm:
            yield "final_scale", self.final_scale
            yield "final_shift", self.final_shift
        yield "refine_weights", self.refine_weights
        yield "head_weight", self.head_weight
        yield "head_bias", self.head_bias

    def get(self, name: str) -> np.ndarray:
        if name.startswith("layers."):
            _, idx, fieldname = name.split(".")
            return getattr(self.layers[int(idx)], fieldname)
        return getattr(self, name)

    def set(self, name: str, value: np.ndarray) -> None:
        if name.startswith("layers."):
            _, idx, fieldname = name.split(".")
            setattr(self.layers[int(idx)], fieldname, value)
        else:
            setattr(self, name, value)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Random initialization: truncated-normal weights (sigma 0.02), zero
    biases, unit layer-norm scales, and a refinement gate drawn near 1 so
    training starts at an almost-identity gate."""
    rng = Rng(derive_seed(seed, "model-init"))
    d = config.embed_dim

    def weight(shape):
        return rng.truncated_normal(shape, scale=0.02)

    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerParams(
                ln1_scale=np.ones(d), ln1_shift=np.zeros(d),
                wq=weight((d, d)), bq=np.zeros(d),
                wk=weight((d, d)), bk=np.zeros(d),
                wv=weight((d, d)), bv=np.zeros(d),
                wo=weight((d, d)), bo=np.zeros(d),
                ln2_scale=np.ones(d), ln2_shift=np.zeros(d),
                w1=weight((d, config.hidden_dim)), b1=np.zeros(config.hidden_dim),
                w2=weight((config.hidden_dim, d)), b2=np.zeros(d),
            )
        )
    return ModelParams(
        config=config,
        patch_proj=weight((config.patch_dim, d)),
        patch_bias=np.zeros(d),
        cls_token=weight((d,)),
        pos_embed=weight((config.num_patches + 1, d)),
        layers=layers,
        final_scale=np.ones(d) if config.final_norm else None,
        final_shift=np.zeros(d) if config.final_norm else None,
        refine_weights=rng.normal(size=(d,), loc=1.0, scale=0.02),
        head_weight=weight((config.num_classes, d)),
        head_bias=np.zeros(config.num_classes),
    )


# ---------------------------------------------------------------------------
# forward pieces


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, C) -> (N, P*P*C); raster patch order, row/column/channel within."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise DimensionError(f"expected (H, W, C) pixels, got shape {pixels.shape}")
    h, w, c = pixels.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    n_y, n_x = h // p, w // p
    return (
        pixels.reshape(n_y, p, n_x, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(n_y * n_x, p * p * c)
    )


def unpatchify(patches: np.ndarray, image_size: tuple[int, int], patch_size: int,
               channels: int) -> np.ndarray:
    """Inverse of ``patchify``; exact round-trip."""
    h, w = image_size
    p = patch_size
    n_y, n_x = h // p, w // p
    return (
        patches.reshape(n_y, n_x, p, p, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h, w, channels)
    )


def embed(patches: np.ndarray, params: ModelParams) -> np.ndarray:
    """Token sequence: [summary token; projected patches] + position embeddings."""
    cfg = params.config
    if patches.shape != (cfg.num_patches, cfg.patch_dim):
        raise DimensionError(
            f"expected patches {(cfg.num_patches, cfg.patch_dim)}, got {patches.shape}"
        )
    projected = patches @ params.patch_proj + params.patch_bias
    tokens = np.vstack([params.cls_token[None, :], projected])
    return tokens + params.pos_embed


def _layernorm_forward(x, scale, shift):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * scale + shift, (xhat, inv_std)


def _layernorm_backward(dy, cache, scale):
    xhat, inv_std = cache
    dscale = (dy * xhat).sum(axis=0)
    dshift = dy.sum(axis=0)
    dxhat = dy * scale
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dscale, dshift


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def _split_heads(x, num_heads):
    t, d = x.shape
    return x.reshape(t, num_heads, d // num_heads).transpose(1, 0, 2)


def _merge_heads(x):
    heads, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, heads * dh)


def _attention_forward(normed, layer: LayerParams, num_heads: int):
    q = _split_heads(normed @ layer.wq + layer.bq, num_heads)
    k = _split_heads(normed @ layer.wk + layer.bk, num_heads)
    v = _split_heads(normed @ layer.wv + layer.bv, num_heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 2, 1)) * scale
    attn = softmax(scores, axis=-1)
    context = _merge_heads(attn @ v)
    out = context @ layer.wo + layer.bo
    cache = {"normed": normed, "q": q, "k": k, "v": v, "attn": attn,
             "context": context, "scale": scale}
    return out, cache


def _attention_backward(dout, cache, layer: LayerParams, grads, prefix):
    normed, q, k, v = cache["normed"], cache["q"], cache["k"], cache["v"]
    attn, context, scale = cache["attn"], cache["context"], cache["scale"]
    num_heads = q.shape[0]

    grads[prefix + "wo"] += context.T @ dout
    grads[prefix + "bo"] += dout.sum(axis=0)
    dcontext = _split_heads(dout @ layer.wo.T, num_heads)

    dattn = dcontext @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dcontext
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 2, 1) @ q) * scale

    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    grads[prefix + "wq"] += normed.T @ dq
    grads[prefix + "bq"] += dq.sum(axis=0)
    grads[prefix + "wk"] += normed.T @ dk
    grads[prefix + "bk"] += dk.sum(axis=0)
    grads[prefix + "wv"] += normed.T @ dv
    grads[prefix + "bv"] += dv.sum(axis=0)
    return dq @ layer.wq.T + dk @ layer.wk.T + dv @ layer.wv.T


def _mlp_forward(normed, layer: LayerParams):
    pre = normed @ layer.w1 + layer.b1
    act = _gelu(pre)
    out = act @ layer.w2 + layer.b2
    return out, {"normed": normed, "pre": pre, "act": act}


def _mlp_backward(dout, cache, layer: LayerParams, grads, prefix):
    normed, pre, act = cache["normed"], cache["pre"], cache["act"]
    grads[prefix + "w2"] += act.T @ dout
    grads[prefix + "b2"] += dout.sum(axis=0)
    dact = dout @ layer.w2.T
    dpre = dact * _gelu_grad(pre)
    grads[prefix + "w1"] += normed.T @ dpre
    grads[prefix + "b1"] += dpre.sum(axis=0)
    return dpre @ layer.w1.T


@dataclass
class ForwardTrace:
    config: ModelConfig
    patches: np.ndarray
    z0: np.ndarray
    layer_caches: list[dict] = field(default_factory=list)
    encoded: np.ndarray | None = None  # token states after the last block
    final_cache: tuple | None = None
    h_out: np.ndarray | None = None
    refined: np.ndarray | None = None
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None

    def attention_rows(self):
        for cache in self.layer_caches:
            yield cache["attn"]["attn"]


def encoder_forward(z0: np.ndarray, params: ModelParams):
    """Run the pre-norm blocks; returns (final token states, per-layer caches)."""
    cfg = params.config
    if z0.shape != (cfg.num_patches + 1, cfg.embed_dim):
        raise DimensionError(
            f"expected tokens {(cfg.num_patches + 1, cfg.embed_dim)}, got {z0.shape}"
        )
    x = z0
    caches = []
    for i, layer in enumerate(params.layers):
        n1, ln1_cache = _layernorm_forward(x, layer.ln1_scale, layer.ln1_shift)
        attn_out, attn_cache = _attention_forward(n1, layer, cfg.num_heads)
        x_mid = x + attn_out
        n2, ln2_cache = _layernorm_forward(x_mid, layer.ln2_scale, layer.ln2_shift)
        mlp_out, mlp_cache = _mlp_forward(n2, layer)
        x = x_mid + mlp_out
        if not np.isfinite(x).all():
            raise NumericFailure(f"non-finite activations after encoder layer {i}")
        caches.append({"ln1": ln1_cache, "attn": attn_cache, "ln2": ln2_cache,
                       "mlp": mlp_cache})
    return x, caches


def refine(h_out: np.ndarray, refine_weights: np.ndarray) -> np.ndarray:
    """Element-wise gate over the summary vector."""
    h_out = np.asarray(h_out, dtype=np.float64)
    refine_weights = np.asarray(refine_weights, dtype=np.float64)
    if h_out.shape != refine_weights.shape:
        raise DimensionError(
            f"gate length {refine_weights.shape} does not match vector {h_out.shape}"
        )
    return h_out * refine_weights


def classify_head(refined: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    if weight.shape[1] != refined.shape[0] or weight.shape[0] != bias.shape[0]:
        raise DimensionError(
            f"head shapes {weight.shape}/{bias.shape} do not match input {refined.shape}"
        )
    logits = weight @ refined + bias
    return logits, softmax(logits)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    if not 0 <= label < probs.shape[0]:
        raise DomainError(f"label {label} outside [0, {probs.shape[0]})")
    return float(-np.log(max(probs[label], LOG_FLOOR)))


def forward(pixels: np.ndarray, params: ModelParams) -> ForwardTrace:
    """Full pass, caching everything ``backward`` needs."""
    cfg = params.config
    patches = patchify(pixels, cfg.patch_size)
    z0 = embed(patches, params)
    trace = ForwardTrace(config=cfg, patches=patches, z0=z0)
    trace.encoded, trace.layer_caches = encoder_forward(z0, params)
    cls_state = trace.encoded[0]
    if cfg.final_norm:
        normed, trace.final_cache = _layernorm_forward(
            cls_state[None, :], params.final_scale, params.final_shift
        )
        trace.h_out = normed[0]
    else:
        trace.h_out = cls_state
    trace.refined = refine(trace.h_out, params.refine_weights)
    trace.logits, trace.probs = classify_head(
        trace.refined, params.head_weight, params.head_bias
    )
    return trace


def zero_gradients(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.named_parameters()}


def backward(trace: ForwardTrace, label: int, params: ModelParams,
             grads: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Gradients of the cross-entropy loss for every parameter.

    Accumulates into ``grads`` when given (used for mini-batch sums).
    """
    cfg = params.config
    if trace.config is not cfg and trace.config != cfg:
        raise DimensionError("trace was produced by a different model configuration")
    if trace.probs is None or trace.probs.shape[0] != cfg.num_classes:
        raise DimensionError("trace is incomplete or does not match the parameters")
    if grads is None:
        grads = zero_gradients(params)

    dlogits = trace.probs - one_hot(label, cfg.num_classes)
    grads["head_weight"] += np.outer(dlogits, trace.refined)
    grads["head_bias"] += dlogits
    drefined = params.head_weight.T @ dlogits

    grads["refine_weights"] += drefined * trace.h_out
    dh_out = drefined * params.refine_weights

    if cfg.final_norm:
        drow, dscale, dshift = _layernorm_backward(
            dh_out[None, :], trace.final_cache, params.final_scale
        )
        grads["final_scale"] += dscale
        grads["final_shift"] += dshift
        dcls = drow[0]
    else:
        dcls = dh_out

    dx = np.zeros_like(trace.encoded)
    dx[0] = dcls
    for i in range(cfg.num_layers - 1, -1, -1):
        layer = params.layers[i]
        cache = trace.layer_caches[i]
        prefix = f"layers.{i}."
        dn2 = _mlp_backward(dx, cache["mlp"], layer, grads, prefix)
        dx_mid, dscale, dshift = _layernorm_backward(dn2, cache["ln2"], layer.ln2_scale)
        grads[prefix + "ln2_scale"] += dscale
        grads[prefix + "ln2_shift"] += dshift
        dx_mid = dx_mid + dx
        dn1 = _attention_backward(dx_mid, cache["attn"], layer, grads, prefix)
        dz, dscale, dshift = _layernorm_backward(dn1, cache["ln1"], layer.ln1_scale)
        grads[prefix + "ln1_scale"] += dscale
        grads[prefix + "ln1_shift"] += dshift
        dx = dz + dx_mid

    grads["pos_embed"] += dx
    grads["cls_token"] += dx[0]
    dprojected = dx[1:]
    grads["patch_proj"] += trace.patches.T @ dprojected
    grads["patch_bias"] += dprojected.sum(axis=0)
    return grads


def extract_features(pixels: np.ndarray, params: ModelParams) -> np.ndarray:
    """Deterministic feature vector for one image: the gated summary state."""
    return forward(pixels, params).refined


def extract_feature_table(
    samples: list[ImageSample], params: ModelParams, provenance: str = "",
    threads: int = 1,
) -> FeatureTable:
    def run(sample: ImageSample) -> np.ndarray:
        return extract_features(sample.pixels, params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, samples))
    else:
        rows = [run(s) for s in samples]
    features = np.vstack(rows) if rows else np.empty((0, params.config.embed_dim))
    return FeatureTable(
        ids=[s.id for s in samples],
        features=features,
        labels=np.array([s.label for s in samples], dtype=np.int64),
        num_classes=params.config.num_classes,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    cfg = params.config
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(
        struct.pack(
            "<BIIIIIIIdB",
            _CKPT_VERSION,
            cfg.image_size[0], cfg.image_size[1],
            cfg.patch_size, cfg.channels, cfg.embed_dim,
            cfg.num_layers, cfg.num_heads,
            cfg.mlp_ratio,
            1 if cfg.final_norm else 0,
        )
    )
    buf.write(struct.pack("<I", cfg.num_classes))
    for _, arr in params.named_parameters():
        buf.write(np.asarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)

    def read(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise FormatError(f"{path}: truncated checkpoint")
        return chunk

    if read(4) != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    (version, img_h, img_w, patch, channels, dim, layers, heads, ratio,
     final_norm) = struct.unpack("<BIIIIIIIdB", read(42))
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (num_classes,) = struct.unpack("<I", read(4))
    cfg = ModelConfig(
        image_size=(img_h, img_w), patch_size=patch, channels=channels,
        embed_dim=dim, num_layers=layers, num_heads=heads, mlp_ratio=ratio,
        num_classes=num_classes, final_norm=bool(final_norm),
    )
    params = init_params(cfg, seed=0)
    for name, arr in params.named_parameters():
        data = np.frombuffer(read(8 * arr.size), dtype="<f8").reshape(arr.shape)
        params.set(name, data.copy())
    if buf.read(1):
        raise FormatError(f"{path}: trailing bytes after parameters")
    return params
