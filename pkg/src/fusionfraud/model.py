"""Model variants: parameters, forward pass with trace, analytic backward,
and checkpoint (de)serialization.

Eight variants share one head architecture (in_dim -> hidden -> hidden -> 1,
ReLU + dropout between dense layers, sigmoid output) and differ only in how
the two 768-dim input features are turned into the head input:

    video-only            head on z_v
    audio-only            head on z_a
    early-fusion-no-embed head on concat(video, audio), no embedding nets
    early-fusion          head on concat(z_v, z_a)
    late-fusion           two unimodal pipelines, probabilities averaged
    tf-unimodal-only      head on concat(z_v, z_a, 1)
    tf-bimodal-only       head on flattened z_v (x) z_a
    tf-complete           head on flattened [z_v;1] (x) [z_a;1]

z_v and z_a are the outputs of the per-modality embedding networks
(feature_dim -> embed_hidden -> video_out/audio_out, ReLU after each layer).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import numkit
from .binio import ByteReader, append_checksum, split_checksummed
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    UnsupportedVersionError,
)
from .numkit import Rng, RngLanes, dense_forward, relu, sigmoid, sigmoid_vec

CHECKPOINT_MAGIC = b"TFNM"
CHECKPOINT_VERSION = 1


class Variant(Enum):
    """Model variants in canonical report order; values double as the
    checkpoint tag byte."""

    VIDEO_ONLY = 0
    AUDIO_ONLY = 1
    EARLY_FUSION_NO_EMBED = 2
    EARLY_FUSION = 3
    LATE_FUSION = 4
    TF_UNIMODAL_ONLY = 5
    TF_BIMODAL_ONLY = 6
    TF_COMPLETE = 7

    @property
    def cli_name(self) -> str:
        return self.name.lower().replace("_", "-")

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]

    @property
    def uses_video_embed(self) -> bool:
        return self not in (Variant.AUDIO_ONLY, Variant.EARLY_FUSION_NO_EMBED)

    @property
    def uses_audio_embed(self) -> bool:
        return self not in (Variant.VIDEO_ONLY, Variant.EARLY_FUSION_NO_EMBED)

    @property
    def is_late_fusion(self) -> bool:
        return self is Variant.LATE_FUSION

    @classmethod
    def from_cli_name(cls, name: str) -> "Variant":
        for v in cls:
            if v.cli_name == name:
                return v
        valid = ", ".join(v.cli_name for v in cls)
        raise ConfigurationError(f"unknown variant {name!r}; valid names: {valid}")


_DISPLAY_NAMES = {
    Variant.VIDEO_ONLY: "Video Only",
    Variant.AUDIO_ONLY: "Audio Only",
    Variant.EARLY_FUSION_NO_EMBED: "Early Fusion (no embed)",
    Variant.EARLY_FUSION: "Early Fusion",
    Variant.LATE_FUSION: "Late Fusion",
    Variant.TF_UNIMODAL_ONLY: "TF Unimodal Only",
    Variant.TF_BIMODAL_ONLY: "TF Bimodal Only",
    Variant.TF_COMPLETE: "Tensor Fusion (complete)",
}

CANONICAL_ORDER = list(Variant)


@dataclass(frozen=True)
class ModelDims:
    """Architecture sizes; defaults are the full-size configuration."""

    feature_dim: int = 768
    embed_hidden: int = 128
    video_out: int = 64
    audio_out: int = 32
    head_hidden: int = 128
    dropout_p: float = 0.2

    def scaled(self, factor: int) -> "ModelDims":
        """Every width divided by ``factor`` (used by the gradient checker)."""
        return ModelDims(
            feature_dim=self.feature_dim // factor,
            embed_hidden=self.embed_hidden // factor,
            video_out=self.video_out // factor,
            audio_out=self.audio_out // factor,
            head_hidden=self.head_hidden // factor,
            dropout_p=self.dropout_p,
        )


def head_in_dim(variant: Variant, dims: ModelDims) -> int:
    dv, da = dims.video_out, dims.audio_out
    if variant is Variant.VIDEO_ONLY:
        return dv
    if variant is Variant.AUDIO_ONLY:
        return da
    if variant is Variant.EARLY_FUSION_NO_EMBED:
        return 2 * dims.feature_dim
    if variant is Variant.EARLY_FUSION:
        return dv + da
    if variant is Variant.TF_UNIMODAL_ONLY:
        return dv + da + 1
    if variant is Variant.TF_BIMODAL_ONLY:
        return dv * da
    if variant is Variant.TF_COMPLETE:
        return (dv + 1) * (da + 1)
    raise ConfigurationError(f"{variant} has two heads; use per-modality in_dims")


@dataclass
class EmbedNet:
    W1: np.ndarray  # (hidden, feature_dim)
    b1: np.ndarray
    W2: np.ndarray  # (out, hidden)
    b2: np.ndarray


@dataclass
class HeadNet:
    W1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray
    W2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray
    W3: np.ndarray  # (1, hidden)
    b3: np.ndarray


@dataclass
class ModelParams:
    """All learnable tensors for one variant.

    Treat as immutable once built or loaded: inference may share one
    instance across threads, and the optimizer mutates only its own
    private copy (one trainer per instance).
    """

    variant: Variant
    dims: ModelDims
    video_embed: EmbedNet | None = None
    audio_embed: EmbedNet | None = None
    head: HeadNet | None = None
    video_head: HeadNet | None = None  # late fusion only
    audio_head: HeadNet | None = None
    init_seed: int | None = None

    def named_tensors(self):
        """(name, array) pairs in the frozen serialization/optimizer order."""
        out = []
        if self.video_embed is not None:
            e = self.video_embed
            out += [("video_embed.W1", e.W1), ("video_embed.b1", e.b1),
                    ("video_embed.W2", e.W2), ("video_embed.b2", e.b2)]
        if self.audio_embed is not None:
            e = self.audio_embed
            out += [("audio_embed.W1", e.W1), ("audio_embed.b1", e.b1),
                    ("audio_embed.W2", e.W2), ("audio_embed.b2", e.b2)]
        for prefix, h in (("head", self.head), ("video_head", self.video_head),
                          ("audio_head", self.audio_head)):
            if h is not None:
                out += [(f"{prefix}.W1", h.W1), (f"{prefix}.b1", h.b1),
                        (f"{prefix}.W2", h.W2), (f"{prefix}.b2", h.b2),
                        (f"{prefix}.W3", h.W3), (f"{prefix}.b3", h.b3)]
        return out

    def copy(self) -> "ModelParams":
        def cp_embed(e):
            return None if e is None else EmbedNet(e.W1.copy(), e.b1.copy(), e.W2.copy(), e.b2.copy())

        def cp_head(h):
            return None if h is None else HeadNet(h.W1.copy(), h.b1.copy(), h.W2.copy(),
                                                  h.b2.copy(), h.W3.copy(), h.b3.copy())

        return ModelParams(self.variant, self.dims, cp_embed(self.video_embed),
                           cp_embed(self.audio_embed), cp_head(self.head),
                           cp_head(self.video_head), cp_head(self.audio_head), self.init_seed)

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        owner_name, attr = name.split(".")
        setattr(getattr(self, owner_name), attr, value)


def validate_params(params: ModelParams) -> None:
    """Presence and shape consistency per the variant table."""
    v, dims = params.variant, params.dims

    def need(cond, msg):
        if not cond:
            raise ConfigurationError(f"{v.cli_name}: {msg}")

    need((params.video_embed is not None) == v.uses_video_embed,
         "video embedding net presence does not match variant")
    need((params.audio_embed is not None) == v.uses_audio_embed,
         "audio embedding net presence does not match variant")
    if v.is_late_fusion:
        need(params.head is None and params.video_head is not None and params.audio_head is not None,
             "late fusion requires exactly two per-modality heads")
    else:
        need(params.head is not None and params.video_head is None and params.audio_head is None,
             "variant requires exactly one head")

    for name, emb, out in (("video", params.video_embed, dims.video_out),
                           ("audio", params.audio_embed, dims.audio_out)):
        if emb is None:
            continue
        need(emb.W1.shape == (dims.embed_hidden, dims.feature_dim), f"{name} embed W1 shape")
        need(emb.b1.shape == (dims.embed_hidden,), f"{name} embed b1 shape")
        need(emb.W2.shape == (out, dims.embed_hidden), f"{name} embed W2 shape")
        need(emb.b2.shape == (out,), f"{name} embed b2 shape")

    def check_head(h, in_dim, label):
        hh = dims.head_hidden
        need(h.W1.shape == (hh, in_dim), f"{label} W1 shape (expected {hh}x{in_dim}, got {h.W1.shape})")
        need(h.b1.shape == (hh,), f"{label} b1 shape")
        need(h.W2.shape == (hh, hh), f"{label} W2 shape")
        need(h.b2.shape == (hh,), f"{label} b2 shape")
        need(h.W3.shape == (1, hh), f"{label} W3 shape")
        need(h.b3.shape == (1,), f"{label} b3 shape")

    if v.is_late_fusion:
        check_head(params.video_head, dims.video_out, "video head")
        check_head(params.audio_head, dims.audio_out, "audio head")
    else:
        check_head(params.head, head_in_dim(v, dims), "head")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _he_normal(lanes: RngLanes, shape) -> np.ndarray:
    fan_in = shape[1]
    return lanes.normals(shape) * np.sqrt(2.0 / fan_in)


def _xavier_uniform(lanes: RngLanes, shape) -> np.ndarray:
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (lanes.uniforms(fan_out * fan_in).reshape(shape) * 2.0 - 1.0) * limit


def _init_embed(lanes: RngLanes, dims: ModelDims, out: int) -> EmbedNet:
    return EmbedNet(
        W1=_he_normal(lanes, (dims.embed_hidden, dims.feature_dim)),
        b1=np.zeros(dims.embed_hidden),
        W2=_he_normal(lanes, (out, dims.embed_hidden)),
        b2=np.zeros(out),
    )


def _init_head(lanes: RngLanes, dims: ModelDims, in_dim: int) -> HeadNet:
    hh = dims.head_hidden
    return HeadNet(
        W1=_he_normal(lanes, (hh, in_dim)),
        b1=np.zeros(hh),
        W2=_he_normal(lanes, (hh, hh)),
        b2=np.zeros(hh),
        W3=_xavier_uniform(lanes, (1, hh)),
        b3=np.zeros(1),
    )


def init_params(variant: Variant, seed: int, dims: ModelDims = ModelDims()) -> ModelParams:
    """He-normal weights for ReLU-fed layers, Xavier-uniform for the logit
    layer, zero biases. Draw order follows ``named_tensors``; deterministic
    in (variant, seed, dims)."""
    lanes = RngLanes(seed)
    params = ModelParams(variant=variant, dims=dims, init_seed=seed)
    if variant.uses_video_embed:
        params.video_embed = _init_embed(lanes, dims, dims.video_out)
    if variant.uses_audio_embed:
        params.audio_embed = _init_embed(lanes, dims, dims.audio_out)
    if variant.is_late_fusion:
        params.video_head = _init_head(lanes, dims, dims.video_out)
        params.audio_head = _init_head(lanes, dims, dims.audio_out)
    else:
        params.head = _init_head(lanes, dims, head_in_dim(variant, dims))
    validate_params(params)
    return params


# ---------------------------------------------------------------------------
# fusion tensor
# ---------------------------------------------------------------------------

@dataclass
class FusionTensor:
    """Outer product of the bias-extended embeddings.

    ``data`` has shape (len(z_v)+1, len(z_a)+1); the last row/column are the
    bias slots. Semantic regions are exposed as views:

      bimodal            data[:-1, :-1]  -- z_v ⊗ z_a products
      video_with_bias    data[:-1, -1]   -- copy of z_v
      audio_with_bias    data[-1, :-1]   -- copy of z_a
      bias_bias          data[-1, -1]    -- the constant 1
    """

    data: np.ndarray

    @property
    def bimodal(self) -> np.ndarray:
        return self.data[:-1, :-1]

    @property
    def video_with_bias(self) -> np.ndarray:
        return self.data[:-1, -1]

    @property
    def audio_with_bias(self) -> np.ndarray:
        return self.data[-1, :-1]

    @property
    def bias_bias(self) -> float:
        return float(self.data[-1, -1])

    def flattened(self) -> np.ndarray:
        """Row-major flattening; this order is frozen for checkpoints."""
        return self.data.reshape(-1)


def extend_with_bias(z: np.ndarray) -> np.ndarray:
    """Append the constant 1 as the last coordinate."""
    return np.concatenate([z, [1.0]])


def tensor_fuse(z_v: np.ndarray, z_a: np.ndarray) -> FusionTensor:
    """All multiplicative interactions of the bias-extended embeddings."""
    return FusionTensor(np.outer(extend_with_bias(z_v), extend_with_bias(z_a)))


# ---------------------------------------------------------------------------
# per-record forward / backward
# ---------------------------------------------------------------------------

@dataclass
class EmbedTrace:
    x: np.ndarray
    a1: np.ndarray   # post-ReLU hidden activation
    m1: np.ndarray   # hidden ReLU mask
    z: np.ndarray    # post-ReLU embedding
    mz: np.ndarray   # output ReLU mask


@dataclass
class HeadTrace:
    u: np.ndarray        # head input
    m1: np.ndarray       # first ReLU mask
    drop1: np.ndarray    # first dropout multiplier mask
    d1: np.ndarray       # activation after first dropout
    m2: np.ndarray
    drop2: np.ndarray
    d2: np.ndarray
    logit: float
    p: float


@dataclass
class ForwardTrace:
    """Everything backward needs; single-use, owned by one caller."""

    variant: Variant
    train_mode: bool
    video_x: np.ndarray
    audio_x: np.ndarray
    video_embed: EmbedTrace | None = None
    audio_embed: EmbedTrace | None = None
    head: HeadTrace | None = None
    video_head: HeadTrace | None = None
    audio_head: HeadTrace | None = None
    p: float = 0.0


def embed_forward(net: EmbedNet, x: np.ndarray) -> np.ndarray:
    """Two dense layers with ReLU after each."""
    if x.shape[0] != net.W1.shape[1]:
        raise DimensionError(f"embedding input has length {x.shape[0]}, expected {net.W1.shape[1]}")
    a1, _ = relu(dense_forward(net.W1, net.b1, x))
    z, _ = relu(dense_forward(net.W2, net.b2, a1))
    return z


def _embed_forward_traced(net: EmbedNet, x: np.ndarray) -> EmbedTrace:
    if x.shape[0] != net.W1.shape[1]:
        raise DimensionError(f"embedding input has length {x.shape[0]}, expected {net.W1.shape[1]}")
    a1, m1 = relu(dense_forward(net.W1, net.b1, x))
    z, mz = relu(dense_forward(net.W2, net.b2, a1))
    return EmbedTrace(x=x, a1=a1, m1=m1, z=z, mz=mz)


def _head_forward_traced(head: HeadNet, u: np.ndarray, dropout_p: float,
                         train_mode: bool, rng: Rng | None,
                         replay_masks: tuple[np.ndarray, np.ndarray] | None = None) -> HeadTrace:
    h1, m1 = relu(dense_forward(head.W1, head.b1, u))
    if replay_masks is not None:
        drop1 = replay_masks[0]
    elif train_mode and dropout_p > 0.0:
        _, drop1 = numkit.dropout(h1, dropout_p, True, rng)
    else:
        drop1 = np.ones_like(h1)
    d1 = h1 * drop1
    h2, m2 = relu(dense_forward(head.W2, head.b2, d1))
    if replay_masks is not None:
        drop2 = replay_masks[1]
    elif train_mode and dropout_p > 0.0:
        _, drop2 = numkit.dropout(h2, dropout_p, True, rng)
    else:
        drop2 = np.ones_like(h2)
    d2 = h2 * drop2
    logit = float(dense_forward(head.W3, head.b3, d2)[0])
    return HeadTrace(u=u, m1=m1, drop1=drop1, d1=d1, m2=m2, drop2=drop2, d2=d2,
                     logit=logit, p=sigmoid(logit))


def _head_input(params: ModelParams, trace: ForwardTrace) -> np.ndarray:
    v = params.variant
    if v is Variant.VIDEO_ONLY:
        return trace.video_embed.z
    if v is Variant.AUDIO_ONLY:
        return trace.audio_embed.z
    if v is Variant.EARLY_FUSION_NO_EMBED:
        return np.concatenate([trace.video_x, trace.audio_x])
    if v is Variant.EARLY_FUSION:
        return np.concatenate([trace.video_embed.z, trace.audio_embed.z])
    if v is Variant.TF_UNIMODAL_ONLY:
        return np.concatenate([trace.video_embed.z, trace.audio_embed.z, [1.0]])
    if v is Variant.TF_BIMODAL_ONLY:
        return np.outer(trace.video_embed.z, trace.audio_embed.z).reshape(-1)
    if v is Variant.TF_COMPLETE:
        return tensor_fuse(trace.video_embed.z, trace.audio_embed.z).flattened()
    raise ConfigurationError(f"{v} does not use a single head input")


def model_forward(params: ModelParams, video: np.ndarray, audio: np.ndarray,
                  train_mode: bool = False, rng: Rng | None = None):
    """Forward pass for one record; returns (probability, ForwardTrace).

    With ``train_mode`` off the result is a pure function of (params,
    features). In train mode ``rng`` drives the head dropout masks.
    """
    validate_params(params)
    f = params.dims.feature_dim
    if video.shape != (f,) or audio.shape != (f,):
        raise DimensionError(
            f"expected feature vectors of length {f}, got video {video.shape} audio {audio.shape}")
    if train_mode and params.dims.dropout_p > 0.0 and rng is None:
        raise ConfigurationError("train-mode forward with dropout needs an rng")

    trace = ForwardTrace(variant=params.variant, train_mode=train_mode,
                         video_x=video, audio_x=audio)
    if params.variant.uses_video_embed:
        trace.video_embed = _embed_forward_traced(params.video_embed, video)
    if params.variant.uses_audio_embed:
        trace.audio_embed = _embed_forward_traced(params.audio_embed, audio)

    p_drop = params.dims.dropout_p
    if params.variant.is_late_fusion:
        trace.video_head = _head_forward_traced(params.video_head, trace.video_embed.z,
                                                p_drop, train_mode, rng)
        trace.audio_head = _head_forward_traced(params.audio_head, trace.audio_embed.z,
                                                p_drop, train_mode, rng)
        trace.p = 0.5 * (trace.video_head.p + trace.audio_head.p)
    else:
        trace.head = _head_forward_traced(params.head, _head_input(params, trace),
                                          p_drop, train_mode, rng)
        trace.p = trace.head.p
    return trace.p, trace


def replay_forward(params: ModelParams, trace: ForwardTrace) -> float:
    """Recompute the forward pass from the trace's inputs, reusing its
    dropout masks; must reproduce the recorded probability exactly."""
    t2 = ForwardTrace(variant=params.variant, train_mode=trace.train_mode,
                      video_x=trace.video_x, audio_x=trace.audio_x)
    if params.variant.uses_video_embed:
        t2.video_embed = _embed_forward_traced(params.video_embed, trace.video_x)
    if params.variant.uses_audio_embed:
        t2.audio_embed = _embed_forward_traced(params.audio_embed, trace.audio_x)
    p_drop = params.dims.dropout_p
    if params.variant.is_late_fusion:
        hv = _head_forward_traced(params.video_head, t2.video_embed.z, p_drop, False, None,
                                  replay_masks=(trace.video_head.drop1, trace.video_head.drop2))
        ha = _head_forward_traced(params.audio_head, t2.audio_embed.z, p_drop, False, None,
                                  replay_masks=(trace.audio_head.drop1, trace.audio_head.drop2))
        return 0.5 * (hv.p + ha.p)
    h = _head_forward_traced(params.head, _head_input(params, t2), p_drop, False, None,
                             replay_masks=(trace.head.drop1, trace.head.drop2))
    return h.p


def _head_backward(head: HeadNet, ht: HeadTrace, dlogit: float, grads: dict, prefix: str) -> np.ndarray:
    """Backward through one head; returns gradient w.r.t. the head input."""
    dl = np.array([dlogit])
    grads[f"{prefix}.W3"] = np.outer(dl, ht.d2)
    grads[f"{prefix}.b3"] = dl.copy()
    dd2 = head.W3.T @ dl
    dz2 = (dd2 * ht.drop2) * ht.m2
    grads[f"{prefix}.W2"] = np.outer(dz2, ht.d1)
    grads[f"{prefix}.b2"] = dz2.copy()
    dd1 = head.W2.T @ dz2
    dz1 = (dd1 * ht.drop1) * ht.m1
    grads[f"{prefix}.W1"] = np.outer(dz1, ht.u)
    grads[f"{prefix}.b1"] = dz1.copy()
    return head.W1.T @ dz1


def _embed_backward(net: EmbedNet, et: EmbedTrace, dz: np.ndarray, grads: dict, prefix: str) -> None:
    dz2 = dz * et.mz
    grads[f"{prefix}.W2"] = np.outer(dz2, et.a1)
    grads[f"{prefix}.b2"] = dz2.copy()
    da1 = net.W2.T @ dz2
    dz1 = da1 * et.m1
    grads[f"{prefix}.W1"] = np.outer(dz1, et.x)
    grads[f"{prefix}.b1"] = dz1.copy()


def fusion_backward(grad_tensor: np.ndarray, ext_v: np.ndarray, ext_a: np.ndarray):
    """Gradient of the fusion tensor w.r.t. the extended embeddings.

    d/d ext_v[i] = sum_j g[i][j] * ext_a[j];  d/d ext_a[j] = sum_i g[i][j] * ext_v[i].
    """
    return grad_tensor @ ext_a, grad_tensor.T @ ext_v


def model_backward(params: ModelParams, trace: ForwardTrace, y: int) -> dict[str, np.ndarray]:
    """Gradients of the binary cross-entropy w.r.t. every parameter."""
    if trace.variant is not params.variant:
        raise ConfigurationError(
            f"trace was produced by {trace.variant.cli_name}, params are {params.variant.cli_name}")
    grads: dict[str, np.ndarray] = {}

    if params.variant.is_late_fusion:
        p = trace.p
        pc = min(max(p, numkit.BCE_EPS), 1.0 - numkit.BCE_EPS)
        dp = (pc - y) / (pc * (1.0 - pc))  # clamp treated as identity
        dz_v = _head_backward(params.video_head, trace.video_head,
                              dp * 0.5 * trace.video_head.p * (1.0 - trace.video_head.p),
                              grads, "video_head")
        dz_a = _head_backward(params.audio_head, trace.audio_head,
                              dp * 0.5 * trace.audio_head.p * (1.0 - trace.audio_head.p),
                              grads, "audio_head")
        _embed_backward(params.video_embed, trace.video_embed, dz_v, grads, "video_embed")
        _embed_backward(params.audio_embed, trace.audio_embed, dz_a, grads, "audio_embed")
        return _reorder(grads, params)

    dlogit = trace.p - y  # exact gradient of BCE(sigmoid(s)) w.r.t. s
    du = _head_backward(params.head, trace.head, dlogit, grads, "head")

    v = params.variant
    dv, da = params.dims.video_out, params.dims.audio_out
    if v is Variant.VIDEO_ONLY:
        _embed_backward(params.video_embed, trace.video_embed, du, grads, "video_embed")
    elif v is Variant.AUDIO_ONLY:
        _embed_backward(params.audio_embed, trace.audio_embed, du, grads, "audio_embed")
    elif v is Variant.EARLY_FUSION_NO_EMBED:
        pass  # no trainable layers below the head
    elif v is Variant.EARLY_FUSION:
        _embed_backward(params.video_embed, trace.video_embed, du[:dv], grads, "video_embed")
        _embed_backward(params.audio_embed, trace.audio_embed, du[dv:], grads, "audio_embed")
    elif v is Variant.TF_UNIMODAL_ONLY:
        _embed_backward(params.video_embed, trace.video_embed, du[:dv], grads, "video_embed")
        _embed_backward(params.audio_embed, trace.audio_embed, du[dv:dv + da], grads, "audio_embed")
    elif v is Variant.TF_BIMODAL_ONLY:
        g = du.reshape(dv, da)
        dz_v = g @ trace.audio_embed.z
        dz_a = g.T @ trace.video_embed.z
        _embed_backward(params.video_embed, trace.video_embed, dz_v, grads, "video_embed")
        _embed_backward(params.audio_embed, trace.audio_embed, dz_a, grads, "audio_embed")
    elif v is Variant.TF_COMPLETE:
        g = du.reshape(dv + 1, da + 1)
        ext_v = extend_with_bias(trace.video_embed.z)
        ext_a = extend_with_bias(trace.audio_embed.z)
        d_ext_v, d_ext_a = fusion_backward(g, ext_v, ext_a)
        _embed_backward(params.video_embed, trace.video_embed, d_ext_v[:dv], grads, "video_embed")
        _embed_backward(params.audio_embed, trace.audio_embed, d_ext_a[:da], grads, "audio_embed")
    return _reorder(grads, params)


def _reorder(grads: dict, params: ModelParams) -> dict[str, np.ndarray]:
    return {name: grads[name] for name, _ in params.named_tensors()}


# ---------------------------------------------------------------------------
# batched forward / backward (training hot path)
# ---------------------------------------------------------------------------

def _embed_forward_batch(net: EmbedNet, X: np.ndarray) -> dict:
    A1p = X @ net.W1.T + net.b1
    M1 = (A1p > 0).astype(np.float64)
    A1 = A1p * M1
    Zp = A1 @ net.W2.T + net.b2
    MZ = (Zp > 0).astype(np.float64)
    return {"X": X, "A1": A1, "M1": M1, "Z": Zp * MZ, "MZ": MZ}


def _head_forward_batch(head: HeadNet, U: np.ndarray, dropout_p: float,
                        train_mode: bool, lanes: RngLanes | None) -> dict:
    H1p = U @ head.W1.T + head.b1
    M1 = (H1p > 0).astype(np.float64)
    H1 = H1p * M1
    if train_mode and dropout_p > 0.0:
        D1m = numkit.dropout_mask_bulk(H1.shape, dropout_p, lanes)
    else:
        D1m = np.ones_like(H1)
    D1 = H1 * D1m
    H2p = D1 @ head.W2.T + head.b2
    M2 = (H2p > 0).astype(np.float64)
    H2 = H2p * M2
    if train_mode and dropout_p > 0.0:
        D2m = numkit.dropout_mask_bulk(H2.shape, dropout_p, lanes)
    else:
        D2m = np.ones_like(H2)
    D2 = H2 * D2m
    logits = D2 @ head.W3.T + head.b3  # (n, 1)
    p = sigmoid_vec(logits[:, 0])
    return {"U": U, "M1": M1, "D1m": D1m, "D1": D1, "M2": M2, "D2m": D2m, "D2": D2, "p": p}


def batch_forward(params: ModelParams, V: np.ndarray, A: np.ndarray,
                  train_mode: bool = False, lanes: RngLanes | None = None):
    """Vectorized forward over a batch of records; rows are samples.

    Returns (probabilities, cache). Agrees with per-record
    :func:`model_forward` up to floating-point reduction order.
    """
    n = V.shape[0]
    f = params.dims.feature_dim
    if V.shape != (n, f) or A.shape != (n, f):
        raise DimensionError(f"expected (n, {f}) feature matrices, got {V.shape} and {A.shape}")
    cache: dict = {"variant": params.variant, "n": n, "V": V, "A": A}
    v = params.variant
    p_drop = params.dims.dropout_p
    if v.uses_video_embed:
        cache["ve"] = _embed_forward_batch(params.video_embed, V)
    if v.uses_audio_embed:
        cache["ae"] = _embed_forward_batch(params.audio_embed, A)

    if v.is_late_fusion:
        cache["vh"] = _head_forward_batch(params.video_head, cache["ve"]["Z"], p_drop, train_mode, lanes)
        cache["ah"] = _head_forward_batch(params.audio_head, cache["ae"]["Z"], p_drop, train_mode, lanes)
        p = 0.5 * (cache["vh"]["p"] + cache["ah"]["p"])
        cache["p"] = p
        return p, cache

    if v is Variant.VIDEO_ONLY:
        U = cache["ve"]["Z"]
    elif v is Variant.AUDIO_ONLY:
        U = cache["ae"]["Z"]
    elif v is Variant.EARLY_FUSION_NO_EMBED:
        U = np.concatenate([V, A], axis=1)
    elif v is Variant.EARLY_FUSION:
        U = np.concatenate([cache["ve"]["Z"], cache["ae"]["Z"]], axis=1)
    elif v is Variant.TF_UNIMODAL_ONLY:
        U = np.concatenate([cache["ve"]["Z"], cache["ae"]["Z"], np.ones((n, 1))], axis=1)
    elif v is Variant.TF_BIMODAL_ONLY:
        U = (cache["ve"]["Z"][:, :, None] * cache["ae"]["Z"][:, None, :]).reshape(n, -1)
    else:  # TF_COMPLETE
        EV = np.concatenate([cache["ve"]["Z"], np.ones((n, 1))], axis=1)
        EA = np.concatenate([cache["ae"]["Z"], np.ones((n, 1))], axis=1)
        cache["EV"], cache["EA"] = EV, EA
        U = (EV[:, :, None] * EA[:, None, :]).reshape(n, -1)
    cache["h"] = _head_forward_batch(params.head, U, p_drop, train_mode, lanes)
    cache["p"] = cache["h"]["p"]
    return cache["p"], cache


def _head_backward_batch(head: HeadNet, hc: dict, dlogit: np.ndarray, grads: dict, prefix: str):
    grads[f"{prefix}.W3"] = dlogit[None, :] @ hc["D2"]
    grads[f"{prefix}.b3"] = np.array([dlogit.sum()])
    dD2 = dlogit[:, None] * head.W3
    dZ2 = (dD2 * hc["D2m"]) * hc["M2"]
    grads[f"{prefix}.W2"] = dZ2.T @ hc["D1"]
    grads[f"{prefix}.b2"] = dZ2.sum(axis=0)
    dD1 = dZ2 @ head.W2
    dZ1 = (dD1 * hc["D1m"]) * hc["M1"]
    grads[f"{prefix}.W1"] = dZ1.T @ hc["U"]
    grads[f"{prefix}.b1"] = dZ1.sum(axis=0)
    return dZ1 @ head.W1


def _embed_backward_batch(net: EmbedNet, ec: dict, dZ: np.ndarray, grads: dict, prefix: str):
    dZ2 = dZ * ec["MZ"]
    grads[f"{prefix}.W2"] = dZ2.T @ ec["A1"]
    grads[f"{prefix}.b2"] = dZ2.sum(axis=0)
    dA1 = dZ2 @ net.W2
    dZ1 = dA1 * ec["M1"]
    grads[f"{prefix}.W1"] = dZ1.T @ ec["X"]
    grads[f"{prefix}.b1"] = dZ1.sum(axis=0)


def batch_backward(params: ModelParams, cache: dict, y: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the mean BCE over the batch."""
    if cache["variant"] is not params.variant:
        raise ConfigurationError("cache does not belong to these params")
    n = cache["n"]
    grads: dict[str, np.ndarray] = {}
    v = params.variant

    if v.is_late_fusion:
        pc = np.clip(cache["p"], numkit.BCE_EPS, 1.0 - numkit.BCE_EPS)
        dp = (pc - y) / (pc * (1.0 - pc)) / n
        pv, pa = cache["vh"]["p"], cache["ah"]["p"]
        dZv = _head_backward_batch(params.video_head, cache["vh"], dp * 0.5 * pv * (1.0 - pv),
                                   grads, "video_head")
        dZa = _head_backward_batch(params.audio_head, cache["ah"], dp * 0.5 * pa * (1.0 - pa),
                                   grads, "audio_head")
        _embed_backward_batch(params.video_embed, cache["ve"], dZv, grads, "video_embed")
        _embed_backward_batch(params.audio_embed, cache["ae"], dZa, grads, "audio_embed")
        return _reorder(grads, params)

    dlogit = (cache["p"] - y) / n
    dU = _head_backward_batch(params.head, cache["h"], dlogit, grads, "head")
    dv, da = params.dims.video_out, params.dims.audio_out

    if v is Variant.VIDEO_ONLY:
        _embed_backward_batch(params.video_embed, cache["ve"], dU, grads, "video_embed")
    elif v is Variant.AUDIO_ONLY:
        _embed_backward_batch(params.audio_embed, cache["ae"], dU, grads, "audio_embed")
    elif v is Variant.EARLY_FUSION_NO_EMBED:
        pass
    elif v is Variant.EARLY_FUSION:
        _embed_backward_batch(params.video_embed, cache["ve"], dU[:, :dv], grads, "video_embed")
        _embed_backward_batch(params.audio_embed, cache["ae"], dU[:, dv:], grads, "audio_embed")
    elif v is Variant.TF_UNIMODAL_ONLY:
        _embed_backward_batch(params.video_embed, cache["ve"], dU[:, :dv], grads, "video_embed")
        _embed_backward_batch(params.audio_embed, cache["ae"], dU[:, dv:dv + da], grads, "audio_embed")
    elif v is Variant.TF_BIMODAL_ONLY:
        G = dU.reshape(-1, dv, da)
        dZv = np.einsum("nij,nj->ni", G, cache["ae"]["Z"])
        dZa = np.einsum("nij,ni->nj", G, cache["ve"]["Z"])
        _embed_backward_batch(params.video_embed, cache["ve"], dZv, grads, "video_embed")
        _embed_backward_batch(params.audio_embed, cache["ae"], dZa, grads, "audio_embed")
    else:  # TF_COMPLETE
        G = dU.reshape(-1, dv + 1, da + 1)
        dEV = np.einsum("nij,nj->ni", G, cache["EA"])
        dEA = np.einsum("nij,ni->nj", G, cache["EV"])
        _embed_backward_batch(params.video_embed, cache["ve"], dEV[:, :dv], grads, "video_embed")
        _embed_backward_batch(params.audio_embed, cache["ae"], dEA[:, :da], grads, "audio_embed")
    return _reorder(grads, params)


# ---------------------------------------------------------------------------
# flattening helpers (optimizer-free gradient checking)
# ---------------------------------------------------------------------------

def flatten_tensors(named) -> np.ndarray:
    return np.concatenate([t.reshape(-1) for _, t in named]) if named else np.zeros(0)


def unflatten_into(params: ModelParams, theta: np.ndarray) -> ModelParams:
    """New ModelParams with tensor values taken from the flat vector."""
    out = params.copy()
    pos = 0
    for name, t in out.named_tensors():
        size = t.size
        out.set_tensor(name, theta[pos:pos + size].reshape(t.shape).copy())
        pos += size
    if pos != theta.shape[0]:
        raise DimensionError(f"flat vector has {theta.shape[0]} entries, model needs {pos}")
    return out


def loss_and_grad(params: ModelParams, videos, audios, labels):
    """Mean BCE and its flat gradient over a list of records, via the
    per-record contract path with dropout off."""
    total = 0.0
    acc: dict[str, np.ndarray] | None = None
    n = len(labels)
    for video, audio, y in zip(videos, audios, labels):
        p, trace = model_forward(params, video, audio, train_mode=False)
        total += numkit.bce_loss(p, y)
        g = model_backward(params, trace, y)
        if acc is None:
            acc = {k: v.copy() for k, v in g.items()}
        else:
            for k in acc:
                acc[k] += g[k]
    flat = np.concatenate([(acc[name] / n).reshape(-1) for name, _ in params.named_tensors()])
    return total / n, flat


def gradient_check_variant(variant: Variant, seed: int = 7, scale: int = 8,
                           n_records: int = 3, h: float = 1e-5,
                           corrupt: bool = False) -> float:
    """Finite-difference check of the full analytic backward pass on a
    down-scaled architecture with dropout disabled; returns max relative
    error. ``corrupt`` deliberately perturbs one gradient entry (test hook).
    """
    dims = ModelDims().scaled(scale)
    dims = replace(dims, dropout_p=0.0)
    params = init_params(variant, seed, dims)
    lanes = RngLanes(numkit.child_seed(seed, 1))
    videos = [lanes.normals(dims.feature_dim) for _ in range(n_records)]
    audios = [lanes.normals(dims.feature_dim) for _ in range(n_records)]
    labels = [i % 2 for i in range(n_records)]
    base = flatten_tensors(params.named_tensors())

    def f(theta):
        value, grad = loss_and_grad(unflatten_into(params, theta), videos, audios, labels)
        if corrupt:
            grad = grad.copy()
            grad[0] += 0.5
        return value, grad

    return numkit.grad_check(f, base, h=h)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def save_params(params: ModelParams, path) -> None:
    """TFNM checkpoint: magic, version byte, variant tag byte, per-tensor
    blocks (u32 rank, u32 per dim, f64 LE row-major) in ``named_tensors``
    order, and a trailing FNV-1a checksum."""
    validate_params(params)
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf.append(CHECKPOINT_VERSION)
    buf.append(params.variant.value)
    for _, tensor in params.named_tensors():
        buf += struct.pack("<I", tensor.ndim)
        for d in tensor.shape:
            buf += struct.pack("<I", d)
        buf += np.ascontiguousarray(tensor, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(append_checksum(buf))


def _expected_blocks(variant: Variant):
    """(name, rank) pairs in serialization order for a variant."""
    names = []
    if variant.uses_video_embed:
        names += ["video_embed.W1", "video_embed.b1", "video_embed.W2", "video_embed.b2"]
    if variant.uses_audio_embed:
        names += ["audio_embed.W1", "audio_embed.b1", "audio_embed.W2", "audio_embed.b2"]
    heads = ["video_head", "audio_head"] if variant.is_late_fusion else ["head"]
    for h in heads:
        names += [f"{h}.W1", f"{h}.b1", f"{h}.W2", f"{h}.b2", f"{h}.W3", f"{h}.b3"]
    return [(n, 2 if n.split(".")[1].startswith("W") else 1) for n in names]


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    payload = split_checksummed(blob, "checkpoint")
    rd = ByteReader(payload, "checkpoint")
    magic = rd.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"checkpoint: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = rd.u8("version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint: unsupported version {version}")
    tag = rd.u8("variant tag")
    try:
        variant = Variant(tag)
    except ValueError:
        raise FormatError(f"checkpoint: unknown variant tag {tag}") from None

    tensors: dict[str, np.ndarray] = {}
    for name, want_rank in _expected_blocks(variant):
        rank = rd.u32(f"{name} rank")
        if rank != want_rank:
            raise FormatError(f"checkpoint: {name} has rank {rank}, expected {want_rank}")
        shape = tuple(rd.u32(f"{name} dim {i}") for i in range(rank))
        if any(d == 0 for d in shape):
            raise FormatError(f"checkpoint: {name} has a zero dimension {shape}")
        count = int(np.prod(shape))
        tensors[name] = rd.f64_array(count, f"{name} data").reshape(shape)
    rd.expect_end()

    dims = _derive_dims(variant, tensors)
    params = ModelParams(variant=variant, dims=dims)
    if variant.uses_video_embed:
        params.video_embed = EmbedNet(*(tensors[f"video_embed.{k}"] for k in ("W1", "b1", "W2", "b2")))
    if variant.uses_audio_embed:
        params.audio_embed = EmbedNet(*(tensors[f"audio_embed.{k}"] for k in ("W1", "b1", "W2", "b2")))
    for attr in ("head", "video_head", "audio_head"):
        if f"{attr}.W1" in tensors:
            setattr(params, attr,
                    HeadNet(*(tensors[f"{attr}.{k}"] for k in ("W1", "b1", "W2", "b2", "W3", "b3"))))
    try:
        validate_params(params)
    except ConfigurationError as exc:
        raise FormatError(f"checkpoint: inconsistent tensor shapes ({exc})") from None
    return params


def _derive_dims(variant: Variant, tensors: dict) -> ModelDims:
    """Reconstruct architecture sizes from tensor shapes. The checkpoint
    format does not carry dims, the dropout probability, or the init seed;
    dropout_p falls back to the default and only matters if training resumes."""
    default = ModelDims()
    if variant.uses_video_embed or variant.uses_audio_embed:
        emb = tensors.get("video_embed.W1", tensors.get("audio_embed.W1"))
        feature_dim = emb.shape[1]
        embed_hidden = emb.shape[0]
    else:
        feature_dim = tensors["head.W1"].shape[1] // 2
        embed_hidden = default.embed_hidden
    video_out = tensors["video_embed.W2"].shape[0] if variant.uses_video_embed else default.video_out
    audio_out = tensors["audio_embed.W2"].shape[0] if variant.uses_audio_embed else default.audio_out
    head_key = "video_head.W1" if variant.is_late_fusion else "head.W1"
    return ModelDims(feature_dim=feature_dim, embed_hidden=embed_hidden,
                     video_out=video_out, audio_out=audio_out,
                     head_hidden=tensors[head_key].shape[0], dropout_p=default.dropout_p)
