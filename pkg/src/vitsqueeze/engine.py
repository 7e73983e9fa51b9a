"""Toy Vision Transformer with per-layer dynamic / static attention and GLAD.

Block ``l`` computes, in order::

    x  <- GLAD_l(x)                     if phi_l (and it actually reduces tokens)
    xh <- x + Attn_l(LN(x))             Attn is dynamic SA, or static when gamma_l
    x  <- xh + MLP(LN(xh))

Weights live in a flat ``dict[str, ndarray]`` so they map one-to-one onto the
tensor container.  Everything is float64 and batched over a leading axis;
:func:`loss_and_grad` returns exact gradients for every trainable entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .attention import AttentionHead
from .errors import ConfigError, ShapeError
from .glad import (GladLayer, glad_backward, glad_forward, make_glad_layer, make_teacher_glad,
                   token_distill_loss, update_running_stats)

LN_EPS = 1e-6
MLP_RATIO = 4
BUFFER_SUFFIXES = (".rmean", ".rvar")


@dataclass(frozen=True)
class VitSpec:
    layers: int = 8
    embed_dim: int = 64
    heads: int = 4
    base_tokens: int = 17
    num_classes: int = 4
    mlp_ratio: int = MLP_RATIO

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"a ViT needs at least one layer, got {self.layers}")
        if self.base_tokens < 2:
            raise ConfigError(f"base_tokens counts the cls token and must be >= 2, got {self.base_tokens}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.mlp_ratio != MLP_RATIO:
            raise ConfigError(f"mlp_ratio is fixed at {MLP_RATIO}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_tokens(self) -> int:
        return self.base_tokens - 1

    def to_dict(self) -> dict:
        return {"layers": self.layers, "embed_dim": self.embed_dim, "heads": self.heads,
                "base_tokens": self.base_tokens, "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "VitSpec":
        return cls(**{k: int(v) for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def parse(cls, text: str) -> "VitSpec":
        """Parse ``l=8,d=64,h=4,n=17[,c=4]``."""
        keys = {"l": "layers", "d": "embed_dim", "h": "heads", "n": "base_tokens", "c": "num_classes"}
        fields = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, value = part.partition("=")
            if key not in keys or not value:
                raise ConfigError(f"bad spec component {part!r}; expected keys {sorted(keys)}")
            try:
                fields[keys[key]] = int(value)
            except ValueError:
                raise ConfigError(f"spec value for {key!r} must be an integer, got {value!r}") from None
        return cls(**fields)


@dataclass(frozen=True)
class ArchitectureConfig:
    gamma: tuple
    phi: tuple
    m: tuple
    p: int
    q: int
    eta: float = 1.0
    glad_norm: str = "layer"

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(bool(g) for g in self.gamma))
        object.__setattr__(self, "phi", tuple(bool(f) for f in self.phi))
        object.__setattr__(self, "m", tuple(int(v) for v in self.m))

    @property
    def layers(self) -> int:
        return len(self.gamma)

    @classmethod
    def baseline(cls, spec: VitSpec) -> "ArchitectureConfig":
        L = spec.layers
        return cls((False,) * L, (False,) * L, (spec.base_tokens,) * L, 0, 0, 1.0)

    @classmethod
    def from_firings(cls, spec: VitSpec, p: int, firings: dict, eta: float = 1.0,
                     glad_norm: str = "layer") -> "ArchitectureConfig":
        """Build a config from ``P`` and ``{layer: tokens_after_glad}``."""
        L = spec.layers
        gamma = [1 <= l <= p for l in range(L)]
        phi = [l in firings for l in range(L)]
        m, cur = [], spec.base_tokens
        for l in range(L):
            cur = int(firings.get(l, cur))
            m.append(cur)
        cfg = cls(tuple(gamma), tuple(phi), tuple(m), p, len(firings), eta, glad_norm)
        cfg.validate(spec)
        return cfg

    def tokens_in(self, l: int, spec: VitSpec) -> int:
        """Token count entering block ``l`` (before its GLAD)."""
        return spec.base_tokens if l == 0 else self.m[l - 1]

    def reduces(self, l: int, spec: VitSpec) -> bool:
        """True where GLAD fires and actually shrinks the sequence."""
        return self.phi[l] and self.m[l] < self.tokens_in(l, spec)

    def validate(self, spec: VitSpec) -> "ArchitectureConfig":
        L, n0 = spec.layers, spec.base_tokens
        if not (len(self.gamma) == len(self.phi) == len(self.m) == L):
            raise ConfigError(f"gamma/phi/m must all have {L} entries")
        if not 0 <= self.p <= L - 1:
            raise ConfigError(f"P must lie in [0, {L - 1}], got {self.p}")
        if self.gamma[0]:
            raise ConfigError("layer 0 must keep dynamic attention")
        expected = tuple(1 <= l <= self.p for l in range(L))
        if self.gamma != expected:
            raise ConfigError(f"static layers must be exactly 1..{self.p}")
        for l in range(L):
            if self.gamma[l] and self.phi[l]:
                raise ConfigError(f"layer {l} cannot be both static and aggregating")
            if self.phi[l] and l <= self.p:
                raise ConfigError(f"GLAD may only fire after layer {self.p}, found at {l}")
        if sum(self.phi) != self.q:
            raise ConfigError(f"config declares Q={self.q} but has {sum(self.phi)} GLAD layers")
        prev = n0
        for l in range(L):
            ml = self.m[l]
            if not 1 <= ml <= prev:
                raise ConfigError(f"m[{l}]={ml} must lie in [1, {prev}]")
            if not self.phi[l] and ml != prev:
                raise ConfigError(f"token count changes at layer {l} without a GLAD firing")
            prev = ml
        if self.glad_norm not in ("layer", "batch"):
            raise ConfigError(f"glad_norm must be 'layer' or 'batch', got {self.glad_norm!r}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        return self

    def to_dict(self) -> dict:
        return {"gamma": [int(g) for g in self.gamma], "phi": [int(f) for f in self.phi],
                "m": list(self.m), "p": self.p, "q": self.q, "eta": self.eta,
                "glad_norm": self.glad_norm}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        try:
            return cls(tuple(d["gamma"]), tuple(d["phi"]), tuple(d["m"]), int(d["p"]), int(d["q"]),
                       float(d.get("eta", 1.0)), d.get("glad_norm", "layer"))
        except KeyError as exc:
            raise ConfigError(f"architecture config is missing field {exc}") from None


@dataclass
class BlockState:
    """Tokens entering block ``layer_index`` (``(N, d)`` or a ``(B, N, d)`` stack)."""

    x: np.ndarray
    layer_index: int


@dataclass
class Teacher:
    """Frozen uncompressed model supplying distillation targets."""

    spec: VitSpec
    weights: dict


@dataclass
class ForwardTrace:
    logits: np.ndarray
    layer_inputs: list = field(default_factory=list)
    glad_outputs: dict = field(default_factory=dict)
    attention: dict = field(default_factory=dict)
    attention_inputs: dict = field(default_factory=dict)


# -- weights -----------------------------------------------------------------

def init_weights(spec: VitSpec, rng: np.random.Generator) -> dict:
    """Random weights for the uncompressed (all-dynamic) model."""
    d, n0, c = spec.embed_dim, spec.base_tokens, spec.num_classes
    hid = spec.mlp_ratio * d
    w = {"embed.cls": rng.normal(0.0, 0.1, size=(1, d)),
         "embed.pos": rng.normal(0.0, 0.1, size=(n0, d))}
    for l in range(spec.layers):
        pre = f"blocks.{l}."
        w[pre + "ln1.g"] = np.ones(d)
        w[pre + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            w[pre + "attn." + name] = rng.normal(0.0, d ** -0.5, size=(d, d))
        w[pre + "attn.bo"] = np.zeros(d)
        w[pre + "ln2.g"] = np.ones(d)
        w[pre + "ln2.b"] = np.zeros(d)
        w[pre + "mlp.w1"] = rng.normal(0.0, d ** -0.5, size=(d, hid))
        w[pre + "mlp.b1"] = np.zeros(hid)
        w[pre + "mlp.w2"] = rng.normal(0.0, hid ** -0.5, size=(hid, d))
        w[pre + "mlp.b2"] = np.zeros(d)
    w["norm.g"] = np.ones(d)
    w["norm.b"] = np.zeros(d)
    w["head.w"] = rng.normal(0.0, d ** -0.5, size=(d, c))
    w["head.b"] = np.zeros(c)
    return w


def is_trainable(name: str) -> bool:
    return not name.endswith(BUFFER_SUFFIXES)


def attention_heads(weights: dict, l: int, spec: VitSpec) -> list:
    """Per-head projections of a dynamic layer as :class:`AttentionHead` objects."""
    pre = f"blocks.{l}.attn."
    dh = spec.head_dim
    return [AttentionHead(weights[pre + "wq"][:, h * dh:(h + 1) * dh],
                          weights[pre + "wk"][:, h * dh:(h + 1) * dh],
                          weights[pre + "wv"][:, h * dh:(h + 1) * dh]) for h in range(spec.heads)]


def glad_layer(weights: dict, l: int, norm: str, teacher: bool = False) -> GladLayer:
    pre = f"blocks.{l}.{'tglad' if teacher else 'glad'}."
    return GladLayer(weights[pre + "w"], weights[pre + "e"], norm=norm,
                     running_mean=weights.get(pre + "rmean"), running_var=weights.get(pre + "rvar"))


def _put_glad(weights: dict, l: int, layer: GladLayer, teacher: bool) -> None:
    pre = f"blocks.{l}.{'tglad' if teacher else 'glad'}."
    weights[pre + "w"] = layer.w
    weights[pre + "e"] = layer.pos
    if layer.norm == "batch":
        weights[pre + "rmean"] = layer.running_mean
        weights[pre + "rvar"] = layer.running_var


def build_compressed_weights(spec: VitSpec, base: dict, config: ArchitectureConfig,
                             static_maps: dict, rng: np.random.Generator) -> dict:
    """Derive compressed weights from a baseline model.

    ``static_maps[l]`` is an ``(heads, N, N)`` array of static attention for
    every static layer; each reducing GLAD firing gets a student and a teacher
    GLAD, both freshly initialised.
    """
    config.validate(spec)
    w = {k: v.copy() for k, v in base.items()}
    for l in range(spec.layers):
        pre = f"blocks.{l}."
        if config.gamma[l]:
            a = np.asarray(static_maps[l], dtype=np.float64)
            n = config.tokens_in(l, spec)
            if a.shape != (spec.heads, n, n):
                raise ShapeError(f"layer {l} static maps must be {(spec.heads, n, n)}, got {a.shape}")
            w[pre + "attn.ahat"] = a.copy()
            w.pop(pre + "attn.wq", None)
            w.pop(pre + "attn.wk", None)
        if config.reduces(l, spec):
            student = make_glad_layer(config.tokens_in(l, spec), config.m[l], spec.embed_dim, rng,
                                      norm=config.glad_norm)
            _put_glad(w, l, student, teacher=False)
            _put_glad(w, l, make_teacher_glad(student, rng, in_tokens=spec.base_tokens), teacher=True)
    check_weights(spec, config, w)
    return w


def check_weights(spec: VitSpec, config: ArchitectureConfig, weights: dict) -> None:
    """Raise ConfigError unless ``weights`` has exactly the tensors ``config`` needs."""
    d, hid, h = spec.embed_dim, spec.mlp_ratio * spec.embed_dim, spec.heads
    need = {"embed.cls": (1, d), "embed.pos": (spec.base_tokens, d), "norm.g": (d,), "norm.b": (d,),
            "head.w": (d, spec.num_classes), "head.b": (spec.num_classes,)}
    for l in range(spec.layers):
        pre = f"blocks.{l}."
        need.update({pre + "ln1.g": (d,), pre + "ln1.b": (d,), pre + "attn.wv": (d, d),
                     pre + "attn.wo": (d, d), pre + "attn.bo": (d,), pre + "ln2.g": (d,),
                     pre + "ln2.b": (d,), pre + "mlp.w1": (d, hid), pre + "mlp.b1": (hid,),
                     pre + "mlp.w2": (hid, d), pre + "mlp.b2": (d,)})
        n = config.m[l]
        if config.gamma[l]:
            need[pre + "attn.ahat"] = (h, n, n)
        else:
            need[pre + "attn.wq"] = (d, d)
            need[pre + "attn.wk"] = (d, d)
        if config.reduces(l, spec):
            m_in = config.tokens_in(l, spec)
            for tag, n_in in (("glad", m_in), ("tglad", spec.base_tokens)):
                need[f"{pre}{tag}.w"] = (n, n_in)
                need[f"{pre}{tag}.e"] = (n, d)
                if config.glad_norm == "batch":
                    need[f"{pre}{tag}.rmean"] = (n, d)
                    need[f"{pre}{tag}.rvar"] = (n, d)
    missing = sorted(set(need) - set(weights))
    extra = sorted(set(weights) - set(need))
    if missing or extra:
        raise ConfigError(f"weights do not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in need.items():
        if tuple(np.shape(weights[name])) != shape:
            raise ConfigError(f"tensor {name} has shape {np.shape(weights[name])}, expected {shape}")


# -- forward / backward ------------------------------------------------------

def _ln_fwd(x, g, b):
    xhat = linalg.layer_norm(x, LN_EPS)
    return xhat * g + b, xhat


def _ln_bwd(x, xhat, g, dy):
    axes = tuple(range(dy.ndim - 1))
    return linalg.layer_norm_backward(x, dy * g, LN_EPS), (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _split(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _block_fwd(x, l, spec, config, w, training, trace):
    pre = f"blocks.{l}."
    cache = {}
    if config.reduces(l, spec):
        layer = glad_layer(w, l, config.glad_norm)
        cache["glad_in"] = x
        x = glad_forward(layer, x, training)
        if trace is not None:
            trace.glad_outputs[l] = x
    elif x.shape[1] != config.m[l]:
        raise ShapeError(f"layer {l} expects {config.m[l]} tokens, got {x.shape[1]}")
    cache["x"] = x
    h1, cache["xhat1"] = _ln_fwd(x, w[pre + "ln1.g"], w[pre + "ln1.b"])
    cache["h1"] = h1
    v = _split(h1 @ w[pre + "attn.wv"], spec.heads)
    cache["v"] = v
    if config.gamma[l]:
        a = np.broadcast_to(w[pre + "attn.ahat"], (x.shape[0],) + w[pre + "attn.ahat"].shape)
    else:
        q = _split(h1 @ w[pre + "attn.wq"], spec.heads)
        k = _split(h1 @ w[pre + "attn.wk"], spec.heads)
        a = linalg.row_softmax(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(spec.head_dim))
        cache["q"], cache["k"] = q, k
    cache["a"] = a
    if trace is not None:
        trace.attention[l] = a
        trace.attention_inputs[l] = h1
    oc = _merge(a @ v)
    cache["oc"] = oc
    xh = x + oc @ w[pre + "attn.wo"] + w[pre + "attn.bo"]
    cache["xh"] = xh
    h2, cache["xhat2"] = _ln_fwd(xh, w[pre + "ln2.g"], w[pre + "ln2.b"])
    cache["h2"] = h2
    u = h2 @ w[pre + "mlp.w1"] + w[pre + "mlp.b1"]
    cache["u"] = u
    cdf = linalg.normal_cdf(u)
    act = u * cdf
    cache["cdf"], cache["act"] = cdf, act
    return xh + act @ w[pre + "mlp.w2"] + w[pre + "mlp.b2"], cache


def _sum_outer(a, b):
    """``sum_b a[b]^T b[b]`` for two ``(B, N, k)`` stacks."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _block_bwd(dx, l, spec, config, w, cache, grads, glad_extra, training):
    pre = f"blocks.{l}."
    # MLP branch
    grads[pre + "mlp.b2"] = dx.sum(axis=(0, 1))
    grads[pre + "mlp.w2"] = _sum_outer(cache["act"], dx)
    du = (dx @ w[pre + "mlp.w2"].T) * linalg.gelu_grad(cache["u"], cache["cdf"])
    grads[pre + "mlp.b1"] = du.sum(axis=(0, 1))
    grads[pre + "mlp.w1"] = _sum_outer(cache["h2"], du)
    dxh_ln, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = _ln_bwd(
        cache["xh"], cache["xhat2"], w[pre + "ln2.g"], du @ w[pre + "mlp.w1"].T)
    dxh = dx + dxh_ln
    # attention branch
    grads[pre + "attn.bo"] = dxh.sum(axis=(0, 1))
    grads[pre + "attn.wo"] = _sum_outer(cache["oc"], dxh)
    do = _split(dxh @ w[pre + "attn.wo"].T, spec.heads)
    a, v, h1 = cache["a"], cache["v"], cache["h1"]
    dv = a.transpose(0, 1, 3, 2) @ do
    dh1 = _merge(dv) @ w[pre + "attn.wv"].T
    grads[pre + "attn.wv"] = _sum_outer(h1, _merge(dv))
    da = do @ v.transpose(0, 1, 3, 2)
    if config.gamma[l]:
        grads[pre + "attn.ahat"] = da.sum(axis=0)
    else:
        ds = linalg.softmax_backward(a, da) / math.sqrt(spec.head_dim)
        dq = _merge(ds @ cache["k"])
        dk = _merge(ds.transpose(0, 1, 3, 2) @ cache["q"])
        grads[pre + "attn.wq"] = _sum_outer(h1, dq)
        grads[pre + "attn.wk"] = _sum_outer(h1, dk)
        dh1 = dh1 + dq @ w[pre + "attn.wq"].T + dk @ w[pre + "attn.wk"].T
    dx_ln, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = _ln_bwd(
        cache["x"], cache["xhat1"], w[pre + "ln1.g"], dh1)
    dx_in = dxh + dx_ln
    if "glad_in" in cache:
        if glad_extra is not None:
            dx_in = dx_in + glad_extra
        layer = glad_layer(w, l, config.glad_norm)
        gw, ge, dx_in = glad_backward(layer, cache["glad_in"], dx_in, training)
        grads[pre + "glad.w"] = gw
        grads[pre + "glad.e"] = ge
    return dx_in


def embed(tokens, spec: VitSpec, weights: dict) -> np.ndarray:
    """Prepend the cls token and add position embeddings: ``(B, n0-1, d) -> (B, n0, d)``."""
    t = np.asarray(tokens, dtype=np.float64)
    if t.ndim != 3 or t.shape[1:] != (spec.patch_tokens, spec.embed_dim):
        raise ShapeError(f"expected (B, {spec.patch_tokens}, {spec.embed_dim}) tokens, got {t.shape}")
    cls = np.broadcast_to(weights["embed.cls"], (t.shape[0], 1, spec.embed_dim))
    return np.concatenate([cls, t], axis=1) + weights["embed.pos"]


def _as_batch(tokens):
    t = np.asarray(tokens, dtype=np.float64)
    return (t[None], True) if t.ndim == 2 else (t, False)


def _forward(x, spec, config, w, training, trace):
    caches = []
    for l in range(spec.layers):
        if trace is not None:
            trace.layer_inputs.append(x)
        x, cache = _block_fwd(x, l, spec, config, w, training, trace)
        caches.append(cache)
    cls = x[:, 0, :]
    hf, xhat = _ln_fwd(cls, w["norm.g"], w["norm.b"])
    logits = hf @ w["head.w"] + w["head.b"]
    return logits, (caches, x, cls, xhat, hf)


def block_forward(state: BlockState, config: ArchitectureConfig, weights: dict, spec: VitSpec,
                  training: bool = False) -> BlockState:
    config.validate(spec)
    l = state.layer_index
    if not 0 <= l < spec.layers:
        raise ConfigError(f"layer index {l} outside [0, {spec.layers})")
    x, single = _as_batch(state.x)
    if x.shape[1] != config.tokens_in(l, spec) or x.shape[2] != spec.embed_dim:
        raise ShapeError(f"block {l} expects {config.tokens_in(l, spec)} x {spec.embed_dim} tokens, got {x.shape[1:]}")
    out, _ = _block_fwd(x, l, spec, config, weights, training, None)
    return BlockState(out[0] if single else out, l + 1)


def model_forward(tokens, config: ArchitectureConfig, weights: dict, spec: VitSpec,
                  training: bool = False) -> ForwardTrace:
    """Run the whole model on patch tokens ``(n0-1, d)`` or ``(B, n0-1, d)``.

    The returned trace records the input of every block (after embedding for
    block 0), GLAD outputs and attention maps.  For a single sequence the
    batch axis is dropped from every recorded array.
    """
    config.validate(spec)
    t, single = _as_batch(tokens)
    trace = ForwardTrace(logits=None)
    logits, _ = _forward(embed(t, spec, weights), spec, config, weights, training, trace)
    trace.logits = logits
    if single:
        trace.logits = logits[0]
        trace.layer_inputs = [x[0] for x in trace.layer_inputs]
        trace.glad_outputs = {k: v[0] for k, v in trace.glad_outputs.items()}
        trace.attention = {k: v[0] for k, v in trace.attention.items()}
        trace.attention_inputs = {k: v[0] for k, v in trace.attention_inputs.items()}
    return trace


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -float(logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def _teacher_inputs(teacher: Teacher, spec: VitSpec, tokens) -> list:
    if teacher.spec != spec:
        raise ConfigError(f"teacher spec {teacher.spec} differs from student spec {spec}")
    trace = ForwardTrace(logits=None)
    base = ArchitectureConfig.baseline(spec)
    _forward(embed(tokens, spec, teacher.weights), spec, base, teacher.weights, False, trace)
    return trace.layer_inputs


def loss_and_grad(tokens, labels, config: ArchitectureConfig, weights: dict, spec: VitSpec,
                  teacher: Teacher | None = None, lambda_glad: float = 1.0,
                  training: bool = True, need_grad: bool = True):
    """Total loss ``CE + lambda * sum_l distill_l`` on one batch, with gradients.

    Returns ``(loss, {"task": .., "glad": ..}, grads)``; ``grads`` is ``None``
    when ``need_grad`` is false.
    """
    config.validate(spec)
    t, _ = _as_batch(tokens)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != t.shape[0]:
        raise ShapeError(f"{t.shape[0]} samples but {y.shape[0]} labels")
    if np.any((y < 0) | (y >= spec.num_classes)):
        raise ShapeError(f"labels must lie in [0, {spec.num_classes})")
    firings = [l for l in range(spec.layers) if config.reduces(l, spec)]
    distill = bool(firings) and lambda_glad != 0.0
    if distill and teacher is None:
        raise ConfigError("GLAD distillation needs a teacher model")
    x0 = embed(t, spec, weights)
    trace = ForwardTrace(logits=None)
    logits, (caches, xL, cls, xhat_f, hf) = _forward(x0, spec, config, weights, training, trace)
    task, dlogits = cross_entropy(logits, y)
    glad_total = 0.0
    glad_grads = {}
    if distill:
        xt = _teacher_inputs(teacher, spec, t)
        for l in firings:
            tl = glad_layer(weights, l, config.glad_norm, teacher=True)
            y_t = glad_forward(tl, xt[l], training)
            val, g = token_distill_loss(trace.glad_outputs[l], y_t)
            glad_total += val
            glad_grads[l] = (lambda_glad * g, tl, xt[l])
    loss = task + lambda_glad * glad_total
    parts = {"task": task, "glad": glad_total}
    if not need_grad:
        return loss, parts, None

    grads = {}
    grads["head.b"] = dlogits.sum(axis=0)
    grads["head.w"] = hf.T @ dlogits
    dcls, grads["norm.g"], grads["norm.b"] = _ln_bwd(cls, xhat_f, weights["norm.g"], dlogits @ weights["head.w"].T)
    dx = np.zeros_like(xL)
    dx[:, 0, :] = dcls
    for l in reversed(range(spec.layers)):
        extra = glad_grads[l][0] if l in glad_grads else None
        dx = _block_bwd(dx, l, spec, config, weights, caches[l], grads, extra, training)
    for l, (g, tl, xt_l) in glad_grads.items():
        gw, ge, _ = glad_backward(tl, xt_l, -g, training)
        grads[f"blocks.{l}.tglad.w"] = gw
        grads[f"blocks.{l}.tglad.e"] = ge
    grads["embed.pos"] = dx.sum(axis=0)
    grads["embed.cls"] = dx[:, :1, :].sum(axis=0)
    return loss, parts, grads


def total_loss(tokens, labels, config, weights, spec, teacher=None, lambda_glad: float = 1.0,
               training: bool = False):
    loss, parts, _ = loss_and_grad(tokens, labels, config, weights, spec, teacher, lambda_glad,
                                   training=training, need_grad=False)
    return loss, parts


def update_glad_statistics(tokens, config, weights, spec, teacher=None) -> None:
    """Refresh batch-norm running statistics of every GLAD layer (batch mode only)."""
    if config.glad_norm != "batch":
        return
    t, _ = _as_batch(tokens)
    trace = ForwardTrace(logits=None)
    _forward(embed(t, spec, weights), spec, config, weights, True, trace)
    xt = _teacher_inputs(teacher, spec, t) if teacher is not None else None
    for l in range(spec.layers):
        if not config.reduces(l, spec):
            continue
        for is_teacher, x in ((False, trace.layer_inputs[l]), (True, None if xt is None else xt[l])):
            if x is None:
                continue
            layer = glad_layer(weights, l, config.glad_norm, teacher=is_teacher)
            update_running_stats(layer, x)
            _put_glad(weights, l, layer, is_teacher)
