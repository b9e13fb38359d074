"""Prompt-tuned client model over a frozen miniature ViT-style backbone."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"FHPLCKPT"
CHECKPOINT_VERSION = 1
CLS_INIT_STD = 0.02
# unit-scale position codes keep patch tokens distinguishable under a frozen backbone
POS_INIT_STD = 1.0
PRETEXT_CLASSES = 32
PRETEXT_BATCH = 32
PRETEXT_LR = 0.1


class InsertionMode(str, Enum):
    SHALLOW = "shallow"
    DEEP = "deep"


@dataclass(frozen=True)
class BackboneSpec:
    num_layers: int
    embed_dim: int
    num_heads: int
    patch_count: int
    input_dim: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("num_layers", "embed_dim", "num_heads", "patch_count", "input_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.mlp_ratio > 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.embed_dim)))

    @property
    def feature_dim(self) -> int:
        return self.patch_count * self.input_dim

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        """Frozen backbone tensors in declaration (and checkpoint) order."""
        d, h = self.embed_dim, self.mlp_dim
        shapes: dict[str, tuple[int, ...]] = {
            "patch_embed.weight": (self.input_dim, d),
            "patch_embed.bias": (d,),
            "pos_embed": (self.patch_count, d),
            "cls_token": (d,),
        }
        for a in range(self.num_layers):
            p = f"blocks.{a}."
            shapes.update({
                p + "ln1.gamma": (d,),
                p + "ln1.beta": (d,),
                p + "attn.qkv.weight": (d, 3 * d),
                p + "attn.qkv.bias": (3 * d,),
                p + "attn.proj.weight": (d, d),
                p + "attn.proj.bias": (d,),
                p + "ln2.gamma": (d,),
                p + "ln2.beta": (d,),
                p + "mlp.fc1.weight": (d, h),
                p + "mlp.fc1.bias": (h,),
                p + "mlp.fc2.weight": (h, d),
                p + "mlp.fc2.bias": (d,),
            })
        shapes["norm.gamma"] = (d,)
        shapes["norm.beta"] = (d,)
        return shapes


@dataclass(frozen=True)
class ParamCount:
    prompt_params: int
    head_params: int
    total: int


def param_count(embed_dim: int, num_layers: int, prompt_len: int, n_classes: int, mode) -> ParamCount:
    blocks = num_layers if InsertionMode(mode) is InsertionMode.DEEP else 1
    prompts = blocks * prompt_len * embed_dim
    head = embed_dim * n_classes + n_classes
    return ParamCount(prompts, head, prompts + head)


class ClientModel:
    def __init__(
        self,
        spec: BackboneSpec,
        n_classes: int,
        mode: InsertionMode,
        prompt_len: int,
        seed: int,
        backbone: dict[str, ad.Tensor],
        prompts: list[ad.Tensor],
        head_weight: ad.Tensor,
        head_bias: ad.Tensor,
    ):
        self.spec = spec
        self.n_classes = n_classes
        self.mode = InsertionMode(mode)
        self.prompt_len = prompt_len
        self.seed = seed
        self.backbone = backbone
        self.prompts = prompts
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.momentum_buffers: dict[str, np.ndarray] = {}

    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    def trainable(self) -> list[tuple[str, ad.Tensor]]:
        params = [(f"prompts.{a}", p) for a, p in enumerate(self.prompts)]
        params += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return params

    def zero_grad(self) -> None:
        for _, p in self.trainable():
            p.grad = None

    def backbone_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.backbone.items():
            h.update(name.encode())
            h.update(t.values.tobytes())
        return h.hexdigest()

    def prompt_state(self) -> dict[str, np.ndarray]:
        return {f"prompts.{a}": p.values.copy() for a, p in enumerate(self.prompts)}

    def head_state(self) -> dict[str, np.ndarray]:
        return {"head.weight": self.head_weight.values.copy(), "head.bias": self.head_bias.values.copy()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.trainable())
        for name, arr in state.items():
            if params[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {params[name].shape}")
            params[name].values[...] = arr


def _linear_init(rng, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


def _init_backbone(spec: BackboneSpec, rng: np.random.Generator) -> dict[str, ad.Tensor]:
    weights = {}
    for name, shape in spec.weight_shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "cls_token":
            arr = rng.normal(0.0, CLS_INIT_STD, size=shape)
        elif name == "pos_embed":
            arr = rng.normal(0.0, POS_INIT_STD, size=shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("beta", "bias"):
            arr = np.zeros(shape)
        else:
            arr = _linear_init(rng, shape[0], shape)
        weights[name] = ad.Tensor(arr, requires_grad=False, name=name)
    return weights


def init_client_model(
    spec: BackboneSpec,
    n_classes: int,
    mode: InsertionMode | str = InsertionMode.DEEP,
    prompt_len: int = 3,
    seed: int = 0,
    pretext_steps: int = 0,
) -> ClientModel:
    if prompt_len < 1:
        raise ValueError(f"prompt_len must be >= 1, got {prompt_len}")
    if pretext_steps < 0:
        raise ValueError("pretext_steps must be >= 0")
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    mode = InsertionMode(mode)
    rng = np.random.default_rng([seed, 0])
    backbone = _init_backbone(spec, rng)
    if pretext_steps:
        pretrain_backbone(spec, backbone, pretext_steps, seed)
    prompts, head_w, head_b = init_trainable(spec, n_classes, mode, prompt_len, seed)
    return ClientModel(spec, n_classes, mode, prompt_len, seed, backbone, prompts, head_w, head_b)


def init_trainable(
    spec: BackboneSpec, n_classes: int, mode: InsertionMode | str, prompt_len: int, seed: int = 0
) -> tuple[list[ad.Tensor], ad.Tensor, ad.Tensor]:
    """Fresh prompts (uniform in +-sqrt(6 / (d + n d))) and a zero head."""
    d = spec.embed_dim
    r = np.sqrt(6.0 / (d + prompt_len * d))
    blocks = spec.num_layers if InsertionMode(mode) is InsertionMode.DEEP else 1
    prompt_rng = np.random.default_rng([seed, 1])
    prompts = [
        ad.Tensor(prompt_rng.uniform(-r, r, size=(prompt_len, d)), requires_grad=True, name=f"prompts.{a}")
        for a in range(blocks)
    ]
    head_w = ad.Tensor(np.zeros((d, n_classes)), requires_grad=True, name="head.weight")
    head_b = ad.Tensor(np.zeros(n_classes), requires_grad=True, name="head.bias")
    return prompts, head_w, head_b


# ---------------------------------------------------------------- forward pass


def _as_batch(spec: BackboneSpec, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1 or (arr.ndim == 2 and arr.shape == (spec.patch_count, spec.input_dim))
    if single:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        arr = arr.reshape(arr.shape[0], -1)
    if arr.shape[1] != spec.feature_dim:
        raise ValueError(
            f"sample has {arr.shape[1]} features; backbone expects "
            f"{spec.patch_count} patches x {spec.input_dim} = {spec.feature_dim}"
        )
    return arr, single


def _embed(w: dict[str, ad.Tensor], spec: BackboneSpec, xb: np.ndarray) -> ad.Tensor:
    patches = xb.reshape(xb.shape[0], spec.patch_count, spec.input_dim)
    return patches @ w["patch_embed.weight"] + w["patch_embed.bias"] + w["pos_embed"]


def embed_patches(model: ClientModel, x) -> ad.Tensor:
    """Patch projection plus position encoding: (M, d) for one sample, (B, M, d) for a batch."""
    xb, single = _as_batch(model.spec, x)
    e = _embed(model.backbone, model.spec, xb)
    return e[0] if single else e


def _block(x: ad.Tensor, w: dict[str, ad.Tensor], a: int, spec: BackboneSpec) -> ad.Tensor:
    p = f"blocks.{a}."
    b, t, d = x.shape
    heads = spec.num_heads
    dh = d // heads

    h = ad.layer_norm(x, w[p + "ln1.gamma"], w[p + "ln1.beta"])
    qkv = h @ w[p + "attn.qkv.weight"] + w[p + "attn.qkv.bias"]
    qkv = qkv.reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = ad.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    x = x + (o @ w[p + "attn.proj.weight"] + w[p + "attn.proj.bias"])

    h = ad.layer_norm(x, w[p + "ln2.gamma"], w[p + "ln2.beta"])
    h = ad.gelu(h @ w[p + "mlp.fc1.weight"] + w[p + "mlp.fc1.bias"])
    return x + (h @ w[p + "mlp.fc2.weight"] + w[p + "mlp.fc2.bias"])


def encode(
    w: dict[str, ad.Tensor],
    spec: BackboneSpec,
    xb: np.ndarray,
    prompts: list[ad.Tensor] | None,
    mode: InsertionMode = InsertionMode.DEEP,
    layer_hook: Callable[[int, tuple, tuple], None] | None = None,
) -> ad.Tensor:
    """Final normalised [cls] features, shape (B, d).

    Layer 1 sees ``[cls, P_0, E]``. In deep mode layer ``a`` swaps the latent
    prompt rows for fresh ``P_{a-1}``; in shallow mode the previous output is
    passed through unchanged.
    """
    b, d = xb.shape[0], spec.embed_dim
    e = _embed(w, spec, xb)
    cls = ad.broadcast_to(w["cls_token"], (b, 1, d))
    n = prompts[0].shape[0] if prompts else 0
    parts = [cls]
    if prompts:
        parts.append(ad.broadcast_to(prompts[0], (b, n, d)))
    tokens = ad.concat(parts + [e], axis=1)
    for a in range(spec.num_layers):
        if a > 0 and prompts and mode is InsertionMode.DEEP:
            fresh = ad.broadcast_to(prompts[a], (b, n, d))
            tokens = ad.concat([tokens[:, :1], fresh, tokens[:, 1 + n:]], axis=1)
        out = _block(tokens, w, a, spec)
        if layer_hook is not None:
            layer_hook(a, tokens.shape, out.shape)
        tokens = out
    return ad.layer_norm(tokens[:, 0], w["norm.gamma"], w["norm.beta"])


def forward(model: ClientModel, x, layer_hook=None) -> ad.Tensor:
    """Raw logits: (n_c,) for a single sample, (B, n_c) for a batch."""
    xb, single = _as_batch(model.spec, x)
    feats = encode(model.backbone, model.spec, xb, model.prompts, model.mode, layer_hook)
    logits = feats @ model.head_weight + model.head_bias
    return logits[0] if single else logits


def predict_logits(model: ClientModel, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Tape-free batched inference."""
    out = [
        forward(model, features[i : i + batch_size]).values
        for i in range(0, len(features), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def trainable_param_count(model: ClientModel) -> ParamCount:
    return param_count(model.embed_dim, model.spec.num_layers, model.prompt_len, model.n_classes, model.mode)


def sgd_step(model: ClientModel, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """Momentum SGD on prompts and head; L2 decay is folded into the gradient first."""
    params = model.trainable()
    missing = [name for name, p in params if p.grad is None]
    if missing:
        raise RuntimeError(f"no gradient for {', '.join(missing)}; run backward first")
    for name, p in params:
        g = p.grad + weight_decay * p.values
        if momentum:
            buf = model.momentum_buffers.get(name)
            buf = g.copy() if buf is None else momentum * buf + g
            model.momentum_buffers[name] = buf
            g = buf
        p.values -= lr * g
        p.grad = None


# ---------------------------------------------------------------- pretext warm-up


def pretrain_backbone(spec: BackboneSpec, backbone: dict[str, ad.Tensor], steps: int, seed: int) -> None:
    """Train every backbone tensor on a seeded synthetic blob task, then freeze.

    Stands in for loading pre-trained foundation weights.
    """
    from .data import gen_synthetic

    ds = gen_synthetic(
        PRETEXT_CLASSES, 64, spec.feature_dim, (spec.patch_count, spec.input_dim),
        noise=1.0, seed=seed + 7919,
    )
    rng = np.random.default_rng([seed, 2])
    head_w = ad.Tensor(np.zeros((spec.embed_dim, PRETEXT_CLASSES)), requires_grad=True)
    head_b = ad.Tensor(np.zeros(PRETEXT_CLASSES), requires_grad=True)
    params = list(backbone.values()) + [head_w, head_b]
    bufs = [np.zeros_like(p.values) for p in params]
    for p in backbone.values():
        p.requires_grad = True
    try:
        for _ in range(steps):
            idx = rng.choice(len(ds), size=PRETEXT_BATCH, replace=False)
            onehot = np.eye(PRETEXT_CLASSES)[ds.labels[idx]]
            with ad.Tape():
                feats = encode(backbone, spec, ds.features[idx], None)
                logits = feats @ head_w + head_b
                loss = -ad.sum_(ad.log_softmax(logits, axis=-1) * onehot) / PRETEXT_BATCH
            ad.backward_grad(loss)
            for p, buf in zip(params, bufs):
                if p.grad is None:
                    continue
                buf *= 0.9
                buf += p.grad
                p.values -= PRETEXT_LR * buf
                p.grad = None
    finally:
        for p in backbone.values():
            p.requires_grad = False
            p.grad = None


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: ClientModel, path) -> None:
    """Header (magic, version, JSON metadata) then little-endian float64 arrays."""
    arrays = list(model.backbone.items()) + model.trainable()
    header = {
        "spec": asdict(model.spec),
        "mode": model.mode.value,
        "prompt_len": model.prompt_len,
        "n_classes": model.n_classes,
        "seed": model.seed,
        "tensors": [[name, list(t.shape)] for name, t in arrays],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in arrays:
            fh.write(t.values.astype("<f8").tobytes())


def load_checkpoint(path) -> ClientModel:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<HI")
    header = json.loads(data[off : off + hlen])
    off += hlen
    spec = BackboneSpec(**header["spec"])
    model = init_client_model(spec, header["n_classes"], header["mode"], header["prompt_len"], header["seed"])
    targets = dict(model.backbone)
    targets.update(dict(model.trainable()))
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += count * 8
        targets[name].values[...] = arr
    return model
