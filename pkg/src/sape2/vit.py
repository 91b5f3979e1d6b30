"""Small vision transformer with pluggable position encoding.

Pre-norm blocks (norm, attention, residual; norm, GELU MLP, residual), a
class token, and one position-encoding combo chosen by name: an absolute
embedding-level part (learnable or sinusoidal offsets) and/or an
attention-level part (rotation, relative table, contextual gating, or the
semantic-gated 2D bias). Attention-level strategies act on patch tokens
only; their bias is padded with a zero row and column for the class token.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .baselines import ApeLearnable, ApeSinusoidal, CopeEncoding, Rope2dAxial, RpeEncoding
from .core import PatchGrid, Sape2Encoding
from .rng import make_rng, trunc_normal
from .tensor import Tensor

# combo name -> (embedding-level part, attention-level part)
PE_COMBOS: dict[str, tuple[str | None, str | None]] = {
    "none": (None, None),
    "ape": ("learnable", None),
    "ape-sin": ("sinusoidal", None),
    "rope2d": (None, "rope2d"),
    "cope": (None, "cope"),
    "rpe": (None, "rpe"),
    "sape2": (None, "sape2"),
    "sape2+ape": ("learnable", "sape2"),
    "cope+ape": ("learnable", "cope"),
    "rope2d+ape": ("learnable", "rope2d"),
}


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    hidden_dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: int = 4
    num_classes: int = 10
    pe_strategy: str = "none"
    sape_mode: str = "key"
    pooling: str = "cls"
    bias_sign: float = 1.0
    bias_after_scale: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"hidden dim {self.hidden_dim} not divisible by {self.heads} heads")
        if self.pe_strategy not in PE_COMBOS:
            raise ValueError(f"unknown pe strategy {self.pe_strategy!r}; "
                             f"choose from {sorted(PE_COMBOS)}")
        if self.sape_mode not in ("query", "key"):
            raise ValueError(f"sape_mode must be 'query' or 'key', got {self.sape_mode!r}")
        if self.pooling not in ("cls", "mean"):
            raise ValueError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")

    @property
    def grid(self) -> PatchGrid:
        side = self.image_size // self.patch_size
        return PatchGrid(side, side)

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


def _linear_init(rng, shape, dtype) -> np.ndarray:
    # variance scaled to fan-in + fan-out; std 0.02 everywhere stalls at
    # small widths (attention starts uniform and gradients vanish)
    std = math.sqrt(2.0 / (shape[0] + shape[-1]))
    return trunc_normal(rng, shape, std=std, dtype=dtype)


def patchify(images: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """Cut (B, H_px, W_px, C) images into flattened non-overlapping patches.

    Returns (B, N, patch*patch*C) in raster order, row-major with x fastest;
    patch i sits at grid coordinates (y, x) = divmod(i, W).
    """
    b, hp, wp, c = images.shape
    p = cfg.patch_size
    if hp % p != 0 or wp % p != 0:
        raise ValueError(f"image {hp}x{wp} not divisible by patch size {p}")
    gh, gw = hp // p, wp // p
    x = images.reshape(b, gh, p, gw, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, gh * gw, p * p * c)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k}): range [{labels.min()}, {labels.max()}]")
    logp = T.log_softmax(logits, axis=-1)
    picked = T.take_last(logp, labels.reshape(-1, 1).astype(np.int64))
    return T.neg(T.tmean(picked))


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of rows whose label ranks in the k largest logits.

    Ties resolve toward the lower class index (stable ranking).
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if not (1 <= k <= logits.shape[-1]):
        raise ValueError(f"k must be in [1, {logits.shape[-1]}], got {k}")
    order = np.argsort(-logits, axis=-1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=-1)
    return float(hits.mean())


class VitModel:
    """Classifier over patch tokens plus a class token."""

    def __init__(self, cfg: VitConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = make_rng(seed, stream=1)
        d = cfg.hidden_dim
        grid = cfg.grid
        pdim = cfg.patch_size * cfg.patch_size * 3
        ape_kind, attn_kind = PE_COMBOS[cfg.pe_strategy]

        self.patch_w = Tensor(_linear_init(rng, (pdim, d), dtype), requires_grad=True)
        self.patch_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.cls = Tensor(trunc_normal(rng, (1, 1, d), dtype=dtype), requires_grad=True)

        if ape_kind == "learnable":
            self.ape = ApeLearnable(grid, d, rng, extra_tokens=1, dtype=dtype)
        elif ape_kind == "sinusoidal":
            self.ape = ApeSinusoidal(grid, d, extra_tokens=1, dtype=dtype)
        else:
            self.ape = None

        self.blocks = []
        for _ in range(cfg.depth):
            blk = {
                "ln1_g": Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                "ln1_b": Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
                "qkv_w": Tensor(_linear_init(rng, (d, 3 * d), dtype), requires_grad=True),
                "qkv_b": Tensor(np.zeros(3 * d, dtype=dtype), requires_grad=True),
                "proj_w": Tensor(_linear_init(rng, (d, d), dtype), requires_grad=True),
                "proj_b": Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
                "ln2_g": Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                "ln2_b": Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
                "fc1_w": Tensor(_linear_init(rng, (d, cfg.mlp_ratio * d), dtype), requires_grad=True),
                "fc1_b": Tensor(np.zeros(cfg.mlp_ratio * d, dtype=dtype), requires_grad=True),
                "fc2_w": Tensor(_linear_init(rng, (cfg.mlp_ratio * d, d), dtype), requires_grad=True),
                "fc2_b": Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
            }
            if attn_kind == "sape2":
                blk["pe"] = Sape2Encoding(grid, cfg.head_dim, mode=cfg.sape_mode,
                                          rng=rng, dtype=dtype, sign=cfg.bias_sign)
            elif attn_kind == "cope":
                blk["pe"] = CopeEncoding(grid, cfg.head_dim, rng=rng, dtype=dtype)
            elif attn_kind == "rpe":
                blk["pe"] = RpeEncoding(grid, cfg.heads, rng, dtype=dtype)
            elif attn_kind == "rope2d":
                blk["pe"] = Rope2dAxial(grid)
            else:
                blk["pe"] = None
            self.blocks.append(blk)

        self.ln_f_g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.ln_f_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.head_w = Tensor(_linear_init(rng, (d, cfg.num_classes), dtype), requires_grad=True)
        self.head_b = Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True)

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("patch_w", self.patch_w), ("patch_b", self.patch_b), ("cls", self.cls)]
        if self.ape is not None:
            out += [(f"ape.{i}", p) for i, p in enumerate(self.ape.parameters())]
        for bi, blk in enumerate(self.blocks):
            for key in ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "proj_w", "proj_b",
                        "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b"):
                out.append((f"block{bi}.{key}", blk[key]))
            if blk["pe"] is not None:
                out += [(f"block{bi}.pe.{i}", p) for i, p in enumerate(blk["pe"].parameters())]
        out += [("ln_f_g", self.ln_f_g), ("ln_f_b", self.ln_f_b),
                ("head_w", self.head_w), ("head_b", self.head_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- forward ----------------------------------------------------------

    def _attend(self, x: Tensor, blk: dict) -> Tensor:
        cfg = self.cfg
        b, t, d = x.shape
        qkv = T.add(T.matmul(x, blk["qkv_w"]), blk["qkv_b"])
        qkv = T.reshape(qkv, (b, t, 3, cfg.heads, cfg.head_dim))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]

        pe = blk["pe"]
        bias = None
        if pe is not None:
            qp = q[:, :, 1:, :]
            kp = k[:, :, 1:, :]
            if pe.rewrites_qk:
                qp, kp = pe.rewrite_qk(qp, kp)
                q = T.concat([q[:, :, :1, :], qp], axis=2)
                k = T.concat([k[:, :, :1, :], kp], axis=2)
            bias = pe.bias(qp, kp)
            if bias is not None:
                blk["last_bias"] = bias.data  # patch-level, for visualization
                bias = _pad_cls(bias, x.dtype)

        logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        inv = 1.0 / math.sqrt(cfg.head_dim)
        if bias is None:
            scaled = T.mul(logits, inv)
        elif cfg.bias_after_scale:
            scaled = T.add(T.mul(logits, inv), bias)
        else:
            scaled = T.mul(T.add(logits, bias), inv)
        ctx = T.matmul(T.softmax(scaled, axis=-1), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return T.add(T.matmul(ctx, blk["proj_w"]), blk["proj_b"])

    def forward(self, images) -> Tensor:
        cfg = self.cfg
        if isinstance(images, Tensor):
            images = images.data
        images = np.asarray(images, dtype=self.dtype)
        if images.shape[1] != cfg.image_size or images.shape[3] != 3:
            raise ValueError(f"expected (B, {cfg.image_size}, {cfg.image_size}, 3) "
                             f"images, got {images.shape}")
        patches = Tensor(patchify(images, cfg))
        x = T.add(T.matmul(patches, self.patch_w), self.patch_b)
        b = x.shape[0]
        cls_row = T.add(self.cls, Tensor(np.zeros((b, 1, cfg.hidden_dim), dtype=self.dtype)))
        x = T.concat([cls_row, x], axis=1)
        if self.ape is not None:
            x = T.add(x, self.ape.offsets())
        for blk in self.blocks:
            x = T.add(x, self._attend(T.layer_norm(x, blk["ln1_g"], blk["ln1_b"]), blk))
            h = T.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            h = T.gelu(T.add(T.matmul(h, blk["fc1_w"]), blk["fc1_b"]))
            h = T.add(T.matmul(h, blk["fc2_w"]), blk["fc2_b"])
            x = T.add(x, h)
        x = T.layer_norm(x, self.ln_f_g, self.ln_f_b)
        pooled = x[:, 0, :] if cfg.pooling == "cls" else T.tmean(x, axis=1)
        return T.add(T.matmul(pooled, self.head_w), self.head_b)

    __call__ = forward


def _pad_cls(bias: Tensor, dtype) -> Tensor:
    """Zero row and column at token 0 so the class token carries no bias."""
    shape = bias.shape
    col = Tensor(np.zeros(shape[:-1] + (1,), dtype=dtype))
    bias = T.concat([col, bias], axis=-1)
    row = Tensor(np.zeros(bias.shape[:-2] + (1, bias.shape[-1]), dtype=dtype))
    return T.concat([row, bias], axis=-2)


def expected_param_count(cfg: VitConfig) -> int:
    """Closed-form parameter count for a config.

    base = (p^2*3+1)*d + d  [patch embed + cls]
         + depth * (12*d + 4*d^2 + 2*r*d^2 + 2*r*d + d)  [blocks]
         + 2*d + (d+1)*classes  [final norm + head]
    plus the chosen encoding's tables.
    """
    d, r = cfg.hidden_dim, cfg.mlp_ratio
    p2c = cfg.patch_size * cfg.patch_size * 3
    grid = cfg.grid
    n = grid.n
    base = (p2c * d + d) + d
    per_block = (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (2 * d) \
        + (d * r * d + r * d) + (r * d * d + d)
    base += cfg.depth * per_block
    base += 2 * d + d * cfg.num_classes + cfg.num_classes
    ape_kind, attn_kind = PE_COMBOS[cfg.pe_strategy]
    if ape_kind == "learnable":
        base += (n + 1) * d
    dh = cfg.head_dim
    if attn_kind == "sape2":
        base += cfg.depth * ((grid.w + 1) * dh + (grid.h + 1) * dh)
    elif attn_kind == "cope":
        base += cfg.depth * (n + 1) * dh
    elif attn_kind == "rpe":
        base += cfg.depth * cfg.heads * ((2 * grid.w - 1) + (2 * grid.h - 1))
    return base


# -- checkpoint format ----------------------------------------------------
#
# Text header: magic+version line, config as key=value lines, then a
# `payload float32-le <count>` line and a blank line; after that the raw
# little-endian float32 parameter payload in named_parameters order.

_MAGIC = "SAPE2CKPT"
_VERSION = 1


def save_checkpoint(path, model: VitModel) -> None:
    params = model.named_parameters()
    total = sum(p.size for _, p in params)
    head = io.StringIO()
    head.write(f"{_MAGIC} v{_VERSION}\n")
    for key, val in asdict(model.cfg).items():
        head.write(f"{key}={val}\n")
    head.write(f"payload float32-le {total}\n\n")
    with open(path, "wb") as fh:
        fh.write(head.getvalue().encode("ascii"))
        for _, p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _parse_cfg(lines: list[str]) -> VitConfig:
    kv = dict(line.split("=", 1) for line in lines)
    return VitConfig(
        image_size=int(kv["image_size"]), patch_size=int(kv["patch_size"]),
        hidden_dim=int(kv["hidden_dim"]), depth=int(kv["depth"]),
        heads=int(kv["heads"]), mlp_ratio=int(kv["mlp_ratio"]),
        num_classes=int(kv["num_classes"]), pe_strategy=kv["pe_strategy"],
        sape_mode=kv["sape_mode"], pooling=kv["pooling"],
        bias_sign=float(kv["bias_sign"]),
        bias_after_scale=kv["bias_after_scale"] == "True",
    )


def load_checkpoint(path) -> VitModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, _, payload = blob.partition(b"\n\n")
    lines = header.decode("ascii").splitlines()
    if not lines or not lines[0].startswith(f"{_MAGIC} v"):
        raise ValueError(f"{path}: not a checkpoint file")
    version = int(lines[0].split("v", 1)[1])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    payload_line = lines[-1]
    if not payload_line.startswith("payload float32-le "):
        raise ValueError(f"{path}: malformed payload declaration")
    count = int(payload_line.rsplit(" ", 1)[1])
    cfg = _parse_cfg(lines[1:-1])
    flat = np.frombuffer(payload, dtype="<f4", count=-1)
    if flat.size != count:
        raise ValueError(f"{path}: payload holds {flat.size} values, header says {count}")
    model = VitModel(cfg, seed=0)
    offset = 0
    for _, p in model.named_parameters():
        chunk = flat[offset:offset + p.size]
        if chunk.size != p.size:
            raise ValueError(f"{path}: payload too short at offset {offset}")
        p.data = chunk.reshape(p.shape).astype(model.dtype)
        offset += p.size
    if offset != flat.size:
        raise ValueError(f"{path}: {flat.size - offset} trailing payload values")
    return model
