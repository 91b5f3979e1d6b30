"""Per-patch bias maps as plain-text PPM images plus a CSV of the raw field.

Each patch's bias row is reshaped to the patch grid and colored from white
(zero, always the self cell) toward green (the map's maximum).
"""

from __future__ import annotations

import os

import numpy as np

from .core import PatchGrid
from .tensor import no_grad
from .vit import PE_COMBOS, VitModel, load_checkpoint

_GREEN = np.array([0.0, 160.0, 0.0])
_WHITE = np.array([255.0, 255.0, 255.0])


def write_ppm(path: str, rgb: np.ndarray) -> None:
    """Plain-text P3 image from a (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in rgb.reshape(h, w * 3):
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_ppm(path: str) -> np.ndarray:
    """Read P3 (text) or P6 (binary) into (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic = blob[:2]
    if magic == b"P3":
        tokens = blob.decode("ascii").split()
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        vals = np.array(tokens[4:4 + w * h * 3], dtype=np.int64)
    elif magic == b"P6":
        parts = blob.split(maxsplit=4)
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
        vals = np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).astype(np.int64)
    else:
        raise ValueError(f"{path}: not a PPM file")
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    return vals.reshape(h, w, 3).astype(np.uint8)


def white_to_green(values: np.ndarray) -> np.ndarray:
    """(H, W) non-negative values -> (H, W, 3) uint8; 0 is white, the map
    maximum is full green."""
    v = np.asarray(values, dtype=np.float64)
    vmax = v.max()
    t = v / vmax if vmax > 0 else np.zeros_like(v)
    rgb = _WHITE[None, None, :] + t[..., None] * (_GREEN - _WHITE)[None, None, :]
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def upscale(rgb: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(rgb, factor, axis=0), factor, axis=1)


def save_bias_csv(path: str, bias: np.ndarray) -> None:
    np.savetxt(path, bias, fmt="%.10g", delimiter=",")


def load_bias_csv(path: str) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def save_bias_maps(out_dir: str, bias: np.ndarray, grid: PatchGrid,
                   scale: int = 1, patch: int | None = None) -> list[str]:
    """One PPM per patch (or a single chosen patch) plus the raw CSV."""
    os.makedirs(out_dir, exist_ok=True)
    save_bias_csv(os.path.join(out_dir, "bias.csv"), bias)
    written = []
    indices = range(grid.n) if patch is None else [patch]
    for i in indices:
        rgb = white_to_green(bias[i].reshape(grid.h, grid.w))
        if scale > 1:
            rgb = upscale(rgb, scale)
        path = os.path.join(out_dir, f"bias_patch_{i:03d}.ppm")
        write_ppm(path, rgb)
        written.append(path)
    return written


def bias_field_from_model(model: VitModel, image: np.ndarray, layer: int,
                          head: int) -> np.ndarray:
    """Patch-level (N, N) bias of one layer and head for a single image."""
    if not (0 <= layer < len(model.blocks)):
        raise ValueError(f"layer {layer} outside [0, {len(model.blocks)})")
    if not (0 <= head < model.cfg.heads):
        raise ValueError(f"head {head} outside [0, {model.cfg.heads})")
    with no_grad():
        model(image[None])
    bias = model.blocks[layer].get("last_bias")
    if bias is None:
        raise ValueError("the selected layer produced no attention bias")
    return np.asarray(bias[0, head] if bias.ndim == 4 else bias[head],
                      dtype=np.float64)


def visualize_checkpoint(ckpt_path: str, image_path: str, layer: int,
                         head: int, out_dir: str, scale: int = 1,
                         patch: int | None = None) -> list[str]:
    model = load_checkpoint(ckpt_path)
    if PE_COMBOS[model.cfg.pe_strategy][1] != "sape2":
        raise ValueError(f"checkpoint uses pe={model.cfg.pe_strategy!r}; "
                         "bias visualization needs a sape2 variant")
    rgb = read_ppm(image_path)
    if rgb.shape[0] != model.cfg.image_size or rgb.shape[1] != model.cfg.image_size:
        raise ValueError(f"image is {rgb.shape[1]}x{rgb.shape[0]}, "
                         f"model expects {model.cfg.image_size}")
    image = rgb.astype(np.float32) / 255.0
    bias = bias_field_from_model(model, image, layer, head)
    return save_bias_maps(out_dir, bias, model.cfg.grid, scale, patch)
