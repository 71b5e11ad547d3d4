"""Write attention maps, masks and masked images as PGM/PPM files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import checkpoint as ckpt_io
from .autograd import Tensor, no_grad, precision
from .restrict import apply_mask, attention_map, make_mask, upsampled_attention

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff", ".gif"}


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to 0..255; a constant (e.g. all-zero) map becomes black."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if not np.isfinite(lo) or not np.isfinite(hi) or hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def mask_to_gray8(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask) != 0, 255, 0).astype(np.uint8)


def write_pgm(path: str | Path, gray: np.ndarray) -> Path:
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {gray.dtype} {gray.shape}")
    Image.fromarray(gray, mode="L").save(path, format="PPM")
    return Path(path)


def write_ppm(path: str | Path, rgb_chw: np.ndarray) -> Path:
    Image.fromarray(np.ascontiguousarray(np.transpose(rgb_chw, (1, 2, 0))), mode="RGB").save(path, format="PPM")
    return Path(path)


def read_image(path: str | Path, size: int) -> np.ndarray:
    """RGB image as uint8 (3, size, size); resized bilinearly when needed."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.transpose(np.asarray(im, dtype=np.uint8), (2, 0, 1)).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def lambda_tag(lam: float) -> str:
    return f"lam{lam:g}"


def export_images(model, cfg, images: np.ndarray, names: list[str], lam: float, out_dir: str | Path) -> list[Path]:
    """Attention map, binary mask and masked image for each uint8 (3,H,W) image."""
    from .train import to_input

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    written = []
    with no_grad():
        x = to_input(images, cfg)
        f_a = attention_map(model(x).penultimate)
        h, w = images.shape[2:]
        up = upsampled_attention(f_a, h, w)
        masks = make_mask(f_a, h, w, lam)
        masked = apply_mask(Tensor(images.astype(np.float64)), masks).images.data.astype(np.uint8)
    tag = lambda_tag(lam)
    for i, name in enumerate(names):
        written.append(write_pgm(out_dir / f"{name}_attention.pgm", to_gray8(up[i])))
        written.append(write_pgm(out_dir / f"{name}_mask_{tag}.pgm", mask_to_gray8(masks.values[i])))
        written.append(write_ppm(out_dir / f"{name}_masked_{tag}.ppm", masked[i]))
    return written


def export_attention(checkpoint: str | Path, images: str | Path, lam: float, out_dir: str | Path) -> list[Path]:
    from .train import model_from_checkpoint

    cfg, model = model_from_checkpoint(ckpt_io.load(checkpoint))
    src = Path(images)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    elif src.is_file():
        files = [src]
    else:
        raise OSError(f"no such image file or directory: {src}")
    if not files:
        raise OSError(f"{src}: no readable images")
    batch = np.stack([read_image(p, cfg.input_size) for p in files])
    with precision(cfg.precision):
        return export_images(model, cfg, batch, [p.stem for p in files], lam, out_dir)
