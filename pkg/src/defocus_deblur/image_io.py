"""Image loading, saving, and quality metrics.

Conventions used throughout the package:

* an image is a float64 array of shape (H, W) or (H, W, 3) with every
  intensity in [0, 1];
* a mask is a float64 array of shape (H, W) whose entries are exactly
  0.0 or 1.0;
* a defocus map is a nonnegative float64 array of shape (H, W).

Supported file formats: PGM (P2/P5), PPM (P3/P6) and 8-bit PNG
(grayscale or RGB). Intensities are normalized by the file's maxval on
load. Masks read from files treat any raw value > 127 as 1.
"""
from __future__ import annotations

import os

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    """Raised for unreadable, corrupt, or unsupported image files."""


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the image invariants and return the array as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("empty image")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite intensities")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities outside [0, 1]")
    return img


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check the binary-mask invariants and return the array as float64."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask entries must be exactly 0 or 1")
    return mask


def _tokenize_pnm_header(data: bytes, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated integer tokens, skipping # comments.

    Returns the tokens and the offset of the byte right after the last
    token's single trailing whitespace character.
    """
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            eol = data.find(b"\n", pos)
            if eol < 0:
                raise ImageFormatError("corrupt header: unterminated comment")
            pos = eol + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("corrupt header: truncated file")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError as exc:
            raise ImageFormatError(f"corrupt header: {data[start:pos]!r}") from exc
    # exactly one whitespace byte separates the header from binary raster data
    return tokens, pos + 1


def _load_pnm(path: str) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 2:
        raise ImageFormatError(f"{path}: not a PNM file")
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported PNM magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    binary = magic in (b"P5", b"P6")
    (width, height, maxval), raster_pos = _tokenize_pnm_header(data[2:], 3)
    raster_pos += 2
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid dimensions {width}x{height}")
    if not (1 <= maxval <= 255):
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    n = width * height * channels
    if binary:
        raster = data[raster_pos : raster_pos + n]
        if len(raster) < n:
            raise ImageFormatError(f"{path}: truncated raster data")
        values = np.frombuffer(raster, dtype=np.uint8, count=n)
    else:
        fields = data[raster_pos - 1 :].split()
        if len(fields) < n:
            raise ImageFormatError(f"{path}: truncated raster data")
        try:
            values = np.array([int(v) for v in fields[:n]], dtype=np.int64)
        except ValueError as exc:
            raise ImageFormatError(f"{path}: bad ASCII raster") from exc
    if values.max(initial=0) > maxval:
        raise ImageFormatError(f"{path}: sample exceeds maxval {maxval}")
    if channels == 1:
        raw = values.reshape(height, width)
    else:
        raw = values.reshape(height, width, 3)
    return raw.astype(np.int64), maxval


def _load_png(path: str) -> tuple[np.ndarray, int]:
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            if im.mode not in ("L", "RGB"):
                raise ImageFormatError(
                    f"{path}: unsupported PNG mode {im.mode!r} (only 8-bit L/RGB)"
                )
            raw = np.asarray(im, dtype=np.int64)
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return raw, 255


def _load_raw(path: str) -> tuple[np.ndarray, int]:
    """Load raw integer samples and the file's maxval."""
    if not os.path.isfile(path):
        raise ImageFormatError(f"{path}: no such file")
    if os.path.splitext(path)[1].lower() == ".png":
        return _load_png(path)
    return _load_pnm(path)


def load_image(path: str) -> np.ndarray:
    """Load an image and normalize intensities to [0, 1] by the file maxval."""
    raw, maxval = _load_raw(path)
    return raw.astype(np.float64) / maxval


def save_image(img: np.ndarray, path: str) -> None:
    """Save an image as 8-bit PGM (gray), PPM (color) or PNG by extension."""
    img = validate_image(img)
    q = np.rint(img * 255.0).astype(np.uint8)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        if q.ndim != 2:
            raise ValueError("PGM stores single-channel images only")
        header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header + q.tobytes())
    elif ext == ".ppm":
        if q.ndim != 3:
            raise ValueError("PPM stores 3-channel images only")
        header = f"P6\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header + q.tobytes())
    elif ext == ".png":
        from PIL import Image as PILImage

        PILImage.fromarray(q, mode="L" if q.ndim == 2 else "RGB").save(path)
    else:
        raise ValueError(f"unsupported output extension {ext!r}")


def load_mask(path: str) -> np.ndarray:
    """Load a binary mask; any raw value > 127 counts as 1."""
    raw, maxval = _load_raw(path)
    if raw.ndim == 3:
        raw = np.rint(
            LUMA_WEIGHTS[0] * raw[:, :, 0]
            + LUMA_WEIGHTS[1] * raw[:, :, 1]
            + LUMA_WEIGHTS[2] * raw[:, :, 2]
        )
    threshold = 127.0 * maxval / 255.0
    return (raw > threshold).astype(np.float64)


def load_labels(path: str) -> np.ndarray:
    """Load an integer label map (raw pixel value = layer index)."""
    raw, _ = _load_raw(path)
    if raw.ndim != 2:
        raise ImageFormatError(f"{path}: label maps must be single-channel")
    return raw.astype(np.int64)


def to_luminance(img: np.ndarray) -> np.ndarray:
    """Collapse an RGB image to luminance; identity for single-channel input."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")
    r, g, b = LUMA_WEIGHTS
    return r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2]


def psnr(a: np.ndarray, b: np.ndarray, region: np.ndarray | None = None) -> float:
    """PSNR in dB on the [0, 1] scale; returns inf when the MSE is zero.

    `region` restricts the metric to the pixels where the (H, W) mask is
    nonzero; for color images the mask applies to all channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if region is not None:
        region = np.asarray(region)
        if region.shape != a.shape[:2]:
            raise ValueError(f"region shape {region.shape} does not match {a.shape[:2]}")
        sel = region != 0
        if not sel.any():
            raise ValueError("empty region")
        sq = sq[sel]
    mse = float(np.mean(sq))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
