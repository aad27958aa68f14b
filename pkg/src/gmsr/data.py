"""Hyperspectral cube files, PPM/PGM images, synthetic pairs and patching.

``HSC1`` cube layout (little-endian)::

    b"HSC1"                 magic
    u32 H, u32 W, u32 C     dimensions
    f32[C]                  band centre wavelengths in nm
    f32[C][H][W]            band planes, each row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

CUBE_MAGIC = b"HSC1"
MAX_CUBE_SAMPLES = 1 << 31


class DataFormatError(ValueError):
    """Malformed or inconsistent data file."""


def default_wavelengths(bands: int) -> np.ndarray:
    """Evenly spaced band centres over 400-700 nm (10 nm steps for 31 bands)."""
    if bands == 1:
        return np.array([550.0])
    return np.linspace(400.0, 700.0, bands)


@dataclass
class HsiCube:
    """H x W x C cube held at on-disk (float32) precision."""

    data: np.ndarray
    wavelengths_nm: np.ndarray = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataFormatError(f"cube must be H x W x C, got shape {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        if self.wavelengths_nm is None:
            self.wavelengths_nm = default_wavelengths(self.bands)
        self.wavelengths_nm = np.asarray(self.wavelengths_nm, dtype=np.float32)
        if self.wavelengths_nm.shape != (self.bands,):
            raise DataFormatError("need one wavelength per band")
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise DataFormatError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(self.data)) or self.data.min() < 0 or self.data.max() > 1:
            raise DataFormatError("cube samples must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def array(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, HsiCube)
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.wavelengths_nm, other.wavelengths_nm)
        )


def cube_write(cube: HsiCube, path) -> None:
    H, W, C = cube.data.shape
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<III", H, W, C))
        fh.write(cube.wavelengths_nm.astype("<f4").tobytes())
        fh.write(np.transpose(cube.data, (2, 0, 1)).astype("<f4").tobytes())


def cube_read(path) -> HsiCube:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header")
    if raw[:4] != CUBE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    H, W, C = struct.unpack_from("<III", raw, 4)
    if min(H, W, C) < 1:
        raise DataFormatError(f"{path}: zero dimension {H}x{W}x{C}")
    if H * W * C >= MAX_CUBE_SAMPLES:
        raise DataFormatError(f"{path}: dimensions {H}x{W}x{C} overflow")
    need = 16 + 4 * C + 4 * H * W * C
    if len(raw) != need:
        raise DataFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    wl = np.frombuffer(raw, dtype="<f4", count=C, offset=16)
    planes = np.frombuffer(raw, dtype="<f4", count=H * W * C, offset=16 + 4 * C)
    return HsiCube(np.transpose(planes.reshape(C, H, W), (1, 2, 0)), wl.copy())


# ---------------------------------------------------------------- PPM / PGM


def _read_pnm_header(raw: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    if raw[:2] != magic:
        raise DataFormatError(f"{path}: expected {magic.decode()} image")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad header") from exc
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit images are supported")
    return w, h, maxval, pos + 1


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an H x W x 3 image in [0, 1] (or uint8) as binary P6."""
    arr = rgb if rgb.dtype == np.uint8 else to_u8(rgb)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image into float64 H x W x 3 in [0, 1]."""
    raw = Path(path).read_bytes()
    w, h, _, off = _read_pnm_header(raw, b"P6", path)
    body = raw[off : off + w * h * 3]
    if len(body) != w * h * 3:
        raise DataFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, img: np.ndarray) -> tuple[float, float]:
    """Min-max scale a 2D map to 8 bits and write P5; returns the (lo, hi) scale."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi - lo <= 0 else (img - lo) / (hi - lo)
    arr = to_u8(scaled)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
    return lo, hi


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, _, off = _read_pnm_header(raw, b"P5", path)
    body = raw[off : off + w * h]
    if len(body) != w * h:
        raise DataFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------- synthesis


def spectral_response(bands: int) -> np.ndarray:
    """3 x B response: Gaussian rows centred on the red, green and blue thirds.

    Row order is R, G, B; each row is non-negative and sums to 1.
    """
    pos = np.linspace(0.0, 1.0, bands)
    centres = (5 / 6, 1 / 2, 1 / 6)
    rows = np.stack([np.exp(-((pos - c) ** 2) / (2 * (1 / 6) ** 2)) for c in centres])
    return rows / rows.sum(axis=1, keepdims=True)


def render_rgb(spectra: np.ndarray, response: np.ndarray | None = None) -> np.ndarray:
    spectra = np.asarray(spectra, dtype=np.float64)
    if response is None:
        response = spectral_response(spectra.shape[-1])
    return spectra @ response.T


@dataclass
class SynthPair:
    cube: HsiCube
    rgb: np.ndarray            # H x W x 3 float64, exactly response @ cube
    curvature_bound: float     # bound on |second spectral difference|
    endmembers: np.ndarray = field(repr=False, default=None)


def _smooth_field(rng: np.random.Generator, H: int, W: int, blobs: int = 3) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    out = np.zeros((H, W))
    for _ in range(blobs):
        cy, cx = rng.uniform(-0.2, 1.2, size=2)
        s = rng.uniform(0.15, 0.5)
        out += rng.uniform(0.5, 1.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return out


def _endmember(rng: np.random.Generator, bands: int) -> tuple[np.ndarray, float]:
    idx = np.arange(bands, dtype=np.float64)
    base = rng.uniform(0.05, 0.2)
    nb = int(rng.integers(1, 3))
    amps = rng.dirichlet(np.ones(nb)) * rng.uniform(0.3, 0.75)
    spec = np.full(bands, base)
    bound = 0.0
    for a in amps:
        mu = rng.uniform(0.0, bands - 1)
        sigma = rng.uniform(0.12, 0.35) * max(bands - 1, 1)
        spec += a * np.exp(-((idx - mu) ** 2) / (2 * sigma * sigma))
        bound += a / (sigma * sigma)
    return spec, bound


def synth_pair(rng: np.random.Generator, H: int, W: int, bands: int) -> SynthPair:
    k = int(rng.integers(3, 6))
    ems, bounds = zip(*(_endmember(rng, bands) for _ in range(k)))
    ems = np.stack(ems)
    logits = np.stack([_smooth_field(rng, H, W) for _ in range(k)]) * rng.uniform(2.0, 4.0)
    ab = np.exp(logits - logits.max(axis=0))
    ab /= ab.sum(axis=0)
    shade = 0.6 + 0.4 * np.tanh(_smooth_field(rng, H, W, blobs=2))
    spectra = shade[:, :, None] * np.einsum("khw,kc->hwc", ab, ems)
    cube = HsiCube(np.clip(spectra, 0.0, 1.0))
    rgb = render_rgb(cube.array())
    return SynthPair(cube, rgb, float(max(bounds)), ems)


def synth_dataset(count: int, H: int, W: int, bands: int, seed: int) -> list[SynthPair]:
    """Endmember-mixture cubes with smooth abundances, paired with rendered RGB."""
    if bands < 2:
        raise ValueError("synthetic cubes need at least 2 bands")
    if count < 1 or H < 1 or W < 1:
        raise ValueError("count, H and W must be positive")
    rng = np.random.default_rng(seed)
    return [synth_pair(rng, H, W, bands) for _ in range(count)]


# ---------------------------------------------------------------- patches


def patch_coords(H: int, W: int, patch: int, stride: int | None = None, mode: str = "grid",
                 count: int = 1, seed: int = 0) -> list[tuple[int, int]]:
    if patch < 1 or patch > min(H, W):
        raise ValueError(f"patch {patch} does not fit a {H}x{W} image")
    if mode == "grid":
        stride = stride or patch
        return [(i, j) for i in range(0, H - patch + 1, stride)
                for j in range(0, W - patch + 1, stride)]
    if mode == "random":
        rng = np.random.default_rng(seed)
        ys = rng.integers(0, H - patch + 1, size=count)
        xs = rng.integers(0, W - patch + 1, size=count)
        return list(zip(ys.tolist(), xs.tolist()))
    raise ValueError(f"unknown patch mode {mode!r}")


def extract_patches(rgb: np.ndarray, cube: np.ndarray, patch: int, stride: int | None = None,
                    seed: int = 0, mode: str = "grid", count: int = 1
                    ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Co-located (rgb, cube) patch pairs."""
    if rgb.shape[:2] != cube.shape[:2]:
        raise DataFormatError(f"rgb {rgb.shape} and cube {cube.shape} are not co-located")
    H, W = rgb.shape[:2]
    return [
        (rgb[i : i + patch, j : j + patch], cube[i : i + patch, j : j + patch])
        for i, j in patch_coords(H, W, patch, stride, mode, count, seed)
    ]


# ---------------------------------------------------------------- manifests


def write_dataset_manifest(path, entries: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rgb, cube in entries:
            fh.write(f"{rgb}\t{cube}\n")


def read_dataset_manifest(path) -> list[tuple[Path, Path]]:
    base = Path(path).resolve().parent
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{n}: expected rgb_path<TAB>cube_path")
        out.append(tuple(base / p if not os.path.isabs(p) else Path(p) for p in parts))
    if not out:
        raise DataFormatError(f"{path}: empty dataset manifest")
    return out


def load_pairs(manifest) -> list[tuple[str, np.ndarray, HsiCube]]:
    """(name, rgb, cube) for every manifest entry, shapes checked."""
    pairs = []
    for rgb_path, cube_path in read_dataset_manifest(manifest):
        try:
            rgb = read_ppm(rgb_path)
            cube = cube_read(cube_path)
        except OSError as exc:
            raise DataFormatError(f"cannot read {exc.filename}: {exc.strerror}") from exc
        if rgb.shape[:2] != cube.data.shape[:2]:
            raise DataFormatError(f"{rgb_path} and {cube_path} differ in size")
        pairs.append((Path(cube_path).stem, rgb, cube))
    return pairs
