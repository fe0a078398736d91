"""Serialization, image I/O, manifests and the synthetic texture benchmark.

Binary layouts (all integers little-endian):

TensorFile::

    b"BTNS" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u32 rank | u32 dims[rank]
    | payload: row-major scalars, little-endian

Checkpoint::

    b"BCKP" | u32 version=1 | u32 count
    | count x (u32 name_len | utf-8 name | embedded TensorFile)
    | u64 offsets[count]   (absolute byte offset of each entry)
    | u64 table_offset     (absolute byte offset of the offsets table)
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import Tensor, make_rng

TENSOR_MAGIC = b"BTNS"
CKPT_MAGIC = b"BCKP"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


# --- tensor files ----------------------------------------------------------

def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    code = _DTYPE_CODES[arr.dtype]
    head = TENSOR_MAGIC + struct.pack("<IBI", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def tensor_from_stream(buf) -> np.ndarray:
    magic = _read_exact(buf, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<IBI", _read_exact(buf, 9, "tensor header"))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if rank < 1:
        raise FormatError("tensor rank must be >= 1")
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank, "tensor dims"))
    if any(d < 1 for d in dims):
        raise FormatError(f"tensor extents must be >= 1, got {dims}")
    dt = _CODE_DTYPES[code]
    n = int(np.prod(dims))
    payload = _read_exact(buf, n * dt.itemsize, "tensor payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    arr = tensor_from_stream(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return arr


def tensor_save(t, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def tensor_load(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# --- checkpoints -----------------------------------------------------------

def checkpoint_to_bytes(entries: Mapping[str, object]) -> bytes:
    out = bytearray(CKPT_MAGIC + struct.pack("<II", VERSION, len(entries)))
    offsets = []
    for name, t in entries.items():
        raw = name.encode("utf-8")
        offsets.append(len(out))
        out += struct.pack("<I", len(raw)) + raw + tensor_to_bytes(t)
    table = len(out)
    out += struct.pack(f"<{len(offsets)}Q", *offsets) + struct.pack("<Q", table)
    return bytes(out)


def checkpoint_from_bytes(data: bytes) -> Dict[str, np.ndarray]:
    buf = io.BytesIO(data)
    magic = _read_exact(buf, 4, "checkpoint magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    version, count = struct.unpack("<II", _read_exact(buf, 8, "checkpoint header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    entries, offsets = {}, []
    for _ in range(count):
        offsets.append(buf.tell())
        (nlen,) = struct.unpack("<I", _read_exact(buf, 4, "entry name length"))
        try:
            name = _read_exact(buf, nlen, "entry name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not valid UTF-8") from exc
        if name in entries:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        entries[name] = tensor_from_stream(buf)
    table = buf.tell()
    stored = struct.unpack(f"<{count}Q", _read_exact(buf, 8 * count, "offset table"))
    (table_offset,) = struct.unpack("<Q", _read_exact(buf, 8, "table offset"))
    if list(stored) != offsets or table_offset != table:
        raise FormatError("checkpoint offset table does not match entries")
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return entries


def checkpoint_save(entries: Mapping[str, object], path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(entries))


def checkpoint_load(path) -> Dict[str, np.ndarray]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def text_to_tensor(text: str) -> np.ndarray:
    """Embed UTF-8 text in a checkpoint as an f64 vector of byte values."""
    raw = text.encode("utf-8") or b"\0"
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def tensor_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8).tolist()).rstrip(b"\0").decode("utf-8")


# --- PPM images ------------------------------------------------------------

def _ppm_tokens(data: bytes, count: int) -> Tuple[list, int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("malformed PPM header")
        tokens.append(data[start:pos])
    return tokens, pos


def ppm_decode(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise FormatError(f"unsupported image kind {data[:2]!r}; only binary P6 is read")
    try:
        (_, w, h, maxval), pos = _ppm_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError("malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"bad PPM extents {w}x{h}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("malformed PPM header")
    payload = data[pos + 1:]
    if len(payload) < w * h * 3:
        raise FormatError(f"truncated PPM payload: {len(payload)} of {w * h * 3} bytes")
    pix = np.frombuffer(payload[:w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64) / 255.0


def ppm_encode(image) -> bytes:
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM needs H x W x 3, got {img.shape}")
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def ppm_load(path) -> np.ndarray:
    return ppm_decode(Path(path).read_bytes())


def ppm_save(image, path) -> None:
    Path(path).write_bytes(ppm_encode(image))


# --- geometric transforms --------------------------------------------------

def _resize_axis(img: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = img.shape[axis]
    if n_in == n_out:
        return img
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * img.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    return a + (b - a) * frac


def resize_bilinear(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize using half-pixel centers (source clamped at the borders)."""
    if new_h < 1 or new_w < 1:
        raise ConfigError(f"resize target must be >= 1x1, got {new_h}x{new_w}")
    img = np.asarray(image, dtype=np.float64)
    return _resize_axis(_resize_axis(img, new_h, 0), new_w, 1)


def hflip(image) -> np.ndarray:
    """Mirror left-right (reverse the column axis, which is axis -2 for H x W x C)."""
    img = np.asarray(image)
    return img[..., ::-1, :].copy() if img.ndim >= 3 else img[..., ::-1].copy()


# --- manifests -------------------------------------------------------------

@dataclass
class Manifest:
    paths: List[str]
    labels: List[int]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def num_classes(self) -> int:
        return max(self.labels) + 1 if self.labels else 0

    def load_images(self) -> np.ndarray:
        return np.stack([ppm_load(self.root / p) for p in self.paths])


def manifest_load(path, num_classes: int | None = None) -> Manifest:
    path = Path(path)
    paths, labels, seen = [], [], {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'path<TAB>label'")
        rel, lab = parts
        try:
            label = int(lab)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: label {lab!r} is not an integer") from exc
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise FormatError(f"{path}:{lineno}: label {label} out of range")
        if rel in seen:
            raise FormatError(f"{path}:{lineno}: duplicate path {rel!r} (first on line {seen[rel]})")
        seen[rel] = lineno
        paths.append(rel)
        labels.append(label)
    return Manifest(paths, labels, path.parent)


def manifest_save(manifest: Manifest, path) -> None:
    lines = [f"{p}\t{l}\n" for p, l in zip(manifest.paths, manifest.labels)]
    Path(path).write_text("".join(lines))


# --- synthetic orderless textures ------------------------------------------

@dataclass
class SyntheticTextureSpec:
    """Desk-scale texture benchmark.

    Every image contains the same ingredients: gratings in two colors, two
    orientations and two frequencies, plus dots in two colors and two radii,
    scattered uniformly on a torus.  A class fixes how these attributes pair up
    (which color goes with which orientation, which frequency goes with which
    orientation, which dot color is large), so classes agree in first-order
    statistics and differ in local co-occurrences.  Classes beyond eight also
    change the dot density.
    """
    num_classes: int = 8
    image_size: int = 64
    n_train: int = 100
    n_val: int = 0
    n_test: int = 50
    noise: float = 0.05
    gratings: int = 6
    dots: int = 10
    grating_radius: tuple = (7.0, 11.0)
    dot_radius: tuple = (1.5, 3.5)
    frequencies: tuple = (0.12, 0.28)
    orientation_jitter: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.image_size < 4:
            raise ConfigError(f"image_size must be >= 4, got {self.image_size}")
        for name in ("n_train", "n_val", "n_test", "gratings", "dots"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    @classmethod
    def from_text(cls, text: str) -> "SyntheticTextureSpec":
        kv = parse_key_values(text)
        spec = cls()
        fields_ = {f.name: f for f in spec.__dataclass_fields__.values()}
        aliases = {"classes": "num_classes", "K": "num_classes", "size": "image_size",
                   "train": "n_train", "val": "n_val", "test": "n_test"}
        for key, raw in kv.items():
            name = aliases.get(key, key)
            if name not in fields_:
                raise ConfigError(f"unknown synth key {key!r}")
            cur = getattr(spec, name)
            try:
                if isinstance(cur, tuple):
                    val = tuple(float(x) for x in raw.split(","))
                elif isinstance(cur, int):
                    val = int(raw)
                else:
                    val = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            setattr(spec, name, val)
        spec.validate()
        return spec


_COLORS = np.array([[0.85, 0.35, 0.20], [0.20, 0.45, 0.85]])


def parse_key_values(text: str) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _torus_offsets(n: int, cy: float, cx: float):
    ys = np.arange(n)[:, None] - cy
    xs = np.arange(n)[None, :] - cx
    ys = (ys + n / 2) % n - n / 2
    xs = (xs + n / 2) % n - n / 2
    return ys, xs


def render_texture(label: int, spec: SyntheticTextureSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    bits = [(label >> b) & 1 for b in range(3)]
    density = 1.0 + 0.5 * (label // 8)
    img = np.full((n, n, 3), 0.5) + rng.normal(0.0, 0.03, size=3)
    # grating kinds: orientation o in {0, pi/2}; color and frequency follow the class pairing
    for g in range(spec.gratings):
        o = g % 2
        color = _COLORS[o ^ bits[0]]
        freq = spec.frequencies[o ^ bits[2]]
        theta = o * np.pi / 2 + rng.uniform(-1, 1) * spec.orientation_jitter
        cy, cx = rng.uniform(0, n, size=2)
        r = rng.uniform(*spec.grating_radius)
        ys, xs = _torus_offsets(n, cy, cx)
        mask = np.clip(r - np.sqrt(ys ** 2 + xs ** 2), 0.0, 1.0)[..., None]
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xs + np.sin(theta) * ys) + phase)
        patch = wave[..., None] * color + (1 - wave[..., None]) * 0.15
        img = img * (1 - mask) + patch * mask
    for d in range(int(round(spec.dots * density))):
        c = d % 2
        big = c ^ bits[1]
        color = _COLORS[c]
        r = spec.dot_radius[big] * rng.uniform(0.85, 1.15)
        cy, cx = rng.uniform(0, n, size=2)
        ys, xs = _torus_offsets(n, cy, cx)
        mask = np.clip(r - np.sqrt(ys ** 2 + xs ** 2) + 0.5, 0.0, 1.0)[..., None]
        img = img * (1 - mask) + color * mask
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


SPLITS = ("train", "val", "test")


def synth_arrays(spec: SyntheticTextureSpec) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Generate every split in memory: split -> (images N x H x W x 3, labels)."""
    spec.validate()
    out = {}
    for s_idx, split in enumerate(SPLITS):
        count = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}[split]
        rng = make_rng(spec.seed * 1000003 + s_idx)
        imgs, labels = [], []
        for i in range(count):
            for k in range(spec.num_classes):
                imgs.append(render_texture(k, spec, rng))
                labels.append(k)
        shape = (0, spec.image_size, spec.image_size, 3)
        out[split] = (np.stack(imgs) if imgs else np.zeros(shape), np.array(labels, dtype=int))
    return out


def synth_generate(spec: SyntheticTextureSpec, out_dir) -> Dict[str, Manifest]:
    """Write quantized PPM images plus ``train.txt``/``val.txt``/``test.txt`` manifests."""
    spec.validate()
    out_dir = Path(out_dir)
    data = synth_arrays(spec)
    manifests = {}
    for split, (imgs, labels) in data.items():
        d = out_dir / "images" / split
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, img in enumerate(imgs):
            rel = f"images/{split}/{i:05d}.ppm"
            ppm_save(img, out_dir / rel)
            paths.append(rel)
        m = Manifest(paths, labels.tolist(), out_dir)
        manifest_save(m, out_dir / f"{split}.txt")
        manifests[split] = m
    return manifests
