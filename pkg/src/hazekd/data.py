"""Image I/O and desk-scale haze synthesis.

Hazy images are produced from clear ones with the atmospheric scattering
model I = J*t + A*(1-t), where t is a per-pixel transmission map in (0,1]
and A a global atmospheric light scalar.  Since no real haze dataset ships
with the package, ``build_desk_dataset`` renders small procedural clear
images (smooth gradients plus random rectangles/disks for edge content),
generates smooth transmission maps from a blurred-noise pseudo-depth field
via t = exp(-beta*d), and writes the standard directory layout::

    <root>/clear/<id>.png   8-bit RGB
    <root>/hazy/<id>.png    8-bit RGB
    <root>/trans/<id>.png   16-bit grayscale
    <root>/index.tsv        id, clear_path, hazy_path, trans_path, split
    <root>/meta.json        per-id atmospheric light and beta

An index built this way can be swapped for one pointing at a real dataset
with the same layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import tensor as T


class FormatError(ValueError):
    """File exists but is not a supported image format."""


class ImageIOError(IOError):
    """File missing, unreadable, or corrupt; message includes the path."""


@dataclass
class ImageRGB:
    """H x W x 3 float32 pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise FormatError(f"ImageRGB needs HxWx3 pixels, got {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("ImageRGB pixels must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def to_tensor(self):
        """Lossless view as a (1, 3, H, W) tensor."""
        return T.constant(self.pixels.transpose(2, 0, 1)[None])

    @staticmethod
    def from_tensor(t, clamp=False):
        data = t.data
        if data.ndim == 4:
            if data.shape[0] != 1:
                raise T.DimensionError(
                    f"from_tensor expects batch size 1, got {data.shape}")
            data = data[0]
        if clamp:
            data = np.clip(data, 0.0, 1.0)
        return ImageRGB(data.transpose(1, 2, 0))


@dataclass
class TransmissionMap:
    """H x W per-pixel transmission values in (0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise FormatError(f"TransmissionMap needs HxW values, got {v.shape}")
        if v.min() <= 0.0 or v.max() > 1.0:
            raise ValueError("transmission values must lie in (0, 1]")
        self.values = v


@dataclass
class HazePair:
    clear: ImageRGB
    hazy: ImageRGB
    t: TransmissionMap
    A: float
    id: str

    def check(self, tol=1.0 / 255 + 1e-5):
        """Assert the pair is consistent with the scattering model."""
        expect = _scatter(self.clear.pixels, self.t.values, self.A)
        err = float(np.max(np.abs(self.hazy.pixels - expect)))
        if err > tol:
            raise ValueError(f"hazy image deviates from model by {err:.5f}")
        return err


def _scatter(clear_px, t_values, a):
    t3 = t_values[:, :, None]
    return np.clip(clear_px * t3 + a * (1.0 - t3), 0.0, 1.0).astype(np.float32)


def synthesize_haze(clear, t, a):
    """Apply the scattering model I = J*t + A*(1-t), clamped to [0, 1]."""
    if np.any(t.values <= 0.0):
        raise ValueError("transmission must be strictly positive everywhere")
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"atmospheric light {a} outside [0, 1]")
    if t.values.shape != clear.pixels.shape[:2]:
        raise T.DimensionError(
            f"transmission {t.values.shape} vs image "
            f"{clear.pixels.shape[:2]}")
    return ImageRGB(_scatter(clear.pixels, t.values, a))


def invert_haze(hazy, t, a):
    """Analytic inversion J = (I - A*(1-t)) / t of the scattering model."""
    t3 = t.values[:, :, None]
    j = (hazy.pixels - a * (1.0 - t3)) / t3
    return ImageRGB(np.clip(j, 0.0, 1.0))


def transmission_from_depth(depth, beta):
    """t = exp(-beta * d) for a depth proxy d in [0, 1]."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return TransmissionMap(np.exp(-beta * np.asarray(depth, dtype=np.float32)))


def generate_transmission(height, width, beta, seed):
    """Smooth random transmission map, deterministic per seed.

    The pseudo-depth field is uniform noise blurred at radius min(H,W)/8
    (Gaussian sigma = radius/2), min-max normalised to [0, 1].
    """
    rng = np.random.default_rng(seed)
    noise = rng.random((height, width))
    sigma = max(min(height, width) / 16.0, 1.0)
    depth = gaussian_filter(noise, sigma=sigma, mode="reflect")
    lo, hi = depth.min(), depth.max()
    if hi - lo < 1e-12:
        depth = np.full_like(depth, 0.5)
    else:
        depth = (depth - lo) / (hi - lo)
    return transmission_from_depth(depth, beta)


# --------------------------------------------------------------------------
# Bicubic resampling.
# --------------------------------------------------------------------------

def _keys_cubic(u):
    """Catmull-Rom style cubic kernel (a = -0.5), support |u| <= 2."""
    u = np.abs(u)
    out = np.zeros_like(u)
    inner = u <= 1
    outer = (u > 1) & (u < 2)
    out[inner] = (1.5 * u[inner] - 2.5) * u[inner] ** 2 + 1.0
    out[outer] = ((-0.5 * u[outer] + 2.5) * u[outer] - 4.0) * u[outer] + 2.0
    return out


def _bicubic_axis_down(arr, factor, axis):
    """Integer-factor bicubic decimation along one axis with an antialiasing
    kernel (stretched by the factor) and reflected edges."""
    n = arr.shape[axis]
    if n % factor:
        raise ValueError(f"axis length {n} not divisible by {factor}")
    out_n = n // factor
    # output centre i maps to input coordinate i*f + (f-1)/2; taps cover
    # +-2 kernel units, i.e. +-2f input samples
    half = (factor - 1) / 2.0
    offsets = np.arange(-2 * factor + 1, 2 * factor + 1)
    weights = _keys_cubic((offsets - half) / factor)
    weights = weights / weights.sum()
    idx = (np.arange(out_n) * factor)[:, None] + offsets[None, :]
    idx = _reflect_index(idx, n)
    moved = np.moveaxis(arr, axis, 0)
    gathered = moved[idx]  # (out_n, taps, ...)
    res = np.tensordot(weights, gathered, axes=(0, 1))
    return np.moveaxis(res, 0, axis)


def _reflect_index(idx, n):
    """Reflect out-of-range indices (edge sample not repeated)."""
    idx = np.abs(idx)
    period = 2 * n - 2 if n > 1 else 1
    idx = idx % period
    return np.where(idx >= n, period - idx, idx)


def downsample(image, factor):
    """Bicubic downsample by an integer factor of 2 or 4; dimensions not
    divisible by the factor are reflect-padded first."""
    if factor not in (2, 4):
        raise ValueError(f"downsample factor must be 2 or 4, got {factor}")
    px = image.pixels.astype(np.float64)
    pad_h = (-px.shape[0]) % factor
    pad_w = (-px.shape[1]) % factor
    if pad_h or pad_w:
        px = np.pad(px, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    px = _bicubic_axis_down(px, factor, axis=0)
    px = _bicubic_axis_down(px, factor, axis=1)
    return ImageRGB(np.clip(px, 0.0, 1.0))


# --------------------------------------------------------------------------
# PNG / PPM I/O.
# --------------------------------------------------------------------------

def save_image(image, path):
    """Write 8-bit RGB; format chosen by extension (.png or .ppm)."""
    path = Path(path)
    data = np.round(image.pixels * 255.0).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (image.width, image.height))
            fh.write(data.tobytes())
    else:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path):
    """Read a PNG or binary PPM (P6, maxval 255) as ImageRGB."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    if raw[:2] == b"P6":
        return _decode_ppm(raw, path)
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise FormatError(f"{path}: expected RGB image, got {img.mode}")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except FormatError:
        raise
    except Exception as exc:
        raise ImageIOError(f"cannot decode image {path}: {exc}") from exc
    return ImageRGB(arr)


def _decode_ppm(raw, path):
    pos = 0
    fields = []
    while len(fields) < 4:
        nxt = _ppm_token(raw, pos, path)
        if nxt is None:
            raise ImageIOError(f"truncated PPM header in {path}")
        token, pos = nxt
        fields.append(token)
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 PPM supported, got {maxval}")
    need = width * height * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ImageIOError(f"{path}: PPM payload truncated "
                           f"({len(body)} of {need} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return ImageRGB(arr.astype(np.float32) / 255.0)


def _ppm_token(raw, pos, path):
    while pos < len(raw):
        ch = raw[pos:pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            return raw[start:pos], pos + 1
    return None


def save_transmission(t, path):
    """16-bit grayscale PNG (8 bits would dominate the model round-trip
    error budget)."""
    data = np.round(t.values.astype(np.float64) * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path, format="PNG")


def load_transmission(path):
    try:
        with Image.open(path) as img:
            scale = 255.0 if img.mode == "L" else 65535.0
            arr = np.asarray(img, dtype=np.float64)
    except Exception as exc:
        raise ImageIOError(f"cannot decode transmission map {path}: {exc}") from exc
    if arr.ndim != 2:
        raise FormatError(f"{path}: transmission map must be grayscale")
    values = np.clip(arr / scale, 1e-6, 1.0)
    return TransmissionMap(values.astype(np.float32))


# --------------------------------------------------------------------------
# Dataset index.
# --------------------------------------------------------------------------

@dataclass
class IndexEntry:
    id: str
    clear_path: str
    hazy_path: str
    trans_path: str
    split: str


@dataclass
class DatasetIndex:
    root: Path
    entries: list = field(default_factory=list)

    def split(self, tag):
        return [e for e in self.entries if e.split == tag]

    def save(self):
        lines = ["id\tclear_path\thazy_path\ttrans_path\tsplit"]
        for e in self.entries:
            lines.append("\t".join(
                (e.id, e.clear_path, e.hazy_path, e.trans_path, e.split)))
        (self.root / "index.tsv").write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(root):
        root = Path(root)
        path = root / "index.tsv"
        if not path.exists():
            raise ImageIOError(f"no index.tsv under {root}")
        rows = path.read_text().strip().split("\n")
        entries = [IndexEntry(*row.split("\t")) for row in rows[1:]]
        return DatasetIndex(root=root, entries=entries)

    def validate(self):
        seen = {}
        for e in self.entries:
            if e.id in seen and seen[e.id] != e.split:
                raise ValueError(f"id {e.id} appears in two splits")
            seen[e.id] = e.split
            for rel in (e.clear_path, e.hazy_path, e.trans_path):
                if rel and not (self.root / rel).exists():
                    raise ImageIOError(f"missing dataset file {self.root / rel}")

    def load_pair(self, entry):
        meta = self.meta()
        clear = load_image(self.root / entry.clear_path)
        hazy = load_image(self.root / entry.hazy_path)
        t = load_transmission(self.root / entry.trans_path)
        a = float(meta[entry.id]["A"])
        return HazePair(clear=clear, hazy=hazy, t=t, A=a, id=entry.id)

    def meta(self):
        path = self.root / "meta.json"
        if not path.exists():
            return {}
        return json.loads(path.read_text())


# --------------------------------------------------------------------------
# Procedural clear images and the desk-scale dataset.
# --------------------------------------------------------------------------

def procedural_clear_image(rng, height, width):
    """Smooth gradient background with random rectangles and disks on top."""
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width),
                         indexing="ij")
    img = np.zeros((height, width, 3), dtype=np.float64)
    for c in range(3):
        gx, gy = rng.uniform(-1, 1, 2)
        base = rng.uniform(0.15, 0.85)
        plane = base + 0.35 * (gx * xx + gy * yy)
        texture = gaussian_filter(rng.random((height, width)),
                                  sigma=max(min(height, width) / 16, 1))
        texture = texture - texture.mean()
        img[:, :, c] = plane + 1.5 * texture
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.05, 0.95, 3)
        cy, cx = rng.uniform(0.1, 0.9) * height, rng.uniform(0.1, 0.9) * width
        if rng.random() < 0.5:
            hh = rng.uniform(0.08, 0.3) * height
            ww = rng.uniform(0.08, 0.3) * width
            mask = (np.abs(yy * height - cy) < hh) & (np.abs(xx * width - cx) < ww)
        else:
            r = rng.uniform(0.06, 0.25) * min(height, width)
            mask = (yy * height - cy) ** 2 + (xx * width - cx) ** 2 < r ** 2
        img[mask] = color
    return ImageRGB(np.clip(img, 0.0, 1.0).astype(np.float32))


def synthesize_pair(rng, clear, pair_id):
    """Draw haze parameters and apply the scattering model to one image."""
    beta = float(rng.uniform(0.6, 1.8))
    a = float(rng.uniform(0.7, 1.0))
    t = generate_transmission(clear.height, clear.width, beta,
                              seed=int(rng.integers(0, 2 ** 31)))
    hazy = synthesize_haze(clear, t, a)
    return HazePair(clear=clear, hazy=hazy, t=t, A=a, id=pair_id), beta


def split_counts(n):
    """80/10/10 split; train gets floor(0.8n), val floor(0.1n), test the rest."""
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    return n_train, n_val, n - n_train - n_val


def build_desk_dataset(n_images, size, seed, root):
    """Generate a small fully synthetic dataset on disk; deterministic per
    seed (identical bytes across runs).  ``size`` is (height, width),
    at least 32x32."""
    height, width = size
    if height < 32 or width < 32:
        raise ValueError(f"dataset images must be at least 32x32, got {size}")
    root = Path(root)
    for sub in ("clear", "hazy", "trans"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_counts(n_images)
    children = np.random.SeedSequence(seed).spawn(n_images)
    index = DatasetIndex(root=root)
    meta = {}
    for i in range(n_images):
        rng = np.random.default_rng(children[i])
        pair_id = f"img_{i:04d}"
        clear = procedural_clear_image(rng, height, width)
        pair, beta = synthesize_pair(rng, clear, pair_id)
        save_image(pair.clear, root / "clear" / f"{pair_id}.png")
        save_image(pair.hazy, root / "hazy" / f"{pair_id}.png")
        save_transmission(pair.t, root / "trans" / f"{pair_id}.png")
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        index.entries.append(IndexEntry(
            id=pair_id,
            clear_path=f"clear/{pair_id}.png",
            hazy_path=f"hazy/{pair_id}.png",
            trans_path=f"trans/{pair_id}.png",
            split=split))
        meta[pair_id] = {"A": pair.A, "beta": beta}
    index.save()
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return index


def images_to_tensor(images):
    """Stack ImageRGB list into a (B, 3, H, W) constant tensor."""
    batch = np.stack([im.pixels.transpose(2, 0, 1) for im in images])
    return T.constant(batch)
