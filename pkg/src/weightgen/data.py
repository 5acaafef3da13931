"""Small image classification datasets available without downloads.

Every dataset is 10-class, single channel, 8x8 pixels in [0, 1]:

``digits``         sklearn's handwritten digits
``printed``        digits rendered from the bundled TrueType fonts with
                   random affine jitter and pixel noise
``digits_jitter``  handwritten digits with stronger affine jitter and noise
``letters``        letters A-J rendered like ``printed``

Datasets are cached as ``<root>/<tag>.npz`` with train/val/test arrays; a
directory may also hold user-provided archives under other tags.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

IMAGE_SIZE = 8
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


class DatasetError(LookupError):
    pass


@dataclass
class ImageDataset:
    tag: str
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_val: torch.Tensor
    y_val: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor

    @property
    def n_classes(self) -> int:
        return int(torch.cat([self.y_train, self.y_val, self.y_test]).max()) + 1

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    def split(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        return getattr(self, f"x_{name}"), getattr(self, f"y_{name}")

    def subsample(self, n_train: int, seed: int = 0) -> "ImageDataset":
        g = torch.Generator().manual_seed(seed)
        idx = torch.randperm(len(self.y_train), generator=g)[:n_train]
        return ImageDataset(self.tag, self.x_train[idx], self.y_train[idx], self.x_val, self.y_val,
                            self.x_test, self.y_test)


def _font_paths() -> list[Path]:
    import matplotlib

    font_dir = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    names = [
        "DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSans-Oblique.ttf", "DejaVuSansMono.ttf",
        "DejaVuSansMono-Bold.ttf", "DejaVuSerif.ttf", "DejaVuSerif-Bold.ttf", "DejaVuSerif-Italic.ttf",
        "STIXGeneral.ttf", "STIXGeneralBol.ttf", "STIXGeneralItalic.ttf", "cmr10.ttf", "cmss10.ttf",
        "cmtt10.ttf",
    ]
    return [font_dir / n for n in names if (font_dir / n).exists()]


def _affine_jitter(img: np.ndarray, rng: np.random.Generator, rot: float, shift: float, scale: float) -> np.ndarray:
    from PIL import Image

    pil = Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8))
    angle = rng.uniform(-rot, rot)
    pil = pil.rotate(angle, resample=Image.BILINEAR)
    s = rng.uniform(1 - scale, 1 + scale)
    w, h = pil.size
    dx, dy = rng.uniform(-shift, shift, size=2) * w
    # inverse affine map for PIL: output (x, y) samples input (a x + b y + c, d x + e y + f)
    cx, cy = w / 2, h / 2
    a = 1 / s
    pil = pil.transform(pil.size, Image.AFFINE, (a, 0, cx - a * cx - dx, 0, a, cy - a * cy - dy),
                        resample=Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32) / 255.0


def _render_glyphs(chars: str, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    from PIL import Image, ImageDraw, ImageFont

    fonts = _font_paths()
    if not fonts:
        raise DatasetError("no TrueType fonts found to render glyph datasets")
    rng = np.random.default_rng(seed)
    xs = np.zeros((n, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    ys = rng.integers(0, len(chars), size=n)
    cache: dict = {}
    for i in range(n):
        fp = fonts[rng.integers(len(fonts))]
        font = cache.setdefault((fp, 48), ImageFont.truetype(str(fp), 48))
        glyph = Image.new("L", (96, 96), 0)
        ImageDraw.Draw(glyph).text((16, 8), chars[ys[i]], fill=255, font=font)
        glyph = glyph.crop(glyph.getbbox() or (0, 0, 96, 96))
        gw, gh = glyph.size
        target = int(rng.integers(22, 27))
        r = target / max(gw, gh)
        glyph = glyph.resize((max(1, round(gw * r)), max(1, round(gh * r))), Image.BILINEAR)
        canvas = Image.new("L", (32, 32), 0)
        canvas.paste(glyph, ((32 - glyph.size[0]) // 2, (32 - glyph.size[1]) // 2))
        big = _affine_jitter(np.asarray(canvas, dtype=np.float32) / 255.0, rng, rot=12, shift=0.06, scale=0.12)
        small = Image.fromarray((big * 255).astype(np.uint8)).resize((IMAGE_SIZE, IMAGE_SIZE), Image.BOX)
        img = np.asarray(small, dtype=np.float32) / 255.0
        img = img / max(img.max(), 1e-6)
        img = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
        xs[i] = img
    return xs, ys.astype(np.int64)


def _sklearn_digits() -> tuple[np.ndarray, np.ndarray]:
    from sklearn.datasets import load_digits

    d = load_digits()
    return (d.images / 16.0).astype(np.float32), d.target.astype(np.int64)


def _jittered_digits(seed: int) -> tuple[np.ndarray, np.ndarray]:
    from PIL import Image

    x, y = _sklearn_digits()
    rng = np.random.default_rng(seed)
    out = np.zeros_like(x)
    for i in range(len(x)):
        up = np.asarray(Image.fromarray((x[i] * 255).astype(np.uint8)).resize((32, 32), Image.BILINEAR),
                        dtype=np.float32) / 255.0
        big = _affine_jitter(up, rng, rot=20, shift=0.08, scale=0.15)
        small = np.asarray(Image.fromarray((big * 255).astype(np.uint8)).resize((8, 8), Image.BOX),
                           dtype=np.float32) / 255.0
        out[i] = np.clip(small / max(small.max(), 1e-6) + rng.normal(0, 0.08, small.shape), 0, 1)
    return out, y


def _generate(tag: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if tag == "digits":
        return _sklearn_digits()
    if tag == "printed":
        return _render_glyphs("0123456789", 2000, seed)
    if tag == "digits_jitter":
        return _jittered_digits(seed)
    if tag == "letters":
        return _render_glyphs("ABCDEFGHIJ", 2000, seed + 1)
    raise DatasetError(f"unknown dataset tag {tag!r}")


BUILTIN = ("digits", "printed", "digits_jitter", "letters")


def _split(x: np.ndarray, y: np.ndarray, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(y))
    n_tr = int(SPLIT_FRACTIONS[0] * len(y))
    n_va = int(SPLIT_FRACTIONS[1] * len(y))
    parts = {"train": idx[:n_tr], "val": idx[n_tr : n_tr + n_va], "test": idx[n_tr + n_va :]}
    out = {}
    for k, ix in parts.items():
        out[f"x_{k}"] = x[ix][:, None]
        out[f"y_{k}"] = y[ix]
    return out


def default_root() -> Path:
    return Path(os.environ.get("WEIGHTGEN_DATA_ROOT", Path.home() / ".cache" / "weightgen" / "data"))


def load_dataset(tag: str, root: str | os.PathLike | None = None, seed: int = 0) -> ImageDataset:
    """Load ``<root>/<tag>.npz``; built-in tags are generated and cached on first use."""
    root = Path(root) if root is not None else default_root()
    path = root / f"{tag}.npz"
    if not path.exists():
        if tag not in BUILTIN:
            raise DatasetError(f"dataset {tag!r} not found under {root}")
        x, y = _generate(tag, seed)
        arrays = _split(x, y, seed)
        root.mkdir(parents=True, exist_ok=True)
        tmp = root / f".{tag}.{os.getpid()}.npz"
        np.savez_compressed(tmp, **arrays)
        tmp.replace(path)
    with np.load(path) as z:
        missing = {f"{p}_{s}" for p in "xy" for s in ("train", "val", "test")} - set(z.files)
        if missing:
            raise DatasetError(f"{path}: missing arrays {sorted(missing)}")
        t = {k: torch.from_numpy(z[k]) for k in z.files}
    return ImageDataset(
        tag,
        t["x_train"].float(), t["y_train"].long(),
        t["x_val"].float(), t["y_val"].long(),
        t["x_test"].float(), t["y_test"].long(),
    )


def adapt_inputs(x: torch.Tensor, in_channels: int, image_size: int) -> torch.Tensor:
    """Channel replication / averaging and bilinear resize to a network's native input."""
    if x.dim() == 3:
        x = x[:, None]
    c = x.shape[1]
    if c != in_channels:
        if c == 1:
            x = x.expand(-1, in_channels, -1, -1)
        elif in_channels == 1:
            x = x.mean(dim=1, keepdim=True)
        else:
            raise DatasetError(f"cannot adapt {c} channels to {in_channels}")
    if x.shape[-1] != image_size or x.shape[-2] != image_size:
        x = F.interpolate(x, size=(image_size, image_size), mode="bilinear", align_corners=False)
    return x.contiguous()


def batches(x: torch.Tensor, batch_size: int, seed: int | None = None):
    """Yield input batches, shuffled when ``seed`` is given."""
    if seed is None:
        order = torch.arange(len(x))
    else:
        order = torch.randperm(len(x), generator=torch.Generator().manual_seed(seed))
    for i in range(0, len(x), batch_size):
        yield x[order[i : i + batch_size]]
