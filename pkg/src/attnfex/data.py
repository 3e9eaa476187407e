"""Dataset ingestion, manifests, and the feature-table interchange format.

Images are decoded with Pillow, resized bilinearly (half-pixel centers,
edges clamped) and normalized to float64 RGB in [0, 1].  A manifest is a
line-oriented text file

    #manifest\tv1
    #num_classes\t<K>
    #classes\t<name_0>\t...\t<name_{K-1}>
    <path>\t<label>\t<train|test>

with paths resolved relative to the manifest's directory.  Feature tables
travel between pipeline stages either as a binary container (magic
``FTBL``, version byte, header, rows) or as CSV with 17 significant
digits.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DimensionError, DomainError, FormatError
from .rng import Rng, derive_seed

TRAIN = "train"
TEST = "test"

_MAGIC = b"FTBL"
_VERSION = 1


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    label: int
    split: str = TRAIN


@dataclass
class DatasetManifest:
    name: str
    class_names: list[str]
    samples: list[tuple[str, int, str]]  # (path, label, split)
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split_samples(self, split: str) -> list[tuple[str, int, str]]:
        return [s for s in self.samples if s[2] == split]

    def validate(self) -> None:
        for path, label, split in self.samples:
            if not 0 <= label < self.num_classes:
                raise DomainError(f"label {label} out of range for {path}")
            if split not in (TRAIN, TEST):
                raise DomainError(f"unknown split {split!r} for {path}")


def bilinear_resize(pixels: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resize (H, W) or (H, W, C) array to ``target`` with bilinear sampling."""
    out_h, out_w = int(target[0]), int(target[1])
    if out_h <= 0 or out_w <= 0:
        raise DomainError(f"resize target must be positive, got {target}")
    pixels = np.asarray(pixels, dtype=np.float64)
    in_h, in_w = pixels.shape[0], pixels.shape[1]

    sy = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(sy).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(sy - y0, 0.0, 1.0)
    wx = np.clip(sx - x0, 0.0, 1.0)

    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
        squeeze = True
    else:
        squeeze = False
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = (1.0 - wx) * pixels[y0[:, None], x0[None, :]] + wx * pixels[y0[:, None], x1[None, :]]
    bot = (1.0 - wx) * pixels[y1[:, None], x0[None, :]] + wx * pixels[y1[:, None], x1[None, :]]
    out = (1.0 - wy) * top + wy * bot
    return out[:, :, 0] if squeeze else out


def _to_unit_rgb(img: Image.Image) -> np.ndarray:
    """Decode a PIL image to (H, W, 3) float64 in [0, 1]."""
    mode = img.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
        return np.repeat(np.clip(arr, 0.0, 1.0)[:, :, None], 3, axis=2)
    if mode not in ("L", "LA", "RGB", "RGBA"):
        img = img.convert("RGB")
        mode = "RGB"
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if mode == "L":
        return np.repeat(arr[:, :, None], 3, axis=2)
    if mode == "LA":
        return np.repeat(arr[:, :, 0:1], 3, axis=2)
    if mode == "RGBA":
        return arr[:, :, :3]
    return arr


def ingest_image(path: str | Path, target: tuple[int, int]) -> np.ndarray:
    """Load, normalize, and resize one image to (target_h, target_w, 3)."""
    if target[0] <= 0 or target[1] <= 0:
        raise DomainError(f"ingest target must be positive, got {target}")
    try:
        with Image.open(path) as img:
            img.load()
            pixels = _to_unit_rgb(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc
    return bilinear_resize(pixels, target)


def load_samples(
    manifest: DatasetManifest, split: str, target: tuple[int, int]
) -> list[ImageSample]:
    samples = []
    for path, label, s in manifest.split_samples(split):
        pixels = ingest_image(manifest.root / path, target)
        samples.append(ImageSample(id=path, pixels=pixels, label=label, split=s))
    return samples


# ---------------------------------------------------------------------------
# manifest files


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = ["#manifest\tv1", f"#num_classes\t{manifest.num_classes}"]
    lines.append("#classes\t" + "\t".join(manifest.class_names))
    for sample_path, label, split in manifest.samples:
        lines.append(f"{sample_path}\t{label}\t{split}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if not lines or not lines[0].startswith("#manifest"):
        raise FormatError(f"{path}: missing '#manifest' header line")
    num_classes = None
    class_names: list[str] = []
    samples: list[tuple[str, int, str]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#num_classes"):
            num_classes = int(line.split("\t")[1])
            continue
        if line.startswith("#classes"):
            class_names = line.split("\t")[1:]
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected path<TAB>label<TAB>split")
        sample_path, label_str, split = parts
        samples.append((sample_path, int(label_str), split))
    if num_classes is None or not class_names:
        raise FormatError(f"{path}: header must declare num_classes and class names")
    if len(class_names) != num_classes:
        raise FormatError(
            f"{path}: num_classes={num_classes} but {len(class_names)} class names"
        )
    manifest = DatasetManifest(
        name=path.stem, class_names=class_names, samples=samples, root=path.parent
    )
    manifest.validate()
    return manifest


def split_manifest(
    manifest: DatasetManifest, train_fraction: float, seed: int
) -> DatasetManifest:
    """Reassign splits with a stratified, seeded shuffle per class."""
    if not 0.0 < train_fraction < 1.0:
        raise DomainError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_class: dict[int, list[int]] = {}
    for idx, (_, label, _) in enumerate(manifest.samples):
        by_class.setdefault(label, []).append(idx)

    rng = Rng(derive_seed(seed, "manifest-split"))
    assignment = [TEST] * len(manifest.samples)
    for label in sorted(by_class):
        indices = by_class[label]
        n = len(indices)
        if n < 2:
            raise DomainError(
                f"class {label} has {n} sample(s); stratified split needs at least 2"
            )
        n_train = int(np.floor(train_fraction * n + 0.5))
        n_train = min(max(n_train, 1), n - 1)
        perm = rng.permutation(n)
        for rank, pos in enumerate(perm):
            assignment[indices[pos]] = TRAIN if rank < n_train else TEST

    samples = [
        (path, label, assignment[i])
        for i, (path, label, _) in enumerate(manifest.samples)
    ]
    return DatasetManifest(
        name=manifest.name,
        class_names=list(manifest.class_names),
        samples=samples,
        root=manifest.root,
    )


# ---------------------------------------------------------------------------
# feature tables


@dataclass
class FeatureTable:
    ids: list[str]
    features: np.ndarray  # (n, feature_dim) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {self.features.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if len(self.ids) != n or self.labels.shape != (n,):
            raise DimensionError(
                f"inconsistent row counts: {len(self.ids)} ids, "
                f"{self.features.shape[0]} feature rows, {self.labels.shape[0]} labels"
            )
        if n and self.num_classes and self.labels.max() >= self.num_classes:
            raise DomainError(
                f"label {int(self.labels.max())} outside [0, {self.num_classes})"
            )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


def save_feature_table(table: FeatureTable, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    prov = table.provenance.encode("utf-8")
    buf.write(
        struct.pack(
            "<BIIQI",
            _VERSION,
            table.num_classes,
            table.feature_dim,
            len(table),
            len(prov),
        )
    )
    buf.write(prov)
    for i, sample_id in enumerate(table.ids):
        sid = sample_id.encode("utf-8")
        buf.write(struct.pack("<H", len(sid)))
        buf.write(sid)
        buf.write(struct.pack("<i", int(table.labels[i])))
        buf.write(table.features[i].astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_feature_table(path: str | Path) -> FeatureTable:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)

    def read(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise FormatError(f"{path}: truncated feature table")
        return chunk

    if read(4) != _MAGIC:
        raise FormatError(f"{path}: not a feature-table file (bad magic)")
    version, num_classes, dim, count, prov_len = struct.unpack("<BIIQI", read(21))
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported feature-table version {version}")
    provenance = read(prov_len).decode("utf-8")
    ids, labels = [], np.empty(count, dtype=np.int64)
    features = np.empty((count, dim))
    for i in range(count):
        (id_len,) = struct.unpack("<H", read(2))
        ids.append(read(id_len).decode("utf-8"))
        (labels[i],) = struct.unpack("<i", read(4))
        features[i] = np.frombuffer(read(8 * dim), dtype="<f8")
    if buf.read(1):
        raise FormatError(f"{path}: trailing bytes after feature rows")
    return FeatureTable(
        ids=ids, features=features, labels=labels, num_classes=num_classes,
        provenance=provenance,
    )


def export_feature_csv(table: FeatureTable, path: str | Path) -> None:
    header = "id,label," + ",".join(f"f{i}" for i in range(table.feature_dim))
    lines = [header]
    for i, sample_id in enumerate(table.ids):
        feats = ",".join(f"{v:.17g}" for v in table.features[i])
        lines.append(f"{sample_id},{int(table.labels[i])},{feats}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
