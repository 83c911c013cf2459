"""Binary feature files, dataset manifests, batch assembly, and a synthetic
dataset generator for desk-scale runs.

Feature file layout (all integers little-endian):

    magic   4 bytes  b"CMDF"
    version u16      currently 1
    modality u8      1 = speech, 2 = image
    layers  u16
    dim     u32
    length  u32
    flags   u8       bit 0: a per-layer cls block follows the payload
    payload float32[layers * length * dim], row-major
    cls     float32[layers * dim]           (only when flagged)

Floats are stored at 32-bit precision; in-memory compute is 64-bit, so the
write side truncates (the only lossy boundary). Reading a file back yields
the stored 32-bit values exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"CMDF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBHIIB")
MODALITY_CODES = {"speech": 1, "image": 2}
_MODALITY_NAMES = {v: k for k, v in MODALITY_CODES.items()}
MAX_CAPTIONS_PER_IMAGE = 5


@dataclass
class FeatureData:
    """In-memory contents of one feature file."""

    layers: np.ndarray  # (L, T, D) float64
    cls: np.ndarray | None  # (L, D) float64 or None
    modality: str


def write_feature_file(path, data: FeatureData) -> None:
    layers = np.asarray(data.layers, dtype=np.float64)
    if layers.ndim != 3:
        raise DataError(f"expected (layers, length, dim) features, got shape {layers.shape}")
    if not np.all(np.isfinite(layers)):
        raise DataError("refusing to write non-finite feature values")
    n_layers, length, dim = layers.shape
    if data.modality not in MODALITY_CODES:
        raise DataError(f"unknown modality {data.modality!r}")
    flags = 0
    cls32 = b""
    if data.cls is not None:
        cls = np.asarray(data.cls, dtype=np.float64)
        if cls.shape != (n_layers, dim):
            raise DataError(f"cls block shape {cls.shape} vs expected {(n_layers, dim)}")
        if not np.all(np.isfinite(cls)):
            raise DataError("refusing to write non-finite cls values")
        flags |= 1
        cls32 = cls.astype("<f4").tobytes()
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, MODALITY_CODES[data.modality], n_layers, dim, length, flags
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(layers.astype("<f4").tobytes())
        fh.write(cls32)


def read_feature_header(path) -> tuple[str, int, int, int, bool, int]:
    """Validate the header; returns (modality, layers, length, dim, has_cls, expected_size)."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    magic, version, modality, n_layers, dim, length, flags = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if modality not in _MODALITY_NAMES:
        raise FormatError(f"{path}: unknown modality code {modality}", offset=6)
    if n_layers == 0 or dim == 0 or length == 0:
        raise FormatError(f"{path}: degenerate header extents layers={n_layers} dim={dim} length={length}", offset=7)
    has_cls = bool(flags & 1)
    expected = _HEADER.size + 4 * n_layers * length * dim + (4 * n_layers * dim if has_cls else 0)
    return _MODALITY_NAMES[modality], n_layers, length, dim, has_cls, expected


def validate_feature_file(path) -> None:
    """Header plus size preflight; guarantees a later full read cannot fail."""
    _, _, _, _, _, expected = read_feature_header(path)
    actual = Path(path).stat().st_size
    if actual != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, file ends early" if actual < expected
            else f"{path}: {actual - expected} trailing bytes beyond expected size {expected}",
            offset=min(actual, expected),
        )


def read_feature_file(path) -> FeatureData:
    modality, n_layers, length, dim, has_cls, expected = read_feature_header(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, got {len(blob)}",
            offset=min(len(blob), expected),
        )
    offset = _HEADER.size
    count = n_layers * length * dim
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    layers = payload.astype(np.float64).reshape(n_layers, length, dim)
    cls = None
    if has_cls:
        offset += 4 * count
        cls_flat = np.frombuffer(blob, dtype="<f4", count=n_layers * dim, offset=offset)
        cls = cls_flat.astype(np.float64).reshape(n_layers, dim)
    return FeatureData(layers=layers, cls=cls, modality=modality)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    pair_id: str
    image_path: Path
    speech_paths: list[Path]


@dataclass
class DatasetManifest:
    """Images with their captions; one caption per manifest line on disk."""

    entries: list[ManifestEntry]
    split: str = "train"

    @property
    def num_images(self) -> int:
        return len(self.entries)

    @property
    def num_captions(self) -> int:
        return sum(len(e.speech_paths) for e in self.entries)

    def captions(self) -> list[tuple[str, Path, Path]]:
        """Flat (pair_id, image_path, speech_path) list in manifest order."""
        out = []
        for e in self.entries:
            for sp in e.speech_paths:
                out.append((e.pair_id, e.image_path, sp))
        return out


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            for sp in e.speech_paths:
                fh.write(f"{e.pair_id}\t{e.image_path}\t{sp}\n")


def load_manifest(path, split: str = "train", preflight: bool = True) -> DatasetManifest:
    """Parse a tab-separated manifest; paths resolve relative to the file.

    Preflight validates every referenced feature file (header and size), so
    batch assembly can never hit a parse error mid-training.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    root = path.parent
    by_image: dict[Path, ManifestEntry] = {}
    seen_ids: dict[str, Path] = {}
    order: list[Path] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            pair_id, image_rel, speech_rel = parts
            image_path = (root / image_rel) if not Path(image_rel).is_absolute() else Path(image_rel)
            speech_path = (root / speech_rel) if not Path(speech_rel).is_absolute() else Path(speech_rel)
            entry = by_image.get(image_path)
            if entry is None:
                if pair_id in seen_ids:
                    raise DataError(
                        f"{path}:{lineno}: pair_id {pair_id!r} reused for a second image"
                    )
                entry = ManifestEntry(pair_id=pair_id, image_path=image_path, speech_paths=[])
                by_image[image_path] = entry
                seen_ids[pair_id] = image_path
                order.append(image_path)
            elif entry.pair_id != pair_id:
                raise DataError(
                    f"{path}:{lineno}: image {image_path} listed under two pair_ids"
                )
            entry.speech_paths.append(speech_path)
    entries = [by_image[p] for p in order]
    if not entries:
        raise DataError(f"{path}: empty manifest")
    for e in entries:
        if not 1 <= len(e.speech_paths) <= MAX_CAPTIONS_PER_IMAGE:
            raise DataError(
                f"image {e.image_path}: {len(e.speech_paths)} captions, expected 1..{MAX_CAPTIONS_PER_IMAGE}"
            )
    if preflight:
        for e in entries:
            for fp in [e.image_path] + e.speech_paths:
                if not Path(fp).is_file():
                    raise DataError(f"manifest references missing file: {fp}")
                validate_feature_file(fp)
    return DatasetManifest(entries=entries, split=split)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded speech features plus image features for a set of caption items.

    speech: (B, layers, Tmax, D); lengths: (B,) valid frame counts;
    patches: (B, N, E); image_cls: (B, E); pair_ids: length-B labels.
    """

    speech: np.ndarray
    lengths: np.ndarray
    patches: np.ndarray
    image_cls: np.ndarray
    pair_ids: list[str]


def _load_caption_item(pair_id: str, image_path: Path, speech_path: Path):
    speech = read_feature_file(speech_path)
    image = read_feature_file(image_path)
    if image.modality != "image" or speech.modality != "speech":
        raise DataError(f"modality mismatch for pair {pair_id!r}")
    if image.cls is None:
        raise DataError(f"{image_path}: image file carries no cls vector")
    return speech.layers, image.layers[0], image.cls[0]


def assemble_batch(items: list[tuple[str, Path, Path]]) -> Batch:
    speech_list, patches_list, cls_list, ids = [], [], [], []
    for pair_id, image_path, speech_path in items:
        s, p, c = _load_caption_item(pair_id, image_path, speech_path)
        speech_list.append(s)
        patches_list.append(p)
        cls_list.append(c)
        ids.append(pair_id)
    n_layers = speech_list[0].shape[0]
    dim = speech_list[0].shape[2]
    if any(s.shape[0] != n_layers or s.shape[2] != dim for s in speech_list):
        raise DataError("speech files disagree on layer count or dim within a batch")
    patch_shape = patches_list[0].shape
    if any(p.shape != patch_shape for p in patches_list):
        raise DataError("image files disagree on patch shape within a batch")
    lengths = np.array([s.shape[1] for s in speech_list], dtype=np.int64)
    t_max = int(lengths.max())
    b = len(items)
    speech = np.zeros((b, n_layers, t_max, dim))
    for i, s in enumerate(speech_list):
        speech[i, :, : s.shape[1], :] = s
    return Batch(
        speech=speech,
        lengths=lengths,
        patches=np.stack(patches_list),
        image_cls=np.stack(cls_list),
        pair_ids=ids,
    )


def batch_plan(manifest: DatasetManifest, batch_size: int, seed: int, epoch: int,
               training: bool = True) -> list[list[int]]:
    """Deterministic caption-index batches for one epoch (no file I/O)."""
    if training and batch_size < 2:
        raise ConfigError(f"training batch size must be at least 2, got {batch_size}")
    if batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {batch_size}")
    n = manifest.num_captions
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(n)
    full = n // batch_size
    plans = [order[i * batch_size : (i + 1) * batch_size].tolist() for i in range(full)]
    if not training and n % batch_size:
        plans.append(order[full * batch_size :].tolist())
    if training and not plans:
        raise DataError(f"dataset has {n} captions, fewer than one batch of {batch_size}")
    return plans


def make_batches(manifest: DatasetManifest, batch_size: int, seed: int, epoch: int,
                 training: bool = True) -> list[Batch]:
    """Seeded caption-level shuffle, chunked into batches.

    During training the final short batch is dropped; evaluation keeps it.
    """
    captions = manifest.captions()
    return [
        assemble_batch([captions[i] for i in plan])
        for plan in batch_plan(manifest, batch_size, seed, epoch, training)
    ]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synthesize_dataset(
    out_dir,
    num_images: int,
    captions_per_image: int,
    frames: int,
    patches: int,
    speech_dim: int,
    shared_dim: int,
    seed: int,
    difficulty: float,
    feature_layers: int = 3,
) -> Path:
    """Generate a paired feature dataset; returns the manifest path.

    Every image gets a latent class vector; its patches and its captions'
    frames are noisy views of that latent. ``difficulty`` scales the
    cross-modal corruption: at 0 the pairing is exactly recoverable and a
    trained model can reach perfect retrieval.
    """
    for name, v in (("num_images", num_images), ("captions_per_image", captions_per_image),
                    ("frames", frames), ("patches", patches), ("speech_dim", speech_dim),
                    ("shared_dim", shared_dim)):
        if v < 1:
            raise ConfigError(f"{name} must be at least 1, got {v}")
    if not 1 <= captions_per_image <= MAX_CAPTIONS_PER_IMAGE:
        raise ConfigError(f"captions_per_image must be 1..{MAX_CAPTIONS_PER_IMAGE}")
    if difficulty < 0:
        raise ConfigError(f"difficulty must be non-negative, got {difficulty}")
    if feature_layers < 2:
        raise ConfigError("feature_layers must be at least 2")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x73796E74]))

    # Per-layer mixing from shared space into the upstream speech space;
    # layer 0 mimics a noisier low-level representation.
    mixes = [rng.normal(0.0, 1.0, size=(shared_dim, speech_dim)) for _ in range(feature_layers)]
    layer_noise = np.linspace(0.6, 0.1, feature_layers)

    entries: list[ManifestEntry] = []
    for i in range(num_images):
        pair_id = f"img{i:04d}"
        latent = rng.normal(0.0, 1.0, size=shared_dim)

        patch_feats = latent[None, :] + 0.3 * rng.normal(size=(patches, shared_dim))
        cls = latent + difficulty * rng.normal(size=shared_dim)
        image_path = out / f"{pair_id}_image.feat"
        write_feature_file(
            image_path,
            FeatureData(layers=patch_feats[None, :, :], cls=cls[None, :], modality="image"),
        )

        speech_paths = []
        for c in range(captions_per_image):
            t = max(1, frames + int(rng.integers(-2, 3)))
            cap_latent = latent + difficulty * rng.normal(size=shared_dim)
            layers = np.empty((feature_layers, t, speech_dim))
            for li, mix in enumerate(mixes):
                base = cap_latent @ mix
                layers[li] = base[None, :] + layer_noise[li] * rng.normal(size=(t, speech_dim))
            speech_path = out / f"{pair_id}_cap{c}.feat"
            write_feature_file(speech_path, FeatureData(layers=layers, cls=None, modality="speech"))
            speech_paths.append(speech_path)
        entries.append(ManifestEntry(pair_id=pair_id, image_path=image_path, speech_paths=speech_paths))

    manifest_path = out / "manifest.tsv"
    rel = [
        ManifestEntry(
            pair_id=e.pair_id,
            image_path=e.image_path.name,
            speech_paths=[p.name for p in e.speech_paths],
        )
        for e in entries
    ]
    write_manifest(manifest_path, rel)
    return manifest_path
