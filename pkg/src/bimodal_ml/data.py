"""Synthetic bimodal data, manifest I/O, and class-overlap mappings.

Each class gets a distinct visual template (a marker block plus striped
texture) and a distinct token unigram distribution (a class keyword mixed
into shared background tokens). The label-noise knobs corrupt the *evidence*
of one modality: a corrupted sample keeps its true label but its image (or
token sequence) is drawn from a wrong class's template, which is what makes
a modality confidently wrong rather than merely mislabeled.
"""

import csv
import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, ManifestError, ValidationError

STRIPE_AMPLITUDE = 0.25
EXCLUDE_TARGET = "__exclude__"
_GRID_HEADER = struct.Struct("<III")  # height, width, channels


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 4
    train_per_class: int = 500
    val_per_class: int = 100
    test_per_class: int = 100
    image_size: int = 32
    token_length: int = 32
    vocab_size: int = 64
    image_signal: float = 1.0
    image_noise_std: float = 0.05
    text_keyword_rate: float = 0.3
    text_confusion_rate: float = 0.0
    image_label_noise: float = 0.0
    text_label_noise: float = 0.0
    class_overlap_rate: float = 0.0
    seed: int = 0
    label_names: tuple = ()

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidConfigError("n_classes must be >= 2")
        for name in ("train_per_class", "val_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise InvalidConfigError("%s must be >= 1" % name)
        for name in (
            "image_label_noise",
            "text_label_noise",
            "class_overlap_rate",
            "text_keyword_rate",
            "text_confusion_rate",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidConfigError("%s must be in [0, 1], got %r" % (name, value))
        if self.image_size < max(8, 3 * self.n_classes + 4):
            raise InvalidConfigError(
                "image_size %d too small for %d distinct class markers"
                % (self.image_size, self.n_classes)
            )
        if self.vocab_size <= self.n_classes:
            raise InvalidConfigError("vocab_size must exceed n_classes (keyword ids)")
        if self.token_length < 1:
            raise InvalidConfigError("token_length must be >= 1")
        if self.image_signal <= 0:
            raise InvalidConfigError("image_signal must be positive")
        names = self.label_names or tuple(
            "class_%02d" % c for c in range(self.n_classes)
        )
        if len(names) != self.n_classes or len(set(names)) != self.n_classes:
            raise InvalidConfigError("label_names must be %d distinct names" % self.n_classes)
        object.__setattr__(self, "label_names", tuple(names))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["label_names"] = list(self.label_names)
        return d


@dataclass
class Split:
    """One split of samples; evidence arrays record which class's template
    produced each modality (== labels where the modality is clean)."""

    images: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray
    image_evidence: np.ndarray
    text_evidence: np.ndarray
    ids: list

    def __len__(self):
        return len(self.labels)


@dataclass
class BimodalDataset:
    train: Split
    val: Split
    test: Split
    label_names: tuple
    spec: DatasetSpec = None

    @property
    def n_classes(self):
        return len(self.label_names)

    def splits(self):
        out = {"train": self.train, "test": self.test}
        if self.val is not None:
            out["val"] = self.val
        return out


def marker_position(spec: DatasetSpec, c):
    """Top-left corner of class c's 2x2 marker block."""
    offset = 2 + 3 * c
    return offset % (spec.image_size - 2), offset % (spec.image_size - 2)


def _partner(c, n_classes):
    p = c ^ 1
    return p if p < n_classes else c


def _marker_templates(spec: DatasetSpec):
    k, size = spec.n_classes, spec.image_size
    base = np.zeros((k, size, size), dtype=np.float64)
    for c in range(k):
        r, col = marker_position(spec, c)
        base[c, r : r + 2, col : col + 2] = spec.image_signal
    if spec.class_overlap_rate > 0:
        mix = spec.class_overlap_rate / 2.0
        blended = np.empty_like(base)
        for c in range(k):
            blended[c] = (1.0 - mix) * base[c] + mix * base[_partner(c, k)]
        base = blended
    return base


def _render_images(spec: DatasetSpec, evidence, rng):
    size = spec.image_size
    templates = _marker_templates(spec)
    images = templates[evidence]
    periods = 3 + (evidence % 4)
    phases = rng.integers(0, 1_000_000, size=len(evidence))
    rows = np.arange(size)
    row_mask = ((rows[None, :] + phases[:, None]) % periods[:, None]) == 0
    images = images + STRIPE_AMPLITUDE * spec.image_signal * row_mask[:, :, None]
    images = images + rng.normal(0.0, spec.image_noise_std, size=images.shape)
    return images.astype(np.float32)


def _emit_tokens(spec: DatasetSpec, evidence, rng):
    n, length = len(evidence), spec.token_length
    keyword_here = rng.random((n, length)) < spec.text_keyword_rate
    confused = rng.random((n, length)) < spec.text_confusion_rate
    background = rng.integers(spec.n_classes, spec.vocab_size, size=(n, length))
    own = evidence[:, None]
    partner = np.array([_partner(c, spec.n_classes) for c in range(spec.n_classes)])[
        evidence
    ][:, None]
    keyword = np.where(confused, partner, own)
    return np.where(keyword_here, keyword, background).astype(np.int64)


def _corrupt(labels, fraction, n_classes, rng):
    evidence = labels.copy()
    hit = rng.random(len(labels)) < fraction
    shift = rng.integers(1, n_classes, size=len(labels))
    evidence[hit] = (labels[hit] + shift[hit]) % n_classes
    return evidence


def generate(spec: DatasetSpec) -> BimodalDataset:
    """Deterministically build train/val/test splits from a DatasetSpec."""
    rng = np.random.default_rng(spec.seed)
    next_id = 0
    splits = {}
    for split_name, per_class in (
        ("train", spec.train_per_class),
        ("val", spec.val_per_class),
        ("test", spec.test_per_class),
    ):
        n = per_class * spec.n_classes
        labels = np.repeat(np.arange(spec.n_classes), per_class)
        image_evidence = _corrupt(labels, spec.image_label_noise, spec.n_classes, rng)
        text_evidence = _corrupt(labels, spec.text_label_noise, spec.n_classes, rng)
        images = _render_images(spec, image_evidence, rng)
        tokens = _emit_tokens(spec, text_evidence, rng)
        order = rng.permutation(n)
        ids = ["s%06d" % (next_id + i) for i in range(n)]
        next_id += n
        splits[split_name] = Split(
            images=images[order],
            tokens=tokens[order],
            labels=labels[order].astype(np.int64),
            image_evidence=image_evidence[order].astype(np.int64),
            text_evidence=text_evidence[order].astype(np.int64),
            ids=ids,
        )
    return BimodalDataset(
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        label_names=spec.label_names,
        spec=spec,
    )


# ---------------------------------------------------------------------------
# Manifest format: header-row CSV (id, image_path, tokens_path, label_name,
# split); images are raw little-endian float32 grids behind a 12-byte
# height/width/channels header; token files are newline-delimited integers.
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("id", "image_path", "tokens_path", "label_name", "split")


def write_grid(path, grid):
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 2:
        raise ValidationError("image grids must be 2-D, got shape %r" % (grid.shape,))
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(grid.shape[0], grid.shape[1], 1))
        fh.write(grid.astype("<f4").tobytes())


def read_grid(path):
    with open(path, "rb") as fh:
        header = fh.read(_GRID_HEADER.size)
        if len(header) != _GRID_HEADER.size:
            raise ValidationError("%s: truncated grid header" % path)
        height, width, channels = _GRID_HEADER.unpack(header)
        if channels != 1:
            raise ValidationError("%s: expected 1 channel, got %d" % (path, channels))
        payload = fh.read()
    expected = 4 * height * width
    if len(payload) != expected:
        raise ValidationError(
            "%s: payload holds %d bytes, expected %d" % (path, len(payload), expected)
        )
    return np.frombuffer(payload, dtype="<f4").reshape(height, width).copy()


def write_tokens(path, tokens):
    with open(path, "w", encoding="utf-8") as fh:
        for t in np.asarray(tokens).ravel():
            fh.write("%d\n" % int(t))


def read_tokens(path):
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                value = int(line)
            except ValueError as exc:
                raise ValidationError(
                    "%s:%d: not an integer token id: %r" % (path, line_no, line)
                ) from exc
            if value < 0:
                raise ValidationError("%s:%d: negative token id" % (path, line_no))
            values.append(value)
    return np.asarray(values, dtype=np.int64)


def write_manifest(dataset: BimodalDataset, root):
    """Write the dataset under `root`; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "tokens").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for split_name, split in dataset.splits().items():
            for i in range(len(split)):
                sample_id = split.ids[i]
                image_rel = "images/%s.f32grid" % sample_id
                tokens_rel = "tokens/%s.txt" % sample_id
                write_grid(root / image_rel, split.images[i])
                write_tokens(root / tokens_rel, split.tokens[i])
                writer.writerow(
                    [
                        sample_id,
                        image_rel,
                        tokens_rel,
                        dataset.label_names[split.labels[i]],
                        split_name,
                    ]
                )
    return manifest


def load_manifest(path, label_names=None) -> BimodalDataset:
    """Read a manifest CSV back into splits.

    Label indices follow `label_names` when given, else the sorted distinct
    names in the file. The val split may be absent.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError("manifest not found: %s" % path, line=0)
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("empty manifest", line=1) from None
        if tuple(header) != MANIFEST_COLUMNS:
            unknown = [c for c in header if c not in MANIFEST_COLUMNS]
            if unknown:
                raise ManifestError(
                    "unknown manifest column(s): %s" % ", ".join(sorted(unknown)), line=1
                )
            raise ManifestError(
                "manifest columns must be exactly %s, got %s"
                % (list(MANIFEST_COLUMNS), header),
                line=1,
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    "expected %d fields, got %d" % (len(MANIFEST_COLUMNS), len(row)),
                    line=line_no,
                )
            rows.append((line_no, dict(zip(MANIFEST_COLUMNS, row))))
    if not rows:
        raise ManifestError("manifest has no sample rows", line=1)
    seen_names = sorted({r["label_name"] for _, r in rows})
    if label_names is None:
        label_names = seen_names
    index_of = {name: i for i, name in enumerate(label_names)}
    by_split = {"train": [], "val": [], "test": []}
    seen_ids = set()
    for line_no, row in rows:
        if row["split"] not in by_split:
            raise ManifestError(
                "split must be train/val/test, got %r" % row["split"], line=line_no
            )
        if row["label_name"] not in index_of:
            raise ValidationError(
                "line %d: label %r not in label set %s"
                % (line_no, row["label_name"], list(label_names))
            )
        if row["id"] in seen_ids:
            raise ManifestError("duplicate sample id %r" % row["id"], line=line_no)
        seen_ids.add(row["id"])
        by_split[row["split"]].append((line_no, row))

    def build(entries):
        if not entries:
            return None
        images, tokens, labels, ids = [], [], [], []
        length = None
        for line_no, row in entries:
            image = read_grid(path.parent / row["image_path"])
            toks = read_tokens(path.parent / row["tokens_path"])
            if length is None:
                length = len(toks)
            elif len(toks) != length:
                raise ManifestError(
                    "token length %d differs from first row's %d" % (len(toks), length),
                    line=line_no,
                )
            images.append(image)
            tokens.append(toks)
            labels.append(index_of[row["label_name"]])
            ids.append(row["id"])
        labels = np.asarray(labels, dtype=np.int64)
        return Split(
            images=np.stack(images),
            tokens=np.stack(tokens),
            labels=labels,
            image_evidence=labels.copy(),
            text_evidence=labels.copy(),
            ids=ids,
        )

    train = build(by_split["train"])
    test = build(by_split["test"])
    if train is None or test is None:
        raise ManifestError("manifest must provide train and test rows", line=1)
    return BimodalDataset(
        train=train, val=build(by_split["val"]), test=test, label_names=tuple(label_names)
    )


# ---------------------------------------------------------------------------
# Class-overlap mappings for inter-dataset evaluation.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassMapping:
    """source name -> target name; targets of __exclude__ mask samples out."""

    pairs: tuple

    def __post_init__(self):
        seen_sources = set()
        targets = []
        for source, target in self.pairs:
            if source in seen_sources:
                raise InvalidConfigError("source %r mapped twice" % source)
            seen_sources.add(source)
            if target != EXCLUDE_TARGET:
                targets.append(target)
        if len(targets) != len(set(targets)):
            raise InvalidConfigError("mapping is not injective on targets")

    @property
    def mapped(self):
        return {s: t for s, t in self.pairs if t != EXCLUDE_TARGET}

    @property
    def excluded(self):
        return tuple(s for s, t in self.pairs if t == EXCLUDE_TARGET)

    @property
    def target_names(self):
        # first-appearance order, so identity mappings preserve class order
        return tuple(
            dict.fromkeys(t for _, t in self.pairs if t != EXCLUDE_TARGET)
        )


def load_mapping(path) -> ClassMapping:
    path = Path(path)
    if not path.exists():
        raise ValidationError("mapping file not found: %s" % path)
    pairs = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ("source_name", "target_name"):
            raise ValidationError(
                "%s: mapping header must be source_name,target_name" % path
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError("%s:%d: expected 2 fields" % (path, line_no))
            pairs.append((row[0], row[1]))
    if not pairs:
        raise ValidationError("%s: mapping has no rows" % path)
    return ClassMapping(pairs=tuple(pairs))


def identity_mapping(label_names) -> ClassMapping:
    return ClassMapping(pairs=tuple((n, n) for n in label_names))


def apply_mapping(labels, source_names, mapping: ClassMapping):
    """Mask excluded samples and rename the rest into the target domain.

    Returns (mapped label indices over mapping.target_names, kept mask).
    Masked-out entries carry -1.
    """
    labels = np.asarray(labels)
    source_names = tuple(source_names)
    if labels.size and (labels.min() < 0 or labels.max() >= len(source_names)):
        raise ValidationError("label index outside the source domain")
    mapped = mapping.mapped
    excluded = set(mapping.excluded)
    targets = mapping.target_names
    target_index = {t: i for i, t in enumerate(targets)}
    lookup = np.empty(len(source_names), dtype=np.int64)
    keep_name = np.empty(len(source_names), dtype=bool)
    present = set(int(v) for v in np.unique(labels))
    for i, name in enumerate(source_names):
        if name in mapped:
            lookup[i] = target_index[mapped[name]]
            keep_name[i] = True
        elif name in excluded:
            lookup[i] = -1
            keep_name[i] = False
        else:
            if i in present:
                raise ValidationError(
                    "label %r is neither mapped nor excluded" % name
                )
            lookup[i] = -1
            keep_name[i] = False
    mask = keep_name[labels]
    out = np.where(mask, lookup[labels], -1)
    return out, mask


def bundled_mapping_path(name):
    """Path of a mapping CSV shipped with the package."""
    path = Path(__file__).parent / "mappings" / ("%s.csv" % name)
    if not path.exists():
        raise ValidationError("no bundled mapping named %r" % name)
    return path


def to_tensors(split: Split):
    """Split arrays as torch tensors (images f32, tokens/labels i64)."""
    import torch

    return (
        torch.from_numpy(np.ascontiguousarray(split.images)),
        torch.from_numpy(np.ascontiguousarray(split.tokens)),
        torch.from_numpy(np.ascontiguousarray(split.labels)),
    )
