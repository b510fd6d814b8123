"""Dataset ingestion, noise injection, pair construction, and batch streams.

Samples live in a SampleSet (images scaled to [0, 1], integer class ids).
Pairs live in a PairManifest: index pairs with a relation code (+1 same
class, -1 different class, 0 unlabeled). Every operation here is a pure
function of its inputs and a seed.
"""

import logging
import os
import struct

import numpy as np

from .config import derive_rng
from .errors import ConfigError, DataFormatError, ShapeMismatchError
from .model import NEG, POS, UNL, PairBatch

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SAMPLES_MAGIC = b"SEVN-SMPL"
SAMPLES_VERSION = 1

MANIFEST_HEADER = "# seven-pairs v1"
REL_NAMES = {POS: "pos", NEG: "neg", UNL: "unl"}
REL_CODES = {name: code for code, name in REL_NAMES.items()}


class SampleSet:
    """Image samples plus class ids for one split."""

    def __init__(self, images, class_ids, split_tag="train"):
        self.images = np.asarray(images, dtype=np.float64)
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        self.split_tag = str(split_tag)
        if self.images.ndim != 4:
            raise ShapeMismatchError(f"images must be (n, c, h, w), got shape {self.images.shape}")
        if self.class_ids.ndim != 1 or len(self.class_ids) != len(self.images):
            raise ShapeMismatchError(
                f"need one class id per image: {len(self.images)} images, "
                f"class_ids shape {self.class_ids.shape}")
        if np.any(self.class_ids < 0):
            raise DataFormatError("class ids must be non-negative")

    def __len__(self):
        return len(self.images)

    def subset(self, indices, split_tag=None):
        return SampleSet(self.images[indices], self.class_ids[indices],
                         split_tag or self.split_tag)

    def class_counts(self):
        ids, counts = np.unique(self.class_ids, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


class PairManifest:
    """Sample-index pairs with relations, plus provenance for reproducibility."""

    def __init__(self, idx1, idx2, rel, provenance=None):
        self.idx1 = np.asarray(idx1, dtype=np.int64)
        self.idx2 = np.asarray(idx2, dtype=np.int64)
        self.rel = np.asarray(rel, dtype=np.int8)
        self.provenance = dict(provenance or {})
        if not (self.idx1.shape == self.idx2.shape == self.rel.shape) or self.idx1.ndim != 1:
            raise ShapeMismatchError(
                f"manifest columns must be equal-length vectors, got "
                f"{self.idx1.shape}/{self.idx2.shape}/{self.rel.shape}")
        if np.any(self.idx1 == self.idx2):
            raise DataFormatError("a sample cannot be paired with itself")

    def __len__(self):
        return len(self.rel)

    @property
    def labeled_mask(self):
        return self.rel != UNL

    def labeled_only(self):
        keep = self.labeled_mask
        prov = dict(self.provenance, filtered="labeled-only")
        return PairManifest(self.idx1[keep], self.idx2[keep], self.rel[keep], prov)

    def counts(self):
        return {
            "pos": int(np.sum(self.rel == POS)),
            "neg": int(np.sum(self.rel == NEG)),
            "unl": int(np.sum(self.rel == UNL)),
        }


# ------------------------------------------------------------------ ingestion


def _read_exact(fh, nbytes, path, what):
    data = fh.read(nbytes)
    if len(data) != nbytes:
        raise DataFormatError(
            f"{path}: truncated reading {what} at offset {fh.tell() - len(data)}: "
            f"wanted {nbytes} bytes, got {len(data)}")
    return data


def ingest_idx(images_path, labels_path, split_tag="train"):
    """Load an IDX image/label file pair into a SampleSet (pixels scaled by 1/255)."""
    for path in (images_path, labels_path):
        if not os.path.exists(path):
            raise ConfigError(f"file not found: {path}")
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        n, h, w = struct.unpack(">III", _read_exact(fh, 12, images_path, "dimensions"))
        if n == 0:
            raise DataFormatError(f"{images_path}: zero images")
        raw = _read_exact(fh, n * h * w, images_path, f"{n} images of {h}x{w}")
        extra = fh.read(1)
        if extra:
            raise DataFormatError(f"{images_path}: trailing bytes after {n} images")
    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        (ln,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "count"))
        if ln != n:
            raise DataFormatError(
                f"label count {ln} in {labels_path} != image count {n} in {images_path}")
        labels = _read_exact(fh, ln, labels_path, f"{ln} labels")
        extra = fh.read(1)
        if extra:
            raise DataFormatError(f"{labels_path}: trailing bytes after {ln} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    class_ids = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    return SampleSet(images, class_ids, split_tag)


def ingest_image_dir(root_path, size, split_tag="train"):
    """Load a class_id/files directory tree of images, resized bilinearly.

    Images are converted to grayscale and scaled to [0, 1]. Unreadable files
    are skipped with a warning; the skip count is the returned set's
    ``skipped`` attribute.
    """
    from PIL import Image

    if not os.path.isdir(root_path):
        raise ConfigError(f"directory not found: {root_path}")
    h, w = size
    images, class_ids = [], []
    skipped = 0
    class_dirs = sorted(d for d in os.listdir(root_path)
                        if os.path.isdir(os.path.join(root_path, d)))
    if not class_dirs:
        raise DataFormatError(f"{root_path}: no class subdirectories")
    for class_index, class_dir in enumerate(class_dirs):
        full = os.path.join(root_path, class_dir)
        for fname in sorted(os.listdir(full)):
            fpath = os.path.join(full, fname)
            if not os.path.isfile(fpath):
                continue
            try:
                with Image.open(fpath) as img:
                    gray = img.convert("L").resize((w, h), Image.BILINEAR)
                    arr = np.asarray(gray, dtype=np.float64) / 255.0
            except OSError as exc:
                skipped += 1
                log.warning("skipping unreadable image %s: %s", fpath, exc)
                continue
            images.append(arr[None])
            class_ids.append(class_index)
    if not images:
        raise DataFormatError(f"{root_path}: no readable images")
    out = SampleSet(np.stack(images), class_ids, split_tag)
    out.skipped = skipped
    return out


def add_uniform_noise(samples, lo, hi, seed):
    """Add per-pixel U[lo, hi) noise. Values are deliberately not re-clamped."""
    if hi < lo:
        raise ConfigError(f"noise range requires hi >= lo, got [{lo}, {hi})")
    rng = derive_rng(seed, "noise", samples.split_tag)
    noisy = samples.images + rng.uniform(lo, hi, size=samples.images.shape)
    return SampleSet(noisy, samples.class_ids, samples.split_tag)


# ------------------------------------------------------------------ pairing


def assert_class_disjoint(a, b):
    """Reject overlapping class ids between two sample sets (disjoint-class mode)."""
    shared = np.intersect1d(np.unique(a.class_ids), np.unique(b.class_ids))
    if len(shared):
        raise DataFormatError(
            f"splits '{a.split_tag}' and '{b.split_tag}' share class ids "
            f"{shared[:10].tolist()}{'...' if len(shared) > 10 else ''}")


def make_pairs(samples, seed, disjoint_from=None):
    """Pair every sample with one same-class and one different-class partner.

    Produces exactly 2n pairs (n same-class + n different-class); partners are
    drawn uniformly from the eligible samples. ``disjoint_from`` optionally
    names another split that must share no class ids with this one.
    """
    if disjoint_from is not None:
        assert_class_disjoint(samples, disjoint_from)
    class_ids = samples.class_ids
    n = len(samples)
    classes = np.unique(class_ids)
    if len(classes) < 2:
        raise DataFormatError(f"pairing needs >= 2 classes, got {len(classes)}")
    by_class = {int(c): np.flatnonzero(class_ids == c) for c in classes}
    for c, members in by_class.items():
        if len(members) < 2:
            raise DataFormatError(f"class {c} has a single sample; same-class pairing impossible")
    others = {int(c): np.flatnonzero(class_ids != c) for c in classes}
    rank = np.empty(n, dtype=np.int64)
    for members in by_class.values():
        rank[members] = np.arange(len(members))

    rng = derive_rng(seed, "pairs", samples.split_tag)
    idx1 = np.empty(2 * n, dtype=np.int64)
    idx2 = np.empty(2 * n, dtype=np.int64)
    rel = np.empty(2 * n, dtype=np.int8)
    for i in range(n):
        c = int(class_ids[i])
        peers = by_class[c]
        r = int(rng.integers(len(peers) - 1))
        if r >= rank[i]:
            r += 1
        idx1[2 * i], idx2[2 * i], rel[2 * i] = i, peers[r], POS
        strangers = others[c]
        k = int(rng.integers(len(strangers)))
        idx1[2 * i + 1], idx2[2 * i + 1], rel[2 * i + 1] = i, strangers[k], NEG
    provenance = {"split": samples.split_tag, "seed": int(seed), "samples": n}
    return PairManifest(idx1, idx2, rel, provenance)


def split_label_budget(manifest, budget, seed, strict_uniform=False):
    """Keep relations on ``budget`` pairs and erase the rest to unlabeled.

    By default the kept set is balanced — ceil(L/2) same-class and floor(L/2)
    different-class, each drawn uniformly from its pool — so tiny budgets
    cannot degenerate to one relation. ``strict_uniform`` draws uniformly
    from all pairs instead.
    """
    total = len(manifest)
    if budget < 0 or budget > total:
        raise DataFormatError(f"label budget {budget} outside [0, {total}]")
    rng = derive_rng(seed, "label-budget")
    if strict_uniform:
        keep = rng.choice(total, size=budget, replace=False)
    else:
        pos_pool = np.flatnonzero(manifest.rel == POS)
        neg_pool = np.flatnonzero(manifest.rel == NEG)
        want_pos = (budget + 1) // 2
        want_neg = budget // 2
        if want_pos > len(pos_pool) or want_neg > len(neg_pool):
            raise DataFormatError(
                f"balanced budget {budget} needs {want_pos} pos / {want_neg} neg, "
                f"pools have {len(pos_pool)} / {len(neg_pool)}")
        keep = np.concatenate([
            rng.choice(pos_pool, size=want_pos, replace=False),
            rng.choice(neg_pool, size=want_neg, replace=False),
        ])
    rel = np.full(total, UNL, dtype=np.int8)
    rel[keep] = manifest.rel[keep]
    provenance = dict(manifest.provenance,
                      label_budget=int(budget),
                      budget_seed=int(seed),
                      strict_uniform=bool(strict_uniform))
    return PairManifest(manifest.idx1, manifest.idx2, rel, provenance)


# ------------------------------------------------------------------ batching


def batches(manifest, samples, batch_size, seed, epoch):
    """Yield PairBatch objects covering the manifest exactly once, reshuffled per epoch.

    The remainder forms a final short batch; a stranded batch of one is merged
    into the previous batch so normalization layers always see >= 2 rows.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if manifest.provenance.get("split", samples.split_tag) != samples.split_tag:
        raise DataFormatError(
            f"manifest built on split {manifest.provenance.get('split')!r} cannot batch "
            f"split {samples.split_tag!r}")
    n = len(manifest)
    hi = int(manifest.idx1.max(initial=-1)), int(manifest.idx2.max(initial=-1))
    if max(hi) >= len(samples):
        raise DataFormatError(
            f"manifest references sample {max(hi)} but the set has {len(samples)}")
    order = derive_rng(seed, "batches", epoch).permutation(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for b, start in enumerate(starts):
        stop = n if b == len(starts) - 1 else start + batch_size
        sel = order[start:stop]
        yield PairBatch(samples.images[manifest.idx1[sel]],
                        samples.images[manifest.idx2[sel]],
                        manifest.rel[sel])


# ------------------------------------------------------------------ persistence


def save_samples(samples, path):
    """Write a SampleSet archive: magic, version, split tag, images, class ids."""
    from .tensor import tensor_to_bytes

    tag = samples.split_tag.encode("utf-8")
    blob = bytearray()
    blob += SAMPLES_MAGIC
    blob += struct.pack("<B", SAMPLES_VERSION)
    blob += struct.pack("<B", len(tag))
    blob += tag
    blob += tensor_to_bytes(samples.images)
    blob += tensor_to_bytes(samples.class_ids.astype(np.float64))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_samples(path):
    from .tensor import tensor_from_bytes

    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    base = len(SAMPLES_MAGIC)
    if raw[:base] != SAMPLES_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:base]!r}, expected {SAMPLES_MAGIC!r}")
    if len(raw) < base + 2:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    version = raw[base]
    if version != SAMPLES_VERSION:
        raise DataFormatError(f"{path}: unsupported archive version {version}")
    tag_len = raw[base + 1]
    tag_end = base + 2 + tag_len
    if len(raw) < tag_end:
        raise DataFormatError(f"{path}: truncated split tag")
    tag = raw[base + 2:tag_end].decode("utf-8")
    images, offset = tensor_from_bytes(raw, tag_end)
    ids, offset = tensor_from_bytes(raw, offset)
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return SampleSet(images, ids.astype(np.int64), tag)


def save_manifest(manifest, path):
    """Write pairs as text: provenance header lines, then i<TAB>j<TAB>relation."""
    lines = [MANIFEST_HEADER]
    for key in sorted(manifest.provenance):
        lines.append(f"# {key}: {manifest.provenance[key]}")
    lines.append(f"# count: {len(manifest)}")
    for i, j, r in zip(manifest.idx1, manifest.idx2, manifest.rel):
        lines.append(f"{i}\t{j}\t{REL_NAMES[int(r)]}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    os.replace(tmp, path)


def load_manifest(path):
    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DataFormatError(f"{path}: missing header line {MANIFEST_HEADER!r}")
    provenance = {}
    declared = None
    idx1, idx2, rel = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if ":" in body:
                key, _, value = body.partition(":")
                key, value = key.strip(), value.strip()
                if key == "count":
                    declared = int(value)
                else:
                    provenance[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected 'i<TAB>j<TAB>relation', got {line!r}")
        i, j, name = parts
        if name not in REL_CODES:
            raise DataFormatError(
                f"{path}:{lineno}: unknown relation {name!r}, expected one of {sorted(REL_CODES)}")
        try:
            idx1.append(int(i))
            idx2.append(int(j))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-integer index: {exc}") from exc
        rel.append(REL_CODES[name])
    if declared is not None and declared != len(rel):
        raise DataFormatError(f"{path}: header declares {declared} pairs, file has {len(rel)}")
    return PairManifest(idx1, idx2, rel, provenance)


# ------------------------------------------------------------------ splits


def split_train_test(samples, test_fraction, seed):
    """Seeded permutation split into (train, test) SampleSets."""
    if not (0 < test_fraction < 1):
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(samples)
    order = derive_rng(seed, "train-test-split").permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return samples.subset(train_idx, "train"), samples.subset(test_idx, "test")


def split_disjoint_classes(samples, test_classes, seed=None):
    """Split by class membership so train and test share no classes."""
    test_classes = set(int(c) for c in test_classes)
    mask = np.isin(samples.class_ids, sorted(test_classes))
    if not mask.any() or mask.all():
        raise DataFormatError(
            f"disjoint split needs both sides non-empty; test classes {sorted(test_classes)}")
    train = samples.subset(np.flatnonzero(~mask), "train")
    test = samples.subset(np.flatnonzero(mask), "test")
    assert_class_disjoint(train, test)
    return train, test
