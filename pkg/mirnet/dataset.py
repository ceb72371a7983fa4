"""
dataset.py

Synthetic multi-label image benchmark with planted label structure.

- Labels are drawn sequentially in index order. Correlated partners raise the
  draw probability; constraint rules force values (mutual exclusion -> 0,
  co-appearance -> copy, implication -> 1 / 0) and rows with conflicting forces
  are redrawn. Draw probabilities are calibrated so realized prevalences hit
  their targets despite the forcing.
- Every positive label paints its own region (color blend + checker texture),
  then gaussian pixel noise is added. Images are plain-text PPM (P3) files.
- The manifest is a JSON document (schema version 1) listing samples, splits,
  label names, dimension groups, rules and the train-split prevalence.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import roc_auc_score
from tqdm import tqdm

from mirnet.artifacts import atomic_write_text, read_json, write_json
from mirnet.losses import ConstraintKind, ConstraintRule

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("pretrain-unlabeled", "train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
PPM_MAXVAL = 255

CALIBRATION_ROUNDS = 12
CALIBRATION_SAMPLES = 20000
MAX_REDRAWS = 200
MAX_DATASET_ATTEMPTS = 1000
DRAW_PROB_BOUNDS = (1e-6, 1.0 - 1e-6)

# tongue-term table layout: four families, 22 labels, reported prevalences
FULL_GROUPS = {
    "tongue_color": [0, 1, 2, 3, 4],
    "tongue_shape": [5, 6, 7, 8, 9, 10, 11],
    "coating_property": [12, 13, 14, 15, 16, 17, 18],
    "coating_color": [19, 20, 21],
}
FULL_PREVALENCE = [
    0.2367, 0.5280, 0.1427, 0.0215, 0.1553,
    0.0460, 0.0470, 0.0805, 0.1315, 0.2288, 0.2157, 0.5367,
    0.0370, 0.0352, 0.6758, 0.2412, 0.4608, 0.0555, 0.2825,
    0.7838, 0.3255, 0.0335,
]


class GeneratorError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class MissingImageError(ManifestError):
    pass


class DuplicateIdError(ManifestError):
    pass


class PrevalenceMismatchError(ManifestError):
    pass


class ImageFormatError(ManifestError):
    pass


@dataclass
class LabelAppearance:
    row: int
    col: int
    height: int
    width: int
    color: list[float]
    texture: float = 0.1


@dataclass
class CorrelatedPair:
    i: int
    j: int
    strength: float


@dataclass
class GeneratorConfig:
    num_labels: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    patch_size: int = 8
    prevalence: list[float] = field(default_factory=lambda: [0.3, 0.25, 0.2, 0.35, 0.3, 0.25, 0.15, 0.03])
    correlated_pairs: list[CorrelatedPair] = field(default_factory=list)
    rules: list[ConstraintRule] | str = field(default_factory=list)
    appearance: list[LabelAppearance] | None = None
    label_names: list[str] | None = None
    groups: dict[str, list[int]] | None = None
    noise_sigma: float = 0.05
    blend: float = 0.6
    prevalence_tolerance: float = 0.2
    seed: int = 0

    def resolved_label_names(self) -> list[str]:
        return self.label_names or [f"label_{k:02d}" for k in range(self.num_labels)]

    def resolved_groups(self) -> dict[str, list[int]]:
        if self.groups:
            return {name: list(members) for name, members in self.groups.items()}
        # four contiguous families, like the four diagnostic dimensions
        chunks = np.array_split(np.arange(self.num_labels), min(4, self.num_labels))
        return {f"dim_{g}": [int(k) for k in chunk] for g, chunk in enumerate(chunks)}

    def resolved_appearance(self) -> list[LabelAppearance]:
        if self.appearance is not None:
            return self.appearance
        grid_w = self.width // self.patch_size
        cells = (self.height // self.patch_size) * grid_w
        out = []
        for k in range(self.num_labels):
            cell = k % cells
            hue = (k * 0.618033988749895) % 1.0
            color = list(colorsys.hsv_to_rgb(hue, 0.8, 0.9))
            out.append(LabelAppearance(row=(cell // grid_w) * self.patch_size, col=(cell % grid_w) * self.patch_size,
                                       height=self.patch_size, width=self.patch_size, color=color))
        return out


@dataclass
class SampleRecord:
    id: str
    image: str
    labels: list[int] | None
    split: str


@dataclass
class DatasetManifest:
    label_names: list[str]
    groups: dict[str, list[int]]
    samples: list[SampleRecord]
    prevalence: list[float]
    rules: list[ConstraintRule] = field(default_factory=list)
    seed: int = 0
    height: int = 32
    width: int = 32
    root: Path | None = None

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def split(self, name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == name]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "image_size": [self.height, self.width],
            "label_names": self.label_names,
            "groups": self.groups,
            "rules": [r.to_dict() for r in self.rules],
            "prevalence": self.prevalence,
            "samples": [{"id": s.id, "image": s.image, "labels": s.labels, "split": s.split} for s in self.samples],
        }


# -- configuration checks ----------------------------------------------------

def prevalence_band(n: int, prevalence, tolerance: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest and largest positive count per label that stays within the relative tolerance."""
    pi = np.asarray(prevalence, dtype=np.float64)
    low = np.ceil(n * pi * (1.0 - tolerance) - 1e-9).astype(int)
    high = np.floor(n * pi * (1.0 + tolerance) + 1e-9).astype(int)
    return low, high


def check_feasible(config: GeneratorConfig, n_labeled: int | None = None) -> None:
    """Reject configs whose targets cannot hold together with their rules or the labeled sample count."""
    K = config.num_labels
    pi = np.asarray(config.prevalence, dtype=np.float64)
    if K < 1 or pi.shape != (K,):
        raise GeneratorError(f"prevalence needs {K} entries, got {len(config.prevalence)}")
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise GeneratorError("every prevalence target must lie strictly inside (0, 1)")
    if n_labeled is not None:
        if n_labeled < 10 * K:
            raise GeneratorError(f"n_labeled={n_labeled} is below 10*K={10 * K}")
        low, high = prevalence_band(n_labeled, pi, config.prevalence_tolerance)
        unreachable = np.flatnonzero(low > high)
        if unreachable.size:
            k = int(unreachable[0])
            raise GeneratorError(f"label {k}: no count out of {n_labeled} samples lies within "
                                 f"+/-{config.prevalence_tolerance:.0%} of prevalence {pi[k]}")
    if config.height % config.patch_size or config.width % config.patch_size:
        raise GeneratorError(f"image {config.height}x{config.width} is not divisible by patch size {config.patch_size}")
    if config.channels != 3:
        raise GeneratorError("images must have 3 channels")
    if not isinstance(config.rules, list):
        raise GeneratorError("rules must be resolved to a list before generation")

    groups = config.resolved_groups()
    members = sorted(k for group in groups.values() for k in group)
    if members != list(range(K)):
        raise GeneratorError("dimension groups must partition the label indices")

    for pair in config.correlated_pairs:
        if pair.i == pair.j or not (0 <= pair.i < K and 0 <= pair.j < K) or not 0.0 <= pair.strength <= 1.0:
            raise GeneratorError(f"bad correlated pair ({pair.i}, {pair.j}, {pair.strength})")

    tol = config.prevalence_tolerance
    for rule in config.rules:
        try:
            rule.validate(K)
        except ValueError as exc:
            raise GeneratorError(str(exc)) from exc
        pa, pb = pi[rule.a], pi[rule.b]
        if rule.kind is ConstraintKind.MUTUAL_EXCLUSION and pa + pb > 1.0:
            raise GeneratorError(f"{rule.describe()}: prevalences {pa} + {pb} exceed 1, "
                                 "so the labels would have to co-occur")
        if rule.kind is ConstraintKind.IMPLICATION and pa > pb:
            raise GeneratorError(f"{rule.describe()}: label {rule.a} requires label {rule.b}, "
                                 f"so its prevalence {pa} cannot exceed {pb}")
        if rule.kind is ConstraintKind.CO_APPEARANCE and abs(pa - pb) > tol * max(pa, pb):
            raise GeneratorError(f"{rule.describe()}: co-appearing labels need matching prevalences, got {pa} and {pb}")


# -- label sampling ------------------------------------------------------------

def _draw(m: int, draw_prob: np.ndarray, config: GeneratorConfig,
          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    K = config.num_labels
    y = np.zeros((m, K), dtype=np.int8)
    conflict = np.zeros(m, dtype=bool)
    for k in range(K):
        p = np.full(m, draw_prob[k])
        for pair in config.correlated_pairs:
            partner = pair.i if pair.j == k else pair.j if pair.i == k else None
            if partner is not None and partner < k:
                p = np.where(y[:, partner] == 1, p + pair.strength * (1.0 - p), p)
        value = rng.random(m) < p
        force_one = np.zeros(m, dtype=bool)
        force_zero = np.zeros(m, dtype=bool)
        for rule in config.rules:
            if k not in (rule.a, rule.b):
                continue
            other = rule.b if rule.a == k else rule.a
            if other > k:
                continue
            partner_on = y[:, other] == 1
            if rule.kind is ConstraintKind.MUTUAL_EXCLUSION:
                force_zero |= partner_on
            elif rule.kind is ConstraintKind.CO_APPEARANCE:
                force_one |= partner_on
                force_zero |= ~partner_on
            elif k == rule.b:
                force_one |= partner_on
            else:
                force_zero |= ~partner_on
        conflict |= force_one & force_zero
        y[:, k] = np.where(force_one, 1, np.where(force_zero, 0, value))
    return y, conflict


def _sample_with_redraws(n: int, draw_prob: np.ndarray, config: GeneratorConfig,
                         rng: np.random.Generator) -> np.ndarray:
    Y = np.zeros((n, config.num_labels), dtype=np.int8)
    pending = np.ones(n, dtype=bool)
    for _ in range(MAX_REDRAWS):
        rows = np.flatnonzero(pending)
        if rows.size == 0:
            return Y
        drawn, conflict = _draw(rows.size, draw_prob, config, rng)
        Y[rows] = drawn
        pending[rows] = conflict
    raise GeneratorError(f"rules conflict on {int(pending.sum())} rows after {MAX_REDRAWS} redraws")


def calibrate_draw_probabilities(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    target = np.asarray(config.prevalence, dtype=np.float64)
    q = target.copy()
    for _ in range(CALIBRATION_ROUNDS):
        realized = _sample_with_redraws(CALIBRATION_SAMPLES, q, config, rng).mean(axis=0)
        q = np.clip(q * target / np.maximum(realized, 1e-6), *DRAW_PROB_BOUNDS)
    realized = _sample_with_redraws(CALIBRATION_SAMPLES, q, config, rng).mean(axis=0)
    off = np.abs(realized - target) > config.prevalence_tolerance * target
    if off.any():
        bad = ", ".join(f"{k}: target {target[k]:.4f} reached {realized[k]:.4f}" for k in np.flatnonzero(off))
        raise GeneratorError(f"rules and correlations cannot realize the prevalence targets ({bad})")
    return q


def sample_labels(config: GeneratorConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """n label vectors that satisfy every rule, with calibrated prevalence."""
    check_feasible(config)
    draw_prob = calibrate_draw_probabilities(config, rng)
    return _sample_with_redraws(n, draw_prob, config, rng)


# -- rendering and PPM I/O -----------------------------------------------------

def render_image(labels: np.ndarray, config: GeneratorConfig, appearance: list[LabelAppearance],
                 rng: np.random.Generator) -> np.ndarray:
    H, W, C = config.height, config.width, config.channels
    tint = rng.uniform(-0.05, 0.05, size=C)
    image = np.broadcast_to(0.5 + tint, (H, W, C)).copy()
    for k in np.flatnonzero(labels):
        look = appearance[k]
        r0, c0 = look.row, look.col
        r1, c1 = min(H, r0 + look.height), min(W, c0 + look.width)
        rows, cols = np.mgrid[r0:r1, c0:c1]
        checker = np.where((rows + cols) % 2 == 0, 1.0, -1.0)[..., None]
        region = image[r0:r1, c0:c1]
        tinted = (1.0 - config.blend) * region + config.blend * np.asarray(look.color)
        image[r0:r1, c0:c1] = tinted + look.texture * checker
    image += rng.normal(0.0, config.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def write_ppm(path: Path, image: np.ndarray) -> Path:
    H, W, _ = image.shape
    values = np.rint(np.clip(image, 0.0, 1.0) * PPM_MAXVAL).astype(np.int64).reshape(H, W * 3)
    body = "\n".join(" ".join(map(str, row)) for row in values)
    return atomic_write_text(path, f"P3\n{W} {H}\n{PPM_MAXVAL}\n{body}\n")


def read_ppm(path: Path) -> np.ndarray:
    """P3 image as an H x W x 3 float array in [0, 1]."""
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise ImageFormatError(f"{path}: unreadable PPM ({exc})") from exc
    tokens = " ".join(line.split("#", 1)[0] for line in text.splitlines()).split()
    if len(tokens) < 4 or tokens[0] != "P3":
        raise ImageFormatError(f"{path}: not a plain PPM (P3) file")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        pixels = np.array(tokens[4:], dtype=np.int64)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PPM ({exc})") from exc
    if pixels.size != width * height * 3 or maxval <= 0:
        raise ImageFormatError(f"{path}: expected {width * height * 3} samples, found {pixels.size}")
    return pixels.reshape(height, width, 3).astype(np.float64) / maxval


# -- manifest --------------------------------------------------------------------

def compute_prevalence(manifest: DatasetManifest, split: str = "train") -> list[float]:
    """pi_k = positives of label k in the split / split size."""
    samples = manifest.split(split)
    if not samples:
        raise ManifestError(f"split '{split}' is empty")
    Y = np.array([s.labels for s in samples], dtype=np.int64)
    counts = Y.sum(axis=0)
    return [int(c) / len(samples) for c in counts]


def _split_assignment(n: int, rng: np.random.Generator) -> list[str]:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    order = rng.permutation(n)
    splits = [""] * n
    for rank, idx in enumerate(order):
        splits[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return splits


def _within_tolerance(Y: np.ndarray, config: GeneratorConfig) -> bool:
    low, high = prevalence_band(len(Y), config.prevalence, config.prevalence_tolerance)
    counts = Y.sum(axis=0)
    return bool(np.all((counts >= low) & (counts <= high)))


def generate(config: GeneratorConfig, n_labeled: int, n_unlabeled: int, out_dir: Path,
             show_progress: bool = True) -> DatasetManifest:
    """Write images plus manifest.json under out_dir; returns the manifest."""
    check_feasible(config, n_labeled)
    K = config.num_labels
    if n_unlabeled < 0:
        raise GeneratorError("n_unlabeled must be non-negative")

    rng = np.random.default_rng(config.seed)
    draw_prob = calibrate_draw_probabilities(config, rng)
    for _ in range(MAX_DATASET_ATTEMPTS):
        Y = _sample_with_redraws(n_labeled, draw_prob, config, rng)
        if _within_tolerance(Y, config):
            break
    else:
        raise GeneratorError(f"labeled prevalence stayed outside the +/-{config.prevalence_tolerance:.0%} band "
                             f"after {MAX_DATASET_ATTEMPTS} draws of {n_labeled} samples")
    for rule in config.rules:
        if rule.violations(Y).any():
            raise GeneratorError(f"sampled labels violate {rule.describe()}")

    splits = _split_assignment(n_labeled, rng)
    unlabeled_Y = _sample_with_redraws(n_unlabeled, draw_prob, config, rng) if n_unlabeled else np.zeros((0, K))
    appearance = config.resolved_appearance()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    samples: list[SampleRecord] = []
    jobs = [(f"L{i:05d}", Y[i], splits[i]) for i in range(n_labeled)]
    jobs += [(f"U{i:05d}", unlabeled_Y[i], "pretrain-unlabeled") for i in range(n_unlabeled)]
    for sample_id, labels, split in tqdm(jobs, desc="Images", disable=not show_progress):
        image = render_image(labels, config, appearance, rng)
        relative = f"images/{sample_id}.ppm"
        write_ppm(out_dir / relative, image)
        is_labeled = split != "pretrain-unlabeled"
        samples.append(SampleRecord(sample_id, relative, [int(v) for v in labels] if is_labeled else None, split))

    manifest = DatasetManifest(label_names=config.resolved_label_names(), groups=config.resolved_groups(),
                               samples=samples, prevalence=[], rules=list(config.rules), seed=config.seed,
                               height=config.height, width=config.width, root=out_dir)
    manifest.prevalence = compute_prevalence(manifest, "train")
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def save_manifest(manifest: DatasetManifest, path: Path) -> Path:
    return write_json(path, manifest.to_dict())


def load_manifest(path: Path, check_images: bool = True) -> DatasetManifest:
    """Parse and re-validate a manifest; every referenced image must exist and parse."""
    path = Path(path)
    raw = read_json(path)
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"{path}: unsupported schema_version {raw.get('schema_version')!r}")
    try:
        height, width = raw["image_size"]
        samples = [SampleRecord(s["id"], s["image"], s["labels"], s["split"]) for s in raw["samples"]]
        manifest = DatasetManifest(label_names=list(raw["label_names"]),
                                   groups={k: list(v) for k, v in raw["groups"].items()},
                                   samples=samples, prevalence=[float(v) for v in raw["prevalence"]],
                                   rules=[ConstraintRule.from_dict(r) for r in raw.get("rules", [])],
                                   seed=int(raw.get("seed", 0)), height=int(height), width=int(width),
                                   root=path.parent)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: schema violation ({exc})") from exc

    seen: set[str] = set()
    for sample in manifest.samples:
        if sample.id in seen:
            raise DuplicateIdError(f"duplicate sample id '{sample.id}'")
        seen.add(sample.id)
        if sample.split not in SPLITS:
            raise ManifestError(f"sample '{sample.id}': unknown split '{sample.split}'")
        labeled = sample.split != "pretrain-unlabeled"
        if labeled and (sample.labels is None or len(sample.labels) != manifest.num_labels):
            raise ManifestError(f"sample '{sample.id}': expected {manifest.num_labels} labels")
        image_path = path.parent / sample.image
        if not image_path.exists():
            raise MissingImageError(f"sample '{sample.id}': image {image_path} does not exist")
        if check_images:
            image = read_ppm(image_path)
            if image.shape != (manifest.height, manifest.width, 3):
                raise ImageFormatError(f"sample '{sample.id}': image shape {image.shape} does not match the manifest")

    recomputed = compute_prevalence(manifest, "train")
    if recomputed != manifest.prevalence:
        raise PrevalenceMismatchError(f"stored prevalence {manifest.prevalence} != train-split prevalence {recomputed}")
    return manifest


def load_split_arrays(manifest: DatasetManifest, split: str) -> tuple[list[str], np.ndarray, np.ndarray | None]:
    """(ids, images N x H x W x 3, labels N x K or None for the unlabeled pool)."""
    samples = manifest.split(split)
    if not samples:
        raise ManifestError(f"split '{split}' is empty")
    root = manifest.root or Path(".")
    images = np.stack([read_ppm(root / s.image) for s in samples])
    labels = None if split == "pretrain-unlabeled" else np.array([s.labels for s in samples], dtype=np.int64)
    return [s.id for s in samples], images, labels


def pooled_features(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-patch channel means, flattened: (N, H/P * W/P * C)."""
    images = np.asarray(images, dtype=np.float64)
    N, H, W, C = images.shape
    grid = images.reshape(N, H // patch_size, patch_size, W // patch_size, patch_size, C)
    return grid.mean(axis=(2, 4)).reshape(N, -1)


def separability_auc(images: np.ndarray, labels: np.ndarray, patch_size: int, fit_fraction: float = 0.5) -> np.ndarray:
    """Least-squares readout on pooled pixels; ROC-AUC per label on the held-out part (nan when one class only)."""
    X = pooled_features(images, patch_size)
    X = np.hstack([X, np.ones((len(X), 1))])
    Y = np.asarray(labels, dtype=np.float64)
    cut = int(round(fit_fraction * len(X)))
    if cut < 1 or cut >= len(X):
        raise GeneratorError(f"readout needs samples on both sides of the fit split, got {len(X)}")
    weights, *_ = np.linalg.lstsq(X[:cut], Y[:cut], rcond=None)
    scores = X[cut:] @ weights
    out = np.full(Y.shape[1], np.nan)
    for k in range(Y.shape[1]):
        held = Y[cut:, k]
        if 0.0 < held.mean() < 1.0:
            out[k] = roc_auc_score(held, scores[:, k])
    return out
