"""Dataset plumbing: feature files, annotation/manifest JSON, synthetic data.

Features are stored in a small self-describing binary format (magic "MCVF",
version, T, d, then float32 frames row-major) so external feature dumps can
be converted by a single ``write_features`` call. Annotations and manifests
are JSON. The synthetic generator plants concept-prototype shots with a
known highlight subset, which makes training and evaluation verifiable at
desk scale.

Annotation field notes (schema also shipped in the README):
  video_id       string, must match the manifest entry
  fps            frames per second of the feature sequence (default 2)
  frame_labels   optional binary list, length T
  importance     optional A x T list of per-annotator frame scores
  keyshots       optional A x T boolean list of per-annotator summaries
  boundaries     optional ascending shot-start indices (0-based, first 0)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .metrics import AnnotationSet
from .objectives import LabelSet
from .summarize import ShotSegmentation, make_summary

MAGIC = b"MCVF"
VERSION = 1
_HEADER = struct.Struct("<4sHII")   # magic, version, T, d


def write_features(path, x: np.ndarray) -> None:
    """Serialize a T x d feature matrix as float32."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DataError(f"features must be a nonempty T x d matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("features must be finite")
    x32 = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, x.shape[0], x.shape[1]))
        fh.write(x32.tobytes())


def read_features(path) -> np.ndarray:
    """Read a feature file back as float32; errors carry byte offsets."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(
            f"{path}: header truncated at byte {len(blob)}, need {_HEADER.size}")
    magic, version, t_len, d = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    expected = _HEADER.size + 4 * t_len * d
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for T={t_len} d={d}, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    return data.reshape(t_len, d).copy()


@dataclass
class AnnotationFile:
    video_id: str
    fps: float = 2.0
    frame_labels: list | None = None
    importance: list | None = None
    keyshots: list | None = None
    boundaries: list | None = None

    def save(self, path) -> None:
        payload = {"video_id": self.video_id, "fps": self.fps}
        if self.frame_labels is not None:
            payload["frame_labels"] = [int(v) for v in self.frame_labels]
        if self.importance is not None:
            payload["importance"] = [[float(v) for v in row] for row in self.importance]
        if self.keyshots is not None:
            payload["keyshots"] = [[bool(v) for v in row] for row in self.keyshots]
        if self.boundaries is not None:
            payload["boundaries"] = [int(v) for v in self.boundaries]
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "AnnotationFile":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid annotation JSON ({e})") from e
        if "video_id" not in payload:
            raise DataError(f"{path}: annotation missing video_id")
        return cls(
            video_id=payload["video_id"],
            fps=float(payload.get("fps", 2.0)),
            frame_labels=payload.get("frame_labels"),
            importance=payload.get("importance"),
            keyshots=payload.get("keyshots"),
            boundaries=payload.get("boundaries"),
        )

    def check_against(self, t_len: int, path="annotation") -> None:
        def bad(name, got):
            raise DataError(f"{path}: {name} covers {got} frames, features have {t_len}")

        if self.frame_labels is not None and len(self.frame_labels) != t_len:
            bad("frame_labels", len(self.frame_labels))
        for name, rows in (("importance", self.importance), ("keyshots", self.keyshots)):
            if rows is not None:
                for row in rows:
                    if len(row) != t_len:
                        bad(name, len(row))
        if self.boundaries is not None and self.boundaries:
            if self.boundaries[0] != 0 or max(self.boundaries) >= t_len:
                raise DataError(f"{path}: boundaries must start at 0 and stay below {t_len}")


@dataclass
class ManifestEntry:
    video_id: str
    feature_path: str
    annotation_path: str
    split: str = "train"
    labeled: bool = True


def save_manifest(entries: list, path) -> None:
    rows = [{"video_id": e.video_id, "feature_path": e.feature_path,
             "annotation_path": e.annotation_path, "split": e.split,
             "labeled": e.labeled} for e in entries]
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> list:
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid manifest JSON ({e})") from e
    if not isinstance(rows, list):
        raise DataError(f"{path}: manifest must be a JSON list")
    entries = []
    seen = set()
    for row in rows:
        try:
            entry = ManifestEntry(
                video_id=row["video_id"],
                feature_path=row["feature_path"],
                annotation_path=row["annotation_path"],
                split=row.get("split", "train"),
                labeled=bool(row.get("labeled", True)),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"{path}: malformed manifest row {row!r} ({e})") from e
        if entry.split not in ("train", "test"):
            raise DataError(f"{path}: split must be train or test, got {entry.split!r}")
        if entry.video_id in seen:
            raise DataError(f"{path}: duplicate video_id {entry.video_id!r}")
        seen.add(entry.video_id)
        entries.append(entry)
    return entries


@dataclass
class Video:
    video_id: str
    features: np.ndarray           # T x d float32
    labels: LabelSet
    annotations: AnnotationSet
    boundaries: ShotSegmentation | None
    split: str
    fps: float = 2.0

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    videos: list

    def subset(self, split: str) -> list:
        return [v for v in self.videos if v.split == split]

    @property
    def feature_dim(self) -> int:
        return self.videos[0].features.shape[1]


def load_dataset(manifest_path) -> Dataset:
    """Resolve a manifest into memory, enforcing the label mask.

    Videos flagged ``labeled: false`` get an absent LabelSet even when their
    annotation file carries frame labels, so unlabeled data can never reach
    the classification loss.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    entries = load_manifest(manifest_path)
    if not entries:
        raise DataError(f"{manifest_path}: manifest lists no videos")
    videos = []
    for e in entries:
        feat_path = base / e.feature_path
        ann_path = base / e.annotation_path
        if not feat_path.exists():
            raise DataError(f"{manifest_path}: feature file {feat_path} not found")
        if not ann_path.exists():
            raise DataError(f"{manifest_path}: annotation file {ann_path} not found")
        features = read_features(feat_path)
        ann = AnnotationFile.load(ann_path)
        ann.check_against(features.shape[0], path=str(ann_path))
        if ann.video_id != e.video_id:
            raise DataError(
                f"{ann_path}: annotation video_id {ann.video_id!r} != manifest {e.video_id!r}")
        if e.labeled and ann.frame_labels is not None:
            labels = LabelSet.of(ann.frame_labels)
        else:
            labels = LabelSet.absent()
        boundaries = None
        if ann.boundaries:
            boundaries = ShotSegmentation(tuple(ann.boundaries), features.shape[0])
        videos.append(Video(
            video_id=e.video_id,
            features=features,
            labels=labels,
            annotations=AnnotationSet(
                importance=None if ann.importance is None else np.asarray(ann.importance),
                keyshots=None if ann.keyshots is None else np.asarray(ann.keyshots, dtype=bool),
            ),
            boundaries=boundaries,
            split=e.split,
            fps=ann.fps,
        ))
    return Dataset(videos=videos)


# ---------------------------------------------------------------------------
# synthetic planted-highlight generator


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic dataset.

    Each video is a random arrangement of constant-prototype shots plus
    Gaussian noise. Prototypes are unit vectors shared across the dataset,
    split into a small highlight pool and filler concepts; every video draws
    one dominant filler concept, so videos differ and a per-video code is
    worth learning. Highlight shots jointly occupy
    floor(highlight_fraction * T) frames so a budget of the same fraction
    can cover them exactly, while filler shot lengths vary widely enough
    that many other selections fit the same budget.
    """

    seed: int = 0
    n_videos: int = 20
    t_min: int = 48
    t_max: int = 96
    d: int = 32
    n_concepts: int = 4
    shots_per_video: int = 12
    highlight_fraction: float = 0.15
    noise_sigma: float = 0.05
    n_annotators: int = 3
    test_fraction: float = 0.2

    def validate(self) -> None:
        if not 0.0 < self.highlight_fraction < 1.0:
            raise DataError(f"highlight_fraction must be in (0,1), got {self.highlight_fraction}")
        if self.n_concepts > self.d:
            raise DataError(f"n_concepts {self.n_concepts} exceeds feature dim {self.d}")
        if self.n_concepts < 2:
            raise DataError("need at least 2 concepts (one highlight pool, one filler)")
        if self.t_min < self.shots_per_video or self.t_min > self.t_max:
            raise DataError(
                f"frame range [{self.t_min}, {self.t_max}] too small for "
                f"{self.shots_per_video} shots")
        if self.n_videos < 2:
            raise DataError("need at least 2 videos to split train/test")


def _even_split(total: int, parts: int) -> list:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _ragged_split(total: int, parts: int, rng: np.random.Generator,
                  floor: int = 3) -> list:
    """Split ``total`` into ``parts`` varied sizes (largest-remainder rounding)."""
    if total < parts * floor:
        return _even_split(total, parts)
    weights = rng.uniform(0.4, 1.6, size=parts)
    raw = weights / weights.sum() * (total - parts * floor)
    sizes = np.floor(raw).astype(int)
    remainder = int(total - parts * floor - sizes.sum())
    order = np.argsort(-(raw - sizes), kind="stable")
    for i in range(remainder):
        sizes[order[i]] += 1
    return (sizes + floor).tolist()


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write a full synthetic dataset; returns the manifest path.

    The same spec always produces byte-identical files.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    protos = rng.normal(size=(spec.n_concepts, spec.d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    n_pool = min(max(1, round(spec.n_concepts * spec.highlight_fraction)),
                 spec.n_concepts - 1)
    highlight_concepts = np.arange(n_pool)
    filler_concepts = np.arange(n_pool, spec.n_concepts)

    entries = []
    for vi in range(spec.n_videos):
        vid = f"video{vi:03d}"
        t_len = int(rng.integers(spec.t_min, spec.t_max + 1))
        n_shots = spec.shots_per_video
        n_high = max(1, round(spec.highlight_fraction * n_shots))
        n_high = min(n_high, n_shots - 1)
        high_frames = max(n_high, int(np.floor(spec.highlight_fraction * t_len + 1e-9)))
        sizes = (_even_split(high_frames, n_high)
                 + _ragged_split(t_len - high_frames, n_shots - n_high, rng))
        if min(sizes) < 1:
            raise DataError(
                f"cannot fit {n_shots} nonempty shots into {t_len} frames at "
                f"highlight_fraction={spec.highlight_fraction}")
        flags = [True] * n_high + [False] * (n_shots - n_high)
        order = rng.permutation(n_shots)
        sizes = [sizes[i] for i in order]
        flags = [flags[i] for i in order]
        dominant = int(filler_concepts[rng.integers(0, filler_concepts.size)])

        frames = np.empty((t_len, spec.d))
        labels = np.zeros(t_len, dtype=int)
        starts = []
        cursor = 0
        for size, is_high in zip(sizes, flags):
            if is_high:
                concept = int(highlight_concepts[rng.integers(0, highlight_concepts.size)])
            else:
                concept = dominant
            block = protos[concept] + rng.normal(0.0, spec.noise_sigma, size=(size, spec.d))
            frames[cursor:cursor + size] = block
            labels[cursor:cursor + size] = int(is_high)
            starts.append(cursor)
            cursor += size
        seg = ShotSegmentation(tuple(starts), t_len)

        importance = labels[None, :] + rng.uniform(0.0, 0.2, size=(spec.n_annotators, t_len))
        keyshots = np.stack([
            make_summary(row, seg, budget_fraction=spec.highlight_fraction).selected
            for row in importance])

        write_features(out_dir / "features" / f"{vid}.mcvf", frames)
        AnnotationFile(
            video_id=vid,
            fps=2.0,
            frame_labels=labels.tolist(),
            importance=importance.tolist(),
            keyshots=keyshots.tolist(),
            boundaries=list(seg.boundaries),
        ).save(out_dir / "annotations" / f"{vid}.json")
        entries.append(ManifestEntry(
            video_id=vid,
            feature_path=f"features/{vid}.mcvf",
            annotation_path=f"annotations/{vid}.json",
        ))

    n_test = max(1, round(spec.test_fraction * spec.n_videos))
    test_ids = rng.choice(spec.n_videos, size=n_test, replace=False)
    for ti in test_ids:
        entries[ti].split = "test"
    manifest_path = out_dir / "manifest.json"
    save_manifest(entries, manifest_path)
    return manifest_path
