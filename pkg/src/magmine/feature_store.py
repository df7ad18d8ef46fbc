"""On-disk dataset model: FVEC feature matrices plus a JSON manifest.

FVEC layout (little-endian)::

    0-3   magic b"FVEC"
    4-5   version (u16) = 1
    6-7   reserved (u16) = 0
    8-11  T, number of rows (u32)
    12-15 D, number of columns (u32)
    16-   T*D float32 values, row-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FVEC"
VERSION = 1
HEADER = struct.Struct("<4sHHII")
SPLITS = ("train", "val", "test")


class FeatureFormatError(ValueError):
    """Raised for malformed FVEC files."""


class ManifestError(ValueError):
    """Raised when a manifest violates the dataset schema or its invariants."""


@dataclass
class FeatureMatrix:
    video_id: str
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"{self.video_id}: feature matrix must be T x D with T, D >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"{self.video_id}: feature matrix has non-finite entries")
        self.data = data

    @property
    def num_snippets(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AnnotationSpan:
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if self.start_frame < 0 or self.end_frame <= self.start_frame:
            raise ManifestError(f"bad span [{self.start_frame}, {self.end_frame})")

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame


@dataclass
class VideoRecord:
    video_id: str
    label: int
    num_frames: int
    feature_path: str
    spans: list[AnnotationSpan] = field(default_factory=list)
    snippet_len: int = 16

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "label": int(self.label),
            "num_frames": int(self.num_frames),
            "snippet_len": int(self.snippet_len),
            "spans": [[s.start_frame, s.end_frame] for s in self.spans],
            "feature_path": self.feature_path,
        }


@dataclass
class DatasetManifest:
    name: str
    dim: int
    snippet_len: int
    splits: dict[str, list[VideoRecord]]
    root: Path = Path(".")
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def records(self, split: str) -> list[VideoRecord]:
        return self.splits.get(split, [])

    def feature_file(self, record: VideoRecord) -> Path:
        return self.root / record.feature_path

    def load(self, record: VideoRecord) -> np.ndarray:
        """Feature matrix of ``record`` as float64 (cached after the first read)."""
        if record.video_id not in self._cache:
            fm = read_features(self.feature_file(record), expected_dim=self.dim)
            check_snippet_count(record, fm.num_snippets)
            self._cache[record.video_id] = fm.data.astype(np.float64)
        return self._cache[record.video_id]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "dim": int(self.dim),
            "snippet_len": int(self.snippet_len),
            "splits": {k: [r.to_json() for r in v] for k, v in self.splits.items()},
        }


def write_features(matrix: FeatureMatrix, path) -> None:
    data = np.asarray(matrix.data)
    if data.ndim != 2 or not np.all(np.isfinite(data)):
        raise ValueError(f"{matrix.video_id}: refusing to write non-finite or non-2D matrix")
    t, d = data.shape
    with np.errstate(over="ignore"):
        payload = np.ascontiguousarray(data, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise ValueError(f"{matrix.video_id}: values overflow float32")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, 0, t, d))
        fh.write(payload.tobytes())
    os.replace(tmp, path)


def read_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, _reserved, t, d = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if t < 1 or d < 1:
        raise FeatureFormatError(f"{path}: empty shape {t}x{d}")
    return t, d


def read_features(path, expected_dim: int | None = None) -> FeatureMatrix:
    path = Path(path)
    t, d = read_header(path)
    if expected_dim is not None and d != expected_dim:
        raise FeatureFormatError(f"{path}: dim {d} does not match manifest dim {expected_dim}")
    raw = path.read_bytes()[HEADER.size:]
    if len(raw) != t * d * 4:
        raise FeatureFormatError(f"{path}: payload has {len(raw)} bytes, header declares {t * d * 4}")
    data = np.frombuffer(raw, dtype="<f4").reshape(t, d).copy()
    if not np.all(np.isfinite(data)):
        raise FeatureFormatError(f"{path}: non-finite values in payload")
    return FeatureMatrix(path.stem, data)


def _parse_record(raw: dict, default_snippet_len: int) -> VideoRecord:
    required = {"video_id", "label", "num_frames", "spans", "feature_path"}
    missing = required - raw.keys()
    if missing:
        raise ManifestError(f"record missing keys {sorted(missing)}: {raw}")
    extra = raw.keys() - required - {"snippet_len"}
    if extra:
        raise ManifestError(f"record has unknown keys {sorted(extra)}")
    vid = raw["video_id"]
    label = raw["label"]
    if label not in (0, 1) or isinstance(label, bool):
        raise ManifestError(f"{vid}: label must be 0 or 1")
    num_frames = raw["num_frames"]
    if not isinstance(num_frames, int) or num_frames < 1:
        raise ManifestError(f"{vid}: num_frames must be a positive integer")
    snippet_len = raw.get("snippet_len", default_snippet_len)
    if not isinstance(snippet_len, int) or snippet_len < 1:
        raise ManifestError(f"{vid}: snippet_len must be a positive integer")
    spans = []
    for pair in raw["spans"]:
        if len(pair) != 2 or not all(isinstance(v, int) for v in pair):
            raise ManifestError(f"{vid}: span must be a pair of integers, got {pair}")
        spans.append(AnnotationSpan(pair[0], pair[1]))
    for prev, cur in zip(spans, spans[1:]):
        if cur.start_frame < prev.end_frame:
            raise ManifestError(f"{vid}: spans overlap or are unsorted: {prev} {cur}")
    if label == 0 and spans:
        raise ManifestError(f"{vid}: normal video carries spans")
    if spans and spans[-1].end_frame > num_frames:
        raise ManifestError(f"{vid}: span ends beyond num_frames={num_frames}")
    return VideoRecord(vid, label, num_frames, raw["feature_path"], spans, snippet_len)


def check_snippet_count(record: VideoRecord, num_snippets: int) -> None:
    n, L = record.num_frames, record.snippet_len
    if n < L:
        ok = num_snippets == 1
    else:
        ok = num_snippets * L <= n < (num_snippets + 1) * L
    if not ok:
        raise ManifestError(
            f"{record.video_id}: {num_snippets} snippets of {L} frames inconsistent with {n} frames"
        )


def parse_manifest(doc: dict, root=".", check_features: bool = True) -> DatasetManifest:
    for key in ("name", "dim", "snippet_len", "splits"):
        if key not in doc:
            raise ManifestError(f"manifest missing key {key!r}")
    extra = doc.keys() - {"name", "dim", "snippet_len", "splits"}
    if extra:
        raise ManifestError(f"manifest has unknown keys {sorted(extra)}")
    dim, snippet_len = doc["dim"], doc["snippet_len"]
    if not isinstance(dim, int) or dim < 1 or not isinstance(snippet_len, int) or snippet_len < 1:
        raise ManifestError("dim and snippet_len must be positive integers")
    bad = set(doc["splits"]) - set(SPLITS)
    if bad:
        raise ManifestError(f"unknown splits {sorted(bad)}")
    splits = {name: [_parse_record(r, snippet_len) for r in recs] for name, recs in doc["splits"].items()}
    seen = set()
    for recs in splits.values():
        for r in recs:
            if r.video_id in seen:
                raise ManifestError(f"duplicate video_id {r.video_id}")
            seen.add(r.video_id)
    train = splits.get("train", [])
    if not any(r.label == 1 for r in train) or not any(r.label == 0 for r in train):
        raise ManifestError("train split needs at least one abnormal and one normal video")
    manifest = DatasetManifest(doc["name"], dim, snippet_len, splits, Path(root))
    if check_features:
        for recs in splits.values():
            for r in recs:
                path = manifest.feature_file(r)
                if not path.is_file():
                    raise ManifestError(f"{r.video_id}: feature file {path} not found")
                t, d = read_header(path)
                if d != dim:
                    raise ManifestError(f"{r.video_id}: feature dim {d} != manifest dim {dim}")
                check_snippet_count(r, t)
    return manifest


def load_manifest(path, check_features: bool = True) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    return parse_manifest(doc, root=path.parent, check_features=check_features)


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1)
        fh.write("\n")


def frame_labels_from_spans(record: VideoRecord) -> np.ndarray:
    labels = np.zeros(record.num_frames, dtype=np.int8)
    for span in record.spans:
        if span.end_frame > record.num_frames:
            raise ManifestError(f"{record.video_id}: span {span} beyond num_frames={record.num_frames}")
        labels[span.start_frame:span.end_frame] = 1
    return labels
