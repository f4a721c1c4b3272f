"""Datasets on disk, the HVQF tensor format and model checkpoints.

Directory layout, one folder per activity::

    <root>/<activity>/features/<video>.hvqf   (or <video>.csv)
    <root>/<activity>/labels/<video>.txt      one label token per line
    <root>/<activity>/labels_sub/<video>.txt  optional finer labels
    <root>/<activity>/meta.json               optional: {"labels": [...], "K": n, "background": tok}

HVQF feature files are ``b"HVQF"``, uint32 version (1), uint32 T, uint32 F,
then ``T * F`` little-endian float32 values, row-major.
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .numerics import ParamStore
from .quantizer import Codebook
from .tcn import DataError, TcnConfig, TcnModel

logger = logging.getLogger(__name__)

MAGIC = b"HVQF"
FEATURE_VERSION = 1
# Checkpoint tensors reuse the HVQF framing with version 2 = float64 payload.
TENSOR64_VERSION = 2
CKPT_MAGIC = b"HVQC"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed file contents."""


@dataclass
class VideoFeatures:
    id: str
    frames: np.ndarray

    def __post_init__(self) -> None:
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"video {self.id!r}: features must be a non-empty (T, F) matrix, "
                            f"got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"video {self.id!r}: non-finite feature values")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class ActivityDataset:
    name: str
    videos: List[VideoFeatures]
    labels: Optional[List[np.ndarray]] = None
    K: Optional[int] = None
    background: Optional[int] = None
    label_names: List[str] = field(default_factory=list)
    sub_labels: Optional[List[np.ndarray]] = None

    def __post_init__(self) -> None:
        if self.labels is not None:
            if len(self.labels) != len(self.videos):
                raise DataError(f"activity {self.name!r}: {len(self.labels)} label tracks "
                                f"for {len(self.videos)} videos")
            for video, lab in zip(self.videos, self.labels):
                if len(lab) != video.length:
                    raise DataError(f"video {video.id!r}: {len(lab)} labels for {video.length} frames")
            if self.K is None:
                classes = set(np.unique(np.concatenate(self.labels)).tolist())
                classes.discard(self.background)
                self.K = max(len(classes), 1)
        dims = {v.frames.shape[1] for v in self.videos}
        if len(dims) > 1:
            raise DataError(f"activity {self.name!r}: inconsistent feature widths {sorted(dims)}")

    @property
    def feature_dim(self) -> int:
        return self.videos[0].frames.shape[1]

    def subset(self, indices: Sequence[int]) -> "ActivityDataset":
        pick = lambda seq: None if seq is None else [seq[i] for i in indices]  # noqa: E731
        return ActivityDataset(self.name, pick(self.videos), pick(self.labels), self.K,
                               self.background, list(self.label_names), pick(self.sub_labels))


# --- HVQF tensors ---------------------------------------------------------

def _frame_bytes(matrix: np.ndarray, version: int) -> bytes:
    dtype = "<f4" if version == FEATURE_VERSION else "<f8"
    rows, cols = matrix.shape
    return _HEADER.pack(MAGIC, version, rows, cols) + np.ascontiguousarray(matrix, dtype=dtype).tobytes()


def _read_frame(buf: bytes, offset: int, source: str,
                expect_version: Optional[int] = None) -> Tuple[np.ndarray, int]:
    if len(buf) - offset < _HEADER.size:
        raise FormatError(f"{source}: truncated header at byte {offset}")
    magic, version, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte {offset}")
    if version not in (FEATURE_VERSION, TENSOR64_VERSION):
        raise FormatError(f"{source}: unsupported tensor version {version} at byte {offset + 4}")
    if expect_version is not None and version != expect_version:
        raise FormatError(f"{source}: expected tensor version {expect_version}, got {version} "
                          f"at byte {offset + 4}")
    width = 4 if version == FEATURE_VERSION else 8
    start = offset + _HEADER.size
    end = start + rows * cols * width
    if end > len(buf):
        raise FormatError(f"{source}: truncated payload, need {end} bytes, file has {len(buf)} "
                          f"(payload starts at byte {start})")
    dtype = "<f4" if version == FEATURE_VERSION else "<f8"
    data = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=start).reshape(rows, cols)
    return data.copy(), end


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_features(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise DataError(f"features must be 2-D, got shape {frames.shape}")
    _atomic_write(Path(path), _frame_bytes(frames, FEATURE_VERSION))


def load_features(path: str | Path) -> VideoFeatures:
    """Read one video's features; CSV text is detected when the magic is absent."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] == MAGIC:
        frames, end = _read_frame(buf, 0, str(path), FEATURE_VERSION)
        if end != len(buf):
            raise FormatError(f"{path}: {len(buf) - end} trailing bytes after byte {end}")
    else:
        try:
            text = buf.decode("utf-8")
            frames = np.loadtxt(io.StringIO(text), delimiter=",", ndmin=2, dtype=np.float32)
        except (UnicodeDecodeError, ValueError) as exc:
            raise FormatError(f"{path}: neither HVQF (bad magic {buf[:4]!r} at byte 0) "
                              f"nor comma-separated text: {exc}") from exc
        if frames.size == 0:
            raise FormatError(f"{path}: empty feature file")
    if not np.all(np.isfinite(frames)):
        raise FormatError(f"{path}: non-finite feature values")
    return VideoFeatures(path.stem, frames)


# --- labels ---------------------------------------------------------------

def read_label_tokens(path: str | Path) -> List[str]:
    path = Path(path)
    tokens = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise DataError(f"{path}: empty label file")
    return tokens


def load_labels(path: str | Path, label_map: Mapping[str, int], strict: bool = True) -> np.ndarray:
    """Per-frame label indices. Unknown tokens raise in strict mode, else get -1."""
    out = []
    for lineno, tok in enumerate(read_label_tokens(path), start=1):
        if tok in label_map:
            out.append(label_map[tok])
        elif strict:
            raise DataError(f"{path}:{lineno}: unknown label {tok!r}")
        else:
            out.append(-1)
    return np.asarray(out, dtype=np.int64)


def write_labels(path: str | Path, labels: Sequence, names: Optional[Sequence[str]] = None) -> None:
    tokens = [names[int(l)] if names is not None else str(int(l)) for l in labels]
    _atomic_write(Path(path), ("\n".join(tokens) + "\n").encode("utf-8"))


def _feature_files(folder: Path) -> List[Path]:
    files = sorted(p for p in folder.iterdir() if p.suffix in (".hvqf", ".csv"))
    return files


def load_activity(folder: str | Path, require_labels: bool = True,
                  background: Optional[str] = None) -> ActivityDataset:
    """Load one activity directory. Videos are ordered by file name."""
    folder = Path(folder)
    feat_dir = folder / "features"
    if not feat_dir.is_dir():
        raise DataError(f"{folder}: missing features/ directory")
    files = _feature_files(feat_dir)
    if not files:
        raise DataError(f"{folder}: no feature files in {feat_dir}")
    meta = {}
    if (folder / "meta.json").exists():
        meta = json.loads((folder / "meta.json").read_text())
    if background is None:
        background = meta.get("background")

    label_dir = folder / "labels"
    videos, label_tokens = [], []
    for f in files:
        lab = label_dir / f"{f.stem}.txt"
        if not lab.exists():
            if require_labels:
                logger.warning("%s: no labels for video %s, excluding it", folder.name, f.stem)
                continue
            label_tokens = None
        videos.append(load_features(f))
        if label_tokens is not None:
            label_tokens.append(read_label_tokens(lab))
    if not videos:
        raise DataError(f"{folder}: no usable videos")

    labels = sub_labels = None
    names: List[str] = list(meta.get("labels", []))
    bg_index = None
    if label_tokens is not None:
        if not names:
            names = sorted({t for toks in label_tokens for t in toks})
        if background is not None and background not in names:
            names.append(background)
        lmap = {n: i for i, n in enumerate(names)}
        labels = []
        for video, toks in zip(videos, label_tokens):
            if len(toks) != video.length:
                raise DataError(f"video {video.id!r}: {len(toks)} labels for {video.length} frames")
            unknown = [t for t in toks if t not in lmap]
            if unknown:
                raise DataError(f"video {video.id!r}: unknown label {unknown[0]!r}")
            labels.append(np.array([lmap[t] for t in toks], dtype=np.int64))
        bg_index = lmap.get(background) if background is not None else None
        sub_dir = folder / "labels_sub"
        if sub_dir.is_dir():
            sub_names = sorted({t for v in videos for t in read_label_tokens(sub_dir / f"{v.id}.txt")})
            smap = {n: i for i, n in enumerate(sub_names)}
            sub_labels = [load_labels(sub_dir / f"{v.id}.txt", smap) for v in videos]
    return ActivityDataset(folder.name, videos, labels, meta.get("K"), bg_index, names, sub_labels)


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> Tuple[List[int], List[int]]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())


def group_dataset(root: str | Path, protocol: str = "full", seed: int = 0,
                  require_labels: bool = True, background: Optional[str] = None) -> Dict:
    """Load every activity under ``root``.

    ``protocol="full"`` maps activity name to its dataset; ``"split_80_20"``
    maps it to a ``(train, test)`` pair drawn deterministically from ``seed``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    if protocol not in ("full", "split_80_20"):
        raise ValueError(f"unknown protocol {protocol!r}")
    out: Dict = {}
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        ds = load_activity(folder, require_labels, background)
        if protocol == "full":
            out[ds.name] = ds
        else:
            train, test = split_indices(len(ds.videos), seed)
            out[ds.name] = (ds.subset(train), ds.subset(test))
    if not out:
        raise DataError(f"{root}: no activity directories")
    return out


def write_dataset(ds: ActivityDataset, root: str | Path) -> Path:
    """Write ``ds`` in the directory layout under ``root/<ds.name>``."""
    folder = Path(root) / ds.name
    for video in ds.videos:
        save_features(folder / "features" / f"{video.id}.hvqf", video.frames)
    names = ds.label_names or None
    if ds.labels is not None:
        for video, lab in zip(ds.videos, ds.labels):
            write_labels(folder / "labels" / f"{video.id}.txt", lab, names)
    if ds.sub_labels is not None:
        n_sub = int(max(l.max() for l in ds.sub_labels)) + 1
        width = len(str(n_sub - 1))
        sub_names = [f"s{i:0{width}d}" for i in range(n_sub)]
        for video, lab in zip(ds.videos, ds.sub_labels):
            write_labels(folder / "labels_sub" / f"{video.id}.txt", lab, sub_names)
    meta = {"labels": list(ds.label_names), "K": ds.K}
    if ds.background is not None:
        meta["background"] = ds.label_names[ds.background]
    _atomic_write(folder / "meta.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return folder


# --- checkpoints ----------------------------------------------------------

def _store_tensors(prefix: str, store: ParamStore) -> List[Tuple[str, np.ndarray]]:
    out = []
    for name, value in store.params.items():
        out.append((f"{prefix}/param/{name}", value))
        if name in store.exp_avg:
            out.append((f"{prefix}/exp_avg/{name}", store.exp_avg[name]))
            out.append((f"{prefix}/exp_avg_sq/{name}", store.exp_avg_sq[name]))
    return out


def save_checkpoint(path: str | Path, model: TcnModel, books: Sequence[Codebook],
                    configs: Mapping, extra: Optional[Mapping] = None) -> None:
    """Write model, codebooks (with EMA masses) and optimizer state to one file.

    ``configs`` and ``extra`` must be JSON-serialisable; they land verbatim in
    the header. Tensors follow as float64 HVQF frames in manifest order.
    """
    tensors = _store_tensors("encoder", model.encoder) + _store_tensors("decoder", model.decoder)
    for book in books:
        tensors.append((f"codebook/{book.level}/prototypes", book.prototypes))
        tensors.append((f"codebook/{book.level}/mass", book.mass))
    header = {
        "format_version": CKPT_VERSION,
        "configs": configs,
        "extra": dict(extra or {}),
        "optimizer_steps": {"encoder": model.encoder.step, "decoder": model.decoder.step},
        "codebooks": [{"level": b.level, "reset_threshold": b.reset_threshold, "version": b.version}
                      for b in books],
        "tcn": asdict(model.config),
        "tensors": [[name, list(t.shape)] for name, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob]
    for _, t in tensors:
        t = np.asarray(t, dtype=np.float64)
        parts.append(_frame_bytes(t.reshape(t.shape[0] if t.ndim else 1, -1), TENSOR64_VERSION))
    _atomic_write(Path(path), b"".join(parts))


@dataclass
class Checkpoint:
    model: TcnModel
    books: List[Codebook]
    configs: dict
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r} at byte 0")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated checkpoint header at byte 4")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    if 12 + hlen > len(buf):
        raise FormatError(f"{path}: truncated JSON header at byte 12")
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in header["tensors"]:
        data, offset = _read_frame(buf, offset, str(path), TENSOR64_VERSION)
        tensors[name] = data.reshape(shape)
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes after byte {offset}")

    model = TcnModel(TcnConfig(**header["tcn"]))
    for prefix, store in (("encoder", model.encoder), ("decoder", model.decoder)):
        for name, value in tensors.items():
            kind, _, pname = name.partition("/")[2].partition("/")
            if not name.startswith(prefix + "/"):
                continue
            if kind == "param":
                store.add(pname, value)
            elif kind == "exp_avg":
                store.exp_avg[pname] = value
            elif kind == "exp_avg_sq":
                store.exp_avg_sq[pname] = value
        store.step = int(header["optimizer_steps"][prefix])
    books = []
    for info in header["codebooks"]:
        lvl = info["level"]
        books.append(Codebook(tensors[f"codebook/{lvl}/prototypes"], tensors[f"codebook/{lvl}/mass"],
                              level=lvl, reset_threshold=info["reset_threshold"],
                              version=info["version"]))
    return Checkpoint(model, books, header["configs"], header["extra"])
