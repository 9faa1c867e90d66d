"""File formats, dataset loading, checkpoints and the synthetic corpus generator.

DVCF feature file (little-endian)::

    b"DVCF" | u32 version=1 | u32 T_f | u32 D0 | f32[T_f * D0] row-major

DVCK checkpoint (little-endian)::

    b"DVCK" | u32 version=1 | u64 header_len | header JSON (utf-8) | f32 blobs

The header lists entries in blob order with their shapes, plus optimizer
scalars, config hash, generator state and free-form metadata.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SynthConfig, ValidationError
from .tensor import DiffArray, OptimizerState
from .vocab import Vocabulary, tokenize

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"DVCF"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"DVCK"
CHECKPOINT_VERSION = 1


class DatasetError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


# -- feature files ---------------------------------------------------------
def write_features(path: str | Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D (T_f, D0), got shape {arr.shape}")
    t_f, d0 = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, t_f, d0))
        fh.write(arr.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != FEATURE_MAGIC:
        raise DatasetError(f"{path}: bad magic, not a DVCF feature file")
    version, t_f, d0 = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise DatasetError(f"{path}: unsupported feature version {version} (expected {FEATURE_VERSION})")
    expected = 16 + 4 * t_f * d0
    if len(blob) != expected:
        raise DatasetError(f"{path}: byte length mismatch, expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(t_f, d0).astype(np.float32)


# -- dataset -------------------------------------------------------------------
@dataclass
class Annotation:
    t_start: float
    t_end: float
    sentence: str


@dataclass
class Video:
    id: str
    duration_units: float
    feature_file: str
    attributes: np.ndarray
    annotations: list[Annotation]
    features: np.ndarray = field(repr=False, default=None)

    @property
    def gt_starts(self) -> np.ndarray:
        return np.array([a.t_start for a in self.annotations])

    @property
    def gt_ends(self) -> np.ndarray:
        return np.array([a.t_end for a in self.annotations])


@dataclass
class Dataset:
    videos: list[Video]
    vocab: Vocabulary
    root: Path

    def __len__(self) -> int:
        return len(self.videos)

    def sentences(self) -> list[str]:
        return [a.sentence for v in self.videos for a in v.annotations]


def load_dataset(manifest_path: str | Path, vocab: Vocabulary | None = None) -> Dataset:
    """Parse and validate a manifest; builds the vocabulary unless one is given."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as e:
        raise DatasetError(f"manifest not found: {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    root = manifest_path.parent
    videos = []
    attr_width = None
    seen_ids = set()
    for entry in manifest.get("videos", []):
        vid = str(entry.get("id"))
        if vid in seen_ids:
            raise DatasetError(f"video {vid}: duplicate id")
        seen_ids.add(vid)
        attrs = np.asarray(entry.get("attributes", []), dtype=np.float32)
        if attr_width is None:
            attr_width = len(attrs)
        elif len(attrs) != attr_width:
            raise DatasetError(f"video {vid}: attribute width {len(attrs)} differs from {attr_width}")
        if np.any(attrs < 0) or np.any(attrs > 1):
            raise DatasetError(f"video {vid}: attributes must lie in [0, 1]")
        duration = float(entry.get("duration_units", 0))
        if duration <= 0:
            raise DatasetError(f"video {vid}: duration_units must be positive")
        anns = []
        for a in entry.get("annotations", []):
            s, e = float(a["t_start"]), float(a["t_end"])
            if not 0 <= s < e <= 1:
                raise DatasetError(f"video {vid}: annotation [{s}, {e}] must satisfy 0 <= t_start < t_end <= 1")
            anns.append(Annotation(s, e, str(a["sentence"])))
        ffile = root / entry["feature_file"]
        if not ffile.exists():
            raise DatasetError(f"video {vid}: feature file {ffile} not found")
        try:
            feats = read_features(ffile)
        except DatasetError as err:
            raise DatasetError(f"video {vid}: {err}") from err
        videos.append(Video(vid, duration, entry["feature_file"], attrs, anns, feats))
    if not videos:
        raise DatasetError(f"manifest {manifest_path} lists no videos")
    shapes = {v.features.shape[1] for v in videos}
    if len(shapes) != 1:
        raise DatasetError(f"feature widths differ across videos: {sorted(shapes)}")
    if vocab is None:
        vocab = Vocabulary.build(a.sentence for v in videos for a in v.annotations)
    return Dataset(videos, vocab, root)


def read_vocab(path: str | Path) -> Vocabulary:
    words = [w.strip() for w in Path(path).read_text().splitlines() if w.strip()]
    return Vocabulary(w for w in words if not w.startswith("<"))


# -- synthetic corpus ------------------------------------------------------
VERBS = (
    "rides", "plays", "washes", "throws", "paints", "kicks", "cuts", "reads",
    "walks", "cooks", "climbs", "lifts", "brushes", "surfs", "skates", "drums",
)
OBJECTS = (
    "a bicycle", "the guitar", "the dishes", "a frisbee", "a fence", "a ball", "the grass", "a book",
    "a dog", "some pasta", "a wall", "heavy weights", "a horse", "a wave", "on ice", "a beat",
)
PLACES = (
    "in the park", "on a stage", "in the kitchen", "on the beach", "in the yard", "on a field",
    "in the garden", "at home", "on the street", "in the kitchen", "at the gym", "at the gym",
    "in a stable", "in the ocean", "on a rink", "in a studio",
)
MAX_PROTOTYPES = len(VERBS)


def prototype_sentence(p: int) -> str:
    return f"a person {VERBS[p]} {OBJECTS[p]} {PLACES[p]}"


def grammar_words(num_prototypes: int = MAX_PROTOTYPES) -> set[str]:
    return {w for p in range(num_prototypes) for w in tokenize(prototype_sentence(p))}


def _pack_events(rng: np.random.Generator, k: int, t_f: int, min_w: int, max_w: int) -> list[tuple[int, int]]:
    gap = 1
    for _ in range(100):
        widths = rng.integers(min_w, max_w + 1, size=k)
        free = t_f - int(widths.sum()) - gap * (k - 1)
        if free < 0:
            continue
        slack = rng.multinomial(free, np.full(k + 1, 1.0 / (k + 1)))
        segs, pos = [], int(slack[0])
        for i in range(k):
            segs.append((pos, pos + int(widths[i])))
            pos += int(widths[i]) + gap + int(slack[i + 1])
        return segs
    raise ValidationError(f"cannot pack {k} events of width >= {min_w} into {t_f} clips")


def gen_synthetic(synth: SynthConfig, out_dir: str | Path) -> Path:
    """Write a seeded synthetic corpus (manifest.json + DVCF files); returns the manifest path."""
    if not 1 <= synth.prototypes <= MAX_PROTOTYPES:
        raise ValidationError(f"synth.prototypes must be in 1..{MAX_PROTOTYPES}")
    if not 1 <= synth.min_events <= synth.max_events or synth.max_events > synth.prototypes:
        raise ValidationError("need 1 <= min_events <= max_events <= prototypes")
    if synth.min_width < 4 or synth.max_width < synth.min_width:
        raise ValidationError("event widths must satisfy 4 <= min_width <= max_width")
    if synth.max_events * synth.min_width + synth.max_events - 1 > synth.t_f:
        raise ValidationError(f"infeasible packing: {synth.max_events} events of {synth.min_width} clips in T_f={synth.t_f}")
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(synth.seed)
    protos = rng.normal(0.0, 1.0, size=(synth.prototypes, synth.d0))
    videos = []
    for v in range(synth.num_videos):
        k = int(rng.integers(synth.min_events, synth.max_events + 1))
        kinds = rng.choice(synth.prototypes, size=k, replace=False)
        segs = _pack_events(rng, k, synth.t_f, synth.min_width, synth.max_width)
        feats = rng.normal(0.0, synth.noise, size=(synth.t_f, synth.d0)) if synth.noise > 0 else np.zeros((synth.t_f, synth.d0))
        anns = []
        for kind, (s, e) in zip(kinds, segs):
            feats[s:e] += protos[kind]
            anns.append({"t_start": s / synth.t_f, "t_end": e / synth.t_f, "sentence": prototype_sentence(int(kind))})
        attrs = np.zeros(MAX_PROTOTYPES)
        attrs[kinds] = 1.0
        vid = f"synth_{v:04d}"
        rel = f"features/{vid}.dvcf"
        write_features(out_dir / rel, feats)
        videos.append(
            {
                "id": vid,
                "duration_units": synth.t_f * 8 / 25.0,
                "feature_file": rel,
                "attributes": attrs.tolist(),
                "annotations": anns,
            }
        )
    manifest = {"videos": videos}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# -- checkpoints ---------------------------------------------------------------
@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None
    config_hash: str = ""
    rng_state: dict | None = None
    metadata: dict = field(default_factory=dict)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, DiffArray) else np.asarray(x)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    entries, blobs = [], []

    def put(name, arr):
        arr = np.ascontiguousarray(_as_array(arr), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())

    for name in sorted(ckpt.params):
        put(name, ckpt.params[name])
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "t": o.t}
        for name in sorted(o.m):
            put(f"adam.m/{name}", o.m[name])
            put(f"adam.v/{name}", o.v[name])
    header = {
        "entries": entries,
        "optimizer": opt,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path, expected_config_hash: str | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a DVCK file")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})")
    header = json.loads(blob[16 : 16 + hlen].decode())
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in header["entries"]]
    expected = 16 + hlen + 4 * sum(sizes)
    if expected != len(blob):
        raise CheckpointError(f"{path}: byte length mismatch, expected {expected} bytes, got {len(blob)}")
    offset = 16 + hlen
    arrays = {}
    for e, n in zip(header["entries"], sizes):
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(e["shape"]).astype(np.float32)
        offset += 4 * n
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = OptimizerState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], t=o["t"])
        for k, v in arrays.items():
            if k.startswith("adam.m/"):
                opt.m[k[7:]] = v
            elif k.startswith("adam.v/"):
                opt.v[k[7:]] = v
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        log.warning(
            "checkpoint %s was written with config hash %s, current config is %s; proceeding",
            path, header["config_hash"], expected_config_hash,
        )
    return Checkpoint(params, opt, header["config_hash"], header["rng_state"], header["metadata"])


# -- prediction files ------------------------------------------------------
CAPTIONS_SCHEMA = {
    "type": "object",
    "required": ["videos"],
    "properties": {
        "videos": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["t_start", "t_end", "sentence", "confidence"],
                    "properties": {
                        "t_start": {"type": "number", "minimum": 0, "maximum": 1},
                        "t_end": {"type": "number", "minimum": 0, "maximum": 1},
                        "sentence": {"type": "string"},
                        "confidence": {"type": "number"},
                    },
                },
            },
        }
    },
}

PROPOSALS_SCHEMA = {
    "type": "object",
    "required": ["videos"],
    "properties": {
        "videos": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["t_start", "t_end", "confidence", "p_event", "p_des"],
                    "properties": {
                        "t_start": {"type": "number", "minimum": 0, "maximum": 1},
                        "t_end": {"type": "number", "minimum": 0, "maximum": 1},
                        "confidence": {"type": "number"},
                        "p_event": {"type": "number", "minimum": 0, "maximum": 1},
                        "p_des": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            },
        }
    },
}


def write_json(path: str | Path, payload: dict, schema: dict | None = None) -> None:
    if schema is not None:
        import jsonschema

        jsonschema.validate(payload, schema)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> dict[str, list[dict]]:
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ValidationError(f"predictions file not found: {path}") from e
    if not isinstance(payload, dict) or not isinstance(payload.get("videos"), dict):
        raise ValidationError(f"{path}: expected an object with a 'videos' mapping")
    for vid, items in payload["videos"].items():
        for it in items:
            if "t_start" not in it or "t_end" not in it:
                raise ValidationError(f"{path}: video {vid} has an entry without t_start/t_end")
    return payload["videos"]

