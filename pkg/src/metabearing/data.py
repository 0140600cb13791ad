"""Bearing datasets: taxonomies, segmentation, imaging, episodes and corpora.

A corpus on disk is a directory holding ``manifest.json`` plus one raw
little-endian float32 file per channel and record. ``load_corpus`` turns it
into per-class pools of standardised 64x64 images ready for episode sampling.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WINDOW = 2048
SEGMENT_LENGTH = 2 * WINDOW
IMAGE_SIDE = 64
SAMPLE_RATE_HZ = 12_000
STANDARDIZE_EPS = 1e-8


class CorpusError(ValueError):
    """Invalid or inconsistent corpus on disk."""


class EpisodeError(ValueError):
    """A class pool cannot supply the requested episode."""


# ------------------------------------------------------------------ taxonomies

@dataclass(frozen=True)
class FaultClass:
    label: int
    location: str
    code: str = ""
    cause: str = ""
    severity: int = 0
    diameter_in: float = 0.0
    damage: str = ""


CWRU_CLASSES = (
    FaultClass(1, "healthy", "N", "none", 0, 0.0),
    FaultClass(2, "ball", "B007", "EDM", 1, 0.007),
    FaultClass(3, "ball", "B014", "EDM", 2, 0.014),
    FaultClass(4, "ball", "B021", "EDM", 3, 0.021),
    FaultClass(5, "inner", "IR007", "EDM", 1, 0.007),
    FaultClass(6, "inner", "IR014", "EDM", 2, 0.014),
    FaultClass(7, "inner", "IR021", "EDM", 3, 0.021),
    FaultClass(8, "outer", "OR007", "EDM", 1, 0.007),
    FaultClass(9, "outer", "OR014", "EDM", 2, 0.014),
    FaultClass(10, "outer", "OR021", "EDM", 3, 0.021),
)

# (load in hp, shaft speed in rpm)
CWRU_CONDITIONS = ((1, 1772), (2, 1750), (3, 1730))

PADERBORN_CLASSES = (
    FaultClass(1, "healthy", "K001", "none", 0),
    FaultClass(2, "outer", "KA01", "EDM", 1),
    FaultClass(3, "outer", "KA03", "electric engraver", 2),
    FaultClass(4, "outer", "KA07", "drilling", 1),
    FaultClass(5, "inner", "KI01", "EDM", 2),
    FaultClass(6, "inner", "KI03", "electric engraver", 1),
    FaultClass(7, "inner", "KI07", "electric engraver", 2),
    FaultClass(8, "outer", "KA04", "pitting", 1),
    FaultClass(9, "outer", "KA15", "plastic deform", 1),
    FaultClass(10, "outer", "KA16", "pitting", 2),
    FaultClass(11, "inner", "KI04", "pitting", 1),
    FaultClass(12, "inner", "KI16", "pitting", 3),
    FaultClass(13, "inner", "KI18", "pitting", 2),
)
PADERBORN_ARTIFICIAL = tuple(range(1, 8))
PADERBORN_REAL = tuple(range(8, 14))

# Artificial-to-real split: artificial damages as source, healthy plus real
# damages as target.
PADERBORN_A2R_SOURCE = (
    FaultClass(1, "outer", "KA01", "EDM", 1, damage="punctual"),
    FaultClass(2, "outer", "KA03", "electric engraver", 2, damage="punctual"),
    FaultClass(3, "outer", "KA05", "electric engraver", 1, damage="punctual"),
    FaultClass(4, "outer", "KA07", "drilling", 1, damage="punctual"),
    FaultClass(5, "inner", "KA08", "drilling", 2, damage="punctual"),
    FaultClass(6, "inner", "KI01", "EDM", 1, damage="punctual"),
    FaultClass(7, "inner", "KI03", "electric engraver", 1, damage="punctual"),
    FaultClass(8, "inner", "KI05", "electric engraver", 2, damage="punctual"),
)
PADERBORN_A2R_TARGET = (
    FaultClass(9, "healthy", "K001", "none", 0),
    FaultClass(10, "outer", "KA04", "pitting", 1, damage="punctual"),
    FaultClass(11, "inner+outer", "KB23", "pitting", 2, damage="punctual"),
    FaultClass(12, "inner+outer", "KB27", "plastic deform", 1, damage="distributed"),
    FaultClass(13, "inner", "KI04", "pitting", 1, damage="punctual"),
)


# ------------------------------------------------------------ records/segments

@dataclass
class SignalRecord:
    channels: list[np.ndarray]
    sample_rate: float
    fault_class: int
    record_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = [np.asarray(c) for c in self.channels]
        if not self.channels:
            raise ValueError("a record needs at least one channel")
        if len({c.shape for c in self.channels}) != 1 or self.channels[0].ndim != 1:
            raise ValueError("all channels must be 1-D and of equal length")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def length(self) -> int:
        return self.channels[0].shape[0]


@dataclass
class Segment:
    values: np.ndarray
    fault_class: int
    source: tuple[str, int]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (SEGMENT_LENGTH,):
            raise ValueError(f"segment must hold {SEGMENT_LENGTH} values, got {self.values.shape}")


def segment_count(length: int, window: int, stride: int) -> int:
    if length < window:
        return 0
    return (length - window) // stride + 1


def segment_record(record: SignalRecord, window: int = WINDOW, stride: int = WINDOW) -> list[Segment]:
    """Cut a record into 4096-value segments.

    With two or more channels, each segment is ``window`` samples of the first
    channel followed by the same span of the second. A single channel yields
    ``2 * window`` consecutive samples instead. Offsets advance by ``stride``
    and a short tail is dropped.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    two_channel = len(record.channels) >= 2
    span = window if two_channel else 2 * window
    if span * (2 if two_channel else 1) != SEGMENT_LENGTH:
        raise ValueError(f"window {window} does not give {SEGMENT_LENGTH}-value segments")
    if record.length < span:
        raise ValueError(f"channel length {record.length} is shorter than window {span}")
    a = record.channels[0]
    b = record.channels[1] if two_channel else None
    out = []
    for i in range(segment_count(record.length, span, stride)):
        off = i * stride
        if two_channel:
            values = np.concatenate([a[off:off + span], b[off:off + span]])
        else:
            values = a[off:off + span].copy()
        out.append(Segment(values, record.fault_class, (record.record_id, off)))
    return out


def to_image(segment: Segment | np.ndarray) -> np.ndarray:
    """Row-major 64x64 image of a segment, standardised to zero mean and unit variance."""
    values = segment.values if isinstance(segment, Segment) else np.asarray(segment)
    if values.shape != (SEGMENT_LENGTH,):
        raise ValueError(f"expected {SEGMENT_LENGTH} values, got {values.shape}")
    v = values.astype(np.float64)
    v = (v - v.mean()) / (v.std() + STANDARDIZE_EPS)
    return v.reshape(1, IMAGE_SIDE, IMAGE_SIDE)


def magnitude_spectrum(values) -> np.ndarray:
    """``|X_k|`` for every bin of the discrete Fourier transform of ``values``."""
    return np.abs(np.fft.fft(np.asarray(values, dtype=np.float64)))


def fft_magnitude(segment: Segment) -> Segment:
    """Two-sided magnitude spectrum of a segment; the length stays 4096."""
    return Segment(magnitude_spectrum(segment.values), segment.fault_class, segment.source)


def dft_magnitude_bruteforce(values) -> np.ndarray:
    """O(n^2) direct DFT magnitude, kept as an independent reference."""
    x = np.asarray(values, dtype=np.float64)
    n = x.shape[0]
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return np.abs(basis @ x)


# --------------------------------------------------------------------- pools

@dataclass
class ClassPool:
    label: int
    images: np.ndarray  # [n, 1, 64, 64]
    sources: list[tuple[str, int]]
    info: FaultClass | None = None

    def __len__(self):
        return self.images.shape[0]

    def subset(self, index) -> ClassPool:
        index = np.asarray(index)
        return ClassPool(self.label, self.images[index], [self.sources[i] for i in index], self.info)


def build_pool(label: int, segments: list[Segment], preprocess: str = "none",
               info: FaultClass | None = None, dtype=np.float32) -> ClassPool:
    if preprocess not in ("none", "fft"):
        raise ValueError(f"unknown preprocess {preprocess!r}")
    if preprocess == "fft":
        segments = [fft_magnitude(s) for s in segments]
    images = np.stack([to_image(s) for s in segments]).astype(dtype) if segments else \
        np.zeros((0, 1, IMAGE_SIDE, IMAGE_SIDE), dtype=dtype)
    return ClassPool(label, images, [s.source for s in segments], info)


def restrict_pools(pools: dict[int, ClassPool], per_class: int, seed: int) -> dict[int, ClassPool]:
    """Keep ``per_class`` randomly chosen segments of every pool."""
    rng = np.random.default_rng(seed)
    out = {}
    for label in sorted(pools):
        pool = pools[label]
        if len(pool) < per_class:
            raise EpisodeError(f"class {label} has {len(pool)} segments, {per_class} requested "
                               f"(short by {per_class - len(pool)})")
        out[label] = pool.subset(np.sort(rng.choice(len(pool), size=per_class, replace=False)))
    return out


# ------------------------------------------------------------------- episodes

@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    query_per_class: int | None  # None: every segment left after the support draw
    class_pool: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_pool", tuple(self.class_pool))
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if self.query_per_class is not None and self.query_per_class < 1:
            raise ValueError("query_per_class must be >= 1")
        if not 1 <= self.n_way <= len(self.class_pool):
            raise ValueError(f"n_way {self.n_way} needs 1..{len(self.class_pool)} classes")
        if len(set(self.class_pool)) != len(self.class_pool):
            raise ValueError("class_pool has duplicates")


@dataclass
class EpisodeBatch:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: tuple[int, ...]
    support_sources: list[tuple[str, int]]
    query_sources: list[tuple[str, int]]


def sample_episode(pools: dict[int, ClassPool], spec: EpisodeSpec, rng_seed) -> EpisodeBatch:
    """Draw one N-way K-shot episode.

    Classes are drawn without replacement and relabelled 0..N-1 in draw
    order; within a class, support and query segments are disjoint.
    """
    rng = np.random.default_rng(rng_seed)
    missing = [c for c in spec.class_pool if c not in pools]
    if missing:
        raise EpisodeError(f"classes {missing} are not in the corpus")
    classes = tuple(int(c) for c in rng.choice(np.array(spec.class_pool), size=spec.n_way, replace=False))
    sx, sy, qx, qy, ss, qs = [], [], [], [], [], []
    for episode_label, c in enumerate(classes):
        pool = pools[c]
        q = spec.query_per_class if spec.query_per_class is not None else len(pool) - spec.k_shot
        need = spec.k_shot + max(q, 1)
        if len(pool) < need:
            raise EpisodeError(f"class {c} has {len(pool)} segments, episode needs {need} "
                               f"(short by {need - len(pool)})")
        order = rng.permutation(len(pool))
        sup, qry = order[:spec.k_shot], order[spec.k_shot:spec.k_shot + q]
        sx.append(pool.images[sup])
        qx.append(pool.images[qry])
        sy.append(np.full(len(sup), episode_label))
        qy.append(np.full(len(qry), episode_label))
        ss.extend(pool.sources[i] for i in sup)
        qs.extend(pool.sources[i] for i in qry)
    return EpisodeBatch(np.concatenate(sx), np.concatenate(sy), np.concatenate(qx),
                        np.concatenate(qy), classes, ss, qs)


# ------------------------------------------------------------ synthetic signals

@dataclass(frozen=True)
class OperatingCondition:
    name: str
    shaft_rpm: float
    load_hp: float = 0.0

    @property
    def shaft_hz(self) -> float:
        return self.shaft_rpm / 60.0


SYNTH_CONDITIONS = tuple(OperatingCondition(f"{hp}hp", rpm, hp) for hp, rpm in CWRU_CONDITIONS)

# Impact rate per shaft revolution for each defect location (deep-groove
# bearing geometry of the drive-end bearing on the common test rig).
FAULT_ORDERS = {"outer": 3.5848, "inner": 5.4152, "ball": 4.7135}
RESONANCE_HZ = 3000.0
DECAY_S = 0.0012
IMPULSE_AMPLITUDE = 2.0
SHAFT_AMPLITUDE = 0.5
NOISE_STD = 0.5
CHANNEL_GAINS = (0.6, 1.0)


def _impulse_response(fs: float, n: int) -> np.ndarray:
    t = np.arange(n) / fs
    return np.exp(-t / DECAY_S) * np.sin(2 * np.pi * RESONANCE_HZ * t)


def impulse_train(kind: str, severity: int, condition: OperatingCondition, duration: int,
                  fs: float = SAMPLE_RATE_HZ, damage: str = "punctual", rng=None) -> np.ndarray:
    """Fault excitation alone: decaying resonance bursts at the defect rate.

    ``punctual`` damage produces one sharp burst per impact. ``distributed``
    damage spreads each impact over several weaker bursts with random timing
    and an amplitude envelope, as with a worn surface; it needs ``rng``.
    """
    out = np.zeros(duration)
    if kind == "healthy" or severity == 0:
        return out
    period = fs / (FAULT_ORDERS[kind] * condition.shaft_hz)
    amp = IMPULSE_AMPLITUDE * severity
    resp = _impulse_response(fs, int(8 * DECAY_S * fs))
    if damage == "punctual":
        starts = np.arange(0.0, duration, period)
        weights = np.full(starts.shape, amp)
    elif damage == "distributed":
        if rng is None:
            raise ValueError("distributed damage needs an rng")
        base = np.arange(0.0, duration, period)
        spread = 0.35 * period
        starts = (base[:, None] + rng.uniform(0, spread, size=(base.size, 4))).ravel()
        weights = amp * 0.5 * rng.uniform(0.3, 1.0, size=starts.size)
    else:
        raise ValueError(f"unknown damage type {damage!r}")
    for s, w in zip(starts, weights):
        i = int(round(s))
        if i >= duration:
            continue
        seg = resp[:duration - i]
        out[i:i + seg.size] += w * seg
    return out


def synth_fault_signal(kind: str, severity: int, condition: OperatingCondition, duration: int,
                       rng_seed: int, fs: float = SAMPLE_RATE_HZ, damage: str = "punctual",
                       fault_class: int = 0, record_id: str = "") -> SignalRecord:
    """Two-channel synthetic vibration record.

    Every record carries a shaft-rate sinusoid with its second harmonic and
    independent Gaussian noise per channel. Faults add :func:`impulse_train`,
    scaled by a per-channel gain. Noise and phases depend only on
    ``rng_seed``, so records that differ in ``kind`` differ only in impact
    spacing.
    """
    if kind not in ("healthy", *FAULT_ORDERS):
        raise ValueError(f"unknown fault kind {kind!r}")
    if duration < SEGMENT_LENGTH:
        raise ValueError(f"duration must be at least {SEGMENT_LENGTH} samples")
    ss = np.random.SeedSequence(rng_seed)
    base_rng, damage_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    t = np.arange(duration) / fs
    f_r = condition.shaft_hz
    train = impulse_train(kind, severity, condition, duration, fs, damage,
                          damage_rng if damage == "distributed" else None)
    channels = []
    for gain in CHANNEL_GAINS:
        phase = base_rng.uniform(0, 2 * np.pi, size=2)
        shaft = SHAFT_AMPLITUDE * (np.sin(2 * np.pi * f_r * t + phase[0])
                                   + 0.5 * np.sin(4 * np.pi * f_r * t + phase[1]))
        noise = base_rng.normal(0.0, NOISE_STD, size=duration)
        channels.append(shaft + noise + gain * train)
    meta = {"fault_location": kind, "severity": str(severity), "condition": condition.name,
            "cause": "synthetic", "damage": damage if kind != "healthy" else "none"}
    return SignalRecord(channels, fs, fault_class, record_id, meta)


# ------------------------------------------------------------- corpus on disk

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class SynthClass:
    label: int
    kind: str
    severity: int
    damage: str = "punctual"
    code: str = ""


def cwru_layout(n_classes: int = 10) -> list[SynthClass]:
    """Synthetic analogue of the ten CWRU classes; more classes cycle severities upward."""
    base = [SynthClass(c.label, c.location, c.severity, code=c.code) for c in CWRU_CLASSES]
    if n_classes <= len(base):
        return base[:n_classes]
    extra = []
    kinds = ("ball", "inner", "outer")
    for i in range(n_classes - len(base)):
        kind = kinds[i % 3]
        sev = 4 + i // 3
        extra.append(SynthClass(len(base) + i + 1, kind, sev, code=f"{kind[0].upper()}S{sev}"))
    return base + extra


def a2r_layout() -> list[SynthClass]:
    """Punctual (artificial-style) source classes and distributed-damage targets."""
    source = [SynthClass(i + 1, kind, sev, "punctual", f"A-{kind}{sev}")
              for i, (kind, sev) in enumerate([("outer", 1), ("outer", 2), ("outer", 3),
                                               ("inner", 1), ("inner", 2), ("inner", 3),
                                               ("ball", 1), ("ball", 2)])]
    target = [SynthClass(9, "healthy", 0, "punctual", "R-healthy"),
              SynthClass(10, "outer", 2, "distributed", "R-outer2"),
              SynthClass(11, "inner", 2, "distributed", "R-inner2"),
              SynthClass(12, "ball", 2, "distributed", "R-ball2"),
              SynthClass(13, "outer", 3, "distributed", "R-outer3")]
    return source + target


def write_corpus(out_dir, classes: list[SynthClass], segments_per_record: int = 20,
                 conditions=SYNTH_CONDITIONS, seed: int = 0, stride: int = WINDOW,
                 preprocess: str = "none", name: str = "synthetic") -> Path:
    """Generate synthetic records for ``classes`` and write them as a corpus."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    duration = WINDOW + (segments_per_record - 1) * stride
    channel_order = ["FE", "DE"]
    entries = []
    for ci, cls in enumerate(classes):
        files = []
        for k, cond in enumerate(conditions):
            rec_id = f"c{cls.label:02d}_{cond.name}"
            rec_seed = [seed, ci, k]
            rec = synth_fault_signal(cls.kind, cls.severity, cond, duration,
                                     rng_seed=rec_seed, damage=cls.damage,
                                     fault_class=cls.label, record_id=rec_id)
            for ch_name, ch in zip(channel_order, rec.channels):
                rel = f"{rec_id}_{ch_name}.f32"
                raw = np.asarray(ch, dtype="<f4").tobytes()
                (out / rel).write_bytes(raw)
                files.append({"path": rel, "record": rec_id, "channel": ch_name,
                              "condition": cond.name, "crc32": zlib.crc32(raw)})
        entries.append({"label": cls.label, "code": cls.code or f"{cls.kind}{cls.severity}",
                        "location": cls.kind, "cause": "synthetic", "severity": cls.severity,
                        "damage": cls.damage if cls.kind != "healthy" else "none",
                        "files": files})
    manifest = {"name": name, "sample_rate_hz": SAMPLE_RATE_HZ, "preprocess": preprocess,
                "channel_order": channel_order, "stride": stride, "classes": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return out


_CLASS_KEYS = {"label", "code", "location", "cause", "severity", "damage", "files"}
_TOP_KEYS = {"name", "sample_rate_hz", "preprocess", "channel_order", "stride", "classes"}


def read_manifest(path) -> tuple[Path, dict]:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    mpath = root / MANIFEST if path.is_dir() else path
    if not mpath.exists():
        raise CorpusError(f"manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"manifest is not valid JSON: {exc}") from None
    missing = {"sample_rate_hz", "preprocess", "channel_order", "classes"} - manifest.keys()
    if missing:
        raise CorpusError(f"manifest lacks fields {sorted(missing)}")
    unknown = manifest.keys() - _TOP_KEYS
    if unknown:
        raise CorpusError(f"manifest has unknown fields {sorted(unknown)}")
    if manifest["preprocess"] not in ("none", "fft"):
        raise CorpusError(f"preprocess must be 'none' or 'fft', got {manifest['preprocess']!r}")
    labels = [c.get("label") for c in manifest["classes"]]
    if len(set(labels)) != len(labels):
        raise CorpusError("duplicate class labels in manifest")
    for c in manifest["classes"]:
        bad = c.keys() - _CLASS_KEYS
        if bad:
            raise CorpusError(f"class {c.get('label')} has unknown fields {sorted(bad)}")
    return root, manifest


def load_records(root: Path, manifest: dict, cls: dict) -> list[SignalRecord]:
    order = list(manifest["channel_order"])
    grouped: dict[str, dict[str, np.ndarray]] = {}
    for f in cls.get("files", []):
        fpath = root / f["path"]
        if not fpath.exists():
            raise CorpusError(f"class {cls['label']}: missing file {f['path']}")
        raw = fpath.read_bytes()
        if "crc32" in f and zlib.crc32(raw) != int(f["crc32"]):
            raise CorpusError(f"class {cls['label']}: checksum mismatch for {f['path']}")
        if len(raw) % 4:
            raise CorpusError(f"class {cls['label']}: {f['path']} is not float32 data")
        rec = f.get("record", f["path"])
        ch = f.get("channel", order[0] if order else "ch0")
        grouped.setdefault(rec, {})[ch] = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    records = []
    for rec_id, chans in grouped.items():
        ordered = [chans[name] for name in order if name in chans]
        ordered += [v for name, v in chans.items() if name not in order]
        try:
            records.append(SignalRecord(ordered, manifest["sample_rate_hz"], cls["label"], rec_id))
        except ValueError as exc:
            raise CorpusError(f"class {cls['label']}, record {rec_id}: {exc}") from None
    return records


def load_corpus(manifest_path, stride: int | None = None, dtype=np.float32,
                labels=None) -> dict[int, ClassPool]:
    """Read a corpus directory into per-class pools of standardised images.

    ``stride`` overrides the manifest's segmentation stride; ``labels``
    restricts loading to a subset of classes.
    """
    root, manifest = read_manifest(manifest_path)
    stride = int(stride or manifest.get("stride") or WINDOW)
    preprocess = manifest["preprocess"]
    pools = {}
    for cls in manifest["classes"]:
        label = int(cls["label"])
        if labels is not None and label not in labels:
            continue
        segments = []
        for rec in load_records(root, manifest, cls):
            if rec.length < (WINDOW if len(rec.channels) >= 2 else SEGMENT_LENGTH):
                continue
            segments.extend(segment_record(rec, WINDOW, stride))
        if not segments:
            raise CorpusError(f"class {label} ({cls.get('code', '')}) has zero segments")
        info = FaultClass(label, cls.get("location", ""), cls.get("code", ""), cls.get("cause", ""),
                          int(cls.get("severity", 0)), damage=cls.get("damage", ""))
        pools[label] = build_pool(label, segments, preprocess, info, dtype)
    return pools
