"""Session-structured client cohorts: synthetic generator and on-disk corpus.

Corpus layout::

    <root>/<client_id>/<session_index>/frames.bin
    <root>/<client_id>/<session_index>/labels.csv

``frames.bin`` holds a 12-byte little-endian header (magic ``FPSE``, u32
frame count, u16 height, u16 width) followed by ``count * H * W`` grayscale
bytes, or ``count * H * W * 3`` interleaved RGB bytes which are averaged to
gray on load. ``labels.csv`` has one ``frame_index,pspi`` line per frame.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorpusParseError, RejectedInputError
from .preprocess import AUVector, binarize, pspi_scores

log = logging.getLogger(__name__)

MAGIC = b"FPSE"
HEADER = struct.Struct("<4sIHH")


@dataclass(frozen=True)
class Frame:
    image: np.ndarray
    pspi: int
    label: int
    au: AUVector | None = None


@dataclass
class SessionRecord:
    """One recording session of one client, stored column-wise."""

    client_id: str
    session_index: int
    images: np.ndarray  # (n, H, W) uint8
    pspi: np.ndarray  # (n,) int
    aus: np.ndarray | None = None  # (n, 6) int, synthetic mode only
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.images) < 1:
            raise RejectedInputError(f"session {self.client_id}/{self.session_index} has no frames")
        if len(self.pspi) != len(self.images):
            raise RejectedInputError("pspi and images differ in length")
        self.labels = np.array([binarize(int(v)) for v in self.pspi], dtype=np.int64)

    def __len__(self):
        return len(self.images)

    @property
    def frames(self) -> list[Frame]:
        out = []
        for i in range(len(self)):
            au = AUVector(*map(int, self.aus[i])) if self.aus is not None else None
            out.append(Frame(self.images[i], int(self.pspi[i]), int(self.labels[i]), au))
        return out

    def frame_ids(self) -> list[tuple[str, int, int]]:
        return [(self.client_id, self.session_index, i) for i in range(len(self))]


@dataclass
class Client:
    client_id: str
    sessions: list[SessionRecord]

    @property
    def session_indices(self) -> list[int]:
        return [s.session_index for s in self.sessions]

    def session(self, index: int) -> SessionRecord:
        for s in self.sessions:
            if s.session_index == index:
                return s
        raise KeyError(index)

    def positive_rate(self) -> float:
        labels = np.concatenate([s.labels for s in self.sessions])
        return float(labels.mean())


@dataclass
class Cohort:
    pretrain: list[Client]
    test: list[Client]


def _count_descriptor(value) -> str:
    if isinstance(value, (tuple, list)):
        if isinstance(value, tuple) and len(value) == 2:
            return f"{int(value[0])}-{int(value[1])}"
        return ",".join(str(int(v)) for v in value)
    text = str(value).replace(" ", "")
    _draw_count(text, 0, np.random.default_rng(0))  # validate
    return text


def _draw_count(descriptor: str, i: int, rng: np.random.Generator) -> int:
    """``N`` -> N; ``lo-hi`` -> uniform integer in range; ``a,b,c`` -> cycled."""
    try:
        if "," in descriptor:
            values = [int(v) for v in descriptor.split(",")]
            return values[i % len(values)]
        if "-" in descriptor:
            lo, hi = (int(v) for v in descriptor.split("-"))
            if lo > hi:
                raise ValueError
            return int(rng.integers(lo, hi + 1))
        return int(descriptor)
    except ValueError:
        raise RejectedInputError(f"bad count descriptor {descriptor!r}") from None


def _rate_range(value) -> tuple[float, float]:
    if isinstance(value, str):
        value = [v for v in value.strip("[] ").replace(",", " ").split()]
    vals = tuple(float(v) for v in value)
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise RejectedInputError(f"positive_rate_range needs two values, got {value!r}")
    return vals


@dataclass(frozen=True)
class CohortSpec:
    """Knobs of the synthetic cohort.

    ``sessions_per_client`` is ``"N"``, an inclusive range ``"lo-hi"`` or a
    comma list cycled over clients (test clients first). The same forms work
    for ``frames_per_session``. ``session_skew`` is the gamma shape of the
    per-session share of a client's positives; 0 spreads them evenly.
    """

    n_pretrain_clients: int = 13
    n_test_clients: int = 12
    sessions_per_client: str = "2-6"
    frames_per_session: str = "80-160"
    positive_rate_range: tuple = (0.04, 0.54)
    feature_noise: float = 8.0
    image_size: int = 32
    style_strength: float = 1.0
    session_skew: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sessions_per_client", _count_descriptor(self.sessions_per_client))
        object.__setattr__(self, "frames_per_session", _count_descriptor(self.frames_per_session))
        object.__setattr__(self, "positive_rate_range", _rate_range(self.positive_rate_range))
        lo, hi = self.positive_rate_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise RejectedInputError(f"positive_rate_range {self.positive_rate_range} must satisfy 0<=lo<=hi<=1")
        if self.n_pretrain_clients < 1 or self.n_test_clients < 1:
            raise RejectedInputError("client counts must be >= 1")
        for d in (self.sessions_per_client, self.frames_per_session):
            if min(int(v) for v in d.replace("-", ",").split(",")) < 1:
                raise RejectedInputError("session and frame counts must be >= 1")
        if self.feature_noise < 0 or self.image_size < 8:
            raise RejectedInputError("feature_noise must be >= 0 and image_size >= 8")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "CohortSpec":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                raise RejectedInputError(f"unknown cohort key {key!r}")
            if known[key].type == "str" or key == "positive_rate_range":
                kwargs[key] = value
            elif known[key].type == "int":
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "CohortSpec":
        mapping = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise RejectedInputError(f"line {lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            mapping[key] = value
        return cls.from_mapping(mapping)


def load_cohort_spec(path) -> CohortSpec:
    return CohortSpec.from_text(Path(path).read_text())


# -- synthetic rendering -----------------------------------------------------


def _blob(size: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


@dataclass(frozen=True)
class _Style:
    contrast: float
    offset: float
    shift: tuple[int, int]
    gain: float
    identity: np.ndarray


class _Renderer:
    """Face-like template plus AU-driven local intensity changes."""

    def __init__(self, size: int):
        s = size
        self.size = s
        yy, xx = np.mgrid[0:s, 0:s] / s
        face = (((yy - 0.5) / 0.42) ** 2 + ((xx - 0.5) / 0.34) ** 2) <= 1.0
        base = np.where(face, 150.0, 60.0)
        eyes = _blob(s, 0.40, 0.33, 0.05) + _blob(s, 0.40, 0.67, 0.05)
        brows = _blob(s, 0.29, 0.33, 0.045) + _blob(s, 0.29, 0.67, 0.045)
        mouth = _blob(s, 0.76, 0.5, 0.06)
        self.base = base - 80 * eyes - 45 * brows - 50 * mouth
        self.eyes = eyes
        # action-unit footprints
        self.brow_lower = _blob(s, 0.33, 0.5, 0.06) + 0.6 * brows
        self.orbital = _blob(s, 0.50, 0.33, 0.05) + _blob(s, 0.50, 0.67, 0.05)
        self.nose = _blob(s, 0.57, 0.42, 0.04) + _blob(s, 0.57, 0.58, 0.04)

    def style(self, rng: np.random.Generator, strength: float) -> _Style:
        s = self.size
        field_ = ndimage.gaussian_filter(rng.normal(0, 1, (s, s)), sigma=s / 8)
        field_ *= 14.0 * strength / (field_.std() + 1e-12)
        k = max(1, round(s / 16 * strength))
        return _Style(
            contrast=float(1.0 + strength * rng.uniform(-0.3, 0.3)),
            offset=float(strength * rng.uniform(-30, 30)),
            shift=(int(rng.integers(-k, k + 1)), int(rng.integers(-k, k + 1))),
            gain=float(1.0 + strength * rng.uniform(-0.4, 0.4)),
            identity=field_,
        )

    def render(self, aus: np.ndarray, style: _Style, noise: float, rng: np.random.Generator) -> np.ndarray:
        au4, au6, au7, au9, au10, au43 = (float(v) for v in aus)
        g = style.gain
        img = (self.base
               - g * 9.0 * au4 * self.brow_lower
               + g * 8.0 * max(au6, au7) * self.orbital
               - g * 8.0 * max(au9, au10) * self.nose
               + 70.0 * au43 * self.eyes)
        img = img + style.identity
        img = np.roll(img, style.shift, axis=(0, 1))
        img = style.contrast * img + style.offset
        if noise > 0:
            img = img + rng.normal(0.0, noise, img.shape)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# PSPI-1 heavy, like the real archive: most painful frames carry low intensities
_AU_LEVEL_P = np.array([0.50, 0.25, 0.12, 0.07, 0.04, 0.02])


def _positive_aus(rng: np.random.Generator, n: int) -> np.ndarray:
    out = np.zeros((n, 6), dtype=np.int64)
    filled = 0
    while filled < n:
        draw = np.column_stack([rng.choice(6, size=n, p=_AU_LEVEL_P) for _ in range(5)]
                               + [rng.random(n) < 0.12])
        draw = draw[pspi_scores(draw) >= 1]
        take = min(n - filled, len(draw))
        out[filled:filled + take] = draw[:take]
        filled += take
    return out


def _split_positives(total: int, sizes: np.ndarray, skew: float, rng: np.random.Generator) -> np.ndarray:
    """Largest-remainder allocation of ``total`` positives over sessions."""
    weights = sizes.astype(float)
    if skew > 0:
        weights = weights * rng.gamma(skew, 1.0, len(sizes))
    share = total * weights / weights.sum()
    counts = np.minimum(np.floor(share).astype(int), sizes)
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    for i in order:
        if counts.sum() >= total:
            break
        if counts[i] < sizes[i]:
            counts[i] += 1
    return counts


def _generate_client(spec: CohortSpec, index: int, client_id: str, renderer: _Renderer) -> Client:
    rng = np.random.default_rng([spec.seed, 1, index])
    n_sessions = _draw_count(spec.sessions_per_client, index, rng)
    lo, hi = spec.positive_rate_range
    rate = float(rng.uniform(lo, hi))
    style = renderer.style(rng, spec.style_strength)
    sizes = np.array([_draw_count(spec.frames_per_session, index + j, rng) for j in range(n_sessions)])
    positives = _split_positives(int(round(rate * sizes.sum())), sizes, spec.session_skew, rng)
    sessions = []
    for j in range(n_sessions):
        srng = np.random.default_rng([spec.seed, 2, index, j])
        n = int(sizes[j])
        aus = np.zeros((n, 6), dtype=np.int64)
        pos_idx = srng.permutation(n)[:positives[j]]
        aus[pos_idx] = _positive_aus(srng, len(pos_idx))
        images = np.stack([renderer.render(a, style, spec.feature_noise, srng) for a in aus])
        sessions.append(SessionRecord(client_id, j, images, pspi_scores(aus), aus))
    return Client(client_id, sessions)


def generate_cohort(spec: CohortSpec) -> Cohort:
    """Deterministic non-IID cohort; test clients are generated first."""
    renderer = _Renderer(spec.image_size)
    test = [_generate_client(spec, i, f"t{i:02d}", renderer) for i in range(spec.n_test_clients)]
    pretrain = [_generate_client(spec, spec.n_test_clients + i, f"p{i:02d}", renderer)
                for i in range(spec.n_pretrain_clients)]
    return Cohort(pretrain=pretrain, test=test)


# -- on-disk corpus ----------------------------------------------------------


@dataclass
class CorpusLoad:
    clients: list[Client]
    warnings: int = 0


def _read_frames(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise CorpusParseError(path, len(data), f"truncated header ({len(data)} of {HEADER.size} bytes)")
    magic, count, h, w = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorpusParseError(path, 0, f"bad magic {magic!r}")
    if h == 0 or w == 0:
        raise CorpusParseError(path, 8, f"degenerate frame size {h}x{w}")
    body = len(data) - HEADER.size
    gray, rgb = count * h * w, count * h * w * 3
    if body == gray:
        return np.frombuffer(data, np.uint8, gray, HEADER.size).reshape(count, h, w).copy()
    if body == rgb and count > 0:
        px = np.frombuffer(data, np.uint8, rgb, HEADER.size).reshape(count, h, w, 3)
        return np.rint(px.mean(axis=-1)).astype(np.uint8)
    if body < gray:
        raise CorpusParseError(path, len(data), f"truncated frame data (expected {gray} bytes, got {body})")
    raise CorpusParseError(path, HEADER.size + gray, f"{body - gray} trailing bytes after {count} frames")


def _read_labels(path: Path, count: int) -> tuple[dict, int]:
    labels: dict[int, int] = {}
    bad = 0
    if not path.exists():
        return labels, 0
    for lineno, raw in enumerate(path.read_text().split("\n"), 1):
        line = raw.strip()
        if not line or (lineno == 1 and line.replace(" ", "") == "frame_index,pspi"):
            continue
        parts = line.split(",")
        try:
            if len(parts) != 2:
                raise ValueError
            idx, score = int(parts[0]), int(parts[1])
            if not 0 <= idx < count or score < 0 or idx in labels:
                raise ValueError
        except ValueError:
            log.warning("%s:%d: unparseable label line %r", path, lineno, raw)
            bad += 1
            continue
        labels[idx] = score
    return labels, bad


def load_corpus(path) -> CorpusLoad:
    """Parse a corpus directory; frames without a usable label are skipped.

    One warning is counted per rejected label line, plus one per frame left
    without any label line.
    """
    root = Path(path)
    clients = []
    warnings = 0
    for cdir in sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []:
        sessions = []
        for sdir in sorted((p for p in cdir.iterdir() if p.is_dir() and p.name.isdigit()), key=lambda p: int(p.name)):
            fpath = sdir / "frames.bin"
            if not fpath.exists():
                continue
            images = _read_frames(fpath)
            labels, bad = _read_labels(sdir / "labels.csv", len(images))
            warnings += bad
            unlabeled = len(images) - len(labels)
            warnings += max(unlabeled - bad, 0)
            keep = sorted(labels)
            if not keep:
                continue
            pspi = np.array([labels[i] for i in keep], dtype=np.int64)
            sessions.append(SessionRecord(cdir.name, int(sdir.name), images[keep], pspi))
        if sessions:
            clients.append(Client(cdir.name, sessions))
    return CorpusLoad(clients, warnings)


def write_corpus(clients, root) -> None:
    root = Path(root)
    for client in clients:
        for s in client.sessions:
            sdir = root / client.client_id / str(s.session_index)
            sdir.mkdir(parents=True, exist_ok=True)
            n, h, w = s.images.shape
            (sdir / "frames.bin").write_bytes(HEADER.pack(MAGIC, n, h, w) + s.images.astype(np.uint8).tobytes())
            lines = [f"{i},{int(p)}" for i, p in enumerate(s.pspi)]
            (sdir / "labels.csv").write_text("\n".join(lines) + "\n")


def split_corpus(clients: list[Client], n_pretrain: int) -> Cohort:
    """First ``n_pretrain`` clients (by id order) pretrain; the rest are test subjects."""
    if n_pretrain >= len(clients):
        raise RejectedInputError(f"corpus has {len(clients)} clients, cannot hold out {n_pretrain} for pretraining")
    return Cohort(pretrain=clients[:n_pretrain], test=clients[n_pretrain:])
