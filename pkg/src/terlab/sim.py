"""Synthetic base stations: antennas with geometry and appearance features,
PCI scan records with RSRP probes, and ground-truth affiliation pairs.

Every station is a pure function of ``(master seed, station_id, SimConfig)``;
the per-station generator is seeded from a named substream, so stations can be
built in any order or in parallel with identical results.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, UsageError

DATASET_VERSION = 1
METERS_PER_DEG = 111_320.0
RSRP_MIN, RSRP_MAX = -140.0, -40.0
TILT_LIMIT = 15.0

VENDORS = ("A", "B")
BANDS = ("Low", "High")
BAND_FREQ_MHZ = {"Low": 800.0, "High": 3500.0}
BAND_GENERATION = {"Low": "4G", "High": "5G"}
# probe distance ranges (m) per band; high band cells are smaller
BAND_RANGE_M = {"Low": (150.0, 600.0), "High": (80.0, 300.0)}
# mean physical size (length, width) per (vendor, band), meters
PANEL_SIZE = {
    ("A", "Low"): (1.9, 0.45),
    ("A", "High"): (0.9, 0.40),
    ("B", "Low"): (1.5, 0.30),
    ("B", "High"): (0.7, 0.28),
}

# stream ids for SeedSequence substreams
STREAM_STATION = 1
STREAM_SPLIT = 2
STREAM_WORLD = 3


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class SimConfig:
    m_min: int = 2
    m_max: int = 6
    probes_min: int = 6
    probes_max: int = 10
    distractor_rate: float = 0.15
    uncovered_rate: float = 0.10
    noise_db: float = 4.0
    beamwidth_deg: float = 65.0
    probe_spread_deg: float = 18.0
    tx_power_dbm: float = 18.0
    clutter_db: float = 20.0
    visual_tokens: int = 6
    visual_dim: int = 16
    visual_noise: float = 0.6
    # antennas cluster into this many sectors (0: spread evenly around the mast)
    sectors: int = 3
    sector_spacing_deg: float = 12.0
    world_seed: int = 20240501

    def __post_init__(self):
        if not 1 <= self.m_min <= self.m_max:
            raise ConfigError(f"need 1 <= m_min <= m_max, got {self.m_min}, {self.m_max}")
        if not 1 <= self.probes_min <= self.probes_max:
            raise ConfigError("need 1 <= probes_min <= probes_max")
        for name in ("distractor_rate", "uncovered_rate"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.noise_db < 0 or self.visual_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.beamwidth_deg <= 0 or self.visual_tokens < 1 or self.visual_dim < 1:
            raise ConfigError("beamwidth, visual_tokens and visual_dim must be positive")
        if self.sectors < 0 or self.sector_spacing_deg <= 0:
            raise ConfigError("sectors must be >= 0 and sector_spacing_deg > 0")


@dataclass
class AntennaRecord:
    id: int
    vendor: str
    band: str
    azimuth: float
    length: float
    width: float
    height: float
    tilt: float
    mount: tuple[float, float, float]
    # pseudo-patch appearance features, visual_tokens x visual_dim
    patches: list[list[float]] = field(default_factory=list)

    @property
    def class_label(self) -> int:
        return VENDORS.index(self.vendor) * 2 + BANDS.index(self.band)

    def validate(self) -> None:
        if self.vendor not in VENDORS or self.band not in BANDS:
            raise DataError(f"antenna {self.id}: bad vendor/band {self.vendor}/{self.band}")
        if not 0.0 <= self.azimuth < 360.0:
            raise DataError(f"antenna {self.id}: azimuth {self.azimuth} outside [0, 360)")
        if min(self.length, self.width, self.height) <= 0:
            raise DataError(f"antenna {self.id}: non-positive dimension")
        if abs(self.tilt) > TILT_LIMIT:
            raise DataError(f"antenna {self.id}: tilt {self.tilt} outside [-15, 15]")


@dataclass
class PciRecord:
    pci: int
    generation: str
    # (latitude, longitude, rsrp dBm)
    probes: list[tuple[float, float, float]]

    def validate(self) -> None:
        if not self.probes:
            raise DataError(f"PCI {self.pci}: no probes")
        if self.generation not in ("4G", "5G"):
            raise DataError(f"PCI {self.pci}: bad generation {self.generation!r}")
        for _, _, rsrp in self.probes:
            if not RSRP_MIN <= rsrp <= RSRP_MAX:
                raise DataError(f"PCI {self.pci}: RSRP {rsrp} outside [-140, -40]")


@dataclass
class StationSample:
    station_id: int
    center: tuple[float, float]
    antennas: list[AntennaRecord]
    signals: list[PciRecord]
    pairs: list[tuple[int, int]]

    @property
    def generations(self) -> list[str]:
        return [s.generation for s in self.signals]

    def validate(self) -> None:
        m, n = len(self.antennas), len(self.signals)
        if m < 1 or n < 1:
            raise DataError(f"station {self.station_id}: needs antennas and signals ({m}, {n})")
        for a in self.antennas:
            a.validate()
        for s in self.signals:
            s.validate()
        seen_a, seen_s = set(), set()
        for a, s in self.pairs:
            if not (0 <= a < m and 0 <= s < n):
                raise DataError(f"station {self.station_id}: pair ({a}, {s}) out of range")
            if a in seen_a or s in seen_s:
                raise DataError(f"station {self.station_id}: pair ({a}, {s}) is not one-to-one")
            seen_a.add(a)
            seen_s.add(s)

    def to_json(self) -> str:
        d = {
            "version": DATASET_VERSION,
            "station_id": self.station_id,
            "center": list(self.center),
            "antennas": [asdict(a) | {"mount": list(a.mount)} for a in self.antennas],
            "signals": [
                {"pci": s.pci, "generation": s.generation, "probes": [list(p) for p in s.probes]}
                for s in self.signals
            ],
            "pairs": [list(p) for p in self.pairs],
        }
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "StationSample":
        d = json.loads(line)
        if d.get("version") != DATASET_VERSION:
            raise DataError(f"unsupported dataset version {d.get('version')!r}")
        antennas = [
            AntennaRecord(**{**a, "mount": tuple(a["mount"])}) for a in d["antennas"]
        ]
        signals = [
            PciRecord(s["pci"], s["generation"], [tuple(p) for p in s["probes"]])
            for s in d["signals"]
        ]
        st = cls(d["station_id"], tuple(d["center"]), antennas, signals,
                 [tuple(p) for p in d["pairs"]])
        st.validate()
        return st


# ---------------------------------------------------------------------------
# Propagation


def wrap_deg(x: float) -> float:
    """Map an angle difference to (-180, 180]."""
    x = math.fmod(x + 180.0, 360.0)
    if x <= 0:
        x += 360.0
    return x - 180.0


def pattern_gain_db(delta_deg: float, beamwidth_deg: float) -> float:
    return max(-12.0 * (delta_deg / beamwidth_deg) ** 2, -25.0)


def rsrp_model(antenna: AntennaRecord, probe, cfg: SimConfig = SimConfig(),
               rng: np.random.Generator | None = None) -> float:
    """RSRP (dBm) at ``probe`` = (east, north, up) meters from the station center.

    Free-space loss plus a fixed clutter term, a quadratic horizontal
    antenna pattern, and Gaussian shadowing when ``rng`` is given.
    """
    dx = probe[0] - antenna.mount[0]
    dy = probe[1] - antenna.mount[1]
    dz = probe[2] - antenna.mount[2]
    d = math.sqrt(dx * dx + dy * dy + dz * dz)
    if d <= 1.0:
        raise UsageError(f"probe {d:.3f} m from antenna {antenna.id}; needs > 1 m")
    f_mhz = BAND_FREQ_MHZ[antenna.band]
    path_loss = 20.0 * math.log10(d) + 20.0 * math.log10(f_mhz) - 27.55 + cfg.clutter_db
    bearing = math.degrees(math.atan2(dx, dy)) % 360.0
    gain = pattern_gain_db(wrap_deg(bearing - antenna.azimuth), cfg.beamwidth_deg)
    rsrp = cfg.tx_power_dbm - path_loss + gain
    if rng is not None and cfg.noise_db > 0:
        rsrp += rng.normal(0.0, cfg.noise_db)
    return float(min(max(rsrp, RSRP_MIN), RSRP_MAX))


# ---------------------------------------------------------------------------
# Generation


class _World:
    """Fixed appearance model shared by all stations of a SimConfig."""

    def __init__(self, cfg: SimConfig):
        rng = substream(cfg.world_seed, STREAM_WORLD)
        self.prototypes = rng.normal(0.0, 1.0, size=(4, cfg.visual_tokens, cfg.visual_dim))
        self.geo_mix = rng.normal(0.0, 1.0 / math.sqrt(6), size=(cfg.visual_tokens, 6, cfg.visual_dim))


_WORLDS: dict[SimConfig, _World] = {}


def _world(cfg: SimConfig) -> _World:
    if cfg not in _WORLDS:
        _WORLDS[cfg] = _World(cfg)
    return _WORLDS[cfg]


def _geo_code(a: AntennaRecord) -> np.ndarray:
    """Roughly unit-scale geometry code used to condition appearance."""
    th = math.radians(a.azimuth)
    return np.array([math.sin(th), math.cos(th), (a.length - 1.25) / 0.5,
                     (a.width - 0.36) / 0.08, (a.height - 30.0) / 8.0, (a.tilt - 5.0) / 3.0])


def _to_latlon(center, east: float, north: float) -> tuple[float, float]:
    lat0, lon0 = center
    return (lat0 + north / METERS_PER_DEG,
            lon0 + east / (METERS_PER_DEG * math.cos(math.radians(lat0))))


def _sample_probes(rng, cfg, emitter: AntennaRecord, center, band: str):
    n = int(rng.integers(cfg.probes_min, cfg.probes_max + 1))
    lo, hi = BAND_RANGE_M[band]
    probes = []
    for _ in range(n):
        bearing = math.radians(emitter.azimuth + rng.normal(0.0, cfg.probe_spread_deg))
        dist = rng.uniform(lo, hi)
        east = emitter.mount[0] + dist * math.sin(bearing)
        north = emitter.mount[1] + dist * math.cos(bearing)
        rsrp = rsrp_model(emitter, (east, north, 1.5), cfg, rng)
        lat, lon = _to_latlon(center, east, north)
        probes.append((lat, lon, rsrp))
    return probes


def _make_antenna(rng, cfg, idx: int, azimuth: float, vendor: str, band: str) -> AntennaRecord:
    base_l, base_w = PANEL_SIZE[(vendor, band)]
    height = float(rng.uniform(18.0, 42.0))
    az_rad = math.radians(azimuth)
    offset = rng.uniform(0.5, 3.0)
    a = AntennaRecord(
        id=idx,
        vendor=vendor,
        band=band,
        azimuth=azimuth,
        length=float(base_l * rng.uniform(0.9, 1.1)),
        width=float(base_w * rng.uniform(0.9, 1.1)),
        height=height,
        tilt=float(rng.uniform(0.0, 10.0)),
        mount=(float(offset * math.sin(az_rad)), float(offset * math.cos(az_rad)), height),
    )
    world = _world(cfg)
    code = _geo_code(a)
    patches = world.prototypes[a.class_label] + np.einsum("g,tgd->td", code, world.geo_mix)
    patches = patches + rng.normal(0.0, cfg.visual_noise, size=patches.shape)
    a.patches = patches.tolist()
    return a


def _azimuths(rng, cfg: SimConfig, m: int) -> list[float]:
    """Distinct azimuths; with sectors, co-sector antennas sit a few degrees apart."""
    base = rng.uniform(0.0, 360.0)
    if cfg.sectors == 0:
        step = 360.0 / m
        return [float((base + i * step + rng.uniform(-0.15, 0.15) * step) % 360.0) for i in range(m)]
    sector_of = np.sort(rng.integers(cfg.sectors, size=m))
    out = []
    for sec in range(cfg.sectors):
        k = int(np.sum(sector_of == sec))
        centre = base + sec * 360.0 / cfg.sectors
        for j in range(k):
            off = (j - (k - 1) / 2.0) * cfg.sector_spacing_deg
            off += rng.uniform(-0.25, 0.25) * cfg.sector_spacing_deg
            out.append(float((centre + off) % 360.0))
    return out


def generate_station(seed: int, station_id: int, cfg: SimConfig = SimConfig()) -> StationSample:
    """Build one station deterministically from ``(seed, station_id)``."""
    rng = substream(seed, STREAM_STATION, station_id)
    center = (float(rng.uniform(30.0, 40.0)), float(rng.uniform(110.0, 120.0)))

    m = int(rng.integers(cfg.m_min, cfg.m_max + 1))
    antennas = []
    for i, az in enumerate(_azimuths(rng, cfg, m)):
        vendor = VENDORS[int(rng.integers(2))]
        band = BANDS[int(rng.integers(2))]
        antennas.append(_make_antenna(rng, cfg, i, float(az), vendor, band))

    covered = [i for i in range(m) if rng.uniform() >= cfg.uncovered_rate]
    if not covered:
        covered = [int(rng.integers(m))]
    n_distract = int(rng.binomial(m, cfg.distractor_rate)) if cfg.distractor_rate > 0 else 0

    entries = []  # (antenna index or None, PciRecord)
    for i in covered:
        a = antennas[i]
        entries.append((i, PciRecord(0, BAND_GENERATION[a.band],
                                     _sample_probes(rng, cfg, a, center, a.band))))
    for _ in range(n_distract):
        # a neighbouring site's cell spilling into this station's scan area
        bearing = rng.uniform(0.0, 360.0)
        dist = rng.uniform(600.0, 1200.0)
        br = math.radians(bearing)
        band = BANDS[int(rng.integers(2))]
        facing = (bearing + 180.0 + rng.uniform(-50.0, 50.0)) % 360.0
        phantom = AntennaRecord(-1, "A", band, facing, 1.0, 0.3, 30.0, 5.0,
                                (dist * math.sin(br), dist * math.cos(br), 30.0))
        entries.append((None, PciRecord(0, BAND_GENERATION[band],
                                        _sample_probes(rng, cfg, phantom, center, band))))

    order = rng.permutation(len(entries))
    pcis = rng.choice(1008, size=len(entries), replace=False)
    signals, pairs = [], []
    for j, k in enumerate(order):
        ant, rec = entries[k]
        rec.pci = int(pcis[j])
        signals.append(rec)
        if ant is not None:
            pairs.append((ant, j))
    pairs.sort()
    st = StationSample(station_id, center, antennas, signals, pairs)
    st.validate()
    return st


def generate_dataset(n_stations: int, seed: int, cfg: SimConfig = SimConfig()) -> list[StationSample]:
    if n_stations < 1:
        raise ConfigError(f"need at least one station, got {n_stations}")
    return [generate_station(seed, i, cfg) for i in range(n_stations)]


# ---------------------------------------------------------------------------
# Persistence


def dumps_dataset(stations: Iterable[StationSample]) -> str:
    return "".join(st.to_json() + "\n" for st in stations)


def load_dataset(path) -> list[StationSample]:
    stations = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                stations.append(StationSample.from_json(line))
            except (DataError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not stations:
        raise DataError(f"{path}: no stations")
    return stations


def fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def split_dataset(stations: Sequence[StationSample], ratios=(0.7, 0.15, 0.15), seed: int = 0):
    """Station-level train/val/test split (largest-remainder allocation)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ConfigError(f"split ratios must be 3 non-negative values summing to 1, got {ratios}")
    n = len(stations)
    raw = [r * n for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    rest = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in rest[: n - sum(counts)]:
        counts[i] += 1
    for r, c in zip(ratios, counts):
        if r > 0 and c == 0:
            raise ConfigError(f"{n} stations are too few for split ratios {ratios}")
    order = substream(seed, STREAM_SPLIT).permutation(n)
    parts, start = [], 0
    for c in counts:
        parts.append([stations[i] for i in sorted(order[start : start + c])])
        start += c
    return tuple(parts)


# ---------------------------------------------------------------------------
# Tokenization

GEOMETRY_TOKENS = 5
GEOMETRY_WIDTH = 2 + GEOMETRY_TOKENS
SIGNAL_WIDTH = 3


def geometry_features(a: AntennaRecord) -> np.ndarray:
    th = math.radians(a.azimuth)
    return np.array([math.sin(th), math.cos(th), a.length, a.width, a.height, a.tilt])


def signal_features(sig: PciRecord, center) -> np.ndarray:
    lat0, lon0 = center
    return np.array([[lat - lat0, lon - lon0, rsrp] for lat, lon, rsrp in sig.probes])


@dataclass(frozen=True)
class TokenStats:
    """Per-feature mean/std used for z-scoring, fitted on the training split."""

    geo_mean: tuple
    geo_std: tuple
    sig_mean: tuple
    sig_std: tuple
    vis_mean: tuple
    vis_std: tuple

    @classmethod
    def fit(cls, stations: Sequence[StationSample]) -> "TokenStats":
        if not stations:
            raise UsageError("cannot fit token statistics on zero stations")
        geo = np.array([geometry_features(a) for st in stations for a in st.antennas])
        sig = np.concatenate([signal_features(s, st.center) for st in stations for s in st.signals])
        vis = np.concatenate([np.asarray(a.patches) for st in stations for a in st.antennas])

        def moments(x):
            std = x.std(axis=0)
            return tuple(x.mean(axis=0).tolist()), tuple(np.where(std > 0, std, 1.0).tolist())

        return cls(*moments(geo), *moments(sig), *moments(vis))

    def to_dict(self) -> dict:
        return {f.name: list(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "TokenStats":
        return cls(**{f.name: tuple(d[f.name]) for f in fields(cls)})


def tokenize_geometry(a: AntennaRecord, stats: TokenStats) -> np.ndarray:
    """Five tokens (azimuth as sin/cos, L, W, H, tilt): two value slots + one-hot slot id."""
    z = (geometry_features(a) - np.asarray(stats.geo_mean)) / np.asarray(stats.geo_std)
    out = np.zeros((GEOMETRY_TOKENS, GEOMETRY_WIDTH))
    out[0, 0:2] = z[0:2]
    out[1:, 0] = z[2:]
    out[np.arange(GEOMETRY_TOKENS), 2 + np.arange(GEOMETRY_TOKENS)] = 1.0
    return out


def tokenize_signal(sig: PciRecord, center, stats: TokenStats) -> np.ndarray:
    """One token per probe: z-scored (d_lat, d_lon, rsrp)."""
    if not sig.probes:
        raise DataError(f"PCI {sig.pci}: no probes to tokenize")
    return (signal_features(sig, center) - np.asarray(stats.sig_mean)) / np.asarray(stats.sig_std)


def tokenize_visual(a: AntennaRecord, stats: TokenStats) -> np.ndarray:
    if not a.patches:
        raise DataError(f"antenna {a.id}: no appearance patches")
    return (np.asarray(a.patches) - np.asarray(stats.vis_mean)) / np.asarray(stats.vis_std)


@dataclass
class TokenizedStation:
    station: StationSample
    visual: list[np.ndarray]
    geometry: list[np.ndarray]
    signal: list[np.ndarray]

    @property
    def labels(self) -> list[int]:
        return [a.class_label for a in self.station.antennas]


def tokenize_station(st: StationSample, stats: TokenStats) -> TokenizedStation:
    return TokenizedStation(
        st,
        [tokenize_visual(a, stats) for a in st.antennas],
        [tokenize_geometry(a, stats) for a in st.antennas],
        [tokenize_signal(s, st.center, stats) for s in st.signals],
    )


def learnability_probe(stations: Sequence[StationSample], stats: TokenStats | None = None) -> tuple[float, float]:
    """Correlations of a least-squares probe from signal-token means to the
    affiliated antenna's (sin, cos) azimuth."""
    stats = stats or TokenStats.fit(stations)
    xs, ys = [], []
    for st in stations:
        for a, s in st.pairs:
            tok = tokenize_signal(st.signals[s], st.center, stats)
            xs.append(np.concatenate([tok.mean(axis=0), [1.0]]))
            th = math.radians(st.antennas[a].azimuth)
            ys.append([math.sin(th), math.cos(th)])
    X, Y = np.array(xs), np.array(ys)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    pred = X @ coef
    return tuple(float(np.corrcoef(pred[:, k], Y[:, k])[0, 1]) for k in range(2))
