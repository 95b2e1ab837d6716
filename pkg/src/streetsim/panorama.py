"""Synthetic panoramas and the agent's visual observation.

Each node carries a 360-degree equirectangular RGB strip (W = 4H, column 0 at
true north, vertical FOV 180 degrees). The agent sees a 60-degree square crop
of it, centered at its heading, bilinearly resampled to 84x84 and scaled to
[0, 1].

Synthetic panoramas are procedural: hash-seeded color bands and building
stripes give each node a recognizable appearance, and a near-white marker
stripe is drawn at the bearing of every incident edge so traversable streets
are visible in the crop.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from streetsim.citygraph import StreetGraph

OBS_SIZE = 84
FOV_DEG = 60.0
ELEV_FOV_DEG = 60.0
VERTICAL_SPAN_DEG = 180.0
MARKER_RGB = (250, 250, 250)
MARKER_HALF_WIDTH_COLS = 2
DEFAULT_PANO_HEIGHT = 64


class PanoramaError(Exception):
    pass


class UnknownNode(PanoramaError):
    pass


class FormatError(PanoramaError):
    pass


class MissingPanorama(PanoramaError):
    """One or more graph nodes have no panorama file; lists their ids."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"no panorama for nodes: {', '.join(self.missing)}")


@dataclass(frozen=True, eq=False)
class Panorama:
    """Equirectangular RGB strip for one node.

    pixels: (H, W, 3) uint8 with W = 4H; columns span bearings [0, 360) with
    column 0 at true north.
    """

    node: str
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise FormatError(f"panorama pixels must be (H, W, 3) uint8, got {px.shape} {px.dtype}")
        h, w = px.shape[:2]
        if h < 16:
            raise FormatError(f"panorama height {h} below minimum 16")
        if w != 4 * h:
            raise FormatError(f"panorama width {w} != 4 * height {h}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def synth_panorama(graph: StreetGraph, node: str, seed: int = 0, height: int = DEFAULT_PANO_HEIGHT) -> Panorama:
    """Deterministic procedural panorama for ``node``.

    Same (node, seed) always yields identical pixels. Colors stay at or below
    240 so the 250-valued edge markers remain unambiguous.
    """
    if node not in graph:
        raise UnknownNode(f"node {node!r} not in graph")
    width = 4 * height
    rng = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(node.encode("utf-8"))])

    px = np.empty((height, width, 3), dtype=np.uint8)
    sky = rng.integers(90, 210, size=3)
    ground = rng.integers(25, 110, size=3)
    horizon_top = height // 4
    horizon_bot = (3 * height) // 4
    px[:horizon_top] = sky
    px[horizon_bot:] = ground

    # wall band: three horizontal sub-bands, each with its own base color plus
    # smooth whole-period sinusoids. Horizontal structure is heading-invariant,
    # so node identity survives small rotations of the crop window.
    band_edges = np.linspace(horizon_top, horizon_bot, 4).astype(int)
    theta = np.arange(width) * (2.0 * math.pi / width)
    for k in range(3):
        base = rng.integers(40, 201, size=3)
        phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
        freq = rng.integers(1, 4, size=3)
        amp = rng.uniform(15.0, 45.0, size=3)
        wave = base[None, :] + amp[None, :] * np.sin(freq[None, :] * theta[:, None] + phase[None, :])
        px[band_edges[k] : band_edges[k + 1]] = np.clip(wave, 0, 240).astype(np.uint8)[None, :, :]

    for _ in range(int(rng.integers(6, 13))):
        col0 = int(rng.integers(0, width))
        stripe_w = int(rng.integers(6, 21))
        color = rng.integers(20, 241, size=3)
        top = int(rng.integers(0, horizon_top + 1))
        cols = np.arange(col0, col0 + stripe_w) % width
        px[top:horizon_bot, cols] = color

    # edge markers last so nothing occludes them
    for nbr in graph.neighbors(node):
        bearing = graph.edge_bearing(node, nbr)
        center = int(round(bearing / 360.0 * width))
        cols = np.arange(center - MARKER_HALF_WIDTH_COLS, center + MARKER_HALF_WIDTH_COLS + 1) % width
        px[:, cols] = MARKER_RGB

    return Panorama(node=node, pixels=px)


def render_city(graph: StreetGraph, seed: int = 0, height: int = DEFAULT_PANO_HEIGHT) -> dict[str, Panorama]:
    """Synthetic panoramas for every node of ``graph``."""
    return {nid: synth_panorama(graph, nid, seed=seed, height=height) for nid in graph.node_ids}


def shift_columns(pano: Panorama, k: int) -> Panorama:
    """Rotate panorama content left by ``k`` columns (new col c = old col c+k)."""
    return Panorama(node=pano.node, pixels=np.roll(pano.pixels, -k, axis=1))


def _row_resample(pixels: np.ndarray) -> np.ndarray:
    """Vertical bilinear pass: (H, W, 3) uint8 -> (84, W, 3) float32 in [0, 1].

    Output rows sample the middle ELEV_FOV_DEG band of the 180-degree strip.
    """
    h = pixels.shape[0]
    top = (VERTICAL_SPAN_DEG - ELEV_FOV_DEG) / 2.0
    elev = top + (np.arange(OBS_SIZE) + 0.5) * (ELEV_FOV_DEG / OBS_SIZE)
    y = elev / VERTICAL_SPAN_DEG * h - 0.5
    y0 = np.floor(y).astype(np.int64)
    fr = (y - y0).astype(np.float32)[:, None, None]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    src = pixels.astype(np.float32) / 255.0
    return src[y0c] * (1.0 - fr) + src[y1c] * fr


def _col_sample(strip: np.ndarray, heading: float) -> np.ndarray:
    """Horizontal bilinear pass over a row-resampled strip, wrapping at the seam."""
    width = strip.shape[1]
    bearing = heading - FOV_DEG / 2.0 + (np.arange(OBS_SIZE) + 0.5) * (FOV_DEG / OBS_SIZE)
    x = (bearing / 360.0 * width - 0.5) % width
    x0 = np.floor(x).astype(np.int64)
    fr = (x - x0).astype(np.float32)[None, :, None]
    x0 %= width
    x1 = (x0 + 1) % width
    return strip[:, x0] * (1.0 - fr) + strip[:, x1] * fr


def crop_view(pano: Panorama, heading: float) -> np.ndarray:
    """The agent's observation: 60-degree square crop at ``heading``.

    Returns (84, 84, 3) float32 in [0, 1].
    """
    if not math.isfinite(heading):
        raise ValueError(f"heading must be finite, got {heading}")
    return _col_sample(_row_resample(pano.pixels), heading % 360.0)


class PanoramaCache:
    """Row-resampled strips per node, for fast repeated heading crops.

    The vertical resampling pass is heading-independent, so it is done once
    per node; `observe` then only does the horizontal pass. Read-only after
    construction, safe to share across actor threads.
    """

    def __init__(self, panoramas: dict[str, Panorama]):
        self._strips = {nid: _row_resample(p.pixels) for nid, p in panoramas.items()}

    def __contains__(self, node: str) -> bool:
        return node in self._strips

    def observe(self, node: str, heading: float) -> np.ndarray:
        if node not in self._strips:
            raise UnknownNode(f"no panorama cached for node {node!r}")
        if not math.isfinite(heading):
            raise ValueError(f"heading must be finite, got {heading}")
        return _col_sample(self._strips[node], heading % 360.0)


def save_panorama(pano: Panorama, path) -> None:
    """Write binary PPM (P6, maxval 255)."""
    h, w = pano.pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pano.pixels.tobytes())


def _read_ppm_tokens(data: bytes, count: int, offset: int) -> tuple[list[bytes], int]:
    # PPM headers allow '#' comments and arbitrary whitespace between tokens
    tokens: list[bytes] = []
    i = offset
    while len(tokens) < count:
        if i >= len(data):
            raise FormatError("truncated PPM header")
        c = data[i : i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and data[j : j + 1] not in b" \t\r\n":
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i


def load_panorama(path, node: str) -> Panorama:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    tokens, i = _read_ppm_tokens(data, 3, 2)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    i += 1  # single whitespace byte after maxval
    need = width * height * 3
    raw = data[i : i + need]
    if len(raw) < need:
        raise FormatError(f"{path}: truncated pixel data ({len(raw)} of {need} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()
    return Panorama(node=node, pixels=pixels)


def load_panoramas(directory, graph: StreetGraph) -> dict[str, Panorama]:
    """Load ``<node_id>.ppm`` for every graph node from ``directory``."""
    directory = Path(directory)
    missing = [nid for nid in graph.node_ids if not (directory / f"{nid}.ppm").exists()]
    if missing:
        raise MissingPanorama(missing)
    return {nid: load_panorama(directory / f"{nid}.ppm", nid) for nid in graph.node_ids}


def save_panoramas(panoramas: dict[str, Panorama], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for nid, pano in panoramas.items():
        save_panorama(pano, directory / f"{nid}.ppm")
