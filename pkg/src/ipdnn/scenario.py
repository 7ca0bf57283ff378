"""Synthetic scenes, measurement geometry, noise, and file formats.

File formats
------------
measurements CSV   optional ``# key=value ...`` comment lines, then header
                   ``tx,rx,re,im``; rows ordered by tx, then rx
permittivity CSV   optional comment lines, header ``i,j,re,im``; row-major
setup JSON         ``Setup.to_dict()`` keys (``frequency_hz``, ``doi_side_m``,
                   ``n_side``, ``tx_positions_m``, ``rx_positions_m``,
                   ``source_amplitude``) plus ``version``
scene JSON         ``{"version": 1, "shapes": [...], "setup": {...}?}``; see
                   ``shape_from_dict`` for the per-kind keys
Floats are written with ``repr`` so every round trip is exact.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely

from .em_core import MeasurementSet, Setup, make_grid

FORMAT_VERSION = 1
MEAS_HEADER = ["tx", "rx", "re", "im"]
MAP_HEADER = ["i", "j", "re", "im"]


class FormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, path, line, msg):
        self.path, self.line = str(path), line
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {msg}")


class HeaderError(FormatError):
    pass


# ---------------------------------------------------------------- geometry

def default_setup(n_side: int = 64, n_tx: int = 36, n_rx: int = 36,
                  frequency: float = 4e9, doi_side: float = 0.15,
                  radius_wavelengths: float = 20.0) -> Setup:
    """Antennas on a centred ring of radius 20 wavelengths; receivers offset by half a step."""
    lam = 299_792_458.0 / frequency
    r = radius_wavelengths * lam
    a_tx = 2 * np.pi * np.arange(n_tx) / n_tx
    a_rx = 2 * np.pi * np.arange(n_rx) / n_rx + np.pi / n_rx
    return Setup(frequency, doi_side, n_side,
                 np.column_stack([r * np.cos(a_tx), r * np.sin(a_tx)]),
                 np.column_stack([r * np.cos(a_rx), r * np.sin(a_rx)]))


# ------------------------------------------------------------------ scenes

@dataclass
class Shape:
    kind: str
    eps: complex
    params: dict

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "disk":
            cx, cy = p["center"]
            return np.hypot(x - cx, y - cy) <= p["radius"]
        if self.kind == "ring":
            cx, cy = p["center"]
            r = np.hypot(x - cx, y - cy)
            return (r >= p["inner_radius"]) & (r <= p["outer_radius"])
        if self.kind == "rectangle":
            (x0, y0), (w, h) = p["corner"], p["size"]
            return (x >= x0) & (x <= x0 + w) & (y >= y0) & (y <= y0 + h)
        if self.kind == "polygon":
            poly = shapely.Polygon(p["vertices"])
            return shapely.contains_xy(poly, x, y) | shapely.touches(poly, shapely.points(x, y))
        if self.kind == "austria":
            return np.any([s.contains(x, y) for s in austria_parts(self.eps, **p)], axis=0)
        raise ValueError(f"unknown shape kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "eps": [self.eps.real, self.eps.imag], **self.params}


def austria_parts(eps, center=(0.0, 0.0), scale=0.075):
    """Two disks above a ring; the classic 2 m layout scaled by ``scale``."""
    cx, cy = center
    s = scale
    return [
        Shape("disk", eps, {"center": [cx - 0.3 * s, cy + 0.6 * s], "radius": 0.2 * s}),
        Shape("disk", eps, {"center": [cx + 0.3 * s, cy + 0.6 * s], "radius": 0.2 * s}),
        Shape("ring", eps, {"center": [cx, cy - 0.2 * s], "inner_radius": 0.3 * s,
                            "outer_radius": 0.6 * s}),
    ]


_SHAPE_KEYS = {
    "disk": {"center", "radius"},
    "ring": {"center", "inner_radius", "outer_radius"},
    "rectangle": {"corner", "size"},
    "polygon": {"vertices"},
    "austria": set(),
}


def shape_from_dict(d: dict) -> Shape:
    """Keys per kind: disk{center,radius}, ring{center,inner_radius,outer_radius},
    rectangle{corner,size}, polygon{vertices}, austria{center?,scale?}; all take ``eps``
    as ``[re, im]`` or a real number."""
    kind = d.get("kind")
    if kind not in _SHAPE_KEYS:
        raise ValueError(f"unknown shape kind {kind!r}")
    params = {k: v for k, v in d.items() if k not in ("kind", "eps")}
    missing = _SHAPE_KEYS[kind] - params.keys()
    if missing:
        raise ValueError(f"{kind} shape is missing {sorted(missing)}")
    e = d.get("eps", 1.0)
    eps = complex(e[0], e[1]) if isinstance(e, (list, tuple)) else complex(e)
    if not np.isfinite(eps):
        raise ValueError("shape permittivity must be finite")
    return Shape(kind, eps, params)


@dataclass
class SceneSpec:
    shapes: list = field(default_factory=list)
    setup: Setup | None = None

    def resolved_setup(self) -> Setup:
        return self.setup if self.setup is not None else default_setup()

    def to_dict(self) -> dict:
        d = {"version": FORMAT_VERSION, "shapes": [s.to_dict() for s in self.shapes]}
        if self.setup is not None:
            d["setup"] = self.setup.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        setup = Setup.from_dict(d["setup"]) if d.get("setup") else None
        return cls([shape_from_dict(s) for s in d.get("shapes", [])], setup)


def disk_scene(eps=2.0, radius=0.03, center=(0.0, 0.0), setup=None) -> SceneSpec:
    return SceneSpec([Shape("disk", complex(eps), {"center": list(center), "radius": radius})],
                     setup)


def two_disk_scene(eps=2.0, radius=0.022, gap=0.004, setup=None) -> SceneSpec:
    off = radius + gap / 2
    return SceneSpec([
        Shape("disk", complex(eps), {"center": [-off, 0.0], "radius": radius}),
        Shape("disk", complex(eps), {"center": [off, 0.0], "radius": radius}),
    ], setup)


def tube_scene(tube_eps=2.5, defect_eps=None, inner=0.025, outer=0.045,
               defect_corner=(0.027, -0.007), defect_size=(0.012, 0.014),
               setup=None) -> SceneSpec:
    """Tube cross-section, optionally with a rectangular defect cut into its wall."""
    shapes = [Shape("ring", complex(tube_eps),
                    {"center": [0.0, 0.0], "inner_radius": inner, "outer_radius": outer})]
    if defect_eps is not None:
        shapes.append(Shape("rectangle", complex(defect_eps),
                            {"corner": list(defect_corner), "size": list(defect_size)}))
    return SceneSpec(shapes, setup)


def rasterize(scene: SceneSpec, setup: Setup | None = None, subsample: int = 1) -> np.ndarray:
    """Permittivity map with later shapes overwriting earlier ones.

    ``subsample=1`` assigns each cell by its centre; ``subsample=k`` averages
    the permittivity over a k x k lattice of points inside each cell.
    """
    setup = setup or scene.resolved_setup()
    grid = make_grid(setup)
    h = grid.cell_size
    offs = (np.arange(subsample) + 0.5) / subsample * h - h / 2
    acc = np.zeros(setup.n_cells, dtype=complex)
    for dy in offs:
        for dx in offs:
            x = grid.cell_centers[:, 0] + dx
            y = grid.cell_centers[:, 1] + dy
            vals = np.ones(setup.n_cells, dtype=complex)
            for shape in scene.shapes:
                vals[shape.contains(x, y)] = shape.eps
            acc += vals
    out = acc / subsample**2
    # exact background outside every shape
    out[np.isclose(out, 1.0, rtol=0, atol=1e-15)] = 1.0
    return out.reshape(setup.n_side, setup.n_side)


# ------------------------------------------------------------------- noise

def add_noise(meas: MeasurementSet, ratio: float, seed: int | None = None) -> MeasurementSet:
    """Circular complex Gaussian noise rescaled to ``ratio * ||E||_F`` exactly."""
    if ratio < 0:
        raise ValueError("noise ratio must be non-negative")
    if ratio == 0:
        return MeasurementSet(meas.samples.copy(), meas.fingerprint, meas.provenance)
    rng = np.random.default_rng(seed)
    shape = meas.samples.shape
    n = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    n *= ratio * np.linalg.norm(meas.samples) / np.linalg.norm(n)
    return MeasurementSet(meas.samples + n, meas.fingerprint, "synthetic-noisy")


# --------------------------------------------------------------------- I/O

def _write_meta(fh, meta: dict) -> None:
    fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")


def _read_csv(path, header: list[str]):
    """Return (meta, [(lineno, row), ...]) after strict header validation."""
    path = Path(path)
    meta, rows, seen_header = {}, [], False
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not seen_header and line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    meta[k] = v
                continue
            if not seen_header:
                got = next(csv.reader([line]), [])
                if [g.strip() for g in got] != header:
                    raise HeaderError(path, lineno, f"expected header {','.join(header)}, got {line!r}")
                seen_header = True
                continue
            if not line.strip():
                continue
            row = next(csv.reader([line]))
            if len(row) != len(header):
                raise FormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, row))
    if not seen_header:
        raise HeaderError(path, 1, "missing header")
    if meta.get("version", str(FORMAT_VERSION)) != str(FORMAT_VERSION):
        raise FormatError(path, 1, f"unsupported version {meta['version']}")
    return meta, rows


def _parse_row(path, lineno, row):
    try:
        return int(row[0]), int(row[1]), float(row[2]), float(row[3])
    except ValueError as exc:
        raise FormatError(path, lineno, str(exc)) from None


def save_measurements(meas: MeasurementSet, path) -> None:
    n_rx, n_tx = meas.samples.shape
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _write_meta(fh, {"version": FORMAT_VERSION, "n_tx": n_tx, "n_rx": n_rx,
                         "fingerprint": meas.fingerprint or "-",
                         "provenance": meas.provenance})
        fh.write(",".join(MEAS_HEADER) + "\n")
        for t in range(n_tx):
            for r in range(n_rx):
                v = meas.samples[r, t]
                fh.write(f"{t},{r},{float(v.real)!r},{float(v.imag)!r}\n")


def load_measurements(path) -> MeasurementSet:
    meta, rows = _read_csv(path, MEAS_HEADER)
    parsed = [_parse_row(path, ln, row) for ln, row in rows]
    if not parsed:
        raise FormatError(path, None, "no samples")
    n_tx = int(meta.get("n_tx", max(p[0] for p in parsed) + 1))
    n_rx = int(meta.get("n_rx", max(p[1] for p in parsed) + 1))
    if len(parsed) != n_tx * n_rx:
        last = rows[-1][0] if rows else None
        raise FormatError(path, last, f"expected {n_tx * n_rx} samples, found {len(parsed)} "
                                      "(truncated file?)")
    samples = np.empty((n_rx, n_tx), dtype=complex)
    for k, ((ln, _), (t, r, re, im)) in enumerate(zip(rows, parsed)):
        if (t, r) != divmod(k, n_rx):
            raise FormatError(path, ln, f"expected tx,rx = {divmod(k, n_rx)}, got {(t, r)}")
        samples[r, t] = complex(re, im)
    fp = meta.get("fingerprint", "")
    return MeasurementSet(samples, "" if fp == "-" else fp, meta.get("provenance", "file"))


def save_map(eps, path) -> None:
    eps = np.asarray(eps, dtype=complex)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _write_meta(fh, {"version": FORMAT_VERSION, "n_side": eps.shape[0]})
        fh.write(",".join(MAP_HEADER) + "\n")
        for i in range(eps.shape[0]):
            for j in range(eps.shape[1]):
                v = eps[i, j]
                fh.write(f"{i},{j},{float(v.real)!r},{float(v.imag)!r}\n")


def load_map(path) -> np.ndarray:
    meta, rows = _read_csv(path, MAP_HEADER)
    parsed = [_parse_row(path, ln, row) for ln, row in rows]
    n = int(meta["n_side"]) if "n_side" in meta else int(round(np.sqrt(len(parsed))))
    if len(parsed) != n * n or n < 1:
        last = rows[-1][0] if rows else None
        raise FormatError(path, last, f"expected {n * n} cells, found {len(parsed)} (truncated file?)")
    eps = np.empty((n, n), dtype=complex)
    for k, ((ln, _), (i, j, re, im)) in enumerate(zip(rows, parsed)):
        if (i, j) != divmod(k, n):
            raise FormatError(path, ln, f"expected i,j = {divmod(k, n)}, got {(i, j)}")
        eps[i, j] = complex(re, im)
    return eps


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, exc.msg) from None
    if not isinstance(d, dict):
        raise FormatError(path, 1, "expected a JSON object")
    if d.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise FormatError(path, None, f"unsupported version {d.get('version')}")
    return d


def save_setup(setup: Setup, path) -> None:
    Path(path).write_text(json.dumps(setup.to_dict(), indent=2), encoding="utf-8")


def load_setup(path) -> Setup:
    d = _load_json(path)
    try:
        return Setup.from_dict(d)
    except KeyError as exc:
        raise FormatError(path, None, f"missing key {exc}") from None


def save_scene(scene: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2), encoding="utf-8")


def load_scene(path) -> SceneSpec:
    d = _load_json(path)
    try:
        return SceneSpec.from_dict(d)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(path, None, str(exc)) from None


def load_fresnel(path):
    """Placeholder for an Institut Fresnel dataset adapter.

    Such an adapter would parse the vendor files, apply the calibration factor,
    and return a ``Setup`` plus ``MeasurementSet`` in the conventions of
    ``em_core`` (receivers x transmitters, ``exp(+jwt)``).
    """
    raise NotImplementedError("Fresnel dataset ingestion is not supported")


# --------------------------------------------------------------- rendering

def _scaled(values: np.ndarray):
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        t = (values - lo) / (hi - lo)
    else:
        t = np.zeros_like(values)
    return np.round(255 * t).astype(np.uint8), lo, hi


def _heat(t: np.ndarray) -> np.ndarray:
    # black -> red -> yellow -> white
    f = t.astype(float) / 255.0
    r = np.clip(3 * f, 0, 1)
    g = np.clip(3 * f - 1, 0, 1)
    b = np.clip(3 * f - 2, 0, 1)
    return np.round(255 * np.stack([r, g, b], axis=-1)).astype(np.uint8)


def render_map(data, path, channel: str = "re", color: bool = False) -> Path:
    """Write a PGM/PPM heatmap (or PBM for boolean masks) plus a ``.txt`` range sidecar."""
    path = Path(path)
    arr = np.asarray(data)
    if arr.dtype == bool:
        rows = [" ".join("1" if b else "0" for b in row) for row in arr]
        path.write_text(f"P1\n{arr.shape[1]} {arr.shape[0]}\n" + "\n".join(rows) + "\n",
                        encoding="ascii")
        return path
    if channel not in ("re", "im"):
        raise ValueError("channel must be 're' or 'im'")
    vals = np.real(arr) if channel == "re" else np.imag(arr)
    pix, lo, hi = _scaled(vals.astype(float))
    h, w = pix.shape
    with open(path, "wb") as fh:
        if color:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(_heat(pix).tobytes())
        else:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(pix.tobytes())
    path.with_suffix(path.suffix + ".txt").write_text(
        f"channel={channel}\nmin={lo!r}\nmax={hi!r}\n", encoding="utf-8")
    return path


def read_pnm(path) -> np.ndarray:
    """Read back a P1/P5/P6 image written by ``render_map`` (used by tests and tools)."""
    blob = Path(path).read_bytes()
    if blob.startswith(b"P1"):
        toks = blob.split()
        w, h = int(toks[1]), int(toks[2])
        return np.array([int(t) for t in toks[3:3 + w * h]], dtype=bool).reshape(h, w)
    buf = io.BytesIO(blob)
    magic = buf.readline().strip()
    w, h = map(int, buf.readline().split())
    buf.readline()
    ch = 3 if magic == b"P6" else 1
    pix = np.frombuffer(buf.read(), dtype=np.uint8)
    return pix.reshape(h, w, ch) if ch == 3 else pix.reshape(h, w)
