"""Plain-text and binary file formats.

Floats are written with 17 significant digits so every file read back with
these readers reproduces the in-memory values bit for bit.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import ParamCurve
from .losses import Atf, BandSet
from .pipeline import Waveform
from .pns import PnsModel


class FormatError(ValueError):
    pass


WAVEFORM_MAGIC = b"OPTIKSWF"
WAVEFORM_VERSION = 1
_BIN_HEADER = struct.Struct("<8sIdQI")  # magic, version, dt, n_t, axes -> 32 bytes


def fmt(x: float) -> str:
    return "%.17g" % x


def _header_fields(line: str, tag: str) -> dict:
    parts = line.lstrip("#").split()
    if not parts or parts[0] != tag or len(parts) < 2 or parts[1] != "v1":
        raise FormatError(f"expected header '# {tag} v1', got {line.strip()!r}")
    out = {}
    for item in parts[2:]:
        if "=" not in item:
            raise FormatError(f"malformed header field {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _read_table(path, tag: str):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise FormatError(f"{path} is empty")
    head = _header_fields(lines[0], tag)
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        try:
            rows.append([float(x) for x in body.split()])
        except ValueError as exc:
            raise FormatError(f"{path}:{ln}: {exc}") from exc
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise FormatError(f"{path}: rows have differing column counts")
    arr = np.array(rows, dtype=float) if rows else np.zeros((0, 0))
    return head, arr


def _write_table(path, header: str, arr: np.ndarray) -> Path:
    path = Path(path)
    lines = [header]
    lines += [" ".join(fmt(x) for x in row) for row in np.atleast_2d(arr)]
    path.write_text("\n".join(lines) + "\n")
    return path


def _int_field(head: dict, key: str, path) -> int:
    try:
        return int(head[key])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: header needs integer {key}=") from exc


# ---------------------------------------------------------------------------
# trajectories


def write_trajectory(path, c: ParamCurve) -> Path:
    return _write_table(path, f"# optiks-trajectory v1 dims={c.dims}",
                        np.column_stack([c.params, c.points]))


def read_trajectory(path, label: str = "") -> ParamCurve:
    head, arr = _read_table(path, "optiks-trajectory")
    dims = _int_field(head, "dims", path)
    if arr.ndim != 2 or arr.shape[1] != dims + 1:
        raise FormatError(f"{path}: expected {dims + 1} columns")
    return ParamCurve(arr[:, 1:], arr[:, 0], label or Path(path).stem)


# ---------------------------------------------------------------------------
# waveforms


def write_waveform(path, w: Waveform) -> Path:
    return _write_table(path, f"# optiks-waveform v1 dt={fmt(w.dt)} axes={w.axes}", w.g)


def read_waveform(path) -> Waveform:
    head, arr = _read_table(path, "optiks-waveform")
    axes = _int_field(head, "axes", path)
    try:
        dt = float(head["dt"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: header needs dt=") from exc
    if arr.shape[0] == 0 or arr.shape[1] != axes:
        raise FormatError(f"{path}: expected {axes} columns")
    return Waveform(arr, dt)


def write_waveform_bin(path, w: Waveform) -> Path:
    path = Path(path)
    data = np.ascontiguousarray(w.g, dtype="<f8")
    path.write_bytes(_BIN_HEADER.pack(WAVEFORM_MAGIC, WAVEFORM_VERSION, w.dt, w.n_t, w.axes)
                     + data.tobytes())
    return path


def read_waveform_bin(path) -> Waveform:
    raw = Path(path).read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dt, n_t, axes = _BIN_HEADER.unpack_from(raw)
    if magic != WAVEFORM_MAGIC or version != WAVEFORM_VERSION:
        raise FormatError(f"{path}: not an optiks waveform (v{WAVEFORM_VERSION})")
    body = raw[_BIN_HEADER.size:]
    if len(body) != 8 * n_t * axes:
        raise FormatError(f"{path}: payload size does not match header")
    return Waveform(np.frombuffer(body, dtype="<f8").reshape(n_t, axes).copy(), dt)


def load_waveform(path) -> Waveform:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            magic = fh.read(8)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return read_waveform_bin(path) if magic == WAVEFORM_MAGIC else read_waveform(path)


# ---------------------------------------------------------------------------
# bands, ATF, PNS model, spectra


def read_bands(path) -> BandSet:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    items = []
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].split()
        if not body:
            continue
        if len(body) != 2:
            raise FormatError(f"{path}:{ln}: expected 'f_lo f_hi'")
        try:
            items.append((float(body[0]), float(body[1])))
        except ValueError as exc:
            raise FormatError(f"{path}:{ln}: {exc}") from exc
    try:
        return BandSet(tuple(items))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_bands(path, bands: BandSet) -> Path:
    path = Path(path)
    path.write_text("".join(f"{fmt(lo)} {fmt(hi)}\n" for lo, hi in bands))
    return path


def write_atf(path, atf: Atf) -> Path:
    header = f"# optiks-atf v1 ref_hz={fmt(atf.ref_hz)}"
    if atf.scales is not None:
        header += " scales=" + ",".join(fmt(s) for s in atf.scales)
    return _write_table(path, header, np.column_stack([atf.freqs, atf.mags]))


def read_atf(path) -> Atf:
    head, arr = _read_table(path, "optiks-atf")
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] < 2:
        raise FormatError(f"{path}: expected rows 'f A_x [A_y [A_z]]'")
    try:
        ref = float(head.get("ref_hz", "1000"))
        scales = None
        if "scales" in head:
            scales = np.array([float(x) for x in head["scales"].split(",")])
        return Atf(arr[:, 0], arr[:, 1:], ref, scales)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


_PNS_KEYS = {"r": "rheobase", "c": "chronaxie", "alpha": "coil_length"}


def read_pns_model(path) -> PnsModel:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    vals = {}
    for line in text.splitlines():
        body = line.split("#", 1)[0]
        for k, v in re.findall(r"(\w+)\s*=\s*(\S+)", body):
            if k not in _PNS_KEYS:
                raise FormatError(f"{path}: unknown PNS key {k!r}")
            try:
                vals[_PNS_KEYS[k]] = float(v)
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}") from exc
    missing = [k for k, f in _PNS_KEYS.items() if f not in vals]
    if missing:
        raise FormatError(f"{path}: missing PNS keys {missing}")
    try:
        return PnsModel(**vals)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_pns_model(path, m: PnsModel) -> Path:
    path = Path(path)
    path.write_text(f"r={fmt(m.rheobase)} c={fmt(m.chronaxie)} alpha={fmt(m.coil_length)}\n")
    return path


def read_spectrum(path):
    """Complex spectrum table ``f re im``; returns ``(freqs, values)``."""
    _, arr = _read_table(path, "optiks-spectrum")
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != 3:
        raise FormatError(f"{path}: expected rows 'f re im'")
    return arr[:, 0], arr[:, 1] + 1j * arr[:, 2]


def write_spectrum(path, freqs, values) -> Path:
    values = np.asarray(values)
    return _write_table(path, "# optiks-spectrum v1",
                        np.column_stack([freqs, values.real, values.imag]))


def write_columns(path, header: str, *cols) -> Path:
    """Generic plot-data table (``# header`` then whitespace columns)."""
    return _write_table(path, "# " + header, np.column_stack(cols))


def read_columns(path, tag: Optional[str] = None) -> np.ndarray:
    path = Path(path)
    rows = []
    for line in path.read_text().splitlines():
        body = line.split("#", 1)[0].strip()
        if body:
            rows.append([float(x) for x in body.split()])
    return np.array(rows)
