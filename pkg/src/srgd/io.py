"""On-disk formats.

GridFile (``.srgd``), all little-endian::

    magic    4s   b"SRGD"
    version  u16  1
    height   u32
    width    u32
    channels u16
    dtype    u8   0 = float64, 1 = uint8
    payload       row-major (height, width, channels)

Checkpoint (``.ckpt``)::

    magic    4s   b"SRCK"
    version  u16  1
    seed     u64
    kernel   u16
    slope    f64
    levels   u16, then ``levels`` x u32 widths
    count    u32 parameters, each:
        name_len u16, name utf-8, ndim u8, ndim x u32 dims, float64 payload

Dataset directory::

    <root>/manifest.txt                   key = value lines
    <root>/<split>/<pair>/{fixed,moving}/ img, labels, mask, bias, modality_b,
                                          base, clutter (.srgd), landmarks.csv
    <root>/<split>/<pair>/moving/gt_disp.srgd
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .gridmath import Grid, Param
from .metrics import LandmarkSet
from .model import Arch, RegNet
from .synth import Sample, _onehot

GRID_MAGIC = b"SRGD"
CKPT_MAGIC = b"SRCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}


class FormatError(ValueError):
    pass


def encode_grid(arr, dtype: str = "f64") -> bytes:
    a = np.asarray(arr.data if isinstance(arr, Grid) else arr)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise FormatError(f"grid must be 2-D or (C, H, W), got {a.shape}")
    c, h, w = a.shape
    tag = {"f64": 0, "u8": 1}[dtype]
    if tag == 1 and (a.min() < 0 or a.max() > 255 or np.any(a != np.round(a))):
        raise FormatError("u8 grids need integer values in [0, 255]")
    payload = np.ascontiguousarray(a.transpose(1, 2, 0)).astype(_DTYPES[tag]).tobytes()
    return struct.pack("<4sHIIHB", GRID_MAGIC, VERSION, h, w, c, tag) + payload


def decode_grid(buf: bytes) -> np.ndarray:
    head = struct.calcsize("<4sHIIHB")
    if len(buf) < head:
        raise FormatError("truncated grid header")
    magic, version, h, w, c, tag = struct.unpack_from("<4sHIIHB", buf)
    if magic != GRID_MAGIC or version != VERSION or tag not in _DTYPES:
        raise FormatError("not a version-1 SRGD grid")
    dt = _DTYPES[tag]
    if len(buf) - head != h * w * c * dt.itemsize:
        raise FormatError("payload length does not match header")
    a = np.frombuffer(buf, dtype=dt, offset=head).reshape(h, w, c).transpose(2, 0, 1)
    return np.array(a, dtype=np.float64 if tag == 0 else np.int64)


def write_grid(path, arr, dtype: str = "f64") -> None:
    Path(path).write_bytes(encode_grid(arr, dtype))


def read_grid(path) -> np.ndarray:
    """Read a grid as ``(C, H, W)``."""
    return decode_grid(Path(path).read_bytes())


def write_pgm(path, arr) -> None:
    """8-bit min-max scaled preview; lossy and never read back."""
    a = np.asarray(arr, dtype=np.float64).reshape(np.shape(arr)[-2:])
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + data.tobytes())


# ------------------------------------------------------------- checkpoints

def encode_checkpoint(net: RegNet) -> bytes:
    out = io.BytesIO()
    a = net.arch
    out.write(struct.pack("<4sHQHdH", CKPT_MAGIC, VERSION, net.seed, a.kernel, a.slope,
                          a.levels))
    out.write(struct.pack(f"<{a.levels}I", *a.widths))
    out.write(struct.pack("<I", len(net.params)))
    for name, p in net.params.items():
        raw = name.encode()
        data = p.grid.data
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack(f"<B{data.ndim}I", data.ndim, *data.shape))
        out.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return out.getvalue()


def decode_checkpoint(buf: bytes) -> RegNet:
    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, buf, off)
        off += struct.calcsize(fmt)
        return vals

    try:
        magic, version, seed, kernel, slope, levels = take("<4sHQHdH")
        if magic != CKPT_MAGIC or version != VERSION:
            raise FormatError("not a version-1 SRCK checkpoint")
        widths = take(f"<{levels}I")
        (count,) = take("<I")
        net = RegNet(arch=Arch(widths=tuple(widths), kernel=kernel, slope=slope), seed=seed)
        for _ in range(count):
            (n,) = take("<H")
            name = buf[off:off + n].decode()
            off += n
            (ndim,) = take("<B")
            shape = take(f"<{ndim}I")
            size = int(np.prod(shape)) * 8
            if off + size > len(buf):
                raise FormatError(f"truncated checkpoint parameter {name!r}")
            data = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape)
            off += size
            net.params[name] = Param(np.array(data, dtype=np.float64))
    except struct.error as e:
        raise FormatError(f"truncated checkpoint: {e}") from None
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    return net


def save_checkpoint(path, net: RegNet) -> None:
    Path(path).write_bytes(encode_checkpoint(net))


def load_checkpoint(path) -> RegNet:
    return decode_checkpoint(Path(path).read_bytes())


# ------------------------------------------------------------ manifest/csv

def write_manifest(path, items: Mapping[str, object]) -> None:
    lines = [f"{k} = {items[k]}" for k in sorted(items)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    return parse_keyvalue(Path(path).read_text())


def parse_keyvalue(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_csv(path, columns: Iterable[str], rows: Iterable[Mapping[str, object]]) -> None:
    columns = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------- samples

_FLOAT_FIELDS = ("img", "bias_field", "modality_b", "base", "clutter")


def save_sample(directory, s: Sample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in _FLOAT_FIELDS:
        write_grid(d / f"{name}.srgd", getattr(s, name))
    write_grid(d / "labels.srgd", s.labels, "u8")
    write_grid(d / "mask.srgd", s.mask, "u8")
    if s.gt_disp is not None:
        write_grid(d / "gt_disp.srgd", s.gt_disp)
    write_csv(d / "landmarks.csv", ("y", "x"),
              ({"y": repr(float(y)), "x": repr(float(x))} for y, x in s.landmarks.points))
    write_manifest(d / "manifest.txt", {"sample_id": s.sample_id, "n_labels": s.n_labels,
                                        "spacing": repr(s.landmarks.spacing)})


def load_sample(directory) -> Sample:
    d = Path(directory)
    meta = read_manifest(d / "manifest.txt")
    k = int(meta["n_labels"])
    grids = {name: read_grid(d / f"{name}.srgd")[0] for name in _FLOAT_FIELDS}
    labels = read_grid(d / "labels.srgd")[0]
    pts = [(float(r["y"]), float(r["x"])) for r in read_csv(d / "landmarks.csv")]
    gt = d / "gt_disp.srgd"
    return Sample(
        labels=labels, onehot=_onehot(labels, k),
        landmarks=LandmarkSet(np.array(pts), float(meta["spacing"])),
        mask=read_grid(d / "mask.srgd")[0].astype(np.float64),
        gt_disp=Grid(read_grid(gt)) if gt.exists() else None,
        n_labels=k, sample_id=meta["sample_id"], **grids,
    )
