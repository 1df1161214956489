"""Binary PPM/PGM images, the tensor container, and dataset directories.

Tensor container layout (all integers little-endian)::

    magic      8 bytes  b"WASPTNSR"
    version    u8       1
    meta_len   u32      length of the UTF-8 JSON metadata that follows
    meta       bytes
    count      u32      number of tensors
    per tensor:
        name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
        data     float32 * prod(dims), row-major
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError

MAGIC = b"WASPTNSR"
VERSION = 1

# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------


def _header_tokens(buf, path, n_tokens):
    """Parse ``n_tokens`` whitespace-separated header fields after the magic."""
    pos, tokens = 2, []
    while len(tokens) < n_tokens:
        if pos >= len(buf):
            raise DataError("truncated header", path, pos)
        ch = buf[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise DataError("unterminated comment in header", path, pos)
            pos = end + 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            tokens.append((int(buf[start:pos]), start))
        else:
            raise DataError(f"unexpected byte {ch!r} in header", path, pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise DataError("header must end with a single whitespace byte", path, pos)
    return tokens, pos + 1


def decode_pnm(buf, path=None):
    """Decode P5 (grey) or P6 (RGB) bytes with maxval <= 255."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported magic {magic!r}; expected P5 or P6", path, 0)
    tokens, start = _header_tokens(buf, path, 3)
    (w, wpos), (h, hpos), (maxval, mpos) = tokens
    if w < 1:
        raise DataError(f"invalid width {w}", path, wpos)
    if h < 1:
        raise DataError(f"invalid height {h}", path, hpos)
    if not 0 < maxval <= 255:
        raise DataError(f"maxval {maxval} unsupported (1..255)", path, mpos)
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    raster = buf[start : start + need]
    if len(raster) < need:
        raise DataError(f"raster truncated: {len(raster)} of {need} bytes", path, start + len(raster))
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, ch)
    if (arr > maxval).any():
        raise DataError(f"sample exceeds maxval {maxval}", path, start)
    return arr if ch == 3 else arr[:, :, 0]


def encode_pnm(arr, maxval=255):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError(f"netpbm writer needs uint8 samples, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot encode array of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_pnm(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataError(str(e), path) from None
    return decode_pnm(buf, path)


def write_pnm(path, arr):
    Path(path).write_bytes(encode_pnm(arr))


def read_ppm(path):
    arr = read_pnm(path)
    if arr.ndim != 3:
        raise DataError("expected a P6 (RGB) image", path, 0)
    return arr


def read_pgm(path):
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise DataError("expected a P5 (greyscale) image", path, 0)
    return arr


write_ppm = write_pnm
write_pgm = write_pnm

# ---------------------------------------------------------------------------
# Tensor container
# ---------------------------------------------------------------------------


def encode_tensors(tensors, metadata=None):
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<BI", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_tensors(buf, path=None):
    """Inverse of :func:`encode_tensors`; returns ``(tensors, metadata)``."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise DataError(f"truncated container while reading {what}", path, pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise DataError("bad magic; not a tensor container", path, 0)
    version, meta_len = struct.unpack("<BI", take(5, "version"))
    if version != VERSION:
        raise DataError(f"unsupported container version {version}", path, 8)
    try:
        metadata = json.loads(take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt metadata: {e}", path, 13) from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise DataError(f"{len(buf) - pos} trailing bytes", path, pos)
    return tensors, metadata


def save_tensors(path, tensors, metadata=None):
    Path(path).write_bytes(encode_tensors(tensors, metadata))


def load_tensors(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataError(str(e), path) from None
    return decode_tensors(buf, path)


def save_graph(path, graph):
    """Store a graph's structure (as metadata) with its parameters and buffers."""
    tensors = {f"param:{k}": v for k, v in graph.params.items()}
    tensors.update({f"buffer:{k}": v for k, v in graph.buffers.items()})
    save_tensors(path, tensors, {"graph": graph.to_dict()})


def load_graph(path):
    from .graph import ModuleGraph

    tensors, meta = load_tensors(path)
    if "graph" not in meta:
        raise DataError("container holds no graph description", path)
    g = ModuleGraph.from_dict(meta["graph"])
    g.params = {k[6:]: v for k, v in tensors.items() if k.startswith("param:")}
    g.buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer:")}
    expected = g.param_shapes()
    if g.params and {k: v.shape for k, v in g.params.items()} != expected:
        raise DataError("stored parameters do not match the graph's shapes", path)
    return g


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    names: list

    def __len__(self):
        return len(self.names)

    def split(self, n_first):
        return (Dataset(self.images[:n_first], self.labels[:n_first], self.names[:n_first]),
                Dataset(self.images[n_first:], self.labels[n_first:], self.names[n_first:]))

    def as_pair(self):
        return self.images, self.labels


def load_dataset(root, require_labels=True):
    """Read ``root/images/*.ppm`` and matching ``root/labels/*.pgm``."""
    root = Path(root)
    img_dir, lab_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise DataError("missing images/ directory", root)
    names = sorted(p.stem for p in img_dir.glob("*.ppm"))
    if not names:
        raise DataError("no .ppm images found", img_dir)
    images = [read_ppm(img_dir / f"{n}.ppm") for n in names]
    labels = []
    if require_labels:
        for n in names:
            p = lab_dir / f"{n}.pgm"
            if not p.exists():
                raise DataError(f"missing label map for {n}", p)
            labels.append(read_pgm(p))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images differ in size: {sorted(shapes)}", img_dir)
    for n, im, lab in zip(names, images, labels):
        if lab.shape != im.shape[:2]:
            raise DataError(f"label size {lab.shape} != image size {im.shape[:2]}", lab_dir / f"{n}.pgm")
    lab_arr = np.stack(labels) if labels else np.zeros((len(names),) + images[0].shape[:2], np.uint8)
    return Dataset(np.stack(images), lab_arr, names)


def load_label_dir(root):
    root = Path(root)
    names = sorted(p.stem for p in root.glob("*.pgm"))
    if not names:
        raise DataError("no .pgm label maps found", root)
    return {n: read_pgm(root / f"{n}.pgm") for n in names}


def write_dataset(root, images, labels, names=None):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    names = names or [f"{i:04d}" for i in range(len(images))]
    for n, im, lab in zip(names, images, labels):
        write_ppm(root / "images" / f"{n}.ppm", im)
        write_pgm(root / "labels" / f"{n}.pgm", np.asarray(lab, dtype=np.uint8))
    return names
