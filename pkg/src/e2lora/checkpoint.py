"""Binary checkpoint format.

Little-endian, bit-exact round trip. Layout:

    header   magic b"E2LCK1\\x00\\x00", u32 version (currently 1)
    pairs    u32 count, then per pair:
                 i64 task_id, u32 d_out, u32 rank, u32 d_in, u8 b_frozen,
                 f64[d_out*rank] b row-major, f64[rank*d_in] a row-major
    spectra  u32 count, then per spectrum:
                 i64 task_id, u32 layer, u32 d_out, u32 rank, u64 proxy_count,
                 f64[d_out*rank] u row-major, f64[rank] sigma
    pools    u32 count, then per pool: u32 layer, u32 d_out, u32 entries,
                 per entry: i64 task_id, u32 retained_rank, u32 sigma_len,
                 f64[sigma_len] sigma
    stats    u32 count, then per class: i64 class_id, u32 dim, u64 count,
                 f64[dim] mu, f64[dim*dim] covariance row-major
    model    u8 present flag; when set: u32 layers, per layer u32 d_out,
                 u32 d_in, f64 weight, f64 bias, then the classifier:
                 u32 classes, u32 feature_dim, i64[classes] class ids,
                 f64 weight rows, f64 bias

Pairs and spectra can also be packed standalone via pack_pair/unpack_pair
and pack_spectrum/unpack_spectrum using the same record layout.
"""

from __future__ import annotations

import struct

import numpy as np

from .align import ClassStats
from .allocator import CapacityPool, PoolEntry
from .errors import ValidationError
from .lora import DriftSpectrum, LoraPair
from .trainer import ContinualModel, Layer

__all__ = [
    "pack_pair",
    "unpack_pair",
    "pack_spectrum",
    "unpack_spectrum",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"E2LCK1\x00\x00"
_VERSION = 1


def _f64_bytes(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def array(self, count, shape):
        size = 8 * count
        a = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos)
        self.pos += size
        return a.reshape(shape).copy()


def pack_pair(pair):
    head = struct.pack(
        "<qIIIB", pair.task_id, pair.d_out, pair.rank, pair.d_in, int(pair.b_frozen)
    )
    return head + _f64_bytes(pair.b) + _f64_bytes(pair.a)


def _read_pair(r):
    task_id, d_out, rank, d_in, frozen = r.take("<qIIIB")
    b = r.array(d_out * rank, (d_out, rank))
    a = r.array(rank * d_in, (rank, d_in))
    return LoraPair(task_id, b, a, bool(frozen))


def unpack_pair(data):
    return _read_pair(_Reader(data))


def pack_spectrum(spectrum, layer=0):
    head = struct.pack(
        "<qIIIQ",
        spectrum.task_id,
        layer,
        spectrum.u.shape[0],
        spectrum.rank,
        spectrum.proxy_count,
    )
    return head + _f64_bytes(spectrum.u) + _f64_bytes(spectrum.sigma)


def _read_spectrum(r):
    task_id, layer, d_out, rank, proxy_count = r.take("<qIIIQ")
    u = r.array(d_out * rank, (d_out, rank))
    sigma = r.array(rank, (rank,))
    return layer, DriftSpectrum(task_id, u, sigma, int(proxy_count))


def unpack_spectrum(data):
    return _read_spectrum(_Reader(data))


def save_checkpoint(path, pairs=(), spectra=(), pools=None, stats=None, model=None):
    """Write state to `path`.

    pairs: iterable of LoraPair. spectra: iterable of (layer, DriftSpectrum).
    pools: dict layer -> CapacityPool. stats: dict class_id -> ClassStats.
    model: ContinualModel or None.
    """
    out = [_MAGIC, struct.pack("<I", _VERSION)]

    pairs = list(pairs)
    out.append(struct.pack("<I", len(pairs)))
    out.extend(pack_pair(p) for p in pairs)

    spectra = list(spectra)
    out.append(struct.pack("<I", len(spectra)))
    out.extend(pack_spectrum(s, layer) for layer, s in spectra)

    pools = pools or {}
    out.append(struct.pack("<I", len(pools)))
    for layer in sorted(pools):
        pool = pools[layer]
        out.append(struct.pack("<III", layer, pool.d_out, len(pool.entries)))
        for e in pool.entries:
            out.append(
                struct.pack("<qII", e.task_id, e.retained_rank, e.sigma.shape[0])
            )
            out.append(_f64_bytes(e.sigma))

    stats = stats or {}
    out.append(struct.pack("<I", len(stats)))
    for cid in sorted(stats):
        st = stats[cid]
        dim = st.mu.shape[0]
        out.append(struct.pack("<qIQ", st.class_id, dim, st.count))
        out.append(_f64_bytes(st.mu))
        out.append(_f64_bytes(st.sigma_mat))

    if model is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<I", len(model.layers)))
        for layer in model.layers:
            out.append(struct.pack("<II", layer.d_out, layer.d_in))
            out.append(_f64_bytes(layer.weight))
            out.append(_f64_bytes(layer.bias))
        classes = len(model.class_ids)
        out.append(struct.pack("<II", classes, model.feature_dim))
        out.append(struct.pack(f"<{classes}q", *model.class_ids) if classes else b"")
        out.append(_f64_bytes(model.classifier_w))
        out.append(_f64_bytes(model.classifier_b))

    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path):
    """Read a checkpoint back into a dict with keys pairs, spectra, pools,
    stats, model (model has empty adapter lists; pair placement is up to
    the caller)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValidationError("not a checkpoint file (bad magic)")
    r = _Reader(data)
    r.pos = len(_MAGIC)
    version = r.take("<I")
    if version != _VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")

    pairs = [_read_pair(r) for _ in range(r.take("<I"))]
    spectra = [_read_spectrum(r) for _ in range(r.take("<I"))]

    pools = {}
    for _ in range(r.take("<I")):
        layer, d_out, n_entries = r.take("<III")
        entries = []
        for _ in range(n_entries):
            task_id, retained, sig_len = r.take("<qII")
            sigma = r.array(sig_len, (sig_len,))
            entries.append(PoolEntry(task_id, retained, sigma))
        pools[layer] = CapacityPool(d_out, entries)

    stats = {}
    for _ in range(r.take("<I")):
        class_id, dim, count = r.take("<qIQ")
        mu = r.array(dim, (dim,))
        cov = r.array(dim * dim, (dim, dim))
        stats[class_id] = ClassStats(class_id, mu, cov, int(count))

    model = None
    if r.take("<B"):
        layers = []
        for _ in range(r.take("<I")):
            d_out, d_in = r.take("<II")
            w = r.array(d_out * d_in, (d_out, d_in))
            b = r.array(d_out, (d_out,))
            layers.append(Layer(w, b))
        model = ContinualModel(layers)
        classes, feat = r.take("<II")
        ids = []
        if classes:
            got = r.take(f"<{classes}q")
            ids = [got] if classes == 1 else list(got)
        w = r.array(classes * feat, (classes, feat))
        b = r.array(classes, (classes,))
        model.add_classes(ids)
        model.classifier_w = w
        model.classifier_b = b

    return {
        "pairs": pairs,
        "spectra": spectra,
        "pools": pools,
        "stats": stats,
        "model": model,
    }
