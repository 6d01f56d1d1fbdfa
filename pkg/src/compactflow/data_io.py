"""Synthetic dataset generators, bit-exact binary file formats, and config
file parsing.

Formats (all little-endian):

  Dataset ("SFTK"):  magic(4) version(u32) example_count(u32) N(u32) c(u32)
                     has_labels(u8) [labels u32 * examples] data f32[E*N*c]
  Checkpoint ("SFCK"): magic(4) version(u32) config_len(u32) config_utf8
                     section_count(u32) then per section:
                     name_len(u32) name rank(u32) dims(u32*rank) payload f32
                     trailing CRC32(u32) of all preceding bytes
  Stats files reuse the dataset format: two unlabeled examples with N=1,
  row 0 = mu, row 1 = sigma.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fields import ChannelStats, NoiseSpec, TokenField, _counter_rng
from .compressor import SRCConfig
from .flow import FlowConfig

DATASET_MAGIC = b"SFTK"
CHECKPOINT_MAGIC = b"SFCK"
FORMAT_VERSION = 1


class FileFormatError(Exception):
    """Base class for format rejections; message doubles as the error code."""


class BadMagicError(FileFormatError):
    def __init__(self):
        super().__init__("bad magic")


class UnsupportedVersionError(FileFormatError):
    def __init__(self):
        super().__init__("version unsupported")


class ChecksumError(FileFormatError):
    def __init__(self):
        super().__init__("checksum mismatch")


class TruncatedFileError(FileFormatError):
    def __init__(self):
        super().__init__("truncated file")


@dataclass
class Dataset:
    fields: list
    labels: Optional[list] = None

    def __post_init__(self):
        if not self.fields:
            raise ValueError("no data")
        shape = self.fields[0].data.shape
        if any(f.data.shape != shape for f in self.fields):
            raise ValueError("shape mismatch: fields disagree on shape")
        if self.labels is not None and len(self.labels) != len(self.fields):
            raise ValueError("shape mismatch: labels vs fields")

    def __len__(self) -> int:
        return len(self.fields)

    def as_array(self) -> np.ndarray:
        return np.stack([np.asarray(f.data, dtype=np.float32) for f in self.fields])


def _atomic_write(path, blob: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedFileError()
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def write_dataset(path, dataset: Dataset):
    arr = dataset.as_array()
    e, n, c = arr.shape
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IIII", FORMAT_VERSION, e, n, c))
    buf.write(struct.pack("<B", 1 if dataset.labels is not None else 0))
    if dataset.labels is not None:
        buf.write(np.asarray(dataset.labels, dtype="<u4").tobytes())
    buf.write(arr.astype("<f4").tobytes())
    _atomic_write(path, buf.getvalue())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != DATASET_MAGIC:
        raise BadMagicError()
    if rd.u32() != FORMAT_VERSION:
        raise UnsupportedVersionError()
    e, n, c = rd.u32(), rd.u32(), rd.u32()
    has_labels = rd.u8()
    labels = None
    if has_labels:
        labels = np.frombuffer(rd.take(4 * e), dtype="<u4").astype(np.int64).tolist()
    data = np.frombuffer(rd.take(4 * e * n * c), dtype="<f4").reshape(e, n, c)
    fields = [TokenField(data[i].copy()) for i in range(e)]
    return Dataset(fields=fields, labels=labels)


def write_stats(path, stats: ChannelStats):
    rows = [TokenField(stats.mu.reshape(1, -1)), TokenField(stats.sigma.reshape(1, -1))]
    write_dataset(path, Dataset(fields=rows))


def read_stats(path) -> ChannelStats:
    ds = read_dataset(path)
    if len(ds) != 2 or ds.fields[0].n_tokens != 1:
        raise ValueError("not a stats file")
    mu = np.asarray(ds.fields[0].data[0], dtype=np.float64)
    # float32 round trip can land a hair under the clamp floor
    sigma = np.maximum(np.asarray(ds.fields[1].data[0], dtype=np.float64), 1e-6)
    return ChannelStats(mu=mu, sigma=sigma)


def write_checkpoint(path, config_text: str, sections: dict):
    names = list(sections.keys())
    if len(set(names)) != len(names):
        raise ValueError("duplicate section name")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg = config_text.encode("utf-8")
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(sections[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    _atomic_write(path, body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path):
    """Returns (config_text, sections dict of float32 arrays)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob)
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError()
    if rd.u32() != FORMAT_VERSION:
        raise UnsupportedVersionError()
    config_text = rd.take(rd.u32()).decode("utf-8")
    sections = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        dims = tuple(rd.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(dims).copy()
        if name in sections:
            raise ValueError("duplicate section name")
        sections[name] = payload
    if rd.off + 4 > len(blob):
        raise TruncatedFileError()
    (crc,) = struct.unpack("<I", blob[rd.off : rd.off + 4])
    if crc != zlib.crc32(blob[: rd.off]):
        raise ChecksumError()
    return config_text, sections


# ---------------------------------------------------------------------------
# Config text


def config_to_text(section: str, cfg) -> str:
    lines = [f"[{section}]"]
    for f in sorted(dataclasses.fields(cfg), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, NoiseSpec):
            continue  # noise lives in its own [noise] section
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def _build_from_items(cls, items: dict, extra: Optional[dict] = None):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(extra or {})
    for key, raw in items.items():
        if key not in known or key in kwargs:
            raise ValueError(f"unknown key {key!r} for [{cls.__name__}]")
        typ = known[key].type
        if typ in ("int", int):
            kwargs[key] = int(raw)
        elif typ in ("float", float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    return cls(**kwargs)


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    return {section: dict(parser.items(section)) for section in parser.sections()}


def noise_spec_from(items: dict) -> NoiseSpec:
    allowed = {"mode", "sigma"}
    unknown = set(items) - allowed
    if unknown:
        raise ValueError(f"unknown key {sorted(unknown)[0]!r} for [noise]")
    return NoiseSpec(mode=items.get("mode", "none"), sigma=float(items.get("sigma", 0.0)))


def load_config_file(path) -> dict:
    """Parse a sectioned key=value config file.

    Recognized sections: [src], [flow], [train], [noise]. Returns a dict with
    whichever of src/flow/train/noise are present; unknown sections or keys
    raise ValueError.
    """
    from .training import TrainConfig

    with open(path, "r", encoding="utf-8") as fh:
        raw = parse_config_text(fh.read())
    out = {}
    for section, items in raw.items():
        if section == "src":
            out["src"] = _build_from_items(SRCConfig, items)
        elif section == "flow":
            out["flow"] = _build_from_items(FlowConfig, items)
        elif section == "noise":
            out["noise"] = noise_spec_from(items)
        elif section == "train":
            out["_train_items"] = items
        else:
            raise ValueError(f"unknown section {section!r}")
    if "_train_items" in out:
        noise = out.get("noise", NoiseSpec.none())
        out["train"] = _build_from_items(TrainConfig, out.pop("_train_items"), extra={"noise": noise})
    return out


# ---------------------------------------------------------------------------
# Model checkpoints


def save_flow(path, model):
    sections = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    write_checkpoint(path, config_to_text("flow", model.config), sections)


def load_flow(path, dtype=None):
    import torch
    from .flow import make_flow_model

    config_text, sections = read_checkpoint(path)
    cfg = _build_from_items(FlowConfig, parse_config_text(config_text)["flow"])
    model = make_flow_model(cfg, seed=0, dtype=dtype or torch.float32)
    _load_sections(model, sections)
    return model


def save_src(path, model):
    sections = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    write_checkpoint(path, config_to_text("src", model.config), sections)


def load_src(path, dtype=None):
    import torch
    from .compressor import make_src

    config_text, sections = read_checkpoint(path)
    cfg = _build_from_items(SRCConfig, parse_config_text(config_text)["src"])
    n_tokens = sections["pos_enc"].shape[0]
    model = make_src(cfg, n_tokens=n_tokens, seed=0, dtype=dtype or torch.float32)
    _load_sections(model, sections)
    return model


def save_ema(path, model, ema):
    names = [name for name, _ in model.named_parameters()]
    if len(names) != len(ema.shadow):
        raise ValueError("shape mismatch: EMA shadow vs model")
    sections = {name: s.detach().cpu().numpy() for name, s in zip(names, ema.shadow)}
    write_checkpoint(path, config_to_text("flow", model.config), sections)


def _load_sections(model, sections: dict):
    import torch

    named = dict(model.named_parameters())
    if set(named) != set(sections):
        raise ValueError("checkpoint sections do not match model parameters")
    with torch.no_grad():
        for name, p in named.items():
            arr = sections[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for section {name!r}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))


# ---------------------------------------------------------------------------
# Synthetic generators


def gen_low_rank(examples: int, n_tokens: int, n: int, rank: int, spectrum, noise_std: float, seed: int) -> Dataset:
    """Tokens = N(0, diag(spectrum)) coefficients on a fixed orthonormal basis
    plus isotropic ambient noise. High ambient dimension, low intrinsic rank."""
    spectrum = np.asarray(spectrum, dtype=np.float64).reshape(-1)
    if len(spectrum) != rank or rank > n or np.any(spectrum <= 0) or np.any(np.diff(spectrum) > 0):
        raise ValueError("invalid spectrum")
    rng = _counter_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((n, rank)))  # (n, rank), orthonormal columns
    coeff = rng.standard_normal((examples, n_tokens, rank)) * np.sqrt(spectrum)
    data = coeff @ basis.T
    if noise_std > 0:
        data = data + rng.normal(0.0, noise_std, size=data.shape)
    fields = [TokenField(data[i].astype(np.float32)) for i in range(examples)]
    return Dataset(fields=fields)


def mixture_centers(classes: int, components_per_class: int = 1) -> np.ndarray:
    """Component means on the unit circle, grouped by class."""
    total = classes * components_per_class
    if total == 1:
        return np.zeros((1, 2))
    angles = 2 * np.pi * np.arange(total) / total
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


MIXTURE_STD = 0.1


def gen_class_mixture(examples: int, classes: int, components_per_class: int = 1, seed: int = 0) -> Dataset:
    """Labeled 2D Gaussian mixture (N=1, c=2); each class owns a fixed set of
    components with means on a circle and std 0.1."""
    if classes < 1:
        raise ValueError("need classes >= 1")
    centers = mixture_centers(classes, components_per_class)
    rng = _counter_rng(seed)
    labels = rng.integers(0, classes, examples)
    comp = rng.integers(0, components_per_class, examples)
    idx = labels * components_per_class + comp
    data = centers[idx] + MIXTURE_STD * rng.standard_normal((examples, 2))
    fields = [TokenField(data[i : i + 1].astype(np.float32)) for i in range(examples)]
    return Dataset(fields=fields, labels=[int(x) for x in labels])


def sample_class_mixture(class_id: int, count: int, classes: int, components_per_class: int = 1, seed: int = 0) -> np.ndarray:
    """Ground-truth draws from one class of the mixture, shape (count, 2)."""
    centers = mixture_centers(classes, components_per_class)
    rng = _counter_rng(seed)
    comp = rng.integers(0, components_per_class, count)
    idx = class_id * components_per_class + comp
    return centers[idx] + MIXTURE_STD * rng.standard_normal((count, 2))
