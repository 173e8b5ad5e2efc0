"""
On-disk formats: Gaussian sets (GS4D), depth maps (DPTH), PPM/PGM images,
network checkpoints (RFLW / GDEC) and CSV tables.

All binary layouts are little-endian and carry the coordinate convention or a
format version in their header. Every writer replaces its target atomically.
"""
import logging
import os
import tempfile
from typing import List, Tuple

import numpy as np
import pandas as pd
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

import config
from errors import FormatError, MissingCheckpointError, ShapeMismatchError
from gaussians import GaussianSet
from geometry import DTYPE

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

GS4D_MAGIC = b"GS4D"
DEPTH_MAGIC = b"DPTH"
FLOW_MAGIC = b"RFLW"
DECODER_MAGIC = b"GDEC"

GS4D_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("count", "<u8"), ("convention", "S32")])
GS4D_ROW = np.dtype([("params", "<f4", (14,)), ("dynamic", "u1")])
DEPTH_HEADER = np.dtype([("magic", "S4"), ("width", "<u4"), ("height", "<u4"), ("reserved", "<u4")])


def atomic_write(path: str, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _read(path: str) -> bytes:
    with open(path, "rb") as handle:
        return handle.read()


def _header(raw: bytes, dtype: np.dtype, magic: bytes, path: str):
    if len(raw) < dtype.itemsize:
        raise FormatError(f"{path}: truncated header")
    header = np.frombuffer(raw, dtype=dtype, count=1)[0]
    if header["magic"] != magic:
        raise FormatError(f"{path}: bad magic {header['magic']!r}, expected {magic!r}")
    return header


# --- Gaussian sets ---

def encode_gaussians(gaussians: GaussianSet, dynamic: torch.Tensor) -> bytes:
    header = np.zeros(1, dtype=GS4D_HEADER)
    header["magic"] = GS4D_MAGIC
    header["version"] = config.FORMAT_VERSION
    header["count"] = len(gaussians)
    header["convention"] = config.COORDINATE_CONVENTION.encode("ascii")
    rows = np.zeros(len(gaussians), dtype=GS4D_ROW)
    rows["params"] = gaussians.to_rows().detach().cpu().numpy().astype("<f4")
    rows["dynamic"] = dynamic.detach().cpu().numpy().astype(np.uint8)
    return header.tobytes() + rows.tobytes()


def write_gaussians(path: str, gaussians: GaussianSet, dynamic: torch.Tensor) -> None:
    atomic_write(path, encode_gaussians(gaussians, dynamic))


def read_gaussians(path: str) -> Tuple[GaussianSet, torch.Tensor]:
    """Returns the set (float64 holding the stored float32 values) and its dynamic flags."""
    raw = _read(path)
    header = _header(raw, GS4D_HEADER, GS4D_MAGIC, path)
    if int(header["version"]) != config.FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {int(header['version'])}")
    if header["convention"].decode("ascii") != config.COORDINATE_CONVENTION:
        raise FormatError(f"{path}: convention {header['convention']!r} is not {config.COORDINATE_CONVENTION}")
    count = int(header["count"])
    if len(raw) != GS4D_HEADER.itemsize + count * GS4D_ROW.itemsize:
        raise FormatError(f"{path}: expected {count} Gaussians, file size {len(raw)} disagrees")
    rows = np.frombuffer(raw, dtype=GS4D_ROW, count=count, offset=GS4D_HEADER.itemsize)
    params = torch.from_numpy(rows["params"].astype(np.float64)).reshape(count, 14)
    dynamic = torch.from_numpy(rows["dynamic"].astype(bool))
    return GaussianSet.from_rows(params), dynamic


# --- Depth maps ---

def write_depth(path: str, depth: torch.Tensor) -> None:
    height, width = depth.shape
    header = np.zeros(1, dtype=DEPTH_HEADER)
    header["magic"] = DEPTH_MAGIC
    header["width"] = width
    header["height"] = height
    data = depth.detach().cpu().numpy().astype("<f4")
    atomic_write(path, header.tobytes() + data.tobytes())


def read_depth(path: str) -> torch.Tensor:
    raw = _read(path)
    header = _header(raw, DEPTH_HEADER, DEPTH_MAGIC, path)
    width, height = int(header["width"]), int(header["height"])
    if len(raw) != DEPTH_HEADER.itemsize + 4 * width * height:
        raise FormatError(f"{path}: truncated depth data")
    data = np.frombuffer(raw, dtype="<f4", offset=DEPTH_HEADER.itemsize).reshape(height, width)
    return torch.from_numpy(data.copy())


# --- Images ---

def to_uint8(image: torch.Tensor) -> np.ndarray:
    return np.round(np.clip(image.detach().cpu().numpy().astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str, rgb: torch.Tensor) -> None:
    height, width, _ = rgb.shape
    atomic_write(path, f"P6\n{width} {height}\n255\n".encode("ascii") + to_uint8(rgb).tobytes())


def write_pgm(path: str, image: torch.Tensor) -> None:
    height, width = image.shape
    atomic_write(path, f"P5\n{width} {height}\n255\n".encode("ascii") + to_uint8(image.to(torch.float64)).tobytes())


def _read_netpbm(path: str, magic: bytes, channels: int) -> np.ndarray:
    raw = _read(path)
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated image header")
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"{path}: not a binary {magic.decode()} image")
    width, height = int(tokens[1]), int(tokens[2])
    # One whitespace byte separates the header from the raster
    body = raw[pos + 1:]
    if len(body) != width * height * channels:
        raise FormatError(f"{path}: truncated image data")
    shape = (height, width, channels) if channels > 1 else (height, width)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def read_ppm(path: str) -> torch.Tensor:
    """RGB in [0, 1] as float32."""
    return torch.from_numpy(_read_netpbm(path, b"P6", 3).astype(np.float32) / 255.0)


def read_pgm(path: str) -> torch.Tensor:
    return torch.from_numpy(_read_netpbm(path, b"P5", 1).astype(np.float32) / 255.0)


# --- Checkpoints ---

def encode_checkpoint(magic: bytes, sizes: List[int], seed: int, vector: torch.Tensor) -> bytes:
    sizes = [int(s) for s in sizes]
    header = np.zeros(1, dtype=[
        ("magic", "S4"), ("version", "<u4"), ("n_sizes", "<u4"), ("sizes", "<u4", (len(sizes),)),
        ("seed", "<u8"), ("n_params", "<u8"),
    ])
    header["magic"] = magic
    header["version"] = config.FORMAT_VERSION
    header["n_sizes"] = len(sizes)
    header["sizes"] = sizes
    header["seed"] = seed
    header["n_params"] = vector.numel()
    return header.tobytes() + vector.detach().cpu().numpy().astype("<f8").tobytes()


def decode_checkpoint(raw: bytes, magic: bytes, path: str = "<bytes>") -> Tuple[List[int], int, torch.Tensor]:
    prefix = np.dtype([("magic", "S4"), ("version", "<u4"), ("n_sizes", "<u4")])
    head = _header(raw, prefix, magic, path)
    if int(head["version"]) != config.FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {int(head['version'])}")
    n_sizes = int(head["n_sizes"])
    offset = prefix.itemsize
    if len(raw) < offset + 4 * n_sizes + 16:
        raise FormatError(f"{path}: truncated checkpoint header")
    sizes = np.frombuffer(raw, dtype="<u4", count=n_sizes, offset=offset).tolist()
    offset += 4 * n_sizes
    seed, n_params = np.frombuffer(raw, dtype="<u8", count=2, offset=offset).tolist()
    offset += 16
    if len(raw) != offset + 8 * n_params:
        raise FormatError(f"{path}: expected {n_params} parameters")
    values = np.frombuffer(raw, dtype="<f8", count=n_params, offset=offset)
    return sizes, int(seed), torch.from_numpy(values.copy())


def _load_vector(model: torch.nn.Module, vector: torch.Tensor, path: str) -> None:
    expected = sum(p.numel() for p in model.parameters())
    if vector.numel() != expected:
        raise ShapeMismatchError(f"{path}: {vector.numel()} parameters, model needs {expected}")
    with torch.no_grad():
        vector_to_parameters(vector.to(DTYPE), model.parameters())


def _require(path: str) -> bytes:
    if not os.path.exists(path):
        raise MissingCheckpointError(path)
    return _read(path)


def save_velocity_field(field, path: str) -> None:
    vector = parameters_to_vector(field.parameters())
    atomic_write(path, encode_checkpoint(FLOW_MAGIC, field.layer_sizes, field.seed, vector))
    logger.debug(f"Saved velocity field ({vector.numel()} parameters) to {path}")


def load_velocity_field(path: str):
    from conditions import ConditionEncoder
    from flow import VelocityField

    sizes, seed, vector = decode_checkpoint(_require(path), FLOW_MAGIC, path)
    if len(sizes) != 8:
        raise FormatError(f"{path}: expected 8 layer sizes, found {len(sizes)}")
    latent_dim, cond_dim, extra_dim, width, hidden_layers, s_embed, enc_steps, enc_hidden = sizes
    encoder = None
    if enc_steps:
        encoder = ConditionEncoder(enc_steps, cond_width=cond_dim, hidden=enc_hidden, seed=seed)
    field = VelocityField(
        latent_dim, cond_dim=cond_dim, extra_dim=extra_dim, width=width,
        hidden_layers=hidden_layers, s_embed_dim=s_embed, encoder=encoder, seed=seed,
    )
    _load_vector(field, vector, path)
    return field


def save_decoder(model, path: str) -> None:
    vector = parameters_to_vector(model.parameters())
    atomic_write(path, encode_checkpoint(DECODER_MAGIC, model.layer_sizes, model.seed, vector))
    logger.debug(f"Saved decoder ({vector.numel()} parameters) to {path}")


def load_decoder(path: str):
    from decoder_net import LatentGaussianDecoder

    sizes, seed, vector = decode_checkpoint(_require(path), DECODER_MAGIC, path)
    if len(sizes) != 5:
        raise FormatError(f"{path}: expected 5 layer sizes, found {len(sizes)}")
    latent_channels, width, heads, blocks, stages = sizes
    model = LatentGaussianDecoder(latent_channels, width, heads, blocks, stages, seed=seed)
    _load_vector(model, vector, path)
    return model


# --- Tables ---

def write_csv(path: str, frame: pd.DataFrame) -> None:
    atomic_write(path, frame.to_csv(index=False).encode("utf-8"))


def read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path)
