"""Checkpoint archive.

A zip file holding ``manifest.txt`` (``key = value`` lines: format version,
iteration, alpha, JSON config echo, blob list) and one ``blobs/<name>.bin``
per tensor. Each blob is a little-endian header ``uint32 ndim, uint32 dims[ndim]``
followed by the values as little-endian float32.
"""
import io
import json
import os
import struct
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT = "dfrnet-ckpt"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


def encode_blob(t):
    # np.ascontiguousarray would promote 0-d tensors to shape (1,)
    arr = np.asarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4")
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def decode_blob(data):
    (ndim,) = struct.unpack_from("<I", data, 0)
    shape = struct.unpack_from(f"<{ndim}I", data, 4)
    offset = 4 + 4 * ndim
    arr = np.frombuffer(data, dtype="<f4", offset=offset)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"blob size {arr.size} does not match shape {shape}")
    return torch.from_numpy(arr.reshape(shape).astype(np.float32))


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save(path, tensors, meta):
    """Write ``tensors`` (name -> tensor) and ``meta`` atomically to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(tensors)
    lines = [f"format = {FORMAT}", f"version = {VERSION}"]
    for k in sorted(meta):
        v = meta[k]
        lines.append(f"{k} = {json.dumps(v) if isinstance(v, (dict, list)) else v}")
    lines.append(f"blobs = {','.join(names)}")
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_entry("manifest.txt"), "\n".join(lines) + "\n")
        for name in names:
            zf.writestr(_entry(f"blobs/{name}.bin"), encode_blob(tensors[name]))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load(path):
    """Return ``(tensors, meta)``; ``meta`` values are strings except ``config``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = {}
            for line in zf.read("manifest.txt").decode().splitlines():
                k, _, v = line.partition(" = ")
                meta[k] = v
            if meta.get("format") != FORMAT:
                raise CheckpointError(f"{path} is not a {FORMAT} archive")
            if int(meta.get("version", -1)) > VERSION:
                raise CheckpointError(f"unsupported checkpoint version {meta['version']}")
            names = [n for n in meta.pop("blobs", "").split(",") if n]
            tensors = {n: decode_blob(zf.read(f"blobs/{n}.bin")) for n in names}
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if "config" in meta:
        meta["config"] = json.loads(meta["config"])
    return tensors, meta


def model_tensors(model, prefix="model/"):
    return {prefix + k: v for k, v in model.state_dict().items()}


def load_model_tensors(model, tensors, prefix="model/", strict=True):
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    own = model.state_dict()
    for k, v in state.items():
        if k in own:
            state[k] = v.to(own[k].dtype)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if strict and (missing or unexpected):
        raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    return missing
