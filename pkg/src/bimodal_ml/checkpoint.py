"""Single-file model checkpoints.

Layout: 4-byte magic ``BMCK``, little-endian uint32 format version,
little-endian uint32 header length, a UTF-8 JSON header (branch specs, seed,
gate mode, named parameter index with shapes, optional extras), then the
payload: every parameter flattened to little-endian float32 and concatenated
in ``named_parameters()`` order, which is module registration order
(image branch, text branch, fusion modules, fusion head).
"""

import dataclasses
import json
import struct

import numpy as np
import torch

from .backbones import BranchSpec, JointModel
from .errors import ValidationError

MAGIC = b"BMCK"
FORMAT_VERSION = 1


def _spec_to_dict(spec: BranchSpec):
    d = dataclasses.asdict(spec)
    d["widths"] = list(spec.widths)
    d["fusion_sites"] = list(spec.fusion_sites)
    return d


def _spec_from_dict(d):
    try:
        return BranchSpec(**d)
    except TypeError as exc:
        raise ValidationError("bad branch spec in checkpoint header: %s" % exc) from exc


def save_checkpoint(model: JointModel, path, extra=None):
    """Write the model to `path`; `extra` merges into the JSON header."""
    params = list(model.named_parameters())
    header = {
        "format_version": FORMAT_VERSION,
        "seed": model.seed,
        "gate_mode": model.gate_mode,
        "image_spec": _spec_to_dict(model.image_spec),
        "text_spec": _spec_to_dict(model.text_spec),
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in params],
    }
    if extra:
        header.update(extra)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for _, p in params:
            fh.write(p.detach().cpu().numpy().astype("<f4").tobytes())
    return path


def read_header(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ValidationError("%s is not a checkpoint (bad magic)" % path)
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise ValidationError("unsupported checkpoint version %d" % version)
    header_len = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + header_len:
        raise ValidationError("truncated checkpoint header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError("unreadable checkpoint header: %s" % exc) from exc
    return header, blob[12 + header_len :]


def load_checkpoint(path):
    """Rebuild the JointModel saved at `path`; returns (model, header)."""
    header, payload = read_header(path)
    model = JointModel(
        _spec_from_dict(header["image_spec"]),
        _spec_from_dict(header["text_spec"]),
        seed=header["seed"],
        gate_mode=header.get("gate_mode", "sigmoid"),
    )
    expected = [(e["name"], tuple(e["shape"])) for e in header["parameters"]]
    actual = [(n, tuple(p.shape)) for n, p in model.named_parameters()]
    if expected != actual:
        raise ValidationError("checkpoint parameter index does not match the rebuilt model")
    total = sum(int(np.prod(s)) if s else 1 for _, s in expected)
    if len(payload) != 4 * total:
        raise ValidationError(
            "payload holds %d bytes, expected %d" % (len(payload), 4 * total)
        )
    offset = 0
    with torch.no_grad():
        for _, p in model.named_parameters():
            n = p.numel()
            values = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
            p.copy_(torch.from_numpy(values.copy()).reshape(p.shape))
            offset += 4 * n
    return model, header
