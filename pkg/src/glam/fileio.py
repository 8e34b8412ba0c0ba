"""On-disk formats: descriptor files, PPM/PGM images, checkpoints, ground truth.

Binary layouts are little-endian with f32 payloads. Parse failures raise
ValueError naming the byte offset and the field, so a truncated or
corrupted file is diagnosable from the message alone.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .head import Descriptor
from .model import GlamModel
from .tensor import Tensor, read_gltn, write_gltn

GLDS_MAGIC = b"GLDS"

# channel statistics applied after scaling pixels to [0,1]
IMAGE_MEAN = np.asarray([0.485, 0.456, 0.406])
IMAGE_STD = np.asarray([0.229, 0.224, 0.225])


# ---------------------------------------------------------------------------
# descriptor files


def write_glds(path, descriptors: list[Descriptor]) -> None:
    """Magic, u32 dim, u32 count, then (u16 id length, id bytes, dim f32)."""
    if not descriptors:
        raise ValueError("refusing to write an empty descriptor file")
    dim = descriptors[0].vec.shape[0]
    with open(path, "wb") as fh:
        fh.write(GLDS_MAGIC)
        fh.write(np.uint32(dim).tobytes())
        fh.write(np.uint32(len(descriptors)).tobytes())
        for d in descriptors:
            if d.vec.shape != (dim,):
                raise ValueError(f"descriptor {d.id!r} has mismatched dim")
            ident = d.id.encode("utf-8")
            if len(ident) > 0xFFFF:
                raise ValueError(f"id too long: {d.id!r}")
            fh.write(np.uint16(len(ident)).tobytes())
            fh.write(ident)
            fh.write(np.ascontiguousarray(d.vec, dtype="<f4").tobytes())


def read_glds(path) -> list[Descriptor]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GLDS_MAGIC:
            raise ValueError("bad GLDS magic at byte 0 (field: magic)")
        header = fh.read(8)
        if len(header) != 8:
            raise ValueError("truncated GLDS header at byte 4 (field: dim/count)")
        dim, count = (int(v) for v in np.frombuffer(header, dtype="<u4"))
        out = []
        for _ in range(count):
            offset = fh.tell()
            raw = fh.read(2)
            if len(raw) != 2:
                raise ValueError(
                    f"truncated GLDS record at byte {offset} (field: id length)")
            n = int(np.frombuffer(raw, dtype="<u2")[0])
            ident = fh.read(n)
            if len(ident) != n:
                raise ValueError(
                    f"truncated GLDS record at byte {offset + 2} (field: id)")
            payload = fh.read(4 * dim)
            if len(payload) != 4 * dim:
                raise ValueError(
                    f"truncated GLDS record at byte {offset + 2 + n} (field: vector)")
            vec = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            out.append(Descriptor(id=ident.decode("utf-8"), vec=vec,
                                  degenerate=not np.any(vec != 0.0)))
    return out


# ---------------------------------------------------------------------------
# images


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) to a [3,h,w] float array in [0,1]."""
    data = Path(path).read_bytes()

    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"truncated PPM header at byte {start} (field: header)")
        return data[start:pos], start

    magic, off = token()
    if magic != b"P6":
        raise ValueError(f"bad PPM magic at byte {off} (field: magic)")
    fields = {}
    for name in ("width", "height", "maxval"):
        tok, off = token()
        try:
            fields[name] = int(tok)
        except ValueError:
            raise ValueError(f"bad PPM {name} at byte {off} (field: {name})") from None
    if fields["maxval"] != 255:
        raise ValueError(f"unsupported PPM maxval {fields['maxval']} (field: maxval)")
    pos += 1  # single whitespace byte after maxval
    w, h = fields["width"], fields["height"]
    need = 3 * w * h
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise ValueError(f"truncated PPM payload at byte {pos} (field: payload)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """[3,h,w] floats in [0,1] to binary P6 (mostly for building fixtures)."""
    _, h, w = image.shape
    body = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body.transpose(1, 2, 0).tobytes())


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Standard channel statistics: subtract mean, divide by std."""
    return (image - IMAGE_MEAN[:, None, None]) / IMAGE_STD[:, None, None]


def write_pgm(path, heatmap: np.ndarray) -> None:
    """[h,w] values in [0,1] to 8-bit binary P5, value = round(255*v)."""
    h, w = heatmap.shape
    body = np.clip(np.round(heatmap * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError("bad PGM header at byte 0 (field: magic)")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3][:w * h], dtype=np.uint8)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# ground truth


def load_ground_truth(path):
    from .eval import QueryGroundTruth

    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if "queries" not in raw:
        raise ValueError("ground truth JSON needs a top-level 'queries' list")
    out = []
    for entry in raw["queries"]:
        out.append(QueryGroundTruth(
            id=entry["id"],
            easy=list(entry.get("easy", [])),
            hard=list(entry.get("hard", [])),
            junk=list(entry.get("junk", [])),
        ))
    return out


# ---------------------------------------------------------------------------
# checkpoints: u32 manifest length, JSON manifest, concatenated GLTN blocks


def save_checkpoint(path, model: GlamModel, extra: dict | None = None) -> None:
    """Single-file checkpoint; the manifest records name/shape/offset per block."""
    params = model.named_parameters()
    blocks = []
    manifest_params = []
    offset = 0
    for name, p in params:
        buf = io.BytesIO()
        write_gltn(buf, p.data)
        raw = buf.getvalue()
        manifest_params.append({"name": name, "shape": list(p.data.shape),
                                "offset": offset})
        blocks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "glam-checkpoint-v1",
        "embed_dim": model.embed_dim,
        "bn_mean": model.head.bn_mean.tolist(),
        "bn_var": model.head.bn_var.tolist(),
        "dropout_rate": model.head.dropout_rate,
        "bn_momentum": model.head.bn_momentum,
        "params": manifest_params,
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for raw in blocks:
            fh.write(raw)


def load_checkpoint(path) -> GlamModel:
    from .model import init_model

    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) != 4:
            raise ValueError("truncated checkpoint at byte 0 (field: manifest length)")
        n = int(np.frombuffer(raw, dtype="<u4")[0])
        blob = fh.read(n)
        if len(blob) != n:
            raise ValueError("truncated checkpoint at byte 4 (field: manifest)")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"bad checkpoint manifest at byte 4: {exc}") from None
        if manifest.get("format") != "glam-checkpoint-v1":
            raise ValueError("unknown checkpoint format (field: format)")
        model = init_model(embed_dim=int(manifest["embed_dim"]), seed=0,
                           dropout_rate=float(manifest.get("dropout_rate", 0.2)))
        model.head.bn_mean = np.asarray(manifest["bn_mean"], dtype=np.float64)
        model.head.bn_var = np.asarray(manifest["bn_var"], dtype=np.float64)
        model.head.bn_momentum = float(manifest.get("bn_momentum", 0.1))
        by_name = dict(model.named_parameters())
        base = fh.tell()
        for entry in manifest["params"]:
            fh.seek(base + int(entry["offset"]))
            data = read_gltn(fh)
            name = entry["name"]
            if name == "arcface.weights":
                model.arcface_weights = Tensor(data, requires_grad=True)
                continue
            if name not in by_name:
                raise ValueError(f"checkpoint names unknown parameter {name!r}")
            if tuple(data.shape) != by_name[name].shape:
                raise ValueError(f"checkpoint shape mismatch for {name!r}")
            by_name[name].data = data
    return model
