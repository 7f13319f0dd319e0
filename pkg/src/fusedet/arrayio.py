"""Binary file formats: named-array containers and scene datasets.

Both formats are little-endian and store all numeric payloads as raw
32-bit floats, so a save/load round trip is bit-exact.

Named-array container (checkpoints, perturbations, patches):

    offset  field
    0       magic  b"FDTN"
    4       version        u32 (currently 1)
    8       n_arrays       u32
    12      meta_len       u32
    16      meta           UTF-8 JSON, meta_len bytes
    ...     n_arrays records, each:
                name_len   u16
                name       UTF-8
                ndim       u8
                dims       ndim x u32
                data       float32 x prod(dims), C order

Scene dataset:

    0       magic  b"FDSC"
    4       version        u32 (currently 1)
    8       n_scenes       u32
    12      n_scenes scene records, each:
                id_len     u16, scene_id UTF-8
                seed       i64
                image dims 3 x u32, image data float32
                bev dims   3 x u32, bev data float32
                n_objects  u32
                per object: class_id u32,
                            image_box 4 x f32, bev_box 4 x f32,
                            patchable_region 4 x f32
    ...     meta_len       u32
    ...     meta           UTF-8 JSON (dataset-level metadata block)

Corrupt or truncated files raise FormatError carrying the byte offset at
which decoding failed.
"""

from __future__ import annotations

import json
import struct

import numpy as np

TENSOR_MAGIC = b"FDTN"
DATASET_MAGIC = b"FDSC"
FORMAT_VERSION = 1


class FormatError(Exception):
    """Raised when a binary file cannot be decoded; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, f):
        self.f = f

    def take(self, n: int) -> bytes:
        off = self.f.tell()
        data = self.f.read(n)
        if len(data) != n:
            raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}", off)
        return data

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def expect_magic(self, magic: bytes, kind: str):
        off = self.f.tell()
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"bad {kind} magic {got!r}, expected {magic!r}", off)

    def json_block(self, length: int) -> dict:
        off = self.f.tell()
        raw = self.take(length)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad metadata block: {exc}", off) from exc


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


# -- named-array container ----------------------------------------------

def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named float32 arrays plus a JSON metadata block."""
    meta_bytes = _canonical_json(meta or {})
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, len(arrays), len(meta_bytes)))
        f.write(meta_bytes)
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path):
    """Read a named-array container; returns (arrays, meta)."""
    with open(path, "rb") as f:
        r = _Reader(f)
        r.expect_magic(TENSOR_MAGIC, "array container")
        version, n_arrays, meta_len = r.unpack("III")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported container version {version}", 4)
        meta = r.json_block(meta_len)
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = r.unpack("H")
            name = r.take(name_len).decode("utf-8")
            (ndim,) = r.unpack("B")
            dims = r.unpack(f"{ndim}I") if ndim else ()
            data = r.take(4 * int(np.prod(dims, dtype=np.int64)))
            arrays[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after last array", f.tell() - 1)
    return arrays, meta


# -- scene dataset -------------------------------------------------------

def write_dataset(path, scenes, meta: dict | None = None) -> None:
    from .scenegen import Scene  # local import to avoid a cycle

    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(scenes)))
        for scene in scenes:
            _write_scene(f, scene)
        meta_bytes = _canonical_json(meta or {})
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)


def _write_scene(f, scene) -> None:
    sid = scene.scene_id.encode("utf-8")
    f.write(struct.pack("<H", len(sid)))
    f.write(sid)
    f.write(struct.pack("<q", scene.seed))
    for arr in (scene.image, scene.bev):
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        f.write(struct.pack("<3I", *arr.shape))
        f.write(arr.tobytes())
    f.write(struct.pack("<I", len(scene.objects)))
    for obj in scene.objects:
        f.write(struct.pack("<I", obj.class_id))
        f.write(struct.pack("<4f", *obj.image_box))
        f.write(struct.pack("<4f", *obj.bev_box))
        f.write(struct.pack("<4f", *obj.patchable_region))


def read_dataset(path):
    """Read a scene dataset; returns (scenes, meta)."""
    from .scenegen import GroundTruthObject, Scene

    scenes = []
    with open(path, "rb") as f:
        r = _Reader(f)
        r.expect_magic(DATASET_MAGIC, "dataset")
        version, n_scenes = r.unpack("II")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported dataset version {version}", 4)
        for _ in range(n_scenes):
            (id_len,) = r.unpack("H")
            scene_id = r.take(id_len).decode("utf-8")
            (seed,) = r.unpack("q")
            image = _read_array3(r)
            bev = _read_array3(r)
            (n_objects,) = r.unpack("I")
            objects = []
            for _ in range(n_objects):
                (class_id,) = r.unpack("I")
                image_box = tuple(float(np.float32(v)) for v in r.unpack("4f"))
                bev_box = tuple(float(np.float32(v)) for v in r.unpack("4f"))
                patchable = tuple(int(v) for v in r.unpack("4f"))
                objects.append(
                    GroundTruthObject(
                        class_id=class_id,
                        image_box=image_box,
                        bev_box=bev_box,
                        patchable_region=patchable,
                    )
                )
            scenes.append(
                Scene(image=image, bev=bev, objects=objects, scene_id=scene_id, seed=seed)
            )
        (meta_len,) = r.unpack("I")
        meta = r.json_block(meta_len)
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after metadata block", f.tell() - 1)
    return scenes, meta


def _read_array3(r: _Reader) -> np.ndarray:
    dims = r.unpack("3I")
    n = int(np.prod(dims, dtype=np.int64))
    data = r.take(4 * n)
    return np.frombuffer(data, dtype="<f4").reshape(dims).copy()
