"""File formats: OBJ meshes, landmark JSON, PNG/PPM images and the model container.

Container layout (binary)::

    b"AFSY" | uint32 version | uint64 header length | JSON header | array blobs

The JSON header holds free-form metadata plus an ``arrays`` table giving
dtype, shape and byte offset of each little-endian array blob.  A path
ending in ``.json`` is written as plain JSON instead, with arrays inlined as
nested lists.  Both encodings are deterministic byte-for-byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import GeometryError, Landmarks2D, TriMesh

CONTAINER_MAGIC = b"AFSY"
CONTAINER_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# container


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    if path.suffix == ".json":
        doc = {"format": "affectsynth-container", "version": CONTAINER_VERSION, "meta": meta,
               "arrays": {k: {"dtype": np.asarray(v).dtype.str, "shape": list(np.shape(v)),
                              "data": np.asarray(v).ravel().tolist()}
                          for k, v in sorted(arrays.items())}}
        path.write_text(json.dumps(doc, sort_keys=True))
        return
    table = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        table[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if doc.get("format") != "affectsynth-container":
            raise FormatError(f"{path} is not a model container")
        arrays = {k: np.asarray(v["data"], dtype=np.dtype(v["dtype"])).reshape(v["shape"])
                  for k, v in doc["arrays"].items()}
        return doc["meta"], arrays
    data = path.read_bytes()
    if data[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path} is not a model container")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version > CONTAINER_VERSION:
        raise FormatError(f"container version {version} is newer than supported {CONTAINER_VERSION}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for name, info in header["arrays"].items():
        start = base + info["offset"]
        arrays[name] = np.frombuffer(data[start:start + info["nbytes"]],
                                     dtype=np.dtype(info["dtype"])).reshape(info["shape"]).copy()
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# OBJ


def write_obj(path, mesh: TriMesh) -> None:
    lines = []
    if mesh.per_vertex_color is not None:
        for (x, y, z), (r, g, b) in zip(mesh.vertices, mesh.per_vertex_color):
            lines.append(f"v {x:.17g} {y:.17g} {z:.17g} {r:.17g} {g:.17g} {b:.17g}")
    else:
        for x, y, z in mesh.vertices:
            lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
    for a, b, c in mesh.triangles + 1:
        lines.append(f"f {a} {b} {c}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, cols, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                cols.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    if cols and len(cols) != len(verts):
        raise FormatError(f"{path}: vertex colours on some but not all vertices")
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3),
                   np.array(cols) if cols else None)


# ---------------------------------------------------------------------------
# landmarks


def write_landmarks(path, lm: Landmarks2D) -> None:
    doc = {"points": lm.points.tolist(), "vertex_map": lm.vertex_map.tolist()}
    Path(path).write_text(json.dumps(doc))


def read_landmarks(path) -> Landmarks2D:
    doc = json.loads(Path(path).read_text())
    try:
        return Landmarks2D(np.asarray(doc["points"]), np.asarray(doc["vertex_map"]))
    except (KeyError, GeometryError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# images


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0, 1] as 8-bit PNG (or PPM by suffix)."""
    path = Path(path)
    data = to_uint8(image)
    if path.suffix.lower() == ".ppm":
        h, w = data.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
        return
    from PIL import Image

    # no timestamps or optional chunks, so reruns are byte-identical
    Image.fromarray(data).save(path, format="PNG", optimize=False, compress_level=6)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        raw = path.read_bytes()
        tokens = []
        pos = 0
        while len(tokens) < 4:
            while raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":
                pos = raw.index(b"\n", pos) + 1
                continue
            end = pos
            while not raw[end:end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
        if tokens[0] != b"P6" or int(tokens[3]) != 255:
            raise FormatError(f"{path}: only 8-bit binary PPM is supported")
        w, h = int(tokens[1]), int(tokens[2])
        data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
        return data.astype(np.float64) / 255.0
    from PIL import Image

    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"))
    return data.astype(np.float64) / 255.0
