"""File formats: DFM1 model container, FUSW weights, PPM/PGM, OBJ/PLY, parameter and trace files."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .camera import ViewPose
from .errors import InvalidArgumentError
from .morphable_model import FaceParams, MorphableModel

DFM_MAGIC = b"DFM1"
FUSW_MAGIC = b"FUSW"
VERSION = 1


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise InvalidArgumentError(f"{path}: truncated file")
    return data


# ---------------------------------------------------------------------------
# DFM1


def write_model(path, model: MorphableModel):
    V, F = model.n_vertices, len(model.triangles)
    header = struct.pack(
        "<4s9I", DFM_MAGIC, VERSION, V, F, model.basis_id.shape[1], model.basis_exp.shape[1],
        model.basis_tex.shape[1], len(model.landmarks_68), len(model.landmarks_101),
        len(model.align_7),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for a in (model.mean_shape, model.mean_texture, model.basis_id, model.basis_exp,
                  model.basis_tex):
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        for a in (model.triangles, model.landmarks_68, model.landmarks_101, model.align_7,
                  np.array([model.crop_center])):
            fh.write(np.ascontiguousarray(a, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(model.region_labels, dtype="u1").tobytes())


def read_model(path) -> MorphableModel:
    with open(path, "rb") as fh:
        magic, version, V, F, kid, kexp, ktex, n68, n101, n7 = struct.unpack(
            "<4s9I", _read_exact(fh, 40, path))
        if magic != DFM_MAGIC:
            raise InvalidArgumentError(f"{path}: not a DFM1 file")
        if version != VERSION:
            raise InvalidArgumentError(f"{path}: unsupported DFM1 version {version}")

        def f32(*shape):
            n = int(np.prod(shape))
            return np.frombuffer(_read_exact(fh, 4 * n, path), "<f4").astype(np.float64).reshape(shape)

        def u32(*shape):
            n = int(np.prod(shape))
            return np.frombuffer(_read_exact(fh, 4 * n, path), "<u4").astype(np.int64).reshape(shape)

        mean_shape, mean_tex = f32(3 * V), f32(3 * V)
        bid, bexp, btex = f32(3 * V, kid), f32(3 * V, kexp), f32(3 * V, ktex)
        tris, lm68, lm101, al = u32(F, 3), u32(n68), u32(n101), u32(n7)
        center = int(u32(1)[0])
        labels = np.frombuffer(_read_exact(fh, V, path), "u1").copy()
    return MorphableModel(mean_shape, mean_tex, bid, bexp, btex, tris, labels, lm68, lm101,
                          al, center)


# ---------------------------------------------------------------------------
# FUSW weight container


def write_weights(path, weights: dict):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", FUSW_MAGIC, VERSION, len(weights)))
        for name in sorted(weights):
            a = np.asarray(weights[name])
            key = name.encode()
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_weights(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        magic, version, n = struct.unpack("<4sII", _read_exact(fh, 12, path))
        if magic != FUSW_MAGIC or version != VERSION:
            raise InvalidArgumentError(f"{path}: not a FUSW v1 file")
        for _ in range(n):
            (klen,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, klen, path).decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * count, path), "<f4")
            out[name] = data.astype(np.float64).reshape(shape)
    return out


# ---------------------------------------------------------------------------
# Netpbm


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def write_ppm(path, img):
    """Binary P6; float input in [0, 1] is quantized to 8 bits."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    H, W, _ = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(np.ascontiguousarray(a).tobytes())


def write_pgm(path, img, maxval: int = 255, comment: str | None = None):
    a = np.asarray(img)
    H, W = a.shape
    dtype = "u1" if maxval < 256 else ">u2"
    head = "P5\n" + (f"# {comment}\n" if comment else "") + f"{W} {H}\n{maxval}\n"
    with open(path, "wb") as fh:
        fh.write(head.encode())
        fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def _netpbm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_netpbm(path) -> np.ndarray:
    """P5 or P6 image as uint8/uint16 array."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _netpbm_tokens(data, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = "u1" if maxval < 256 else ">u2"
    if magic == b"P6":
        shape = (h, w, 3)
    elif magic == b"P5":
        shape = (h, w)
    else:
        raise InvalidArgumentError(f"{path}: unsupported netpbm type {magic!r}")
    n = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise InvalidArgumentError(f"{path}: truncated image")
    return np.frombuffer(data[pos:pos + n], dtype).reshape(shape).astype(
        np.uint8 if maxval < 256 else np.uint16)


def read_ppm(path) -> np.ndarray:
    """P6 image as float RGB in [0, 1]."""
    a = read_netpbm(path)
    if a.ndim != 3:
        raise InvalidArgumentError(f"{path}: expected a color (P6) image")
    return a.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# meshes


def write_obj(path, vertices, triangles, colors=None):
    """ASCII OBJ; vertex colors use the ``v x y z r g b`` extension."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    lines = []
    if colors is None:
        lines += ["v %.17g %.17g %.17g" % tuple(p) for p in v]
    else:
        c = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        lines += ["v %.17g %.17g %.17g %.17g %.17g %.17g" % (*p, *q) for p, q in zip(v, c)]
    lines += ["f %d %d %d" % tuple(t + 1) for t in np.asarray(triangles).reshape(-1, 3)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Returns (vertices, triangles, colors or None); polygons are fan-triangulated."""
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
            faces += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    c = np.array(cols, dtype=np.float64) if cols and len(cols) == len(verts) else None
    return v, f, c


def write_ply(path, vertices, triangles, colors=None):
    """Binary little-endian PLY: double positions, uchar colors, int faces."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
            "property double x", "property double y", "property double z"]
    fields = [("xyz", "<f8", (3,))]
    if colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
        fields.append(("rgb", "u1", (3,)))
    head += [f"element face {len(f)}", "property list uchar int vertex_indices", "end_header"]
    vert = np.empty(len(v), dtype=fields)
    vert["xyz"] = v
    if colors is not None:
        vert["rgb"] = to_uint8(colors)
    face = np.empty(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face["n"] = 3
    face["idx"] = f
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode())
        fh.write(vert.tobytes())
        fh.write(face.tobytes())


_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4",
              "uint": "<u4", "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1",
              "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8"}


def read_ply(path):
    """Reads the binary little-endian PLY subset written by :func:`write_ply`."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode().splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise InvalidArgumentError(f"{path}: only binary little-endian PLY is supported")
    elements, cur = [], None
    for line in header:
        p = line.split()
        if p[0] == "element":
            cur = [p[1], int(p[2]), []]
            elements.append(cur)
        elif p[0] == "property":
            if p[1] == "list":
                if p[2] not in ("uchar", "uint8") or _PLY_TYPES[p[3]] != "<i4":
                    raise InvalidArgumentError(f"{path}: unsupported face list type")
                cur[2].append(("n", "u1"))
                cur[2].append(("idx", "<i4", (3,)))
            else:
                cur[2].append((p[2], _PLY_TYPES[p[1]]))
    pos, arrays = end, {}
    for name, count, dtype in elements:
        dt = np.dtype(dtype)
        arrays[name] = np.frombuffer(data, dt, count, pos)
        pos += dt.itemsize * count
    vert = arrays["vertex"]
    v = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    c = None
    if "red" in vert.dtype.names:
        c = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1) / 255.0
    f = arrays["face"]["idx"].astype(np.int64) if "face" in arrays else np.zeros((0, 3), np.int64)
    if "face" in arrays and np.any(arrays["face"]["n"] != 3):
        raise InvalidArgumentError(f"{path}: only triangle faces are supported")
    return v, f, c


def read_mesh(path):
    from .metrics import Mesh

    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        v, f, c = read_obj(path)
    elif suffix == ".ply":
        v, f, c = read_ply(path)
    else:
        raise InvalidArgumentError(f"{path}: unknown mesh format")
    return Mesh(v, f, colors=c)


def write_mesh(path, mesh):
    if Path(path).suffix.lower() == ".ply":
        write_ply(path, mesh.vertices, mesh.triangles, mesh.colors)
    else:
        write_obj(path, mesh.vertices, mesh.triangles, mesh.colors)


# ---------------------------------------------------------------------------
# text files


def _fmt(values) -> str:
    return " ".join("%.17g" % x for x in np.ravel(values))


def write_params(path, params: FaceParams):
    lines = ["# face parameters: name count values...",
             f"alpha {len(params.alpha)} {_fmt(params.alpha)}",
             f"beta {len(params.beta)} {_fmt(params.beta)}",
             f"gamma {len(params.gamma)} {_fmt(params.gamma)}"]
    lines += [f"pose{i} 6 {_fmt(p.as_vector())}" for i, p in enumerate(params.poses)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_params(path) -> FaceParams:
    arrays = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        p = line.split()
        if not p or p[0].startswith("#"):
            continue
        count = int(p[1])
        if len(p) - 2 != count:
            raise InvalidArgumentError(f"{path}:{n}: expected {count} values for {p[0]}")
        arrays[p[0]] = np.array([float(x) for x in p[2:]])
    missing = {"alpha", "beta", "gamma"} - set(arrays)
    if missing:
        raise InvalidArgumentError(f"{path}: missing {sorted(missing)}")
    n_views = sum(1 for k in arrays if k.startswith("pose"))
    try:
        poses = [ViewPose.from_vector(arrays[f"pose{i}"]) for i in range(n_views)]
    except KeyError as exc:
        raise InvalidArgumentError(f"{path}: poses must be numbered from 0") from exc
    return FaceParams(arrays["alpha"], arrays["beta"], arrays["gamma"], poses)


def write_points(path, pts):
    Path(path).write_text("\n".join(_fmt(p) for p in np.asarray(pts)) + "\n")


def read_points(path, dim: int) -> np.ndarray:
    rows = [[float(x) for x in line.split()] for line in Path(path).read_text().splitlines()
            if line.strip() and not line.startswith("#")]
    a = np.array(rows, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != dim:
        raise InvalidArgumentError(f"{path}: expected {dim} columns")
    return a


TRACE_COLUMNS = ("iteration", "L_p", "L_m", "L_2d", "L_3d", "L_reg", "L_all")


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["iteration"]] + ["%.17g" % row[k] for k in TRACE_COLUMNS[1:]])


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_keyvalue(path, values: dict):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))
