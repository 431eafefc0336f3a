"""PLY read/write for colored point clouds (ASCII and binary little-endian).

Only the vertex element with properties x, y, z, red, green, blue is handled;
colors are stored as 8-bit RGB and converted to/from HSV with the hexcone
formulas on the way through.
"""

import numpy as np

from .pointcloud import ColoredPointCloud, hsv_to_rgb, rgb_to_hsv

__all__ = ["read_ply", "write_ply"]

_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "int8": "i1",
    "short": "<i2",
    "ushort": "<u2",
    "int": "<i4",
    "uint": "<u4",
}


def write_ply(path, cloud, binary=True):
    """Write a cloud as PLY with x,y,z float32 and red,green,blue uchar."""
    rgb = np.clip(np.round(hsv_to_rgb(cloud.colors) * 255.0), 0, 255).astype(np.uint8)
    xyz = cloud.positions.astype("<f4")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"comment frame_id {cloud.frame_id}\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            rec = np.empty(
                len(cloud),
                dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                       ("r", "u1"), ("g", "u1"), ("b", "u1")],
            )
            rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
            rec["r"], rec["g"], rec["b"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
            f.write(rec.tobytes())
        else:
            lines = [
                f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}\n"
                for (x, y, z), (r, g, b) in zip(xyz.astype(float), rgb)
            ]
            f.write("".join(lines).encode("ascii"))


def read_ply(path):
    """Read a PLY point cloud; requires x/y/z and red/green/blue properties."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[: end + len(b"end_header\n")].decode("ascii")
    body = data[end + len(b"end_header\n"):]

    fmt = None
    count = None
    props = []
    frame_id = "world"
    in_vertex = False
    for line in header.splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment" and len(tok) >= 3 and tok[1] == "frame_id":
            frame_id = tok[2]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ValueError("list properties are not supported for vertices")
            props.append((tok[2], _DTYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise ValueError("no vertex element in header")
    names = [n for n, _ in props]
    for need in ("x", "y", "z", "red", "green", "blue"):
        if need not in names:
            raise ValueError(f"missing vertex property {need!r}")

    if fmt == "binary_little_endian":
        rec = np.frombuffer(body, dtype=np.dtype(props), count=count)
    else:
        text = body.decode("ascii").split()
        vals = np.array(text[: count * len(props)], dtype=float).reshape(count, len(props))
        rec = {name: vals[:, i] for i, (name, _) in enumerate(props)}

    xyz = np.stack([np.asarray(rec["x"], float),
                    np.asarray(rec["y"], float),
                    np.asarray(rec["z"], float)], axis=1)
    rgb = np.stack([np.asarray(rec["red"], float),
                    np.asarray(rec["green"], float),
                    np.asarray(rec["blue"], float)], axis=1) / 255.0
    return ColoredPointCloud(xyz, rgb_to_hsv(rgb), frame_id)
