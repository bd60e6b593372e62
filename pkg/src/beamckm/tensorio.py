"""Binary tensor container and checkpoint files.

Tensor record layout: magic b"CKM1", uint32-LE rank, `rank` uint32-LE dims,
then the row-major float32-LE payload. A checkpoint is one JSON header line
followed by the parameter records concatenated in declaration order.
"""

import json

import numpy as np

MAGIC = b"CKM1"


def write_tensor_record(fh, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    fh.write(MAGIC)
    fh.write(np.uint32(array.ndim).astype("<u4").tobytes())
    fh.write(np.asarray(array.shape, dtype="<u4").tobytes())
    fh.write(array.tobytes())


def read_tensor_record(fh):
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    rank = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
    dims = np.frombuffer(fh.read(4 * rank), dtype="<u4").astype(int)
    count = int(np.prod(dims)) if rank > 0 else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_tensor(path, array):
    with open(path, "wb") as fh:
        write_tensor_record(fh, array)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor_record(fh)


def save_checkpoint(path, named_arrays, header_extra=None):
    """Write named float32 arrays with a JSON header line.

    `named_arrays` preserves its iteration order; the same order is used for
    the binary records and recorded in the header.
    """
    names = list(named_arrays)
    header = dict(header_extra or {})
    header["format"] = "beamckm-checkpoint-v1"
    header["parameters"] = [
        {"name": name, "shape": list(np.shape(named_arrays[name]))} for name in names
    ]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            write_tensor_record(fh, named_arrays[name])


def load_checkpoint(path):
    """Return (header dict, {name: float32 array}) from a checkpoint file."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != "beamckm-checkpoint-v1":
            raise ValueError("not a beamckm checkpoint")
        arrays = {}
        for entry in header["parameters"]:
            arr = read_tensor_record(fh)
            if list(arr.shape) != list(entry["shape"]):
                raise ValueError(
                    f"checkpoint record {entry['name']} has shape {arr.shape}, "
                    f"header says {entry['shape']}"
                )
            arrays[entry["name"]] = arr
    return header, arrays
