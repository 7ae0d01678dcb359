"""Binary model files.

Layout (all integers little-endian uint32)::

    b"TPNT" | version | header_len | header (UTF-8 JSON) | float32 LE payload

The JSON header holds the architecture descriptor and an ordered list of
``[name, shape]`` entries; the payload is those arrays concatenated in order.
Extra named arrays (the layer-mixing logits, for instance) ride along in the
same payload under an ``extras`` list.
"""
import json
import struct

import numpy as np

from .layers import Architecture, TapNet

MAGIC = b"TPNT"
VERSION = 1


class ModelFormatError(ValueError):
    pass


class BadMagic(ModelFormatError):
    pass


class UnsupportedVersion(ModelFormatError):
    pass


class TruncatedStream(ModelFormatError):
    pass


def save_model(net, extras=None):
    extras = dict(extras or {})
    entries = [[name, list(p.shape)] for name, p in net.params.items()]
    extra_entries = [[name, list(np.shape(v))] for name, v in extras.items()]
    header = json.dumps({"arch": net.arch.to_dict(), "params": entries, "extras": extra_entries},
                        sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    for p in net.params.values():
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    for v in extras.values():
        chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(chunks)


def load_model(data, with_extras=False):
    """Parse bytes written by :func:`save_model`; nothing is returned on error."""
    data = bytes(data)
    if len(data) < 12:
        raise TruncatedStream(f"stream is {len(data)} bytes, header needs 12")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"model format version {version}, this reader handles {VERSION}")
    if len(data) < 12 + hlen:
        raise TruncatedStream("stream ends inside the header")
    try:
        header = json.loads(data[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt header: {exc}") from None
    arrays = {}
    offset = 12 + hlen
    for name, shape in header["params"] + header["extras"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(data):
            raise TruncatedStream(f"stream ends inside array {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset = end
    if offset != len(data):
        raise ModelFormatError(f"{len(data) - offset} trailing bytes after payload")
    net = TapNet(Architecture.from_dict(header["arch"]))
    names = [name for name, _ in header["params"]]
    if set(names) != set(net.params):
        raise ModelFormatError("parameter names do not match the architecture")
    net.load_state({name: arrays[name].astype(np.float32) for name in names})
    if with_extras:
        return net, {name: arrays[name].astype(np.float32) for name, _ in header["extras"]}
    return net
