"""EMBT binary writer: the file-format contract with the training pipeline.

Layout (little-endian): magic "EMBT", version u32=1, dim u32, count u64,
then per entry: id_len u16, id UTF-8 bytes, dim x f32.
"""

import os
import struct
import tempfile

MAGIC = b"EMBT"
VERSION = 1


def write_embt(entries, dim, path):
    """Write {id: float32 vector} atomically (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".embt.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIQ", VERSION, dim, len(entries)))
            for key, vec in entries.items():
                raw = key.encode("utf-8")
                if len(raw) > 0xFFFF:
                    raise ValueError(f"id too long: {key[:40]}...")
                if vec.shape != (dim,):
                    raise ValueError(
                        f"entry '{key}' has shape {vec.shape}, expected ({dim},)")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(vec.astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
