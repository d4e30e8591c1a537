"""Atomic file writes and small serialization helpers."""

import json
import os
import tempfile

FORMAT_VERSION = "1.0"


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj):
    """Serialize with sorted keys so repeated runs produce identical bytes."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
