"""Versioned JSON container shared by instance, price-path and report files.

Floats are written with 17 significant digits so every value round-trips
bit-exactly; the stdlib encoder writes shortest-repr floats and offers no
hook to change that, hence the small emitter below.
"""

import hashlib
import json
import math
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _emit(obj, out, indent, level):
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," + pad if indent else ","
    if obj is None:
        out.append("null")
    elif obj is True or obj is False:
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise FormatError(f"non-finite float {x!r} cannot be serialized")
        text = format(x, ".17g")
        # keep integral floats typed as floats on the way back in
        out.append(text if any(c in text for c in ".en") else text + ".0")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), out, indent, level)
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{" + pad)
        for n, (k, v) in enumerate(obj.items()):
            if n:
                out.append(sep)
            out.append(json.dumps(str(k)) + ": ")
            _emit(v, out, indent, level + 1)
        out.append(end + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        # numeric leaf lists stay on one line
        flat = all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj)
        if flat or not indent:
            out.append("[")
            for n, v in enumerate(obj):
                if n:
                    out.append(", " if indent else ",")
                _emit(v, out, 0, 0)
            out.append("]")
        else:
            out.append("[" + pad)
            for n, v in enumerate(obj):
                if n:
                    out.append(sep)
                _emit(v, out, indent, level + 1)
            out.append(end + "]")
    else:
        raise FormatError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent=1) -> str:
    out: list = []
    _emit(obj, out, indent, 0)
    return "".join(out) + "\n"


def wrap(kind: str, header: dict, body) -> dict:
    return {"format": "minecomplex", "version": FORMAT_VERSION, "kind": kind,
            "header": header, "body": body}


def unwrap(doc: dict, kind: str):
    if doc.get("format") != "minecomplex":
        raise FormatError("not a minecomplex document")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {doc.get('version')!r}")
    if doc.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} document, got {doc.get('kind')!r}")
    return doc["header"], doc["body"]


def write_document(path, kind: str, header: dict, body) -> str:
    """Write a container document and return the sha256 of its bytes."""
    text = dumps(wrap(kind, header, body))
    data = text.encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_document(path, kind: str):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return unwrap(doc, kind)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
