"""Model container files.

A model is stored as one JSON document.  Parameter tensors are row-major
little-endian float64 bytes, base64-encoded, so a save/load cycle reproduces
every bit.  The checksum is a SHA-256 over the canonical JSON of the body, i.e.
everything except the checksum field itself.
"""

import base64
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import CorruptionError, SchemaError, VersionError
from .features import NormStats
from .rnn import FORMAT_VERSION, PARAM_NAMES, RnnModel

MODEL_FORMAT = "procsight.model"


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(d["data"], validate=True)
        shape = tuple(int(n) for n in d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"bad tensor record: {exc}") from exc
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise CorruptionError(f"tensor holds {len(raw)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _canonical(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checksum(body: dict) -> str:
    return hashlib.sha256(_canonical(body)).hexdigest()


def model_to_dict(model: RnnModel, stamp: dict = None) -> dict:
    body = {
        "format": MODEL_FORMAT,
        "format_version": model.format_version,
        "cell": model.cell,
        "schema_id": model.schema_id,
        "dims": {"input_width": model.input_width, "hidden_width": model.hidden_width},
        "normalization": None
        if model.norm is None
        else {"mean": _encode_array(model.norm.mean), "std": _encode_array(model.norm.std)},
        "params": {name: _encode_array(model.params[name]) for name in PARAM_NAMES},
    }
    if stamp:
        body["stamp"] = dict(stamp)
    return {**body, "checksum": checksum(body)}


def model_from_dict(doc: dict) -> RnnModel:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise CorruptionError("not a procsight model file")
    version = doc.get("format_version")
    # Version first: a newer writer may use a different checksum layout.
    if not isinstance(version, int) or version > FORMAT_VERSION or version < 1:
        raise VersionError(version, FORMAT_VERSION)
    body = {k: v for k, v in doc.items() if k != "checksum"}
    if doc.get("checksum") != checksum(body):
        raise CorruptionError("checksum mismatch")
    try:
        dims = doc["dims"]
        params = {name: _decode_array(doc["params"][name]) for name in PARAM_NAMES}
        norm_doc = doc.get("normalization")
        norm = None
        if norm_doc is not None:
            norm = NormStats(_decode_array(norm_doc["mean"]), _decode_array(norm_doc["std"]))
        return RnnModel(
            cell=doc["cell"],
            input_width=int(dims["input_width"]),
            hidden_width=int(dims["hidden_width"]),
            params=params,
            schema_id=doc["schema_id"],
            norm=norm,
            format_version=version,
        )
    except KeyError as exc:
        raise SchemaError(f"model file lacks {exc.args[0]!r}", field=exc.args[0]) from exc


def save_model(model: RnnModel, path, stamp: dict = None) -> Path:
    """Write ``model`` atomically (temp file + rename) and return the path."""
    path = Path(path)
    payload = json.dumps(model_to_dict(model, stamp), sort_keys=True, indent=1) + "\n"
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(payload, encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_model(path) -> RnnModel:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: unreadable model file ({exc.msg} at byte {exc.pos})") from exc
    return model_from_dict(doc)
