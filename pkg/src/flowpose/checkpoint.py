"""Checkpoint serialization: one JSON document per checkpoint.

Arrays are stored as base64 little-endian float64 blobs next to their
shapes, so files regenerate byte-identically from the same parameters
and need no binary sidecar.  A `meta` block carries non-reproducible
fields (timestamps) and is ignored on load.
"""

from __future__ import annotations

import base64
import json
import time

import numpy as np

from .flow import FlowConfig, FlowModel
from .nets import ParamStore

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(arr):
    a = np.ascontiguousarray(np.asarray(arr, np.float64))
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii")}


def _decode(d):
    a = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
    return a.reshape(d["shape"]).copy()


def save_checkpoint(path, flow: FlowModel, extra: ParamStore | None = None,
                    train_config=None, with_timestamp=True):
    doc = {
        "format_version": FORMAT_VERSION,
        "flow_config": flow.cfg.to_json(),
        "params": {k: _encode(v) for k, v in flow.param_values().items()},
        "extra": {k: _encode(v) for k, v in (extra.values() if extra else {}).items()},
        "train_config": train_config if train_config is None or isinstance(train_config, dict)
        else train_config.to_json(),
        "meta": {"written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
                 if with_timestamp else None},
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path):
    """Returns (flow, extra ParamStore, train_config dict or None)."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError("unsupported checkpoint format_version")
    cfg = FlowConfig.from_json(doc["flow_config"])
    flow = FlowModel(cfg, np.random.default_rng(0))
    try:
        flow.params.load_values({k: _decode(v) for k, v in doc["params"].items()})
    except KeyError as e:
        raise CheckpointError(f"checkpoint incompatible with flow config: {e}")
    extra = ParamStore()
    for k, v in doc.get("extra", {}).items():
        extra.add(k, _decode(v))
    return flow, extra, doc.get("train_config")
