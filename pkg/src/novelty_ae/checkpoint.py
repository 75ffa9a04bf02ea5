"""Self-describing training checkpoints.

A checkpoint is a single ``.npz`` archive holding the model parameters and
normalization buffers, both optimizer states, the iteration counter, the
full config, every RNG stream state, and the metrics history — everything
needed to continue a run bit-for-bit. Arrays are stored little-endian and
loaded with ``allow_pickle=False``, so archives are portable and safe to
open from untrusted sources. A sidecar ``.done`` marker distinguishes
completed writes from files cut short by a crash.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1

_CKPT_RE = re.compile(r"^ckpt_(\d{8})\.npz$")


class CheckpointError(Exception):
    """A checkpoint file is missing, incomplete, or malformed."""


def checkpoint_name(t: int) -> str:
    return f"ckpt_{t:08d}.npz"


def marker_path(path: Path) -> Path:
    return path.with_name(path.name + ".done")


def _to_le(arr: np.ndarray) -> np.ndarray:
    """Return ``arr`` with explicit little-endian (or endian-free) dtype."""
    dt = arr.dtype
    if dt.byteorder == ">" or (dt.byteorder == "=" and not np.little_endian):
        return arr.astype(dt.newbyteorder("<"))
    return arr


def _pack_str(payload: str) -> np.ndarray:
    return np.frombuffer(payload.encode("utf-8"), dtype=np.uint8).copy()


def _unpack_str(arr: np.ndarray) -> str:
    return arr.tobytes().decode("utf-8")


def _flatten_optimizer(prefix: str, state: dict, out: dict):
    out[f"{prefix}/param_groups"] = _pack_str(json.dumps(state["param_groups"]))
    for idx, slots in state["state"].items():
        for name, value in slots.items():
            if isinstance(value, torch.Tensor):
                arr = value.detach().cpu().numpy()
            else:
                arr = np.asarray(value)
            out[f"{prefix}/state/{idx}/{name}"] = _to_le(arr)


def _rebuild_optimizer(prefix: str, archive) -> dict:
    groups = json.loads(_unpack_str(archive[f"{prefix}/param_groups"]))
    for group in groups:
        # JSON has no tuple type; torch stores Adam betas as one
        if "betas" in group:
            group["betas"] = tuple(group["betas"])
    state: dict = {}
    head = f"{prefix}/state/"
    for key in archive.files:
        if not key.startswith(head):
            continue
        idx_str, name = key[len(head):].split("/", 1)
        slots = state.setdefault(int(idx_str), {})
        arr = archive[key]
        if name == "step":
            # Adam tracks step count as a scalar tensor
            slots[name] = torch.as_tensor(arr.copy())
        else:
            slots[name] = torch.from_numpy(arr.copy())
    return {"state": state, "param_groups": groups}


def save_checkpoint(path: Path, *, model_state: dict, opt_d_state: dict,
                    opt_eg_state: dict, iteration: int, config_dict: dict,
                    rng_states: dict, history: list) -> Path:
    """Write one complete checkpoint atomically and place its done-marker.

    ``history`` is a list of ``(iteration, metric, value)`` rows;
    ``rng_states`` maps stream names to serializable bit-generator states.
    """
    path = Path(path)
    payload: dict = {
        "meta/format_version": np.asarray(FORMAT_VERSION, dtype=np.int64),
        "meta/iteration": np.asarray(iteration, dtype=np.int64),
        "meta/config": _pack_str(json.dumps(config_dict, sort_keys=True)),
        "meta/rng": _pack_str(json.dumps(rng_states, sort_keys=True)),
    }
    for key, tensor in model_state.items():
        payload[f"model/{key}"] = _to_le(tensor.detach().cpu().numpy())
    _flatten_optimizer("opt_d", opt_d_state, payload)
    _flatten_optimizer("opt_eg", opt_eg_state, payload)
    if history:
        its = np.asarray([row[0] for row in history], dtype=np.int64)
        names = "\n".join(str(row[1]) for row in history)
        vals = np.asarray([row[2] for row in history], dtype=np.float64)
        payload["history/iteration"] = its
        payload["history/metric"] = _pack_str(names)
        payload["history/value"] = vals

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    marker_path(path).touch()
    return path


def load_checkpoint(path: Path, allow_incomplete: bool = False) -> dict:
    """Read a checkpoint back into plain Python / torch objects.

    Returns a dict with keys ``model_state``, ``opt_d_state``,
    ``opt_eg_state``, ``iteration``, ``config``, ``rng_states``, and
    ``history``.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    if not marker_path(path).exists() and not allow_incomplete:
        raise CheckpointError(
            f"checkpoint {path} has no completion marker; the write may have "
            "been interrupted (pass allow_incomplete=True to read it anyway)")
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "meta/format_version" not in archive.files:
            raise CheckpointError(f"{path} is not a checkpoint archive")
        version = int(archive["meta/format_version"])
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format {version} not supported (expected {FORMAT_VERSION})")
        model_state = {}
        for key in archive.files:
            if key.startswith("model/"):
                model_state[key[len("model/"):]] = torch.from_numpy(archive[key].copy())
        history = []
        if "history/iteration" in archive.files:
            its = archive["history/iteration"]
            names = _unpack_str(archive["history/metric"]).split("\n")
            vals = archive["history/value"]
            history = [(int(i), n, float(v)) for i, n, v in zip(its, names, vals)]
        return {
            "model_state": model_state,
            "opt_d_state": _rebuild_optimizer("opt_d", archive),
            "opt_eg_state": _rebuild_optimizer("opt_eg", archive),
            "iteration": int(archive["meta/iteration"]),
            "config": json.loads(_unpack_str(archive["meta/config"])),
            "rng_states": json.loads(_unpack_str(archive["meta/rng"])),
            "history": history,
        }


def list_checkpoints(run_dir: Path) -> list:
    """All completed checkpoints in a run directory as (iteration, path), ascending."""
    run_dir = Path(run_dir)
    found = []
    if not run_dir.is_dir():
        return found
    for entry in sorted(run_dir.iterdir()):
        m = _CKPT_RE.match(entry.name)
        if m and marker_path(entry).exists():
            found.append((int(m.group(1)), entry))
    return found


def latest_checkpoint(run_dir: Path):
    """Path of the newest completed checkpoint, or None."""
    ckpts = list_checkpoints(run_dir)
    return ckpts[-1][1] if ckpts else None
