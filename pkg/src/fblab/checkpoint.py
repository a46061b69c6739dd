"""Plain-text model checkpoints.

Layout::

    fbckpt v1 <algo> <param_kind> <d> <n_states> <n_actions>
    tensor <name> <rows> <cols>
    <row of cols values>
    ...
    end

Values use 17 significant digits, so a save/load round trip is bitwise exact.
Vectors are stored as single rows. The trailing ``end`` line detects truncation.
"""

import numpy as np

from .errors import ConfigError, FormatError
from .models import FbModel, OneStepFbModel

MAGIC = "fbckpt"
VERSION = "v1"
_META = ("tau_policy_train", "tau_policy_eval")


def _tensors(model):
    out = dict(model.params)
    if model.algo == "fb":
        for key in _META:
            out[key] = np.array([[getattr(model, key)]])
    return out


def format_checkpoint(model):
    lines = [f"{MAGIC} {VERSION} {model.algo} {model.param_kind} {model.d} {model.n_states} {model.n_actions}"]
    for name, value in _tensors(model).items():
        mat = np.atleast_2d(value)
        if mat.ndim != 2:
            raise FormatError(f"tensor {name} has {mat.ndim} dimensions")
        lines.append(f"tensor {name} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(" ".join("%.17g" % v for v in row) for row in mat)
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(model, path):
    with open(path, "w") as fh:
        fh.write(format_checkpoint(model))


def parse_checkpoint(text, expect_algo=None):
    """Build a model from checkpoint text; any inconsistency raises :class:`FormatError`."""
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty checkpoint")
    head = lines[0].split()
    if len(head) != 7 or head[0] != MAGIC:
        raise FormatError("missing fbckpt header")
    if head[1] != VERSION:
        raise FormatError(f"unsupported checkpoint version {head[1]!r}")
    algo, kind = head[2], head[3]
    if expect_algo is not None and algo != expect_algo:
        raise FormatError(f"checkpoint holds algo {algo!r}, expected {expect_algo!r}")
    try:
        d, n_states, n_actions = (int(x) for x in head[4:])
    except ValueError as exc:
        raise FormatError(f"bad header dimensions: {exc}") from exc

    tensors = {}
    i = 1
    ended = False
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts == ["end"]:
            ended = True
            break
        if parts[0] != "tensor" or len(parts) != 4:
            raise FormatError(f"line {i + 1}: expected 'tensor <name> <rows> <cols>'")
        name = parts[1]
        try:
            rows, cols = int(parts[2]), int(parts[3])
            block = lines[i + 1 : i + 1 + rows]
            if len(block) != rows:
                raise FormatError(f"tensor {name}: truncated")
            mat = np.array([[float(v) for v in row.split()] for row in block])
        except ValueError as exc:
            raise FormatError(f"tensor {name}: {exc}") from exc
        if mat.shape != (rows, cols) and not (rows == 0 or cols == 0):
            raise FormatError(f"tensor {name}: expected {rows}x{cols} values")
        tensors[name] = mat.reshape(rows, cols)
        i += 1 + rows
    if not ended:
        raise FormatError("checkpoint is truncated (no end marker)")

    try:
        if algo == "fb":
            meta = {k: float(tensors.pop(k)[0, 0]) for k in _META}
            shell = FbModel.__new__(FbModel)
            shell.n_states, shell.n_actions, shell.d, shell.param_kind = n_states, n_actions, d, kind
            params = _reshape(tensors, shell.param_shapes())
            return FbModel(n_states, n_actions, d, params, kind, meta["tau_policy_train"], meta["tau_policy_eval"])
        if algo == "onestep_fb":
            shell = OneStepFbModel.__new__(OneStepFbModel)
            shell.n_states, shell.n_actions, shell.d, shell.param_kind = n_states, n_actions, d, kind
            params = _reshape(tensors, shell.param_shapes())
            return OneStepFbModel(n_states, n_actions, d, params, kind)
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"checkpoint does not match a {algo} model: {exc}") from exc
    raise FormatError(f"unknown algo {algo!r}")


def _reshape(tensors, shapes):
    if set(tensors) != set(shapes):
        raise FormatError(f"tensor names {sorted(tensors)} != {sorted(shapes)}")
    out = {}
    for name, shape in shapes.items():
        t = tensors[name]
        if t.size != int(np.prod(shape)):
            raise FormatError(f"tensor {name}: {t.shape} cannot hold shape {shape}")
        out[name] = t.reshape(shape)
    return out


def load_checkpoint(path, expect_algo=None):
    with open(path) as fh:
        return parse_checkpoint(fh.read(), expect_algo)
