"""The recurrent solver: a layer-normalized convolutional LSTM.

One architecture runs on any grid size. Each recurrent iteration re-reads a
precomputed projection of the input observation (input recall), updates the
hidden/cell state through 3x3 convolutions whose statistics are normalized
over channels only (so nothing depends on the grid extent), and a three-conv
head turns the hidden state into per-position logits. Different-size tasks
aggregate to a single logit vector with a global pool. At test time the same
weights simply run more iterations on a bigger grid.

Cell variants: ``lstm`` (default), ``gru`` (z/r/n gates, reset applied after
the hidden conv), and ``resnet`` (gateless residual block, the "no LSTM"
ablation). ``recurrent_layers=5`` stacks five conv sub-layers per step.

Cross-entropy consumes raw logits; no sigmoid/softmax is applied inside
``forward``.
"""

from __future__ import annotations

import binascii
import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "SolverConfig",
    "ParameterSet",
    "init_params",
    "cell_step",
    "precompute_input",
    "forward",
    "count_parameters",
    "count_macs",
    "propagation_diff",
    "save_checkpoint",
    "load_checkpoint",
]

_CELLS = ("lstm", "gru", "resnet")
_AGGREGATIONS = ("none", "max", "avg")


@dataclass(frozen=True)
class SolverConfig:
    """Architecture hyperparameters; everything else derives from these."""

    task_rank: int  # 1 for sequences, 2 for grids
    in_channels: int
    width: int
    head_channels: tuple[int, int, int]  # (c1, c2, classes)
    cell: str = "lstm"
    recurrent_layers: int = 1
    aggregation: str = "none"
    use_layer_norm: bool = True
    use_input_projection: bool = False
    dropout_std: float = 0.0
    dropout_gal: float = 0.0

    def __post_init__(self):
        if self.task_rank not in (1, 2):
            raise ValueError(f"task_rank must be 1 or 2, got {self.task_rank}")
        if self.cell not in _CELLS:
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.aggregation not in _AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if min(self.in_channels, self.width, *self.head_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.recurrent_layers < 1:
            raise ValueError("recurrent_layers must be >= 1")
        if not 0.0 <= self.dropout_std < 1.0 or not 0.0 <= self.dropout_gal < 1.0:
            raise ValueError("dropout rates must lie in [0, 1)")
        object.__setattr__(self, "head_channels", tuple(self.head_channels))

    @property
    def gate_channels(self) -> int:
        return {"lstm": 4, "gru": 3}.get(self.cell, 1) * self.width

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SolverConfig":
        d = dict(d)
        d["head_channels"] = tuple(d["head_channels"])
        return SolverConfig(**d)


class ParameterSet:
    """Ordered name -> Tensor registry; the order defines the on-disk blob."""

    def __init__(self, entries):
        self._entries: dict[str, Tensor] = dict(entries)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def to_blob(self) -> bytes:
        """Concatenated little-endian float32 values in registry order."""
        parts = [np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in self._entries.values()]
        return b"".join(parts)

    def load_blob(self, blob: bytes) -> None:
        flat = np.frombuffer(blob, dtype="<f4")
        if flat.size != self.n_params:
            raise ValueError(f"blob holds {flat.size} values, registry needs {self.n_params}")
        pos = 0
        for t in self._entries.values():
            n = t.data.size
            t.data = flat[pos : pos + n].reshape(t.data.shape).astype(np.float32)
            pos += n

    def copy(self) -> "ParameterSet":
        out = []
        for name, t in self._entries.items():
            nt = Tensor(np.array(t.data, copy=True), requires_grad=t.requires_grad, name=name)
            out.append((name, nt))
        return ParameterSet(out)

    def astype(self, dtype) -> "ParameterSet":
        ps = self.copy()
        for t in ps.tensors():
            t.data = t.data.astype(dtype)
        return ps


def _registry_shapes(config: SolverConfig) -> list[tuple[str, tuple]]:
    """Single source of truth for parameter names, shapes, and order."""
    k = (3,) * config.task_rank
    w = config.width
    cin = config.in_channels
    shapes: list[tuple[str, tuple]] = []
    if config.use_input_projection:
        shapes.append(("proj.w", (w, cin) + k))
        cin = w
    if config.cell in ("lstm", "gru"):
        gates = config.gate_channels
        shapes.append(("cell.wx", (gates, cin) + k))
        shapes.append(("cell.bx", (gates,)))
        if config.use_layer_norm:
            shapes.append(("cell.ln_x.gamma", (gates,)))
            shapes.append(("cell.ln_x.beta", (gates,)))
        for i in range(config.recurrent_layers - 1):
            shapes.append((f"cell.stack{i}.w", (w, w) + k))
        shapes.append(("cell.wh", (gates, w) + k))
        shapes.append(("cell.bh", (gates,)))
        if config.use_layer_norm:
            shapes.append(("cell.ln_h.gamma", (gates,)))
            shapes.append(("cell.ln_h.beta", (gates,)))
        if config.cell == "lstm" and config.use_layer_norm:
            shapes.append(("cell.ln_c.gamma", (w,)))
            shapes.append(("cell.ln_c.beta", (w,)))
    else:  # resnet: gateless block on concat(h, input)
        n_convs = max(2, config.recurrent_layers)
        shapes.append(("cell.conv0.w", (w, w + cin) + k))
        for i in range(1, n_convs):
            shapes.append((f"cell.conv{i}.w", (w, w) + k))
    c1, c2, out = config.head_channels
    shapes.append(("head.w1", (c1, w) + k))
    shapes.append(("head.w2", (c2, c1) + k))
    shapes.append(("head.w3", (out, c2) + k))
    return shapes


def count_parameters(config: SolverConfig) -> int:
    return sum(int(np.prod(s)) for _, s in _registry_shapes(config))


def init_params(config: SolverConfig, rng: np.random.Generator, dtype=np.float32) -> ParameterSet:
    """Kaiming-uniform conv weights (fan-in), zero biases, identity norms.

    The forget gate starts open: +1 on the f block of the hidden branch's
    norm shift (or of the conv bias when norms are disabled), where the
    following normalization cannot erase it. Random draws happen in registry
    order, one per conv weight.
    """
    entries = []
    w = config.width
    for name, shape in _registry_shapes(config):
        if len(shape) > 1:  # conv kernels
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:  # biases and beta shifts
            data = np.zeros(shape)
        if config.cell == "lstm":
            forget = slice(w, 2 * w)
            if config.use_layer_norm and name == "cell.ln_h.beta":
                data[forget] = 1.0
            if not config.use_layer_norm and name == "cell.bh":
                data[forget] = 1.0
        entries.append((name, Tensor(data.astype(dtype), requires_grad=True, name=name)))
    return ParameterSet(entries)


# ---------------------------------------------------------------------------
# fused gate math (hand-written backward keeps per-iteration op count small)


def _sig(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _lstm_gates(pre: Tensor, c_prev: Tensor, width: int):
    """(pre, c_prev) -> (c_new, o_gate); gate order i, f, g, o along channels."""
    pd, cp = pre.data, c_prev.data
    w = width
    i = _sig(pd[:, :w])
    f = _sig(pd[:, w : 2 * w])
    g = np.tanh(pd[:, 2 * w : 3 * w])
    o = _sig(pd[:, 3 * w :])
    c = f * cp + i * g

    def bwd(gs, needs):
        gc, go = gs
        gpre = np.zeros_like(pd)
        gcp = None
        if gc is not None:
            gpre[:, :w] = gc * g * (i * (1.0 - i))
            gpre[:, w : 2 * w] = gc * cp * (f * (1.0 - f))
            gpre[:, 2 * w : 3 * w] = gc * i * (1.0 - g * g)
            if needs[1]:
                gcp = gc * f
        if go is not None:
            gpre[:, 3 * w :] = go * (o * (1.0 - o))
        if needs[1] and gcp is None:
            gcp = np.zeros_like(cp)
        return (gpre if needs[0] else None, gcp)

    return T._record("lstm_gates", (c, o), (pre, c_prev), bwd)


def _gru_mix(pre_x: Tensor, pre_h: Tensor, h_prev: Tensor, width: int) -> Tensor:
    """Gate order z, r, n; reset multiplies the hidden branch post-conv."""
    px, ph, hp = pre_x.data, pre_h.data, h_prev.data
    w = width
    z = _sig(px[:, :w] + ph[:, :w])
    r = _sig(px[:, w : 2 * w] + ph[:, w : 2 * w])
    n = np.tanh(px[:, 2 * w :] + r * ph[:, 2 * w :])
    h = (1.0 - z) * n + z * hp

    def bwd(gh, needs):
        gz = gh * (hp - n) * (z * (1.0 - z))
        gn_pre = gh * (1.0 - z) * (1.0 - n * n)
        gr = gn_pre * ph[:, 2 * w :] * (r * (1.0 - r))
        gpx = np.concatenate([gz, gr, gn_pre], axis=1)
        gph = np.concatenate([gz, gr, gn_pre * r], axis=1) if needs[1] else None
        ghp = gh * z if needs[2] else None
        return (gpx if needs[0] else None, gph, ghp)

    return T._record("gru_mix", h, (pre_x, pre_h, h_prev), bwd)


# ---------------------------------------------------------------------------
# forward


def _conv(rank: int):
    return T.conv1d_same if rank == 1 else T.conv2d_same


def _maybe_ln(config, params, x, prefix: str):
    if not config.use_layer_norm:
        return x
    return T.layer_norm_channels(
        x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], channel_axis=1
    )


def precompute_input(config: SolverConfig, params: ParameterSet, obs: Tensor) -> Tensor:
    """The input-branch work shared by every iteration, done once.

    For gated cells this is conv + norm of the (optionally projected)
    observation; each iteration then only adds the result. For the resnet
    cell it is just the projection, since that cell concatenates the raw
    observation every step.
    """
    conv = _conv(config.task_rank)
    if config.use_input_projection:
        obs = T.relu(conv(obs, params["proj.w"]))
    if config.cell == "resnet":
        return obs
    pre = conv(obs, params["cell.wx"], params["cell.bx"])
    return _maybe_ln(config, params, pre, "cell.ln_x")


def cell_step(
    config: SolverConfig,
    params: ParameterSet,
    h: Tensor,
    c: Tensor | None,
    pre_x: Tensor,
    gal_mask: Tensor | None = None,
):
    """One recurrent iteration on batched state (N, width, *space)."""
    conv = _conv(config.task_rank)
    hin = h if gal_mask is None else T.mul(h, gal_mask)
    if config.cell == "resnet":
        z = T.concat_channels([hin, pre_x], channel_axis=1)
        n_convs = max(2, config.recurrent_layers)
        for i in range(n_convs):
            z = T.relu(conv(z, params[f"cell.conv{i}.w"]))
        return T.add(h, z), None
    z = hin
    for i in range(config.recurrent_layers - 1):
        z = T.relu(conv(z, params[f"cell.stack{i}.w"]))
    pre_h = conv(z, params["cell.wh"], params["cell.bh"])
    pre_h = _maybe_ln(config, params, pre_h, "cell.ln_h")
    if config.cell == "gru":
        return _gru_mix(pre_x, pre_h, hin, config.width), None
    pre = T.add(pre_x, pre_h)
    c_new, o_gate = _lstm_gates(pre, c, config.width)
    cn = _maybe_ln(config, params, c_new, "cell.ln_c") if config.cell == "lstm" else c_new
    h_new = T.mul(o_gate, T.tanh(cn))
    return h_new, c_new


def _head(config: SolverConfig, params: ParameterSet, h: Tensor) -> Tensor:
    conv = _conv(config.task_rank)
    p = conv(T.relu(conv(T.relu(conv(h, params["head.w1"])), params["head.w2"])), params["head.w3"])
    if config.aggregation == "max":
        return T.global_max_pool(p, channel_axis=1)
    if config.aggregation == "avg":
        return T.global_avg_pool(p, channel_axis=1)
    return p


def _emit_iters(n_iters: int, emit) -> set[int]:
    if emit == "final":
        return {n_iters}
    if isinstance(emit, int) and emit >= 1:
        pts = set(range(emit, n_iters + 1, emit))
        pts.add(n_iters)
        return pts
    raise ValueError(f"emit must be 'final' or a positive stride, got {emit!r}")


def forward(
    config: SolverConfig,
    params: ParameterSet,
    obs,
    n_iters: int,
    emit="final",
    gal_mask=None,
    head_dropout_rng: np.random.Generator | None = None,
    collect_hidden: bool = False,
):
    """Run the solver for ``n_iters`` iterations from zero state.

    ``obs`` is (C, *space) for one example or (N, C, *space) for a batch.
    Returns a list of (iteration, logits Tensor) pairs at the emission
    points: the final iteration for ``emit='final'`` or every ``emit``-th
    iteration (plus the final one) for an integer stride. With
    ``collect_hidden`` the per-iteration hidden states (numpy, batched) are
    returned as a second value.

    ``gal_mask`` is a fixed tensor multiplied onto the hidden state entering
    every cell step (variational dropout); ``head_dropout_rng`` draws a
    fresh inverted-dropout mask for the head input at each emission.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    obs = T._as_tensor(obs)
    batched = obs.ndim == config.task_rank + 2
    if not batched:
        if obs.ndim != config.task_rank + 1:
            raise ValueError(f"observation rank {obs.ndim} invalid for task_rank {config.task_rank}")
        obs = T.Tensor(obs.data[None])
    n = obs.data.shape[0]
    if obs.data.shape[1] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channels, got {obs.data.shape[1]}")
    space = obs.data.shape[2:]
    dtype = obs.data.dtype

    pre_x = precompute_input(config, params, obs)
    state_shape = (n, config.width) + space
    h = T.Tensor(np.zeros(state_shape, dtype=dtype))
    c = T.Tensor(np.zeros(state_shape, dtype=dtype)) if config.cell == "lstm" else None

    emit_at = _emit_iters(n_iters, emit)
    emissions = []
    hidden = [] if collect_hidden else None
    for t in range(1, n_iters + 1):
        h, c = cell_step(config, params, h, c, pre_x, gal_mask=gal_mask)
        if collect_hidden:
            hidden.append(np.array(h.data, copy=True))
        if t in emit_at:
            head_in = h
            if head_dropout_rng is not None and config.dropout_std > 0.0:
                keep = 1.0 - config.dropout_std
                mask = (head_dropout_rng.random(h.data.shape) < keep).astype(dtype) / dtype.type(keep)
                head_in = T.mul(head_in, T.Tensor(mask))
            logits = _head(config, params, head_in)
            if not batched:
                logits = T.Tensor(logits.data[0]) if logits._tape is None else _squeeze0(logits)
            emissions.append((t, logits))
    if collect_hidden:
        return emissions, hidden
    return emissions


def _squeeze0(x: Tensor) -> Tensor:
    def bwd(g, needs):
        return (g[None],)

    return T._record("squeeze0", x.data[0], (x,), bwd)


def make_gal_mask(
    config: SolverConfig, n: int, space: tuple, rng: np.random.Generator, dtype=np.float32
) -> Tensor | None:
    """One inverted-dropout mask per example, reused across all iterations."""
    if config.dropout_gal <= 0.0:
        return None
    keep = 1.0 - config.dropout_gal
    shape = (n, config.width) + tuple(space)
    mask = (rng.random(shape) < keep).astype(dtype) / np.dtype(dtype).type(keep)
    return T.Tensor(mask)


# ---------------------------------------------------------------------------
# accounting


def count_macs(config: SolverConfig, space: tuple, n_iters: int, emissions: int = 1) -> int:
    """Multiply-accumulate count for one example.

    Counts convolution MACs only (kernel * C_in * C_out per position);
    normalization, gate arithmetic, and pooling are ignored. The input
    branch runs once, the recurrent stack ``n_iters`` times, and the head
    once per emission.
    """
    k = 3**config.task_rank
    pos = int(np.prod(space))
    w = config.width
    cin = config.in_channels
    total = 0
    if config.use_input_projection:
        total += k * cin * w * pos
        cin = w
    if config.cell == "resnet":
        n_convs = max(2, config.recurrent_layers)
        per_iter = k * (w + cin) * w * pos + (n_convs - 1) * k * w * w * pos
    else:
        gates = config.gate_channels
        total += k * cin * gates * pos  # input branch, precomputed once
        per_iter = (config.recurrent_layers - 1) * k * w * w * pos + k * w * gates * pos
    total += n_iters * per_iter
    c1, c2, out = config.head_channels
    total += emissions * k * (w * c1 + c1 * c2 + c2 * out) * pos
    return total


def propagation_diff(
    config: SolverConfig, params: ParameterSet, obs, n_iters: int
) -> np.ndarray:
    """Distance of each iteration's hidden state from the final one.

    Returns (n_iters, *space): the channel-space L2 norm of h_t - h_final,
    normalized to [0, 1] over the whole sequence (all zeros if the state
    never moves). Large values mark regions the solution has not reached
    yet; the final map is identically zero.
    """
    _, hidden = forward(config, params, obs, n_iters, emit="final", collect_hidden=True)
    final = hidden[-1]
    maps = np.stack([np.sqrt(((h - final) ** 2).sum(axis=1)) for h in hidden])  # (t, N, *sp)
    maps = maps[:, 0] if maps.shape[1] == 1 else maps
    peak = maps.max()
    if peak > 0:
        maps = maps / peak
    return maps


# ---------------------------------------------------------------------------
# checkpoints: JSON header line + raw little-endian float32 blob + CRC32


def save_checkpoint(
    path,
    config: SolverConfig,
    params: ParameterSet,
    seed: int,
    epoch: int,
    validation_accuracy: float,
) -> None:
    header = {
        "config": config.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "validation_accuracy": float(validation_accuracy),
    }
    body = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + params.to_blob()
    crc = binascii.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(crc.to_bytes(4, "little"))


def load_checkpoint(path):
    """Returns (config, params, meta). Raises on corruption or size mismatch."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 5:
        raise ValueError("checkpoint truncated")
    body, crc_stored = raw[:-4], int.from_bytes(raw[-4:], "little")
    if binascii.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ValueError("checkpoint CRC mismatch")
    nl = body.index(b"\n")
    header = json.loads(body[:nl].decode("utf-8"))
    config = SolverConfig.from_dict(header["config"])
    blob = body[nl + 1 :]
    expected = count_parameters(config) * 4
    if len(blob) != expected:
        raise ValueError(f"parameter blob is {len(blob)} bytes, config needs {expected}")
    rng = np.random.default_rng(0)  # values are overwritten immediately
    params = init_params(config, rng)
    params.load_blob(blob)
    meta = {k: header[k] for k in ("seed", "epoch", "validation_accuracy")}
    return config, params, meta
