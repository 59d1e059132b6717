"""Learnable implicit fields sharing one MLP backbone.

The backbone lifts a 3D point with a sinusoidal encoding and feeds a
per-point feature to three consumers: an affine SDF head, an affine RGB head
(squashed to ``[0, 1]``), and an LSTM cell that predicts ray-marching steps.
Gradients come from torch autograd; :class:`Tape` and :func:`backward` wrap it
so callers get gradients keyed by parameter name.
"""

from __future__ import annotations

import contextlib
import io
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

MAGIC = b"SDFSRN01"
LN_EPS = 1e-5


def positional_encode(x, L: int = 6):
    """Per coordinate ``[p, cos(2^0 p), sin(2^0 p), ..., cos(2^(L-1) p), sin(2^(L-1) p)]``."""
    if L < 0:
        raise ValueError("L must be non-negative")
    as_numpy = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64)) if as_numpy else x
    parts = [xt.unsqueeze(-1)]
    for k in range(L):
        s = (2.0**k) * xt
        parts += [torch.cos(s).unsqueeze(-1), torch.sin(s).unsqueeze(-1)]
    out = torch.cat(parts, dim=-1).flatten(-2)
    return out.numpy() if as_numpy else out


def encoding_column_scale(L: int) -> torch.Tensor:
    """Init multiplier per encoding column: 1 for raw coordinates, 2^-k for level k."""
    per_coord = [1.0] + [2.0**-k for k in range(L) for _ in (0, 1)]
    return torch.tensor(per_coord * 3)


def param_count(width: int = 128, depth: int = 4, enc_levels: int = 6, hidden: int = 32) -> int:
    enc = 3 * (1 + 2 * enc_levels)
    backbone = (enc * width + width) + (depth - 1) * ((width + enc) * width + width)
    norms = depth * 2 * width
    heads = (width + 1) + (3 * width + 3)
    lstm = 4 * hidden * (width + hidden) + 2 * 4 * hidden
    return backbone + norms + heads + lstm + hidden + 1


@dataclass
class CellState:
    hidden: torch.Tensor
    cell: torch.Tensor


class FieldNet(nn.Module):
    """Shared backbone with SDF, RGB and ray-step heads.

    The encoded input enters the first layer and is concatenated again to the
    inputs of every later layer; each layer is followed by layer norm and ReLU.
    """

    def __init__(self, width: int = 128, depth: int = 4, enc_levels: int = 6, hidden: int = 32, seed: int | None = 0):
        super().__init__()
        self.width, self.depth, self.enc_levels, self.hidden = width, depth, enc_levels, hidden
        enc = self.enc_dim
        gen = torch.random.fork_rng() if seed is not None else contextlib.nullcontext()
        with gen:
            if seed is not None:
                torch.manual_seed(seed)
            self.layers = nn.ModuleList(
                [nn.Linear(enc, width)] + [nn.Linear(width + enc, width) for _ in range(depth - 1)]
            )
            self.norms = nn.ModuleList([nn.LayerNorm(width, eps=LN_EPS) for _ in range(depth)])
            self.sdf_head = nn.Linear(width, 1)
            self.rgb_head = nn.Linear(width, 3)
            self.cell = nn.LSTMCell(width, hidden)
            self.step_head = nn.Linear(hidden, 1)
        with torch.no_grad():
            # columns fed by encoding level k start at 2^-k of fan-in scale, so every
            # level contributes comparably to the initial spatial gradient
            scale = encoding_column_scale(enc_levels)
            self.layers[0].weight.mul_(scale)
            for layer in self.layers[1:]:
                layer.weight[:, width:].mul_(scale)
            # forget-gate biases (second quarter in torch's i, f, g, o layout)
            self.cell.bias_ih[hidden : 2 * hidden].fill_(1.0)
            self.cell.bias_hh[hidden : 2 * hidden].fill_(0.0)

    @property
    def enc_dim(self) -> int:
        return 3 * (1 + 2 * self.enc_levels)

    @property
    def dtype(self) -> torch.dtype:
        return self.sdf_head.weight.dtype

    def arch(self) -> dict:
        return {"width": self.width, "depth": self.depth, "enc_levels": self.enc_levels, "hidden": self.hidden}

    def features(self, x: torch.Tensor) -> torch.Tensor:
        enc = positional_encode(x, self.enc_levels)
        h = enc
        for i, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            if i > 0:
                h = torch.cat([h, enc], dim=-1)
            h = torch.relu(norm(layer(h)))
        return h

    def sdf_from_features(self, feat: torch.Tensor) -> torch.Tensor:
        return self.sdf_head(feat).squeeze(-1)

    def rgb_from_features(self, feat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.rgb_head(feat))

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self.sdf_from_features(self.features(x))

    def rgb(self, x: torch.Tensor) -> torch.Tensor:
        return self.rgb_from_features(self.features(x))

    def zero_state(self, batch: int) -> CellState:
        z = torch.zeros(batch, self.hidden, dtype=self.dtype)
        return CellState(z, z.clone())

    def step(self, state: CellState, feat: torch.Tensor) -> tuple[CellState, torch.Tensor]:
        """One recurrent update; returns the new state and a non-negative step."""
        h, c = self.cell(feat, (state.hidden, state.cell))
        return CellState(h, c), torch.abs(self.step_head(h).squeeze(-1))

    def forward(self, x):
        return self.sdf(x)


def _as_tensor(net: nn.Module, x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=next(net.parameters()).dtype)


def eval_sdf(net: FieldNet, x) -> np.ndarray:
    with torch.no_grad():
        return net.sdf(_as_tensor(net, x)).numpy()


def eval_rgb(net: FieldNet, x) -> np.ndarray:
    with torch.no_grad():
        return net.rgb(_as_tensor(net, x)).numpy()


def grad_sdf(field, x, create_graph: bool = False) -> torch.Tensor:
    """Spatial gradient of ``field.sdf`` at ``x`` (torch tensor in, tensor out)."""
    x = x.detach().requires_grad_(True) if not x.requires_grad else x
    with torch.enable_grad():
        f = field.sdf(x)
        (g,) = torch.autograd.grad(f.sum(), x, create_graph=create_graph)
    return g


def step_cell(net: FieldNet, state: CellState, feature: torch.Tensor):
    return net.step(state, feature)


class Tape:
    """Holds the scalar loss of one forward evaluation until :func:`backward`."""

    def __init__(self):
        self.loss: torch.Tensor | None = None

    def record(self, loss: torch.Tensor) -> torch.Tensor:
        if loss.dim() != 0:
            raise ValueError("tape records a scalar loss")
        self.loss = loss
        return loss


def backward(tape: Tape, net: nn.Module) -> dict[str, torch.Tensor]:
    """Gradients of the recorded loss for every named parameter (exact zeros if unused)."""
    if tape.loss is None:
        raise RuntimeError("backward called before a loss was recorded")
    names, params = zip(*net.named_parameters())
    if tape.loss.requires_grad:
        grads = torch.autograd.grad(tape.loss, params, allow_unused=True)
    else:
        grads = (None,) * len(params)
    tape.loss = None
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


def pretrain_sphere(
    net: FieldNet,
    radius: float = 0.5,
    iters: int = 2000,
    points: int = 10_000,
    seed: int = 0,
    lr: float = 1e-3,
    final_lr: float | None = None,
    log_every: int = 0,
) -> FieldNet:
    """Regress ``f(x) = ||x|| - radius`` on uniform samples of ``[-1, 1]^3``.

    Returns ``net`` (updated in place); ``net.pretrain_mse`` holds the loss of
    the final iteration.
    """
    from .optim import Adam

    if radius <= 0:
        raise ValueError("radius must be positive")
    gen = torch.Generator().manual_seed(seed)
    opt = Adam(lr=lr)
    params = dict(net.named_parameters())
    mse = float("nan")
    for it in range(iters):
        x = torch.rand(points, 3, generator=gen, dtype=net.dtype) * 2.0 - 1.0
        target = torch.linalg.norm(x, dim=-1) - radius
        loss = torch.mean((net.sdf(x) - target) ** 2)
        mse = float(loss.detach())
        if not np.isfinite(mse):
            raise FloatingPointError(f"sphere pretraining diverged at iteration {it} (loss={mse})")
        if final_lr is not None:
            opt.lr = lr * (final_lr / lr) ** (it / max(iters - 1, 1))
        tape = Tape()
        tape.record(loss)
        opt.step(params, backward(tape, net))
        if log_every and it % log_every == 0:
            log.info("pretrain %d mse %.3e", it, mse)
    net.pretrain_mse = mse
    return net


def save_checkpoint(net: FieldNet, path):
    state = net.state_dict()
    blob = io.BytesIO()
    layout = []
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        layout.append([name, list(arr.shape)])
        blob.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    dtype = "float64" if net.dtype == torch.float64 else "float32"
    header = json.dumps(
        {"arch": net.arch(), "dtype": dtype, "byte_length": blob.tell(), "tensors": layout}, sort_keys=True
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(blob.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> FieldNet:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a field checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    body = raw[12 + hlen :]
    if len(body) != header["byte_length"]:
        raise CheckpointError(f"{path}: expected {header['byte_length']} parameter bytes, found {len(body)}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    net = FieldNet(**header["arch"], seed=None)
    if header["dtype"] == "float64":
        net = net.double()
    state = {}
    offset = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype=dtype, count=n, offset=offset).reshape(shape)
        offset += n * dtype.itemsize
        state[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("=")))
    net.load_state_dict(state)
    return net
