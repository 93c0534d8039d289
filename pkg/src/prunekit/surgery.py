"""Structural pruning surgery: apply a keep/remove action vector to one conv
layer of a ModelGraph, deleting the removed filters and slicing every
downstream consumer so the new, smaller network computes the same function as
zero-masking those filters would.

Also home to the redundancy-planting helpers used to construct networks with
provably removable capacity (exact duplicate filters, or dead all-zero
filters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Conv2D, Dense, Flatten, MaxPool2, ModelGraph, ReLU, ResidualBlock


class SurgeryError(Exception):
    pass


@dataclass
class ActionVector:
    """Per-filter keep(1)/remove(0) decisions for one conv site, together
    with the log-probability of the draw under the generating policy."""
    layer_index: int
    bits: np.ndarray
    log_prob: float = 0.0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64)
        if self.bits.ndim != 1 or self.bits.size == 0:
            raise SurgeryError(f"action bits must be a non-empty vector, got shape {self.bits.shape}")
        if not np.isin(self.bits, (0, 1)).all():
            raise SurgeryError("action bits must be 0 or 1")
        if not self.bits.any():
            raise SurgeryError("all-zero action: at least one filter must be kept")

    def __len__(self):
        return self.bits.size


def kept_count(action: ActionVector) -> int:
    return int(action.bits.sum())


# ---------------------------------------------------------------------------
# consumer walk
# ---------------------------------------------------------------------------

def _consumer_refs(model: ModelGraph, layer_pos: int):
    """Weight layers that read the channel dimension produced by the
    top-level layer at layer_pos. Returns ("conv", layer) for a conv,
    ("dense", layer, h*w) for the FC head after flatten, or
    ("block", block) for a residual block with a projection shortcut.
    Raises SurgeryError when the channels feed an identity-skip block, whose
    input and output channel counts are tied together."""
    shapes = [model.input_shape] + model.shapes()
    for j in range(layer_pos + 1, len(model.layers)):
        layer = model.layers[j]
        if isinstance(layer, (ReLU, MaxPool2, Flatten)):
            continue
        if isinstance(layer, Conv2D):
            return ("conv", layer)
        if isinstance(layer, Dense):
            c, h, w = shapes[j - 1] if len(shapes[j - 1]) == 3 else (None, None, None)
            if c is None:
                raise SurgeryError("dense consumer without a conv-shaped input")
            return ("dense", layer, h * w)
        if isinstance(layer, ResidualBlock):
            if layer.shortcut is None:
                raise SurgeryError(
                    "cannot change the channel count feeding an identity-skip residual block")
            return ("block", layer)
        raise SurgeryError(f"unknown consumer layer {type(layer).__name__}")
    raise SurgeryError("no downstream consumer reads this layer's channels")


def _slice_in_channels(ref, keep: np.ndarray):
    kind = ref[0]
    if kind == "conv":
        conv = ref[1]
        conv.weight.data = conv.weight.data[:, keep].copy()
    elif kind == "dense":
        dense, hw = ref[1], ref[2]
        cols = (keep[:, None] * hw + np.arange(hw)[None, :]).ravel()
        dense.weight.data = dense.weight.data[:, cols].copy()
    else:
        block = ref[1]
        block.conv1.weight.data = block.conv1.weight.data[:, keep].copy()
        block.shortcut.weight.data = block.shortcut.weight.data[:, keep].copy()


def _copy_in_channels(ref, src: np.ndarray, dst: np.ndarray):
    kind = ref[0]
    if kind == "conv":
        conv = ref[1]
        conv.weight.data[:, dst] = conv.weight.data[:, src]
    elif kind == "dense":
        dense, hw = ref[1], ref[2]
        scols = (src[:, None] * hw + np.arange(hw)[None, :]).ravel()
        dcols = (dst[:, None] * hw + np.arange(hw)[None, :]).ravel()
        dense.weight.data[:, dcols] = dense.weight.data[:, scols]
    else:
        block = ref[1]
        block.conv1.weight.data[:, dst] = block.conv1.weight.data[:, src]
        block.shortcut.weight.data[:, dst] = block.shortcut.weight.data[:, src]


def _slice_out_filters(conv: Conv2D, keep: np.ndarray):
    conv.weight.data = conv.weight.data[keep].copy()
    conv.bias.data = conv.bias.data[keep].copy()


# ---------------------------------------------------------------------------
# surgery
# ---------------------------------------------------------------------------

def apply_action(model: ModelGraph, action: ActionVector) -> ModelGraph:
    """New independent model keeping exactly the filters with bit 1 at the
    addressed conv site (order preserved); the source model is untouched."""
    sites = model.conv_sites()
    if not 0 <= action.layer_index < len(sites):
        raise SurgeryError(f"layer index {action.layer_index} out of range (have {len(sites)} conv sites)")
    if len(action) != sites[action.layer_index].n_filters:
        raise SurgeryError(
            f"action length {len(action)} != {sites[action.layer_index].n_filters} filters at site {action.layer_index}")
    if not sites[action.layer_index].prunable:
        raise SurgeryError(f"conv site {action.layer_index} ({sites[action.layer_index].name}) is not prunable")

    new = model.clone()
    site = new.conv_sites()[action.layer_index]
    keep = np.flatnonzero(action.bits)

    if site.kind == "block_conv1":
        _slice_out_filters(site.conv, keep)
        site.block.conv2.weight.data = site.block.conv2.weight.data[:, keep].copy()
    elif site.kind == "block_conv2":
        # coupled action: the block's residual branch and projection shortcut
        # change output channels together
        ref = _consumer_refs(new, site.layer_pos)   # resolve before any slicing
        _slice_out_filters(site.conv, keep)
        _slice_out_filters(site.block.shortcut, keep)
        _slice_in_channels(ref, keep)
    else:
        ref = _consumer_refs(new, site.layer_pos)
        _slice_out_filters(site.conv, keep)
        _slice_in_channels(ref, keep)

    for _, p in new.parameters():
        p.grad = np.zeros_like(p.data)
    new.validate()
    return new


def zero_masked_clone(model: ModelGraph, action: ActionVector) -> ModelGraph:
    """Same-architecture clone with the removed filters' weights and biases
    zeroed out instead of deleted. Reference point for surgery equivalence:
    a zeroed filter emits an all-zero activation map, which every linear
    consumer multiplies by weights and discards."""
    sites = model.conv_sites()
    site_tpl = sites[action.layer_index]
    if len(action) != site_tpl.n_filters:
        raise SurgeryError(f"action length {len(action)} != {site_tpl.n_filters}")
    new = model.clone()
    site = new.conv_sites()[action.layer_index]
    drop = np.flatnonzero(action.bits == 0)
    site.conv.weight.data[drop] = 0.0
    site.conv.bias.data[drop] = 0.0
    if site.kind == "block_conv2":
        site.block.shortcut.weight.data[drop] = 0.0
        site.block.shortcut.bias.data[drop] = 0.0
    return new


# ---------------------------------------------------------------------------
# redundancy planting
# ---------------------------------------------------------------------------

def plant_duplicate_filters(model: ModelGraph, fraction: float = 0.5) -> dict:
    """At each prunable conv site, overwrite the last ceil-free int(N*fraction)
    filters with exact copies of the first ones, and mirror the copy on every
    consumer's input slices. Done at init, gradient symmetry keeps each
    duplicate pair bit-identical through training, so the planted capacity
    stays removable. Returns {site_index: number of duplicates}."""
    if not 0.0 < fraction < 1.0:
        raise SurgeryError(f"fraction must be in (0, 1), got {fraction}")
    planted = {}
    for site in model.prunable_sites():
        n = site.n_filters
        d = int(n * fraction)
        if d < 1 or d >= n:
            continue
        src = np.arange(d)
        dst = np.arange(n - d, n)
        site.conv.weight.data[dst] = site.conv.weight.data[src]
        site.conv.bias.data[dst] = site.conv.bias.data[src]
        if site.kind == "block_conv1":
            block = site.block
            block.conv2.weight.data[:, dst] = block.conv2.weight.data[:, src]
        else:
            try:
                ref = _consumer_refs(model, site.layer_pos)
            except SurgeryError:
                continue
            _copy_in_channels(ref, src, dst)
        planted[site.index] = d
    return planted


def plant_zero_filters(model: ModelGraph, site_index: int, keep_index: int = 0):
    """Zero every filter of one conv site except keep_index. Zeroed filters
    emit all-zero maps, so removing them later is function-preserving."""
    site = model.conv_sites()[site_index]
    mask = np.ones(site.n_filters, dtype=bool)
    mask[keep_index] = False
    site.conv.weight.data[mask] = 0.0
    site.conv.bias.data[mask] = 0.0
