"""From-scratch convolutional network for grid refinement.

Valid (no-padding) convolutions with ReLU after every layer, a masked
sum-of-squares loss over held-out cells, analytic gradients, and Adam.

Activations are stored channels-last (H, W, T) internally so the im2col
patch gather is a single strided copy and each convolution is one matrix
product; the public input layout is tier-first (T, H, W) to match the
[E; M] stacking convention. The gradient of the input to a layer is a full
convolution of the (dilated) pre-activation gradient with the flipped
kernel, which reuses the same im2col-times-matrix machinery.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "LayerSpec",
    "Normalizer",
    "ConvNet",
    "AdamState",
    "TrainConfig",
    "parse_structure",
    "structure_string",
    "conv_output_size",
    "output_shape",
    "total_shrink",
    "pad_input",
    "forward",
    "masked_loss",
    "masked_rmse",
    "backward",
    "adam_step",
    "train_network",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class LayerSpec:
    filter_size: int
    stride: int = 1
    tiers_out: int = 1

    def __post_init__(self):
        if self.filter_size < 1 or self.stride < 1 or self.tiers_out < 1:
            raise ValueError("filter_size, stride and tiers_out must be >= 1")


@dataclass(frozen=True)
class Normalizer:
    """Affine map between dB values and the network's working scale."""

    offset: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalizer scale must be positive")

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.offset) / self.scale

    def denormalize(self, y):
        return self.offset + self.scale * np.asarray(y, dtype=float)


def parse_structure(text: str, in_tiers: int = 2):
    """Parse a structure string like "9-1-5(64-32-1)" into LayerSpecs.

    The dashes before the parentheses are filter sizes, the ones inside are
    output tier counts; the final count must be 1. Strides are always 1 in
    this notation.
    """
    m = re.fullmatch(r"(\d+(?:-\d+)*)\((\d+(?:-\d+)*)\)", text.strip())
    if not m:
        raise ValueError(
            f"cannot parse structure {text!r}; expected e.g. '9-1-5(64-32-1)'"
        )
    filters = [int(tok) for tok in m.group(1).split("-")]
    tiers = [int(tok) for tok in m.group(2).split("-")]
    if len(filters) != len(tiers):
        raise ValueError(
            f"{text!r}: {len(filters)} filter sizes but {len(tiers)} tier counts"
        )
    if tiers[-1] != 1:
        raise ValueError(f"{text!r}: the final tier count must be 1")
    return [LayerSpec(f, 1, t) for f, t in zip(filters, tiers)]


def structure_string(layers) -> str:
    return "-".join(str(l.filter_size) for l in layers) + \
        "(" + "-".join(str(l.tiers_out) for l in layers) + ")"


def conv_output_size(c_in: int, f: int, s: int) -> int:
    """Output cells of one valid convolution: floor((c_in - f)/s) + 1."""
    if c_in < f:
        raise ValueError(f"input size {c_in} smaller than filter {f}")
    return (c_in - f) // s + 1


def output_shape(net, in_shape) -> tuple[int, int]:
    """Spatial output shape of the chained layers for a given input shape."""
    h, w = in_shape
    for idx, spec in enumerate(net.layers):
        try:
            h = conv_output_size(h, spec.filter_size, spec.stride)
            w = conv_output_size(w, spec.filter_size, spec.stride)
        except ValueError as exc:
            raise ValueError(f"layer {idx}: {exc}") from exc
    return (h, w)


def total_shrink(net) -> int:
    """Total spatial shrink sum(f_i - 1) of a stride-1 stack, per dimension."""
    if any(spec.stride != 1 for spec in net.layers):
        raise ValueError("total shrink is only defined for stride-1 stacks")
    return sum(spec.filter_size - 1 for spec in net.layers)


class ConvNet:
    """Layer stack with weight tensors (f, f, T_in, T_out) and bias vectors."""

    def __init__(self, layers, weights, biases, in_tiers: int = 2,
                 final_relu: bool = True, normalizer: Normalizer | None = None,
                 trained_shape=None):
        layers = tuple(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        if layers[-1].tiers_out != 1:
            raise ValueError("final layer must output exactly one tier")
        weights = [np.asarray(w, dtype=float) for w in weights]
        biases = [np.asarray(b, dtype=float) for b in biases]
        if len(weights) != len(layers) or len(biases) != len(layers):
            raise ValueError("need one weight tensor and bias per layer")
        t_in = in_tiers
        for idx, (spec, w, b) in enumerate(zip(layers, weights, biases)):
            want = (spec.filter_size, spec.filter_size, t_in, spec.tiers_out)
            if w.shape != want:
                raise ValueError(f"layer {idx}: weight shape {w.shape}, expected {want}")
            if b.shape != (spec.tiers_out,):
                raise ValueError(f"layer {idx}: bias shape {b.shape}, "
                                 f"expected ({spec.tiers_out},)")
            t_in = spec.tiers_out
        self.layers = layers
        self.weights = weights
        self.biases = biases
        self.in_tiers = in_tiers
        self.final_relu = final_relu
        self.normalizer = normalizer
        self.trained_shape = tuple(trained_shape) if trained_shape else None

    @classmethod
    def create(cls, layers, in_tiers: int = 2, seed=0, final_relu: bool = True):
        """Fresh network with He-style init: std sqrt(2 / (f^2 T_in)), zero bias."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        t_in = in_tiers
        for spec in layers:
            f, t_out = spec.filter_size, spec.tiers_out
            std = np.sqrt(2.0 / (f * f * t_in))
            weights.append(rng.standard_normal((f, f, t_in, t_out)) * std)
            biases.append(np.zeros(t_out))
            t_in = t_out
        return cls(layers, weights, biases, in_tiers, final_relu)

    def parameters(self):
        """Flat parameter list (weights then biases), shared references."""
        return [*self.weights, *self.biases]


def _im2col(x, f: int, s: int):
    """(H, W, T) -> patch matrix (Ho*Wo, T*f*f); column order is (t, a, b)."""
    win = sliding_window_view(x, (f, f), axis=(0, 1))
    if s > 1:
        win = win[::s, ::s]
    ho, wo = win.shape[0], win.shape[1]
    return win.reshape(ho * wo, -1), ho, wo


def _weight_matrix(w):
    f, _, t_in, t_out = w.shape
    return w.transpose(2, 0, 1, 3).reshape(t_in * f * f, t_out)


def _tier_first_to_hwt(stack):
    stack = np.asarray(stack, dtype=float)
    if stack.ndim != 3:
        raise ValueError(f"input stack must be 3-D (tiers, H, W), got {stack.shape}")
    return np.ascontiguousarray(stack.transpose(1, 2, 0))


def _run_forward(net, x, cols0=None):
    """Forward pass on channels-last input; returns (out, per-layer caches)."""
    if x.shape[2] != net.in_tiers:
        raise ValueError(f"input has {x.shape[2]} tiers, network expects {net.in_tiers}")
    last = len(net.layers) - 1
    caches = []
    for li, spec in enumerate(net.layers):
        h_in, w_in, t_in = x.shape
        if li == 0 and cols0 is not None:
            cols, ho, wo = cols0
        else:
            if h_in < spec.filter_size or w_in < spec.filter_size:
                raise ValueError(
                    f"layer {li}: input {h_in}x{w_in} smaller than "
                    f"filter {spec.filter_size}"
                )
            cols, ho, wo = _im2col(x, spec.filter_size, spec.stride)
        pre = cols @ _weight_matrix(net.weights[li]) + net.biases[li]
        post = np.maximum(pre, 0.0) if (net.final_relu or li < last) else pre
        caches.append((cols, pre, ho, wo, h_in, w_in, t_in))
        x = post.reshape(ho, wo, spec.tiers_out)
    return x[..., 0], caches


def _conv_backward_input(dpre_mat, w, spec, ho, wo, h_in, w_in, t_in):
    """Gradient w.r.t. a layer's input: full conv with the flipped kernel."""
    f, s, t_out = spec.filter_size, spec.stride, spec.tiers_out
    dpre = dpre_mat.reshape(ho, wo, t_out)
    if s > 1:
        hd, wd = (ho - 1) * s + 1, (wo - 1) * s + 1
        dil = np.zeros((hd, wd, t_out))
        dil[::s, ::s] = dpre
    else:
        hd, wd, dil = ho, wo, dpre
    pad = f - 1
    buf = np.zeros((hd + 2 * pad, wd + 2 * pad, t_out))
    buf[pad:pad + hd, pad:pad + wd] = dil
    cols, bh, bw = _im2col(buf, f, 1)
    kernel = w[::-1, ::-1].transpose(3, 0, 1, 2).reshape(t_out * f * f, t_in)
    core = (cols @ kernel).reshape(bh, bw, t_in)
    if bh == h_in and bw == w_in:
        return core
    # stride clipped trailing rows/cols in the forward pass; they get zero grad
    dx = np.zeros((h_in, w_in, t_in))
    dx[:bh, :bw] = core
    return dx


def _run_backward(net, caches, dout):
    """Backprop from d(loss)/d(output); returns (weight grads, bias grads)."""
    last = len(net.layers) - 1
    dpost = dout.reshape(-1, 1)
    dws: list = [None] * len(net.layers)
    dbs: list = [None] * len(net.layers)
    for li in range(last, -1, -1):
        spec = net.layers[li]
        cols, pre, ho, wo, h_in, w_in, t_in = caches[li]
        relu = net.final_relu or li < last
        dpre = dpost * (pre > 0) if relu else dpost
        f, t_out = spec.filter_size, spec.tiers_out
        dws[li] = (cols.T @ dpre).reshape(t_in, f, f, t_out).transpose(1, 2, 0, 3)
        dbs[li] = dpre.sum(axis=0)
        if li > 0:
            dx = _conv_backward_input(dpre, net.weights[li], spec,
                                      ho, wo, h_in, w_in, t_in)
            dpost = dx.reshape(h_in * w_in, t_in)
    return dws, dbs


def forward(net: ConvNet, stack) -> np.ndarray:
    """Run the network on a tier-first (T, H, W) stack; returns the
    single-tier output matrix."""
    out, _ = _run_forward(net, _tier_first_to_hwt(stack))
    return out


def masked_loss(output, truth, label_mask) -> float:
    """Squared error summed over label_mask==1 cells."""
    output = np.asarray(output, dtype=float)
    truth = np.asarray(truth, dtype=float)
    label_mask = np.asarray(label_mask, dtype=float)
    if output.shape != truth.shape or output.shape != label_mask.shape:
        raise ValueError(
            f"shape mismatch: output {output.shape}, truth {truth.shape}, "
            f"label mask {label_mask.shape}"
        )
    diff = (output - truth) * label_mask
    return float((diff * diff).sum())


def masked_rmse(output, truth, label_mask) -> float:
    """Root mean squared error over the label cells."""
    n = float(np.asarray(label_mask, dtype=float).sum())
    if n == 0:
        raise ValueError("label mask selects no cells")
    return float(np.sqrt(masked_loss(output, truth, label_mask) / n))


def _loss_and_grads(net, x, truth, label_mask, out_transform, cols0=None):
    out, caches = _run_forward(net, x, cols0)
    if out.shape != truth.shape:
        raise ValueError(
            f"network output {out.shape} does not align with truth "
            f"{truth.shape}; pad the input to compensate the shrink"
        )
    scale = 1.0
    out_cmp = out
    if out_transform is not None:
        out_cmp = out_transform.denormalize(out)
        scale = out_transform.scale
    diff = (out_cmp - truth) * label_mask
    loss = float((diff * diff).sum())
    dws, dbs = _run_backward(net, caches, 2.0 * scale * diff)
    return loss, dws, dbs, out_cmp


def backward(net: ConvNet, stack, truth, label_mask, out_transform=None):
    """Analytic gradient of the masked loss w.r.t. every weight and bias.

    With out_transform given, the output is mapped through it (back to dB)
    before the loss; gradients account for the scaling. Returns
    (weight_grads, bias_grads) matching net.weights / net.biases shapes.
    """
    truth = np.asarray(truth, dtype=float)
    label_mask = np.asarray(label_mask, dtype=float)
    _, dws, dbs, _ = _loss_and_grads(
        net, _tier_first_to_hwt(stack), truth, label_mask, out_transform
    )
    return dws, dbs


def pad_input(values, mask, net: ConvNet):
    """Build the padded two-tier input stack [E; M], tier-first.

    Pads by half the total shrink per side (extra cell on the high side when
    odd) so the network output realigns with the original H x W grid: edge
    replication for the value tier, zeros for the mask tier.
    """
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=float)
    if values.shape != mask.shape:
        raise ValueError("values and mask must share a shape")
    shrink = total_shrink(net)
    lo = shrink // 2
    hi = shrink - lo
    v = np.pad(values, ((lo, hi), (lo, hi)), mode="edge")
    m = np.pad(mask, ((lo, hi), (lo, hi)), mode="constant")
    return np.stack([v, m])


@dataclass
class AdamState:
    """Adam accumulators; `step` counts completed updates."""

    step: int
    m: list
    v: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params, lr: float = 1e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8):
        return cls(0, [np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], lr, beta1, beta2, eps)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update, applied to the arrays in place.

    Returns (params, state) for chaining; both are the mutated inputs.
    """
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("params/grads do not match the optimizer state")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    iterations: int = 200_000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


def train_network(net: ConvNet, stack, truth, label_mask,
                  cfg: TrainConfig) -> np.ndarray:
    """Full-batch Adam training of the masked loss; mutates `net`.

    `stack` is the padded tier-first input (constant across iterations, so
    the first layer's patch matrix is gathered once). `truth` and
    `label_mask` are H x W in dB. Returns the loss log as an (n, 2) array
    of (iteration, masked RMSE on the label cells), sampled every
    cfg.log_every iterations before the corresponding update.
    """
    x = _tier_first_to_hwt(stack)
    truth = np.asarray(truth, dtype=float)
    label_mask = np.asarray(label_mask, dtype=float)
    n_label = float(label_mask.sum())
    if n_label == 0:
        raise ValueError("label mask selects no cells")

    first = net.layers[0]
    cols0 = _im2col(x, first.filter_size, first.stride)
    params = net.parameters()
    state = AdamState.create(params, lr=cfg.lr, beta1=cfg.beta1,
                             beta2=cfg.beta2, eps=cfg.eps)
    log = []
    for it in range(cfg.iterations):
        loss, dws, dbs, _ = _loss_and_grads(
            net, x, truth, label_mask, net.normalizer, cols0
        )
        if it % cfg.log_every == 0:
            log.append((float(it), float(np.sqrt(loss / n_label))))
        adam_step(state, params, [*dws, *dbs])
    net.trained_shape = truth.shape
    return np.array(log)


def save_model(path, net: ConvNet) -> None:
    """Serialize layer specs, parameters and the normalization map."""
    meta = {
        "version": 1,
        "layers": [
            [s.filter_size, s.stride, s.tiers_out] for s in net.layers
        ],
        "in_tiers": net.in_tiers,
        "final_relu": bool(net.final_relu),
        "normalizer": (
            [net.normalizer.offset, net.normalizer.scale]
            if net.normalizer else None
        ),
        "trained_shape": list(net.trained_shape) if net.trained_shape else None,
    }
    arrays = {f"w{i}": w for i, w in enumerate(net.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(net.biases)})
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_model(path) -> ConvNet:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != 1:
            raise ValueError(f"unsupported model version {meta.get('version')!r}")
        layers = [LayerSpec(f, s, t) for f, s, t in meta["layers"]]
        weights = [data[f"w{i}"] for i in range(len(layers))]
        biases = [data[f"b{i}"] for i in range(len(layers))]
    normalizer = None
    if meta["normalizer"] is not None:
        normalizer = Normalizer(*meta["normalizer"])
    return ConvNet(layers, weights, biases, meta["in_tiers"],
                   meta["final_relu"], normalizer, meta["trained_shape"])
