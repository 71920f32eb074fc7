"""Small feed-forward networks with hand-written reverse mode.

Layers are dense, conv2d (via im2col), relu and flatten; the head is always a
fused softmax cross-entropy.  Parameters live in an ordered ``dict`` on the
:class:`Network` keyed ``"<layer index>.W"`` / ``"<layer index>.b"``.

Dense weights have shape ``(out, in)``; conv kernels ``(out_ch, in_ch, kh, kw)``.
Batches are arrays of shape ``(B, *input_shape)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels

JACOBIAN_MAX_ENTRIES = 10**6
# Minibatch gradients are summed over blocks of this many samples, in order.
ACCUM_GRAIN = 64


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "conv2d" | "relu" | "flatten"
    out_dim: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)  # (kh, kw)
    stride: int = 1
    padding: int = 0
    # Filled in when the network is built.
    in_dim: int = 0
    in_channels: int = 0

    def describe(self) -> str:
        if self.kind == "dense":
            return f"dense:{self.out_dim}"
        if self.kind == "conv2d":
            kh, kw = self.kernel
            return f"conv2d:{self.out_channels}:{kh}x{kw}:{self.stride}:{self.padding}"
        return self.kind


def parse_layers(text: str) -> list[LayerSpec]:
    """Parse ``"conv2d:8:3x3:1:1,relu,flatten,dense:10"`` into layer specs.

    conv2d fields are ``out_channels:kernel[:stride[:padding]]``; the kernel is
    ``k`` or ``khxkw``.
    """
    layers = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        name, *args = tok.split(":")
        try:
            if name == "dense" and len(args) == 1:
                layers.append(LayerSpec("dense", out_dim=int(args[0])))
            elif name == "conv2d" and 2 <= len(args) <= 4:
                ks = args[1].lower().split("x")
                kh, kw = (int(ks[0]), int(ks[-1]))
                stride = int(args[2]) if len(args) > 2 else 1
                pad = int(args[3]) if len(args) > 3 else 0
                layers.append(LayerSpec("conv2d", out_channels=int(args[0]), kernel=(kh, kw), stride=stride, padding=pad))
            elif name in ("relu", "flatten") and not args:
                layers.append(LayerSpec(name))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"bad layer token {tok!r}") from None
    if not layers:
        raise ValueError("empty layer list")
    return layers


def format_layers(layers) -> str:
    return ",".join(l.describe() for l in layers)


@dataclass
class GradientBundle:
    param_grads: dict[str, np.ndarray]
    input_grad: np.ndarray
    loss: float
    penalty: float = 0.0


@dataclass
class Network:
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    shapes: list[tuple[int, ...]] = field(default_factory=list)  # output shape of each layer

    def __post_init__(self):
        self.layers, self.shapes = _resolve(tuple(self.input_shape), self.layers)
        expected = _param_shapes(self.layers)
        if list(expected) != list(self.params):
            raise ShapeError(f"parameter names {list(self.params)} do not match architecture {list(expected)}")
        for name, shp in expected.items():
            p = np.ascontiguousarray(self.params[name], dtype=np.float64)
            if p.shape != shp:
                raise ShapeError(f"parameter {name} has shape {p.shape}, expected {shp}")
            self.params[name] = p

    @property
    def num_classes(self) -> int:
        return int(np.prod(self.shapes[-1]))

    @property
    def weight_names(self) -> list[str]:
        return [f"{i}.W" for i, l in enumerate(self.layers) if l.kind in ("dense", "conv2d")]

    def layer_of(self, name: str) -> LayerSpec:
        return self.layers[int(name.split(".")[0])]

    def copy(self) -> "Network":
        return Network(self.input_shape, list(self.layers), {k: v.copy() for k, v in self.params.items()})

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat(self, theta: np.ndarray) -> None:
        off = 0
        for name, p in self.params.items():
            self.params[name] = np.asarray(theta[off : off + p.size], dtype=np.float64).reshape(p.shape).copy()
            off += p.size
        if off != theta.size:
            raise ShapeError(f"flat vector has {theta.size} entries, network has {off}")

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self.params])


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _resolve(input_shape, layers):
    resolved, shapes = [], []
    shape = input_shape
    for i, l in enumerate(layers):
        if l.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"layer {i} (dense) needs a flat input, got shape {shape}; add a flatten layer")
            if l.out_dim < 1:
                raise ShapeError(f"layer {i} (dense) has out_dim {l.out_dim}")
            l = replace(l, in_dim=shape[0])
            shape = (l.out_dim,)
        elif l.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"layer {i} (conv2d) needs a (C, H, W) input, got shape {shape}")
            kh, kw = l.kernel
            if min(l.out_channels, kh, kw, l.stride) < 1 or l.padding < 0:
                raise ShapeError(f"layer {i} (conv2d) has non-positive dimensions")
            oh = _conv_out(shape[1], kh, l.stride, l.padding)
            ow = _conv_out(shape[2], kw, l.stride, l.padding)
            if oh < 1 or ow < 1:
                raise ShapeError(f"layer {i} (conv2d) output would be empty for input {shape}")
            l = replace(l, in_channels=shape[0])
            shape = (l.out_channels, oh, ow)
        elif l.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif l.kind != "relu":
            raise ShapeError(f"layer {i} has unknown kind {l.kind!r}")
        resolved.append(l)
        shapes.append(shape)
    if len(shapes[-1]) != 1:
        raise ShapeError(f"network output must be flat, got shape {shapes[-1]}")
    return resolved, shapes


def _param_shapes(layers) -> dict[str, tuple[int, ...]]:
    out = {}
    for i, l in enumerate(layers):
        if l.kind == "dense":
            out[f"{i}.W"] = (l.out_dim, l.in_dim)
            out[f"{i}.b"] = (l.out_dim,)
        elif l.kind == "conv2d":
            out[f"{i}.W"] = (l.out_channels, l.in_channels, *l.kernel)
            out[f"{i}.b"] = (l.out_channels,)
    return out


def init_network(input_shape, layers, rng: np.random.Generator) -> Network:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    if isinstance(layers, str):
        layers = parse_layers(layers)
    input_shape = tuple(int(s) for s in input_shape)
    resolved, _ = _resolve(input_shape, layers)
    params = {}
    for name, shp in _param_shapes(resolved).items():
        if name.endswith(".W"):
            fan_in = int(np.prod(shp[1:]))
            params[name] = rng.standard_normal(shp) * np.sqrt(2.0 / fan_in)
        else:
            params[name] = np.zeros(shp)
    return Network(input_shape, layers, params)


# ---------------------------------------------------------------------------
# kernel matricization
# ---------------------------------------------------------------------------


def kernel_as_matrix(kernel: np.ndarray) -> np.ndarray:
    """(b, a, kh, kw) kernel -> (b, a*kh*kw) matrix, rows = output channels.

    Columns run channel-major, then kernel row, then kernel column, which is
    exactly the im2col patch layout, so this matrix is the one multiplied in
    the forward pass.  Dense weights pass through unchanged.
    """
    kernel = np.asarray(kernel)
    if kernel.ndim == 2:
        return kernel
    return kernel.reshape(kernel.shape[0], -1)


def matrix_as_kernel(mat: np.ndarray, kernel_shape) -> np.ndarray:
    return np.asarray(mat).reshape(kernel_shape)


def weight_matrix(net: Network, name: str) -> np.ndarray:
    """The 2-D matrix spectral operations see for weight ``name``."""
    return kernel_as_matrix(net.params[name])


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def forward(net: Network, x: np.ndarray):
    """Return ``(logits, cache)``; ``cache`` holds what :func:`backward` needs."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"layer 0: input has shape {x.shape[1:]}, network expects {net.input_shape}")
    cache = []
    h = x
    for i, l in enumerate(net.layers):
        if l.kind == "dense":
            cache.append(h)
            h = h @ net.params[f"{i}.W"].T + net.params[f"{i}.b"]
        elif l.kind == "relu":
            mask = h > 0
            cache.append(mask)
            h = h * mask
        elif l.kind == "flatten":
            cache.append(h.shape)
            h = h.reshape(h.shape[0], -1)
        else:
            h, c = _conv_forward(h, net.params[f"{i}.W"], net.params[f"{i}.b"], l)
            cache.append(c)
    return h, cache


def backward(net: Network, cache, dout: np.ndarray):
    """Propagate ``dout`` (gradient w.r.t. logits) back; returns ``(param_grads, dx)``."""
    grads = {}
    d = dout
    for i in range(len(net.layers) - 1, -1, -1):
        l, c = net.layers[i], cache[i]
        if l.kind == "dense":
            W = net.params[f"{i}.W"]
            grads[f"{i}.W"] = d.T @ c
            grads[f"{i}.b"] = d.sum(axis=0)
            d = d @ W
        elif l.kind == "relu":
            d = d * c
        elif l.kind == "flatten":
            d = d.reshape(c)
        else:
            d, gW, gb = _conv_backward(d, net.params[f"{i}.W"], l, c)
            grads[f"{i}.W"] = gW
            grads[f"{i}.b"] = gb
    return {k: grads[k] for k in net.params}, d


def _conv_forward(x, K, b, l: LayerSpec):
    B, C, H, W = x.shape
    kh, kw = l.kernel
    p, s = l.padding, l.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)
    oh, ow = _conv_out(H, kh, s, p), _conv_out(W, kw, s, p)
    cols = _kernels.im2col(xp, kh, kw, s, oh, ow)
    out = cols @ kernel_as_matrix(K).T + b
    out = out.reshape(B, oh, ow, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, xp.shape, oh, ow)


def _conv_backward(d, K, l: LayerSpec, c):
    cols, (B, C, Hp, Wp), oh, ow = c
    kh, kw = l.kernel
    p = l.padding
    D = d.transpose(0, 2, 3, 1).reshape(B * oh * ow, -1)
    gW = (D.T @ cols).reshape(K.shape)
    gb = D.sum(axis=0)
    dcols = np.ascontiguousarray(D @ kernel_as_matrix(K))
    dxp = _kernels.col2im(dcols, B, C, Hp, Wp, kh, kw, l.stride, oh, ow)
    dx = dxp[:, :, p : Hp - p, p : Wp - p] if p else dxp
    return np.ascontiguousarray(dx), gW, gb


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Per-sample cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(len(labels))
    losses = lse - z[idx, labels]
    probs = np.exp(z - lse[:, None])
    probs[idx, labels] -= 1.0
    return losses, probs


def _check_labels(net, x, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    if len(labels) != len(x):
        raise ShapeError(f"{len(x)} inputs but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    return labels.astype(np.int64, copy=False)


def _summed_loss_and_grad(net: Network, x, labels) -> GradientBundle:
    x = np.asarray(x, dtype=np.float64)
    labels = _check_labels(net, x, labels)
    logits, cache = forward(net, x)
    losses, dlogits = softmax_xent(logits, labels)
    grads, dx = backward(net, cache, dlogits)
    return GradientBundle(param_grads=grads, input_grad=dx, loss=float(losses.sum()))


def loss_and_grad(net: Network, x, labels, reduction: str = "mean") -> GradientBundle:
    """Cross-entropy and exact gradients w.r.t. parameters and inputs.

    With ``reduction="sum"`` the loss and all gradients are of the summed loss
    from one pass, so ``input_grad[i]`` is exactly the per-sample gradient of
    sample i.  ``"mean"`` is the same as :func:`loss_and_grad_chunked` with a
    single chunk.
    """
    if reduction == "mean":
        return loss_and_grad_chunked(net, x, labels)
    if reduction == "sum":
        return _summed_loss_and_grad(net, x, labels)
    raise ValueError(f"unknown reduction {reduction!r}")


class _Accumulator:
    """Running sums of per-block loss and gradients, added strictly left to right."""

    def __init__(self):
        self.grads = None
        self.loss = 0.0
        self.dx = []

    def add_blocks(self, net: Network, x, labels):
        for i in range(0, len(labels), ACCUM_GRAIN):
            b = _summed_loss_and_grad(net, x[i : i + ACCUM_GRAIN], labels[i : i + ACCUM_GRAIN])
            if self.grads is None:
                self.grads = {k: g.copy() for k, g in b.param_grads.items()}
            else:
                for k in self.grads:
                    self.grads[k] += b.param_grads[k]
            self.loss += b.loss
            self.dx.append(b.input_grad)


def loss_and_grad_chunked(net: Network, x, labels, chunk_size: int = 0) -> GradientBundle:
    """Mean-loss gradients of a minibatch, accumulated block by block.

    The batch is always evaluated in blocks of ``ACCUM_GRAIN`` samples whose
    sums are added in order, so splitting it into chunks of any multiple of
    the grain gives bitwise-identical results while holding only one chunk's
    activations at a time.  ``chunk_size <= 0`` means one chunk.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty batch")
    if len(x) != n:
        raise ShapeError(f"{len(x)} inputs but {n} labels")
    if chunk_size > 0 and chunk_size % ACCUM_GRAIN:
        raise ValueError(f"chunk_size must be a multiple of {ACCUM_GRAIN}, got {chunk_size}")
    step = chunk_size if chunk_size > 0 else n
    acc = _Accumulator()
    for i in range(0, n, step):
        acc.add_blocks(net, x[i : i + step], labels[i : i + step])
    return GradientBundle(
        param_grads={k: g / n for k, g in acc.grads.items()},
        input_grad=np.concatenate(acc.dx) / n,
        loss=acc.loss / n,
    )


def predict(net: Network, x, chunk: int = 1024) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([forward(net, x[i : i + chunk])[0] for i in range(0, len(x), chunk)])


def evaluate(net: Network, x, labels, chunk: int = 1024) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a whole split."""
    logits = predict(net, x, chunk)
    labels = np.asarray(labels, dtype=np.int64)
    losses, _ = softmax_xent(logits, labels)
    return float(losses.mean()), float(np.mean(logits.argmax(axis=1) == labels))


# ---------------------------------------------------------------------------
# local affine map
# ---------------------------------------------------------------------------


def local_jacobian(net: Network, x: np.ndarray) -> np.ndarray:
    """Jacobian of the logits w.r.t. a single input ``x`` (flattened).

    Inside the activation region containing ``x`` the network is exactly the
    affine map ``x + xi -> f(x) + J xi``.  Computed with one reverse pass per
    output, batched.
    """
    x = np.asarray(x, dtype=np.float64).reshape(net.input_shape)
    n_out, n_in = net.num_classes, x.size
    if n_out * n_in > JACOBIAN_MAX_ENTRIES:
        raise ShapeError(f"Jacobian would have {n_out * n_in} entries (limit {JACOBIAN_MAX_ENTRIES})")
    _, cache = forward(net, np.repeat(x[None], n_out, axis=0))
    _, dx = backward(net, cache, np.eye(n_out))
    return dx.reshape(n_out, n_in)


def relu_masks(net: Network, x: np.ndarray) -> list[np.ndarray]:
    """Activation patterns (one boolean vector per relu layer) at a single input."""
    x = np.asarray(x, dtype=np.float64).reshape(net.input_shape)
    _, cache = forward(net, x[None])
    return [c[0].ravel() for l, c in zip(net.layers, cache) if l.kind == "relu"]
