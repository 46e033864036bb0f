"""Partially dilated 2D CNN with hand-written backpropagation.

Tensors are plain float64 ndarrays of shape (channels, time, freq),
C-ordered.  Convolutions are causal along the time axis (left zero
padding, dilated taps) and "same" along the frequency axis (centred zero
padding), so the output at time t depends on inputs at times <= t only
and the frequency extent is preserved.

Default layout for m-step-ahead prediction: four dilated layers with
kernel (4, 5), time dilations 1, 4, 16, 64, channel sizes
2 -> 6 -> 12 -> 12 -> 6, each with tanh activation plus a 1x1 residual
convolution, followed by a plain 1x1 projection onto 2m output channels.
Output channel pair (2k, 2k+1) carries the real/imag prediction k+1
steps ahead.  The time receptive field is 1 + 3*(1+4+16+64) = 256.

Checkpoint container CPNN0001 (little-endian):
    8 bytes  magic "CPNN0001"
    u32      JSON header length
    JSON     layer geometry, m, step count, seeds, provenance
    payload  all parameter tensors as float64 in declaration order
             (per layer: kernel, bias, residual kernel, residual bias)
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ValidationError

CPNN_MAGIC = b"CPNN0001"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class LayerSpec:
    in_ch: int
    out_ch: int
    kernel: tuple[int, int]      # (k_t, k_f)
    dilation: tuple[int, int]    # (d_t, d_f)
    has_residual: bool
    has_activation: bool


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    m: int

    @classmethod
    def default(cls, m: int = 10) -> "NetworkSpec":
        if m < 1:
            raise ValidationError("prediction horizon m must be >= 1")
        widths = [2, 6, 12, 12, 6]
        layers = []
        for i in range(4):
            layers.append(LayerSpec(in_ch=widths[i], out_ch=widths[i + 1],
                                    kernel=(4, 5), dilation=(4 ** i, 1),
                                    has_residual=True, has_activation=True))
        layers.append(LayerSpec(in_ch=6, out_ch=2 * m, kernel=(1, 1),
                                dilation=(1, 1), has_residual=False,
                                has_activation=False))
        return cls(layers=layers, m=m)

    @property
    def receptive_field(self) -> int:
        return 1 + sum((l.kernel[0] - 1) * l.dilation[0] for l in self.layers)


@dataclass
class LayerParams:
    w: np.ndarray             # (out_ch, in_ch, k_t, k_f)
    b: np.ndarray             # (out_ch,)
    rw: np.ndarray | None     # (out_ch, in_ch, 1, 1) when has_residual
    rb: np.ndarray | None     # (out_ch,)

    def tensors(self):
        yield self.w
        yield self.b
        if self.rw is not None:
            yield self.rw
        if self.rb is not None:
            yield self.rb


def param_tensors(params: list[LayerParams]):
    """All trainable tensors in declaration order."""
    for lp in params:
        yield from lp.tensors()


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> list[LayerParams]:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) kernels, zero biases."""
    params = []
    for layer in spec.layers:
        kt, kf = layer.kernel
        bound = 1.0 / np.sqrt(layer.in_ch * kt * kf)
        w = rng.uniform(-bound, bound, (layer.out_ch, layer.in_ch, kt, kf))
        b = np.zeros(layer.out_ch)
        rw = rb = None
        if layer.has_residual:
            rbound = 1.0 / np.sqrt(layer.in_ch)
            rw = rng.uniform(-rbound, rbound, (layer.out_ch, layer.in_ch, 1, 1))
            rb = np.zeros(layer.out_ch)
        params.append(LayerParams(w=w, b=b, rw=rw, rb=rb))
    return params


def _pad_amounts(layer: LayerSpec) -> tuple[int, int, int]:
    kt, kf = layer.kernel
    dt, df = layer.dilation
    pt = (kt - 1) * dt                 # causal: all of it on the left
    pf = (kf - 1) * df
    return pt, pf // 2, pf - pf // 2   # (left t, left f, right f)


def _pad_input(x: np.ndarray, pt: int, pfl: int, pfr: int) -> np.ndarray:
    c, t_len, f_len = x.shape
    xp = np.zeros((c, t_len + pt, f_len + pfl + pfr))
    xp[:, pt:, pfl: pfl + f_len] = x
    return xp


def _im2col(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Gather all dilated kernel windows into a (in_ch*k_t*k_f, T*F) matrix
    so the convolution becomes a single matrix product."""
    _, t_len, f_len = x.shape
    kt, kf = layer.kernel
    if kt == 1 and kf == 1:
        return x.reshape(layer.in_ch, t_len * f_len)
    dt, df = layer.dilation
    xp = _pad_input(x, *_pad_amounts(layer))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(layer.in_ch, kt, kf, t_len, f_len),
        strides=(s[0], dt * s[1], df * s[2], s[1], s[2]))
    return np.ascontiguousarray(view).reshape(layer.in_ch * kt * kf,
                                              t_len * f_len)


def dilated_conv2d(x: np.ndarray, layer: LayerSpec, w: np.ndarray,
                   b: np.ndarray, _cols: np.ndarray | None = None) -> np.ndarray:
    """Causal-in-time, same-in-frequency dilated convolution.

    Kernel tap (a, bf) reads the input at
    (t - (k_t-1-a)*d_t, f + (bf - (k_f-1)//2)*d_f).
    """
    if x.ndim != 3 or x.shape[0] != layer.in_ch:
        raise ValidationError(
            f"expected input with {layer.in_ch} channels, got shape {x.shape}")
    if w.shape != (layer.out_ch, layer.in_ch, *layer.kernel):
        raise ValidationError(f"kernel shape {w.shape} does not match layer spec")
    _, t_len, f_len = x.shape
    cols = _im2col(x, layer) if _cols is None else _cols
    out = (w.reshape(layer.out_ch, -1) @ cols).reshape(layer.out_ch, t_len, f_len)
    out += b[:, None, None]
    return out


def _conv2d_backward(x: np.ndarray, layer: LayerSpec, w: np.ndarray,
                     dy: np.ndarray, cols: np.ndarray | None = None
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the dilated convolution: (dx, dw, db)."""
    _, t_len, f_len = x.shape
    kt, kf = layer.kernel
    dt, df = layer.dilation
    pt, pfl, pfr = _pad_amounts(layer)
    if cols is None:
        cols = _im2col(x, layer)
    dy2 = dy.reshape(layer.out_ch, -1)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy.sum(axis=(1, 2))
    dxp = np.zeros((layer.in_ch, t_len + pt, f_len + pfl + pfr))
    for a in range(kt):
        for bf in range(kf):
            dxp[:, a * dt: a * dt + t_len, bf * df: bf * df + f_len] += \
                np.tensordot(w[:, :, a, bf], dy, axes=(0, 0))
    dx = dxp[:, pt:, pfl: pfl + f_len]
    return np.ascontiguousarray(dx), dw, db


def layer_forward(x: np.ndarray, layer: LayerSpec,
                  lp: LayerParams) -> np.ndarray:
    out, _, _ = _layer_forward_cached(x, layer, lp)
    return out


def _layer_forward_cached(x, layer, lp, keep_cols=False):
    cols = _im2col(x, layer)
    main = dilated_conv2d(x, layer, lp.w, lp.b, _cols=cols)
    if layer.has_activation:
        act = np.tanh(main)
    else:
        act = main
    if layer.has_residual:
        res = dilated_conv2d(x, LayerSpec(layer.in_ch, layer.out_ch, (1, 1),
                                          (1, 1), False, False), lp.rw, lp.rb)
        out = act + res
    else:
        out = act
    # the activation is cached only when its derivative is needed
    return out, (act if layer.has_activation else None), (cols if keep_cols else None)


def _layer_backward(x, layer, lp, act, dy, cols=None):
    if layer.has_activation:
        du = dy * (1.0 - act * act)
    else:
        du = dy
    dx, dw, db = _conv2d_backward(x, layer, lp.w, du, cols)
    drw = drb = None
    if layer.has_residual:
        res_spec = LayerSpec(layer.in_ch, layer.out_ch, (1, 1), (1, 1),
                             False, False)
        dx_res, drw, drb = _conv2d_backward(x, res_spec, lp.rw, dy)
        dx += dx_res
    return LayerParams(w=dw, b=db, rw=drw, rb=drb), dx


def network_forward(spec: NetworkSpec, params: list[LayerParams],
                    x: np.ndarray) -> np.ndarray:
    out, _, _, _ = _network_forward_cached(spec, params, x)
    return out


def _network_forward_cached(spec, params, x, keep_cols=False):
    if x.ndim != 3 or x.shape[0] != spec.layers[0].in_ch:
        raise ValidationError(
            f"expected {spec.layers[0].in_ch}-channel input, got shape {x.shape}")
    inputs = []
    acts = []
    colss = []
    cur = x
    for layer, lp in zip(spec.layers, params):
        inputs.append(cur)
        cur, act, cols = _layer_forward_cached(cur, layer, lp, keep_cols)
        acts.append(act)
        colss.append(cols)
    return cur, inputs, acts, colss


def network_backward(spec: NetworkSpec, params: list[LayerParams],
                     x: np.ndarray, loss_grad: np.ndarray,
                     cache: tuple | None = None
                     ) -> tuple[list[LayerParams], np.ndarray]:
    """Exact gradients w.r.t. every parameter and the input.

    Recomputes the forward activations unless a cache from
    _network_forward_cached is supplied.
    """
    if cache is None:
        _, inputs, acts, colss = _network_forward_cached(spec, params, x)
    else:
        _, inputs, acts, colss = cache
    grads: list[LayerParams] = [None] * len(spec.layers)
    dy = loss_grad
    for i in range(len(spec.layers) - 1, -1, -1):
        grads[i], dy = _layer_backward(inputs[i], spec.layers[i], params[i],
                                       acts[i], dy, colss[i])
    return grads, dy


def mse_loss(pred: np.ndarray, target: np.ndarray,
             mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over valid positions and its gradient w.r.t. pred.

    The mean is per real-valued entry; the per-complex-sample figure is
    twice this value.  mask must broadcast against pred and marks the
    valid target positions.
    """
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if mask.all():
        diff = pred - target
        count = pred.size
    else:
        mask_b = np.broadcast_to(mask, pred.shape)
        count = int(mask_b.sum())
        if count == 0:
            raise ValidationError("loss mask is empty")
        diff = np.where(mask_b, pred - target, 0.0)
    loss = float((diff * diff).sum() / count)
    return loss, 2.0 * diff / count


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[LayerParams]) -> "AdamState":
        return cls(m=[np.zeros_like(t) for t in param_tensors(params)],
                   v=[np.zeros_like(t) for t in param_tensors(params)])


def adam_step(params: list[LayerParams], grads: list[LayerParams],
              state: AdamState, lr: float = 0.01, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """Standard bias-corrected update, in place on params and state."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(param_tensors(params), param_tensors(grads))):
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient in tensor {i}: diverged")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(spec: NetworkSpec, params: list[LayerParams], x: np.ndarray,
               target: np.ndarray, mask: np.ndarray | None = None,
               step: float = 1e-6,
               negate_analytic: bool = False) -> tuple[float, list[float]]:
    """Compare every analytic parameter gradient against central finite
    differences of the loss.  Returns (max relative error, per-layer max).

    Relative error is |analytic - numeric| / max(|analytic| + |numeric|,
    1e-4): below the 1e-4 floor the comparison is effectively absolute,
    since central differences of an O(1) loss in float64 carry ~1e-10
    noise that would otherwise swamp near-zero gradients.

    negate_analytic flips the sign of the analytic gradients before the
    comparison; it exists as a harness self-test (the check must fail).
    """
    if mask is None:
        mask = np.ones((1, 1, 1), dtype=bool)

    out, inputs, acts, colss = _network_forward_cached(spec, params, x)
    _, dloss = mse_loss(out, target, mask)
    grads, _ = network_backward(spec, params, x, dloss,
                                (out, inputs, acts, colss))
    if negate_analytic:
        for g in param_tensors(grads):
            g *= -1.0

    per_layer = []
    for li, (lp, gp) in enumerate(zip(params, grads)):
        # perturbing layer li leaves layers < li untouched: restart the
        # probe forward from that layer's cached input, reuse the probed
        # layer's im2col matrix, and freeze whichever branch (main or
        # residual) the probed tensor does not belong to
        layer = spec.layers[li]
        x_in = inputs[li]
        cols = _im2col(x_in, layer)
        res_spec = LayerSpec(layer.in_ch, layer.out_ch, (1, 1), (1, 1),
                             False, False)
        res_out = (dilated_conv2d(x_in, res_spec, lp.rw, lp.rb)
                   if layer.has_residual else None)

        def tail_loss(layer_out) -> float:
            cur = layer_out
            for deeper, p in zip(spec.layers[li + 1:], params[li + 1:]):
                cur = layer_forward(cur, deeper, p)
            return mse_loss(cur, target, mask)[0]

        def loss_main() -> float:
            main = dilated_conv2d(x_in, layer, lp.w, lp.b, _cols=cols)
            act = np.tanh(main) if layer.has_activation else main
            return tail_loss(act if res_out is None else act + res_out)

        if layer.has_residual:
            act_fixed = dilated_conv2d(x_in, layer, lp.w, lp.b, _cols=cols)
            if layer.has_activation:
                act_fixed = np.tanh(act_fixed)
        else:
            act_fixed = None

        def loss_residual() -> float:
            res = dilated_conv2d(x_in, res_spec, lp.rw, lp.rb)
            return tail_loss(act_fixed + res)

        worst = 0.0
        for kind, (p, g) in enumerate(zip(lp.tensors(), gp.tensors())):
            loss_of = loss_main if kind < 2 else loss_residual
            flat_p = p.reshape(-1)
            flat_g = g.reshape(-1)
            for idx in range(flat_p.size):
                orig = flat_p[idx]
                flat_p[idx] = orig + step
                up = loss_of()
                flat_p[idx] = orig - step
                down = loss_of()
                flat_p[idx] = orig
                numeric = (up - down) / (2.0 * step)
                denom = max(abs(flat_g[idx]) + abs(numeric), 1e-4)
                worst = max(worst, abs(flat_g[idx] - numeric) / denom)
        per_layer.append(worst)
    return max(per_layer), per_layer


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, spec: NetworkSpec, params: list[LayerParams],
                    step_count: int = 0, seed=None,
                    extra: dict | None = None) -> None:
    header = {
        "format": CPNN_MAGIC.decode(),
        "m": spec.m,
        "layers": [{"in_ch": l.in_ch, "out_ch": l.out_ch,
                    "kernel": list(l.kernel), "dilation": list(l.dilation),
                    "has_residual": l.has_residual,
                    "has_activation": l.has_activation} for l in spec.layers],
        "step_count": step_count,
        "seed": seed,
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CPNN_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in param_tensors(params):
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[NetworkSpec, list[LayerParams], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CPNN_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    layers = [LayerSpec(in_ch=d["in_ch"], out_ch=d["out_ch"],
                        kernel=tuple(d["kernel"]), dilation=tuple(d["dilation"]),
                        has_residual=d["has_residual"],
                        has_activation=d["has_activation"])
              for d in header["layers"]]
    spec = NetworkSpec(layers=layers, m=header["m"])

    data = np.frombuffer(payload, dtype="<f8")
    pos = 0
    params = []
    for layer in spec.layers:
        kt, kf = layer.kernel
        shapes = [(layer.out_ch, layer.in_ch, kt, kf), (layer.out_ch,)]
        if layer.has_residual:
            shapes += [(layer.out_ch, layer.in_ch, 1, 1), (layer.out_ch,)]
        tensors = []
        for shape in shapes:
            size = int(np.prod(shape))
            if pos + size > data.size:
                raise DataFormatError(f"{path}: truncated parameter payload")
            tensors.append(data[pos:pos + size].reshape(shape).astype(np.float64))
            pos += size
        if layer.has_residual:
            params.append(LayerParams(*tensors))
        else:
            params.append(LayerParams(tensors[0], tensors[1], None, None))
    if pos != data.size:
        raise DataFormatError(f"{path}: {data.size - pos} trailing values")
    return spec, params, header
