"""2-d convolution (cross-correlation) as an abstract op with selectable
implementations.

The graph is built with placeholder nodes that carry no kernel; a rewrite
stage swaps in a concrete implementation (the slow direct loops kept as the
debugging reference, or the im2col/GEMM lowering) before execution. The
trio covers the forward pass and both gradients, each of which is its own
placeholder so implementations can be mixed.

Layout is (batch, channels, height, width) for data and
(filters, channels, kernel_h, kernel_w) for weights; attributes are stride
and zero-padding pairs. No filter flip, no dilation.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..dtypes import is_float, promote
from ..errors import NotSupported, ShapeMismatch, TypeMismatch
from ..graph import TensorType, Variable, apply
from .base import DISCONNECTED, Op, UNKNOWN_SHAPE, register_op
from .shaping import shape_of

FORWARD = "forward"
GRAD_INPUTS = "grad_inputs"
GRAD_WEIGHTS = "grad_weights"
ABSTRACT = "abstract"
REFERENCE = "reference"
GEMM = "gemm"


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out <= 0:
        raise ShapeMismatch(
            f"convolution window {kernel} (pad {pad}) does not fit input extent {size}"
        )
    return out


def _pad(x, pad):
    ph, pw = pad
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_reference(x, f, stride=(1, 1), pad=(0, 0)):
    """Direct nested-loop cross-correlation; the oracle implementation."""
    x, f = np.asarray(x), np.asarray(f)
    _check_shapes(x, f)
    sh, sw = stride
    n, c, h, w = x.shape
    k, _, kh, kw = f.shape
    hout = conv_output_size(h, kh, sh, pad[0])
    wout = conv_output_size(w, kw, sw, pad[1])
    xp = _pad(x, pad)
    out = np.zeros((n, k, hout, wout), dtype=np.result_type(x, f))
    for b in range(n):
        for o in range(k):
            for i in range(hout):
                for j in range(wout):
                    window = xp[b, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
                    out[b, o, i, j] = np.sum(window * f[o])
    return out


def conv2d_reference_grad_weights(x, dy, filter_shape, stride=(1, 1), pad=(0, 0)):
    x, dy = np.asarray(x), np.asarray(dy)
    k, c, kh, kw = filter_shape
    sh, sw = stride
    xp = _pad(x, pad)
    n, _, hout, wout = dy.shape
    df = np.zeros(tuple(filter_shape), dtype=np.result_type(x, dy))
    for o in range(k):
        for ch in range(c):
            for u in range(kh):
                for v in range(kw):
                    acc = 0.0
                    for i in range(hout):
                        for j in range(wout):
                            acc += np.sum(
                                xp[:, ch, i * sh + u, j * sw + v] * dy[:, o, i, j]
                            )
                    df[o, ch, u, v] = acc
    return df


def conv2d_reference_grad_inputs(f, dy, input_shape, stride=(1, 1), pad=(0, 0)):
    f, dy = np.asarray(f), np.asarray(dy)
    n, c, h, w = input_shape
    sh, sw = stride
    k, _, kh, kw = f.shape
    _, _, hout, wout = dy.shape
    xp = np.zeros((n, c, h + 2 * pad[0], w + 2 * pad[1]), dtype=np.result_type(f, dy))
    for b in range(n):
        for o in range(k):
            for i in range(hout):
                for j in range(wout):
                    xp[b, :, i * sh : i * sh + kh, j * sw : j * sw + kw] += (
                        f[o] * dy[b, o, i, j]
                    )
    ph, pw = pad
    return xp[:, :, ph : ph + h, pw : pw + w]


def _im2col(x, kernel, stride, pad):
    """(N,C,H,W) -> (N*Hout*Wout, C*kh*kw) patch matrix."""
    kh, kw = kernel
    sh, sw = stride
    xp = _pad(x, pad)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeMismatch("convolution window does not fit input")
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]  # (N, C, Hout, Wout, kh, kw)
    n, c, hout, wout = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * hout * wout, c * kh * kw)
    return cols, (n, hout, wout)


def conv2d_gemm(x, f, stride=(1, 1), pad=(0, 0)):
    """im2col lowering followed by one matrix multiplication."""
    x, f = np.asarray(x), np.asarray(f)
    _check_shapes(x, f)
    k, c, kh, kw = f.shape
    cols, (n, hout, wout) = _im2col(x, (kh, kw), stride, pad)
    out = cols @ f.reshape(k, c * kh * kw).T  # (N*Hout*Wout, K)
    return np.ascontiguousarray(
        out.reshape(n, hout, wout, k).transpose(0, 3, 1, 2)
    )


def conv2d_gemm_grad_weights(x, dy, filter_shape, stride=(1, 1), pad=(0, 0)):
    x, dy = np.asarray(x), np.asarray(dy)
    k, c, kh, kw = filter_shape
    cols, (n, hout, wout) = _im2col(x, (kh, kw), stride, pad)
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * hout * wout, k)
    df = dy_mat.T @ cols
    return df.reshape(k, c, kh, kw)


def conv2d_gemm_grad_inputs(f, dy, input_shape, stride=(1, 1), pad=(0, 0)):
    f, dy = np.asarray(f), np.asarray(dy)
    n, c, h, w = input_shape
    sh, sw = stride
    k, _, kh, kw = f.shape
    _, _, hout, wout = dy.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * hout * wout, k)
    dcols = dy_mat @ f.reshape(k, c * kh * kw)  # (N*Hout*Wout, C*kh*kw)
    dcols = dcols.reshape(n, hout, wout, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((n, c, h + 2 * pad[0], w + 2 * pad[1]), dtype=dcols.dtype)
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u : u + sh * hout : sh, v : v + sw * wout : sw] += dcols[..., u, v]
    ph, pw = pad
    return xp[:, :, ph : ph + h, pw : pw + w]


def _check_shapes(x, f):
    if x.ndim != 4 or f.ndim != 4:
        raise ShapeMismatch("conv2d expects rank-4 input and filters")
    if x.shape[1] != f.shape[1]:
        raise ShapeMismatch(
            f"conv2d channel mismatch: input has {x.shape[1]}, filters {f.shape[1]}"
        )


@register_op
class Conv2d(Op):
    """One member of the convolution trio, possibly still a placeholder.

    ``kind`` picks forward / gradient-w.r.t.-inputs / gradient-w.r.t.-weights;
    ``algo`` is "abstract" until an implementation-selection rewrite replaces
    it with "reference" or "gemm". Gradient kinds take the target's runtime
    shape vector as a third input, since spatial extents cannot be recovered
    from the output alone once striding floors them.
    """

    name = "conv2d"
    foldable = False  # folding a placeholder is meaningless; concrete convs
    # stay unfolded too so benches compare like for like

    def __init__(self, kind: str, algo: str, stride=(1, 1), pad=(0, 0)):
        if kind not in (FORWARD, GRAD_INPUTS, GRAD_WEIGHTS):
            raise TypeMismatch(f"unknown conv kind {kind!r}")
        if algo not in (ABSTRACT, REFERENCE, GEMM):
            raise TypeMismatch(f"unknown conv algo {algo!r}")
        self.kind = kind
        self.algo = algo
        self.stride = (int(stride[0]), int(stride[1]))
        self.pad = (int(pad[0]), int(pad[1]))

    @property
    def display_name(self):
        return f"conv2d.{self.kind}.{self.algo}"

    @property
    def is_abstract(self):
        return self.algo == ABSTRACT

    def attrs_key(self):
        return (self.kind, self.algo, self.stride, self.pad)

    def with_algo(self, algo: str) -> "Conv2d":
        return Conv2d(self.kind, algo, self.stride, self.pad)

    def infer_types(self, input_types):
        if self.kind == FORWARD:
            x, f = input_types
            if x.ndim != 4 or f.ndim != 4:
                raise TypeMismatch("conv2d expects rank-4 input and filters")
            dtype = promote(x.dtype, f.dtype)
            return [
                TensorType(dtype, (x.broadcastable[0], f.broadcastable[0], False, False))
            ]
        a, dy, shp = input_types
        if a.ndim != 4 or dy.ndim != 4:
            raise TypeMismatch("conv2d gradient expects rank-4 operands")
        if shp.ndim != 1 or shp.dtype not in ("int32", "int64"):
            raise TypeMismatch("conv2d gradient expects an integer shape vector")
        dtype = promote(a.dtype, dy.dtype)
        return [TensorType(dtype, (False, False, False, False))]

    def perform(self, inputs, output_buffers=None):
        # Placeholders carry the slow direct loops so debugging evaluations
        # (test values, finite-difference oracles) work on raw graphs; the
        # compiler still refuses to build a function around one.
        use_gemm = self.algo == GEMM
        if self.kind == FORWARD:
            x, f = inputs
            fn = conv2d_gemm if use_gemm else conv2d_reference
            return [fn(x, f, self.stride, self.pad)]
        if self.kind == GRAD_INPUTS:
            f, dy, shp = inputs
            fn = conv2d_gemm_grad_inputs if use_gemm else conv2d_reference_grad_inputs
            return [fn(f, dy, tuple(int(s) for s in shp), self.stride, self.pad)]
        x, dy, shp = inputs
        fn = conv2d_gemm_grad_weights if use_gemm else conv2d_reference_grad_weights
        return [fn(x, dy, tuple(int(s) for s in shp), self.stride, self.pad)]

    def check_runtime_shapes(self, node, shapes):
        if self.kind == FORWARD:
            x, f = shapes
            if x[1] != f[1]:
                raise ShapeMismatch(
                    f"conv2d channel mismatch: input has {x[1]}, filters {f[1]}"
                )

    def grad(self, inputs, output_grads):
        if self.kind != FORWARD:
            from ..errors import NotDifferentiable

            raise NotDifferentiable(
                f"{self.display_name}: second-order convolution is not provided"
            )
        x, f = inputs
        (v,) = output_grads
        gx = apply(
            Conv2d(GRAD_INPUTS, self.algo, self.stride, self.pad),
            [f, v, shape_of(x)],
        )[0]
        gf = apply(
            Conv2d(GRAD_WEIGHTS, self.algo, self.stride, self.pad),
            [x, v, shape_of(f)],
        )[0]
        return [
            gx if is_float(x.type.dtype) else DISCONNECTED,
            gf if is_float(f.type.dtype) else DISCONNECTED,
        ]

    def rop(self, inputs, input_perturbations):
        if self.kind != FORWARD:
            raise NotSupported(f"{self.display_name} has no R-operator rule")
        x, f = inputs
        dx, df = input_perturbations
        terms = []
        if dx is not None:
            terms.append(apply(Conv2d(FORWARD, self.algo, self.stride, self.pad), [dx, f])[0])
        if df is not None:
            terms.append(apply(Conv2d(FORWARD, self.algo, self.stride, self.pad), [x, df])[0])
        if not terms:
            return [None]
        return [terms[0] if len(terms) == 1 else terms[0] + terms[1]]

    def infer_shape(self, node, input_shapes):
        if self.kind == FORWARD:
            x, f = input_shapes
            if x is UNKNOWN_SHAPE or f is UNKNOWN_SHAPE:
                return [UNKNOWN_SHAPE]
            n, _, h, w = x
            k, _, kh, kw = f
            if None in (h, w, kh, kw):
                return [(n, k, None, None)]
            return [
                (
                    n,
                    k,
                    conv_output_size(h, kh, self.stride[0], self.pad[0]),
                    conv_output_size(w, kw, self.stride[1], self.pad[1]),
                )
            ]
        from ..graph import Constant

        shp = node.inputs[2]
        if isinstance(shp, Constant):
            return [tuple(int(s) for s in shp.value)]
        return [(None, None, None, None)]

    def attrs_payload(self, encode_graph=None):
        return {
            "kind": self.kind,
            "algo": self.algo,
            "stride": list(self.stride),
            "pad": list(self.pad),
        }

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        return cls(payload["kind"], payload["algo"], payload["stride"], payload["pad"])


def conv2d(x: Variable, filters: Variable, stride=(1, 1), pad=(0, 0)) -> Variable:
    """Abstract 2-d cross-correlation; an implementation is chosen when the
    graph is compiled (or by rewriting with the selection stage enabled)."""
    return apply(Conv2d(FORWARD, ABSTRACT, stride, pad), [x, filters])[0]
