"""Context encoder, dynamic-filter attention and inpainting decoder.

Shapes inside the network are batched ``[N, C, H, W]``. Frames at the API
boundary are uint8 ``[H, W, C]`` (or ``[N, H, W, C]``) and are rescaled to
[0, 1] before the first convolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from ._validation import check_random_state
from .masking import Mask, MaskedFrame
from .tensor import Tensor

PRECISIONS = {"float32": np.float32, "float64": np.float64}
COLLECTIONS = ("encoder", "convlstm", "meta", "decoder", "head")


@dataclass(frozen=True)
class ModelHyper:
    height: int = 64
    width: int = 64
    channels: int = 1
    hidden: int = 32
    context_length: int = 9
    n_bins: int = 256
    kernel_size: int = 3
    encoder_layers: int = 2
    decoder_layers: int = 4
    meta_hidden: int = 32
    use_attention: bool = True
    use_masked_frame: bool = True
    precision: str = "float32"

    def __post_init__(self):
        for name in ("height", "width", "channels", "hidden", "context_length", "n_bins",
                     "kernel_size", "encoder_layers", "decoder_layers", "meta_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def attention_channels(self) -> int:
        return self.hidden

    @property
    def context_channels(self) -> int:
        return self.context_length * self.hidden

    @property
    def decoder_in_channels(self) -> int:
        extra = self.channels + 1 if self.use_masked_frame else 0
        return self.attention_channels + extra

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParameters:
    """Named weight tensors plus the hyperparameters that fix their shapes."""

    hyper: ModelHyper
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def collection(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.split(".", 1)[0] == prefix}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.hyper, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                            for k, v in self.tensors.items()})

    def astype(self, precision: str) -> "ModelParameters":
        dtype = PRECISIONS[precision]
        return ModelParameters(replace(self.hyper, precision=precision),
                               {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                                for k, v in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def requires_grad_(self, flag: bool = True) -> "ModelParameters":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def equals(self, other: "ModelParameters") -> bool:
        """Bitwise equality of hyperparameters and every tensor."""
        if self.hyper != other.hyper or list(self.tensors) != list(other.tensors):
            return False
        return all(self.tensors[k].data.dtype == other.tensors[k].data.dtype
                   and self.tensors[k].data.tobytes() == other.tensors[k].data.tobytes()
                   for k in self.tensors)

    def check_finite(self) -> None:
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v.data)):
                raise FloatingPointError(f"parameter {k} contains NaN/Inf")


@dataclass
class ConvLstmState:
    h: Tensor
    c: Tensor


@dataclass
class DynamicFilters:
    filters: Tensor  # [N, C_att, L*C_h, k, k]
    bias: Tensor  # [N, C_att]


@dataclass
class PredictionGrid:
    probs: np.ndarray  # [H, W, C, K]

    @property
    def n_bins(self) -> int:
        return self.probs.shape[-1]


def parameter_shapes(hyper: ModelHyper) -> dict[str, tuple[int, ...]]:
    k, ch, c = hyper.kernel_size, hyper.hidden, hyper.channels
    shapes: dict[str, tuple[int, ...]] = {}
    cin = c
    for i in range(hyper.encoder_layers):
        shapes[f"encoder.{i}.weight"] = (ch, cin, k, k)
        shapes[f"encoder.{i}.bias"] = (ch,)
        cin = ch
    shapes["convlstm.weight"] = (4 * ch, 2 * ch, k, k)
    shapes["convlstm.bias"] = (4 * ch,)
    if hyper.use_attention:
        n_out = hyper.attention_channels * hyper.context_channels * 9 + hyper.attention_channels
        shapes["meta.0.weight"] = (hyper.context_channels, hyper.meta_hidden)
        shapes["meta.0.bias"] = (hyper.meta_hidden,)
        shapes["meta.1.weight"] = (hyper.meta_hidden, n_out)
        shapes["meta.1.bias"] = (n_out,)
    cin = hyper.decoder_in_channels
    for i in range(hyper.decoder_layers):
        shapes[f"decoder.{i}.weight"] = (ch, cin, k, k)
        shapes[f"decoder.{i}.bias"] = (ch,)
        cin = ch
    shapes["head.weight"] = (c * hyper.n_bins, ch, 1, 1)
    shapes["head.bias"] = (c * hyper.n_bins,)
    return shapes


def init_params(hyper: ModelHyper, rng=None) -> ModelParameters:
    """Fan-in scaled normal weights; zero head and biases; forget-gate bias 1.

    The meta-network output bias doubles as the static part of the dynamic
    filter bank, so its filter slots are drawn like ordinary conv weights.
    """
    rng = check_random_state(rng)
    dtype = hyper.dtype
    tensors: dict[str, Tensor] = {}
    fan_att = hyper.context_channels * 9
    for name, shape in parameter_shapes(hyper).items():
        if name.startswith("head") or (name.endswith("bias") and name != "meta.1.bias"):
            arr = np.zeros(shape)
        elif name == "meta.1.bias":
            arr = np.zeros(shape)
            n_filt = hyper.attention_channels * fan_att
            arr[:n_filt] = rng.normal(0.0, np.sqrt(1.0 / fan_att), n_filt)
        elif name == "meta.1.weight":
            arr = rng.normal(0.0, np.sqrt(1.0 / (shape[0] * fan_att)), shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arr = rng.normal(0.0, np.sqrt(1.0 / fan_in), shape)
        if name == "convlstm.bias":
            arr[hyper.hidden:2 * hyper.hidden] = 1.0
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return ModelParameters(hyper, tensors)


# --- input conversion ---------------------------------------------------------

def frames_to_tensor(frames, dtype=np.float32) -> Tensor:
    """uint8 ``[..., H, W, C]`` -> float ``[N, C, H, W]`` scaled to [0, 1]."""
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected frames shaped [H, W, C] or [N, H, W, C], got {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=dtype) / dtype(255.0))


def _check_spatial(shape, hyper: ModelHyper, what: str) -> None:
    if tuple(shape) != (hyper.height, hyper.width):
        raise ValueError(f"{what} spatial dims {tuple(shape)} do not match model "
                         f"({hyper.height}, {hyper.width})")


# --- network pieces -------------------------------------------------------------

def _encode(x: Tensor, params: ModelParameters) -> Tensor:
    for i in range(params.hyper.encoder_layers):
        x = T.relu(T.conv2d(x, params[f"encoder.{i}.weight"], params[f"encoder.{i}.bias"]))
    return x


def encode_frame(frame, params: ModelParameters) -> Tensor:
    """Resolution-preserving CNN features of one frame (or a batch).

    Accepts uint8 ``[H, W, C]`` / ``[N, H, W, C]`` or an already normalized
    ``Tensor[N, C, H, W]``. Returns ``[N, C_h, H, W]``.
    """
    hyper = params.hyper
    x = frame if isinstance(frame, Tensor) else frames_to_tensor(frame, hyper.dtype)
    if x.shape[1] != hyper.channels:
        raise ValueError(f"frame has {x.shape[1]} channels, model expects {hyper.channels}")
    _check_spatial(x.shape[2:], hyper, "frame")
    return _encode(x, params)


def zero_state(n: int, hyper: ModelHyper) -> ConvLstmState:
    shape = (n, hyper.hidden, hyper.height, hyper.width)
    return ConvLstmState(Tensor(np.zeros(shape, hyper.dtype)), Tensor(np.zeros(shape, hyper.dtype)))


def convlstm_step(x: Tensor, state: ConvLstmState, params: ModelParameters) -> ConvLstmState:
    ch = params.hyper.hidden
    if x.shape != state.h.shape or x.shape[1] != ch:
        raise ValueError(f"convlstm input {x.shape} does not match state {state.h.shape}")
    # gate order along channels: input, forget, output, candidate
    z = T.conv2d(T.concat_channels([x, state.h]), params["convlstm.weight"], params["convlstm.bias"])
    hc = T.lstm_cell(z, state.c)
    return ConvLstmState(hc[0], hc[1])


def encode_context(context, params: ModelParameters) -> list[Tensor]:
    """Run encoder + ConvLSTM over the context frames from a zero state.

    ``context`` is uint8 ``[L, H, W, C]`` / ``[N, L, H, W, C]`` or a normalized
    ``Tensor[N, L, C, H, W]``. Returns the ``L`` hidden outputs.
    """
    hyper = params.hyper
    if isinstance(context, Tensor):
        ctx = context
    else:
        arr = np.asarray(context)
        if arr.ndim == 4:
            arr = arr[None]
        if arr.ndim != 5:
            raise ValueError(f"context must be [L, H, W, C] or [N, L, H, W, C], got {arr.shape}")
        scaled = np.ascontiguousarray(arr.transpose(0, 1, 4, 2, 3), dtype=hyper.dtype)
        ctx = Tensor(scaled / hyper.dtype(255.0))
    n, steps = ctx.shape[:2]
    if steps < 1:
        raise ValueError("context must contain at least one frame")
    if ctx.shape[2] != hyper.channels:
        raise ValueError(f"context has {ctx.shape[2]} channels, model expects {hyper.channels}")
    _check_spatial(ctx.shape[3:], hyper, "context")
    state = zero_state(n, hyper)
    hs = []
    for t in range(steps):
        state = convlstm_step(_encode(ctx[:, t], params), state, params)
        hs.append(state.h)
    return hs


def make_dynamic_filters(context_hs: list[Tensor], params: ModelParameters) -> DynamicFilters:
    """Meta-network: pooled context features -> per-sample filter bank and bias."""
    hyper = params.hyper
    if not context_hs:
        raise ValueError("make_dynamic_filters needs at least one context output")
    if not hyper.use_attention:
        raise ValueError("model was built without the attention meta-network")
    if len(context_hs) != hyper.context_length:
        raise ValueError(f"got {len(context_hs)} context outputs, meta-network expects "
                         f"{hyper.context_length}")
    stacked = T.concat_channels(context_hs)
    n = stacked.shape[0]
    pooled = stacked.mean(axis=(2, 3))
    hidden = T.tanh(pooled @ params["meta.0.weight"] + params["meta.0.bias"])
    out = hidden @ params["meta.1.weight"] + params["meta.1.bias"]
    c_att, c_ctx = hyper.attention_channels, hyper.context_channels
    n_filt = c_att * c_ctx * 9
    filters = out[:, :n_filt].reshape(n, c_att, c_ctx, 3, 3)
    return DynamicFilters(filters, out[:, n_filt:])


def apply_attention(context_hs: list[Tensor], dyn: DynamicFilters) -> Tensor:
    """Convolve the channel-stacked context outputs with the dynamic filters."""
    return T.conv2d(T.concat_channels(context_hs), dyn.filters, dyn.bias)


def context_features(context_hs: list[Tensor], params: ModelParameters) -> Tensor:
    if params.hyper.use_attention:
        return apply_attention(context_hs, make_dynamic_filters(context_hs, params))
    return context_hs[-1]


def decode(features: Tensor, masked: Tensor | None, visible: Tensor | None,
           params: ModelParameters) -> Tensor:
    """Inpainting CNN -> logits ``[N, C, K, H, W]``."""
    hyper = params.hyper
    parts = [features]
    if hyper.use_masked_frame:
        parts += [masked, visible]
    x = T.concat_channels(parts)
    for i in range(hyper.decoder_layers):
        x = T.relu(T.conv2d(x, params[f"decoder.{i}.weight"], params[f"decoder.{i}.bias"]))
    logits = T.conv2d(x, params["head.weight"], params["head.bias"])
    n = logits.shape[0]
    return logits.reshape(n, hyper.channels, hyper.n_bins, hyper.height, hyper.width)


def predict_logits(context, masked_values, visible, params: ModelParameters) -> Tensor:
    """Batched forward pass up to the logits.

    ``context``: uint8 ``[N, L, H, W, C]`` (or a normalized Tensor, see
    :func:`encode_context`); ``masked_values``: uint8 ``[N, H, W, C]``;
    ``visible``: bool ``[N, H, W]`` or ``[H, W]``.
    """
    hyper = params.hyper
    hs = encode_context(context, params)
    feats = context_features(hs, params)
    n = feats.shape[0]
    masked_t = vis_t = None
    if hyper.use_masked_frame:
        masked_arr = np.asarray(masked_values)
        if masked_arr.ndim == 3:
            masked_arr = masked_arr[None]
        _check_spatial(masked_arr.shape[1:3], hyper, "masked frame")
        masked_t = frames_to_tensor(masked_arr, hyper.dtype)
        vis = np.broadcast_to(np.asarray(visible, dtype=hyper.dtype), (n, hyper.height, hyper.width))
        vis_t = Tensor(np.ascontiguousarray(vis[:, None]))
        if masked_t.shape[0] != n:
            raise ValueError(f"batch mismatch: {n} contexts vs {masked_t.shape[0]} masked frames")
    return decode(feats, masked_t, vis_t, params)


def probs_from_logits(logits: Tensor) -> np.ndarray:
    """``[N, C, K, H, W]`` logits -> ``[N, H, W, C, K]`` probabilities."""
    p = T.softmax_bins(Tensor(logits.data), axis=2).data
    return np.ascontiguousarray(p.transpose(0, 3, 4, 1, 2))


def forward(context, masked: MaskedFrame, params: ModelParameters) -> PredictionGrid:
    """Predict a categorical distribution for every pixel of the target frame.

    All pixels come out of one parallel pass; nothing is sampled sequentially.
    """
    ctx = np.asarray(context)
    if ctx.ndim == 3:
        ctx = ctx[..., None]
    if ctx.ndim != 4:
        raise ValueError(f"context must be [L, H, W] or [L, H, W, C], got {ctx.shape}")
    values = np.asarray(masked.values)
    if values.ndim == 2:
        values = values[..., None]
    if ctx.shape[1:3] != values.shape[:2]:
        raise ValueError(f"context frames {ctx.shape[1:3]} and masked frame {values.shape[:2]} differ")
    logits = predict_logits(ctx[None], values[None], masked.mask.visible, params)
    return PredictionGrid(probs_from_logits(logits)[0])


def mask_batch(masks: list[Mask]) -> np.ndarray:
    return np.stack([m.visible for m in masks])
