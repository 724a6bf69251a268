"""The region-guided attention segmentation network.

Three separable-convolution encoders, a bottleneck, three decoders fed by
skip connections, a cascaded partial decoder producing a coarse prediction,
three inverse-attention refinement stages, and a 1x1 segmentation head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .ops import BNState
from .tensor import (
    ParamRegistry,
    Tape,
    Tensor,
    check_feature_map,
    resolve_dtype,
    scope,
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``filters`` holds the three encoder widths plus the bottleneck width.
    ``use_iaa``/``use_partial_decoder`` switch the attention refinement and
    the coarse-prediction branch off, which reduces the model to a plain
    U-Net with a 1x1 head on the last decoder.
    """

    in_channels: int = 3
    filters: tuple[int, int, int, int] = (8, 16, 24, 32)
    pred_channels: int = 1
    deep_supervision: bool = False
    use_iaa: bool = True
    use_partial_decoder: bool = True

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if len(self.filters) != 4:
            raise ConfigError(f"filters needs exactly 4 entries, got {self.filters}")
        if min(self.filters) < 1:
            raise ConfigError(f"filters must be strictly positive, got {self.filters}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.pred_channels != 1:
            raise ConfigError("prediction maps are single-channel; pred_channels must be 1")
        if self.use_partial_decoder and not self.use_iaa:
            raise ConfigError(
                "the partial decoder output is only consumed by the attention "
                "stages; enable use_iaa or disable use_partial_decoder"
            )

    def fingerprint(self) -> str:
        """Canonical one-line architecture echo used by checkpoints."""
        flt = ",".join(str(f) for f in self.filters)
        return (
            f"in_channels={self.in_channels};filters={flt};"
            f"pred_channels={self.pred_channels};"
            f"deep_supervision={int(self.deep_supervision)};"
            f"use_iaa={int(self.use_iaa)};"
            f"use_partial_decoder={int(self.use_partial_decoder)}"
        )

    @classmethod
    def from_fingerprint(cls, text: str) -> "ModelConfig":
        try:
            kv = dict(part.split("=", 1) for part in text.split(";"))
            return cls(
                in_channels=int(kv["in_channels"]),
                filters=tuple(int(f) for f in kv["filters"].split(",")),
                pred_channels=int(kv["pred_channels"]),
                deep_supervision=bool(int(kv["deep_supervision"])),
                use_iaa=bool(int(kv["use_iaa"])),
                use_partial_decoder=bool(int(kv["use_partial_decoder"])),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"unparseable architecture fingerprint: {text!r}") from exc


@dataclass
class StageActivations:
    """Every intermediate map of one forward pass.

    Attention-related fields are ``None`` when the corresponding branch is
    disabled by config. ``tape`` is populated in train mode.
    """

    S1: Tensor | None = None
    S2: Tensor | None = None
    S3: Tensor | None = None
    p1: Tensor | None = None
    p2: Tensor | None = None
    p3: Tensor | None = None
    b: Tensor | None = None
    dec1: Tensor | None = None
    dec2: Tensor | None = None
    dec3: Tensor | None = None
    dec_par: Tensor | None = None
    Pred1: Tensor | None = None
    Pred2: Tensor | None = None
    Pred_final: Tensor | None = None
    Mask: Tensor | None = None
    tape: Tape | None = field(default=None, repr=False)

    def named(self):
        for f in fields(self):
            if f.name != "tape":
                yield f.name, getattr(self, f.name)


class _ConvBlock:
    """[depthwise 3x3 -> pointwise 1x1 -> batch norm -> ReLU] twice.

    Convolutions carry no bias; the batch norm that follows each pair
    subsumes it.
    """

    def __init__(self, net: "RGANet", prefix: str, cin: int, cout: int):
        self.dw1 = net._register_kernel(f"{prefix}.dw1.kernel", (cin, 1, 3, 3), fan_in=9)
        self.pw1 = net._register_kernel(f"{prefix}.pw1.weight", (cout, cin, 1, 1), fan_in=cin)
        self.bn1 = net._register_bn(f"{prefix}.bn1", cout)
        self.dw2 = net._register_kernel(f"{prefix}.dw2.kernel", (cout, 1, 3, 3), fan_in=9)
        self.pw2 = net._register_kernel(f"{prefix}.pw2.weight", (cout, cout, 1, 1), fan_in=cout)
        self.bn2 = net._register_bn(f"{prefix}.bn2", cout)

    def __call__(self, x: Tensor, mode: str, tape: Tape | None) -> Tensor:
        gamma1, beta1, state1 = self.bn1
        gamma2, beta2, state2 = self.bn2
        h = ops.dwconv3x3(x, self.dw1.value, tape)
        h = ops.pwconv(h, self.pw1.value, tape=tape)
        h = ops.batchnorm(h, gamma1.value, beta1.value, state1, mode, tape=tape)
        h = ops.relu(h, tape)
        h = ops.dwconv3x3(h, self.dw2.value, tape)
        h = ops.pwconv(h, self.pw2.value, tape=tape)
        h = ops.batchnorm(h, gamma2.value, beta2.value, state2, mode, tape=tape)
        return ops.relu(h, tape)


class RGANet:
    """Parameter registry plus the forward pass over it.

    A model instance is exclusively owned while training (it mutates grads
    and batch-norm running stats); frozen eval-mode models are read-only and
    safe to share across threads.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0,
                 dtype="float32"):
        self.config = config or ModelConfig()
        self.dtype = resolve_dtype(dtype)
        self.registry = ParamRegistry()
        self.buffers: dict[str, BNState] = {}
        self._rng = np.random.default_rng(seed)

        cin = self.config.in_channels
        f1, f2, f3, fb = self.config.filters
        self.enc1 = _ConvBlock(self, "enc1", cin, f1)
        self.enc2 = _ConvBlock(self, "enc2", f1, f2)
        self.enc3 = _ConvBlock(self, "enc3", f2, f3)
        self.bott = _ConvBlock(self, "bottleneck", f3, fb)
        # transposed convs map the below-stage width onto the skip width
        self.up1 = self._register_kernel("up1.weight", (fb, f3, 2, 2), fan_in=4 * fb)
        self.dec1 = _ConvBlock(self, "dec1", f3 + f3, f3)
        self.up2 = self._register_kernel("up2.weight", (f3, f2, 2, 2), fan_in=4 * f3)
        self.dec2 = _ConvBlock(self, "dec2", f2 + f2, f2)
        self.up3 = self._register_kernel("up3.weight", (f2, f1, 2, 2), fan_in=4 * f2)
        self.dec3 = _ConvBlock(self, "dec3", f1 + f1, f1)

        if self.config.use_partial_decoder:
            self.pd = _ConvBlock(self, "pd", f2, f2)
            self.pd_head_w = self._register_kernel("pd.head.weight", (1, f2, 1, 1), fan_in=f2)
            self.pd_head_b = self._register_bias("pd.head.bias", 1)
        elif self.config.use_iaa:
            # without the partial decoder the first attention stage seeds its
            # prediction from a 1x1 projection of dec1
            self.seed_w = self._register_kernel("seed.weight", (1, f3, 1, 1), fan_in=f3)
            self.seed_b = self._register_bias("seed.bias", 1)

        if self.config.use_iaa:
            self.iaa_w = []
            self.iaa_b = []
            for i, c in enumerate((f3, f2, f1), start=1):
                self.iaa_w.append(
                    self._register_kernel(f"iaa{i}.weight", (1, c, 1, 1), fan_in=c)
                )
                self.iaa_b.append(self._register_bias(f"iaa{i}.bias", 1))
            head_in = 1
        else:
            head_in = f1
        self.head_w = self._register_kernel("head.weight", (1, head_in, 1, 1), fan_in=head_in)
        self.head_b = self._register_bias("head.bias", 1)

    # -- parameter registration -------------------------------------------

    def _register_kernel(self, name, shape, fan_in):
        std = float(np.sqrt(2.0 / fan_in))
        data = self._rng.normal(0.0, std, size=shape).astype(self.dtype)
        return self.registry.add(name, Tensor(data, self.dtype))

    def _register_bias(self, name, n):
        return self.registry.add(name, Tensor(np.zeros(n), self.dtype))

    def _register_bn(self, prefix, c):
        gamma = self.registry.add(f"{prefix}.gamma", Tensor(np.ones(c), self.dtype))
        beta = self.registry.add(f"{prefix}.beta", Tensor(np.zeros(c), self.dtype))
        state = BNState.initial(c, self.dtype)
        self.buffers[prefix] = state
        return gamma, beta, state

    # -- forward ------------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "eval",
                tape: Tape | None = None) -> StageActivations:
        """Run the full network, filling every stage activation.

        Train mode records every op on a tape (created on demand) and updates
        batch-norm running stats; eval mode does neither.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        check_feature_map("network input", x)
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {c}")
        if h % 8 or w % 8:
            raise ShapeError(
                f"input is pooled three times, so height and width must be "
                f"divisible by 8; got {h}x{w}"
            )
        if x.dtype != self.dtype:
            x = Tensor(x.data, self.dtype)
        if mode == "train" and tape is None:
            tape = Tape()
        elif mode == "eval" and tape is not None:
            raise ValueError("tape recording requires train mode")

        t = tape
        acts = StageActivations(tape=t)
        with scope(t, "enc1"):
            acts.S1 = self.enc1(x, mode, t)
            acts.p1 = ops.maxpool2x2(acts.S1, t)
        with scope(t, "enc2"):
            acts.S2 = self.enc2(acts.p1, mode, t)
            acts.p2 = ops.maxpool2x2(acts.S2, t)
        with scope(t, "enc3"):
            acts.S3 = self.enc3(acts.p2, mode, t)
            acts.p3 = ops.maxpool2x2(acts.S3, t)
        with scope(t, "bottleneck"):
            acts.b = self.bott(acts.p3, mode, t)
        with scope(t, "dec1"):
            up = ops.conv_transpose2x2(acts.b, self.up1.value, t)
            acts.dec1 = self.dec1(ops.concat_channels(acts.S3, up, t), mode, t)
        with scope(t, "dec2"):
            up = ops.conv_transpose2x2(acts.dec1, self.up2.value, t)
            acts.dec2 = self.dec2(ops.concat_channels(acts.S2, up, t), mode, t)
        with scope(t, "dec3"):
            up = ops.conv_transpose2x2(acts.dec2, self.up3.value, t)
            acts.dec3 = self.dec3(ops.concat_channels(acts.S1, up, t), mode, t)

        if self.config.use_iaa:
            if self.config.use_partial_decoder:
                with scope(t, "pd"):
                    hidden = self.pd(acts.dec2, mode, t)
                    acts.dec_par = ops.pwconv(
                        hidden, self.pd_head_w.value, self.pd_head_b.value, t
                    )
                pred = acts.dec_par
            else:
                with scope(t, "seed"):
                    pred = ops.pwconv(acts.dec1, self.seed_w.value, self.seed_b.value, t)
            with scope(t, "iaa1"):
                acts.Pred1 = self._iaa(acts.dec1, pred, 0, t)
            with scope(t, "iaa2"):
                acts.Pred2 = self._iaa(acts.dec2, acts.Pred1, 1, t)
            with scope(t, "iaa3"):
                acts.Pred_final = self._iaa(acts.dec3, acts.Pred2, 2, t)
            with scope(t, "head"):
                logits = ops.pwconv(acts.Pred_final, self.head_w.value, self.head_b.value, t)
                acts.Mask = ops.sigmoid(logits, t)
        else:
            with scope(t, "head"):
                acts.Pred_final = ops.pwconv(
                    acts.dec3, self.head_w.value, self.head_b.value, t
                )
                acts.Mask = ops.sigmoid(acts.Pred_final, t)
        return acts

    def _iaa(self, features: Tensor, pred_in: Tensor, idx: int,
             tape: Tape | None) -> Tensor:
        """One inverse-attention refinement stage.

        The incoming prediction is resampled to the feature resolution; the
        complement of its sigmoid gates the features, a 1x1 conv collapses the
        gated stack to one channel, and the resampled prediction is added back.
        """
        if pred_in.shape[1] != 1:
            raise ShapeError(f"prediction map must be single-channel, got {pred_in.shape}")
        h, w = features.shape[2], features.shape[3]
        p = ops.resize_bilinear(pred_in, h, w, tape)
        gate = ops.one_minus(ops.sigmoid(p, tape), tape)
        gated = ops.hadamard_broadcast(features, gate, tape)
        r = ops.pwconv(gated, self.iaa_w[idx].value, self.iaa_b[idx].value, tape)
        return ops.add(r, p, tape)

    # -- bookkeeping ---------------------------------------------------------

    def param_count(self) -> int:
        """Total trainable elements (running stats excluded)."""
        return self.registry.total_size()

    def param_table(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(p.name, p.value.shape, p.value.size) for p in self.registry]

    def zero_grads(self) -> None:
        self.registry.zero_grads()

    def state_items(self):
        """All named tensors a checkpoint must carry: params then buffers."""
        for p in self.registry:
            yield p.name, p.value.data
        for prefix, state in self.buffers.items():
            yield f"{prefix}.running_mean", state.mean
            yield f"{prefix}.running_var", state.var
