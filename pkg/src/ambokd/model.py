"""The three branches: two toy modality encoders and the attention fusion.

The encoders are deliberately small stand-ins behind the same contract a
real backbone would satisfy: image-like input goes through two strided
conv+tanh stages then an affine map to the common feature length;
matrix-like input goes through a shared per-channel temporal affine+tanh
then an affine map to the same length.

Fusion aligns both features with FC layers, concatenates, reshapes each
sample into a small token grid, and runs multi-head self-attention over
the tokens (a single 1-token sequence would make attention the identity).
Head outputs are concatenated and passed through an FC layer, optionally
followed by a feature-axis softmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, ParameterError
from .numerics import ParamSet, Tensor

BRANCHES = ("eeg", "visual", "fusion")

_CONV_KERNEL = 3
_CONV_STRIDE = 2
_CONV_PAD = 1


@dataclass(frozen=True)
class EncoderSpec:
    kind: str  # "toy-conv" (image-like) or "toy-temporal" (matrix-like)
    input_shape: tuple[int, ...]
    hidden: int
    feature_len: int = 64

    def validate(self) -> None:
        if self.kind not in ("toy-conv", "toy-temporal"):
            raise ParameterError(f"unknown encoder kind '{self.kind}'")
        expected_rank = 3 if self.kind == "toy-conv" else 2
        if len(self.input_shape) != expected_rank or any(d < 1 for d in self.input_shape):
            raise ParameterError(
                f"encoder kind '{self.kind}' needs a rank-{expected_rank} positive "
                f"input shape, got {self.input_shape}"
            )
        if self.hidden < 1 or self.feature_len < 1:
            raise ParameterError("encoder hidden width and feature length must be >= 1")


@dataclass(frozen=True)
class FusionSpec:
    heads: int = 2
    key_width: int = 16
    tokens: int = 8
    aligned_len: int = 64
    feature_softmax: bool = True

    @property
    def fused_len(self) -> int:
        return 2 * self.aligned_len

    @property
    def token_width(self) -> int:
        return self.fused_len // self.tokens

    def validate(self) -> None:
        if self.heads < 1:
            raise ParameterError(f"fusion head count must be >= 1, got {self.heads}")
        if self.key_width < 1:
            raise ParameterError(f"fusion key width must be >= 1, got {self.key_width}")
        if self.tokens < 1 or self.fused_len % self.tokens != 0:
            raise ParameterError(
                f"token count {self.tokens} must divide fused length {self.fused_len}"
            )


@dataclass
class BranchOutputs:
    """Features and logits for one forward pass, keyed by branch name."""

    feats: dict[str, Tensor]
    logits: dict[str, Tensor]

    def batch_size(self) -> int:
        return self.logits["eeg"].shape[0]


def _conv_out(size: int) -> int:
    return (size + 2 * _CONV_PAD - _CONV_KERNEL) // _CONV_STRIDE + 1


class ThreeBranchModel:
    """Owns the parameters of all three branches and their forward ops."""

    def __init__(
        self,
        visual_spec: EncoderSpec,
        eeg_spec: EncoderSpec,
        fusion_spec: FusionSpec,
        n_classes: int = 2,
        seed: int = 0,
    ):
        visual_spec.validate()
        eeg_spec.validate()
        fusion_spec.validate()
        if visual_spec.kind != "toy-conv" or eeg_spec.kind != "toy-temporal":
            raise ParameterError("visual encoder must be toy-conv and eeg encoder toy-temporal")
        if visual_spec.feature_len != eeg_spec.feature_len:
            raise ParameterError(
                "both encoders must emit the common feature length, got "
                f"{visual_spec.feature_len} vs {eeg_spec.feature_len}"
            )
        if fusion_spec.aligned_len != visual_spec.feature_len:
            raise ParameterError(
                "fusion aligned length must equal the encoder feature length"
            )
        if n_classes < 2:
            raise ParameterError(f"n_classes must be >= 2, got {n_classes}")
        self.visual_spec = visual_spec
        self.eeg_spec = eeg_spec
        self.fusion_spec = fusion_spec
        self.n_classes = n_classes
        self.params = ParamSet()
        self._rng = np.random.default_rng(seed)
        self._build()

    # -- construction ---------------------------------------------------
    def _init(self, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = np.sqrt(1.0 / fan_in)
        self.params.add(name, self._rng.uniform(-bound, bound, size=shape))

    def _build(self) -> None:
        chans, height, width = self.visual_spec.input_shape
        hid = self.visual_spec.hidden
        patch1 = chans * _CONV_KERNEL * _CONV_KERNEL
        patch2 = hid * _CONV_KERNEL * _CONV_KERNEL
        oh1, ow1 = _conv_out(height), _conv_out(width)
        oh2, ow2 = _conv_out(oh1), _conv_out(ow1)
        if min(oh1, ow1, oh2, ow2) < 1:
            raise ParameterError(
                f"visual input {self.visual_spec.input_shape} too small for two conv stages"
            )
        self._visual_flat = hid * oh2 * ow2
        self._init("v_enc.conv1.w", (patch1, hid), patch1)
        self._init("v_enc.conv1.b", (hid,), patch1)
        self._init("v_enc.conv2.w", (patch2, hid), patch2)
        self._init("v_enc.conv2.b", (hid,), patch2)
        self._init("v_enc.out.w", (self._visual_flat, self.visual_spec.feature_len), self._visual_flat)
        self._init("v_enc.out.b", (self.visual_spec.feature_len,), self._visual_flat)

        n_chan, n_time = self.eeg_spec.input_shape
        th = self.eeg_spec.hidden
        self._eeg_flat = n_chan * th
        self._init("e_enc.temporal.w", (n_time, th), n_time)
        self._init("e_enc.temporal.b", (th,), n_time)
        self._init("e_enc.out.w", (self._eeg_flat, self.eeg_spec.feature_len), self._eeg_flat)
        self._init("e_enc.out.b", (self.eeg_spec.feature_len,), self._eeg_flat)

        fs = self.fusion_spec
        feat = fs.aligned_len
        self._init("fus.align_e.w", (feat, feat), feat)
        self._init("fus.align_e.b", (feat,), feat)
        self._init("fus.align_v.w", (feat, feat), feat)
        self._init("fus.align_v.b", (feat,), feat)
        for j in range(fs.heads):
            for proj in ("q", "k", "v"):
                self._init(f"fus.head{j}.{proj}.w", (fs.token_width, fs.key_width), fs.token_width)
                self._init(f"fus.head{j}.{proj}.b", (fs.key_width,), fs.token_width)
        heads_flat = fs.tokens * fs.heads * fs.key_width
        self._init("fus.out.w", (heads_flat, fs.fused_len), heads_flat)
        self._init("fus.out.b", (fs.fused_len,), heads_flat)

        self._init("clf_e.w", (feat, self.n_classes), feat)
        self._init("clf_e.b", (self.n_classes,), feat)
        self._init("clf_v.w", (feat, self.n_classes), feat)
        self._init("clf_v.b", (self.n_classes,), feat)
        self._init("clf_f.w", (fs.fused_len, self.n_classes), fs.fused_len)
        self._init("clf_f.b", (self.n_classes,), fs.fused_len)

    _OWNERSHIP = {
        "eeg": ("e_enc.", "clf_e."),
        "visual": ("v_enc.", "clf_v."),
        "fusion": ("fus.", "clf_f."),
    }

    def params_for(self, branch: str) -> ParamSet:
        """The parameter subset a branch owns as a student."""
        if branch not in self._OWNERSHIP:
            raise ParameterError(f"unknown branch '{branch}'")
        return self.params.subset(*self._OWNERSHIP[branch])

    # -- branch ops -------------------------------------------------------
    def encode_visual(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != self.visual_spec.input_shape:
            raise DimensionError(
                f"visual input must be [batch, {self.visual_spec.input_shape}], got {x.shape}"
            )
        p = self.params
        h = self._conv_stage(x, p["v_enc.conv1.w"], p["v_enc.conv1.b"])
        h = self._conv_stage(h, p["v_enc.conv2.w"], p["v_enc.conv2.b"])
        flat = h.reshape((x.shape[0], self._visual_flat))
        return flat @ p["v_enc.out.w"] + p["v_enc.out.b"]

    @staticmethod
    def _conv_stage(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        batch = x.shape[0]
        oh, ow = _conv_out(x.shape[2]), _conv_out(x.shape[3])
        patches = nm.im2col(x, _CONV_KERNEL, _CONV_STRIDE, _CONV_PAD)
        y = patches @ w + b  # [batch, oh*ow, out_channels]
        y = nm.transpose_last2(y).reshape((batch, w.shape[1], oh, ow))
        return nm.tanh(y)

    def encode_eeg(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1:] != self.eeg_spec.input_shape:
            raise DimensionError(
                f"eeg input must be [batch, {self.eeg_spec.input_shape}], got {x.shape}"
            )
        p = self.params
        h = nm.tanh(x @ p["e_enc.temporal.w"] + p["e_enc.temporal.b"])
        flat = h.reshape((x.shape[0], self._eeg_flat))
        return flat @ p["e_enc.out.w"] + p["e_enc.out.b"]

    def align_concat(self, f_eeg: Tensor, f_visual: Tensor) -> Tensor:
        feat = self.fusion_spec.aligned_len
        if f_eeg.ndim != 2 or f_eeg.shape[1] != feat or f_visual.ndim != 2 or f_visual.shape[1] != feat:
            raise DimensionError(
                f"align_concat expects [batch, {feat}] features, got {f_eeg.shape} and {f_visual.shape}"
            )
        p = self.params
        ae = f_eeg @ p["fus.align_e.w"] + p["fus.align_e.b"]
        av = f_visual @ p["fus.align_v.w"] + p["fus.align_v.b"]
        return nm.concat((ae, av), axis=-1)

    def _tokens(self, fused: Tensor) -> Tensor:
        fs = self.fusion_spec
        return fused.reshape((fused.shape[0], fs.tokens, fs.token_width))

    def _head(self, fc_tokens: Tensor, head: int) -> tuple[Tensor, Tensor]:
        fs = self.fusion_spec
        p = self.params
        q = fc_tokens @ p[f"fus.head{head}.q.w"] + p[f"fus.head{head}.q.b"]
        k = fc_tokens @ p[f"fus.head{head}.k.w"] + p[f"fus.head{head}.k.b"]
        v = fc_tokens @ p[f"fus.head{head}.v.w"] + p[f"fus.head{head}.v.b"]
        scores = q @ nm.transpose_last2(k)
        attn = nm.softmax(scores, temperature=float(np.sqrt(fs.key_width)))
        return attn @ v, attn

    def attention_head(self, fc: Tensor, head: int) -> Tensor:
        """Single-head self-attention over each sample's token grid."""
        if not 0 <= head < self.fusion_spec.heads:
            raise ParameterError(f"head index {head} out of range")
        h, _ = self._head(self._tokens(fc), head)
        return h

    def attention_scores(self, fc: Tensor, head: int) -> Tensor:
        """The row-normalized token-token attention matrix of one head."""
        if not 0 <= head < self.fusion_spec.heads:
            raise ParameterError(f"head index {head} out of range")
        _, attn = self._head(self._tokens(fc), head)
        return attn

    def fuse(self, f_eeg: Tensor, f_visual: Tensor) -> Tensor:
        fs = self.fusion_spec
        fc_tokens = self._tokens(self.align_concat(f_eeg, f_visual))
        heads = [self._head(fc_tokens, j)[0] for j in range(fs.heads)]
        stacked = nm.concat(heads, axis=-1) if len(heads) > 1 else heads[0]
        flat = stacked.reshape((fc_tokens.shape[0], fs.tokens * fs.heads * fs.key_width))
        fused = flat @ self.params["fus.out.w"] + self.params["fus.out.b"]
        if fs.feature_softmax:
            fused = nm.softmax(fused)
        return fused

    def classify(self, feat: Tensor, branch: str) -> Tensor:
        key = {"eeg": "clf_e", "visual": "clf_v", "fusion": "clf_f"}.get(branch)
        if key is None:
            raise ParameterError(f"unknown branch '{branch}'")
        w = self.params[f"{key}.w"]
        if feat.ndim != 2 or feat.shape[1] != w.shape[0]:
            raise DimensionError(
                f"classifier '{branch}' expects [batch, {w.shape[0]}] features, got {feat.shape}"
            )
        return feat @ w + self.params[f"{key}.b"]

    def forward(self, x_visual, x_eeg, detach_fusion_inputs: bool = True) -> BranchOutputs:
        """One shared pass producing features and logits of all branches.

        With detached fusion inputs (the default) encoder features enter
        the fusion branch as constants, so each parameter is reachable
        from exactly one student loss.
        """
        xv = x_visual if isinstance(x_visual, Tensor) else Tensor(x_visual)
        xe = x_eeg if isinstance(x_eeg, Tensor) else Tensor(x_eeg)
        if xv.shape[0] != xe.shape[0]:
            raise DimensionError(
                f"modalities disagree on batch size: {xv.shape[0]} vs {xe.shape[0]}"
            )
        f_visual = self.encode_visual(xv)
        f_eeg = self.encode_eeg(xe)
        fe_in = f_eeg.detach() if detach_fusion_inputs else f_eeg
        fv_in = f_visual.detach() if detach_fusion_inputs else f_visual
        f_fused = self.fuse(fe_in, fv_in)
        return BranchOutputs(
            feats={"eeg": f_eeg, "visual": f_visual, "fusion": f_fused},
            logits={
                "eeg": self.classify(f_eeg, "eeg"),
                "visual": self.classify(f_visual, "visual"),
                "fusion": self.classify(f_fused, "fusion"),
            },
        )

    # -- state ------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: np.array(t.data, copy=True) for name, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = [n for n in self.params.names() if n not in state]
        extra = [n for n in state if n not in self.params]
        if missing or extra:
            raise ParameterError(
                f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise DimensionError(
                    f"checkpoint shape {arr.shape} for '{name}' does not match {t.data.shape}"
                )
            t.data = arr.copy()
