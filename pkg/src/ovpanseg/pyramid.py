"""Project single-resolution backbone features into a four-scale pyramid.

The input feature map lives at stride 16. Each output scale has its own
head: a stride-2 conv for stride 32, a 1x1 conv for stride 16, one stride-2
deconv for stride 8 and two for stride 4. Every head output goes through
channelwise layer norm and GeLU (both can be switched off to obtain a purely
linear map for testing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixtures import FpnScaleWeights, FpnWeights
from .numerics import conv2d_forward, deconv2d_forward, gelu, layer_norm

STRIDES = (32, 16, 8, 4)


@dataclass
class MultiScaleFeatures:
    """Feature maps (D_pix, H/s, W/s) at strides 32, 16, 8 and 4."""

    s32: np.ndarray
    s16: np.ndarray
    s8: np.ndarray
    s4: np.ndarray

    def by_stride(self, stride: int) -> np.ndarray:
        try:
            return {32: self.s32, 16: self.s16, 8: self.s8, 4: self.s4}[stride]
        except KeyError:
            raise KeyError(f"no map at stride {stride}") from None


def _channel_norm(x: np.ndarray, scale: FpnScaleWeights) -> np.ndarray:
    # layer norm over the channel axis at every spatial position
    moved = np.moveaxis(x, 0, -1)
    return np.moveaxis(layer_norm(moved, scale.norm.gain, scale.norm.bias), -1, 0)


def _head(x: np.ndarray, scale: FpnScaleWeights, deconv: bool, stride: int,
          padding: int, apply_norm_act: bool) -> np.ndarray:
    if deconv:
        y = deconv2d_forward(x, scale.kernel, stride=stride)
    else:
        y = conv2d_forward(x, scale.kernel, stride=stride, padding=padding)
    y = y + scale.bias[:, None, None]
    if apply_norm_act:
        y = gelu(_channel_norm(y, scale))
    return y


def fpn_forward(f_sam: np.ndarray, weights: FpnWeights,
                apply_norm_act: bool = True) -> MultiScaleFeatures:
    """Compute all four scale maps from the stride-16 backbone features.

    ``apply_norm_act=False`` drops layer norm and GeLU from every head,
    leaving the purely linear conv/deconv stack (used by linearity tests).
    """
    k = weights.s32.kernel.shape[2]
    s32 = _head(f_sam, weights.s32, deconv=False, stride=2, padding=k // 2,
                apply_norm_act=apply_norm_act)
    s16 = _head(f_sam, weights.s16, deconv=False, stride=1, padding=0,
                apply_norm_act=apply_norm_act)
    s8 = _head(f_sam, weights.s8, deconv=True, stride=2, padding=0,
               apply_norm_act=apply_norm_act)
    mid = _head(f_sam, weights.s4a, deconv=True, stride=2, padding=0,
                apply_norm_act=apply_norm_act)
    s4 = _head(mid, weights.s4b, deconv=True, stride=2, padding=0,
               apply_norm_act=apply_norm_act)
    return MultiScaleFeatures(s32=s32, s16=s16, s8=s8, s4=s4)
