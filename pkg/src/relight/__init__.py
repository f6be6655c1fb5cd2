"""Two-stage low-light image enhancement.

Frozen brightness-normalizing preprocessors (gamma, histogram
equalization, CLAHE, or an external trained model) produce a 9-channel
input for a lightweight depthwise-separable U-Net that learns the
residual color correction. The package also ships the distribution
statistics used to motivate the design and the uint8 PSNR/SSIM protocol
used to validate it.
"""

from .image import ImageF32, ImageU8, decode_png, encode_png, to_f32, to_u8

__all__ = ["ImageF32", "ImageU8", "decode_png", "encode_png", "to_f32", "to_u8"]

__version__ = "0.1.0"
