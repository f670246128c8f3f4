"""Python access to the dithc training runtime."""

from ._core import (  # noqa: F401
    DiTConfig,
    ConfigError,
    OutOfTier,
    TransportError,
    Trainer,
    allreduce_inproc,
    analytic_flops,
    decode_frame_header,
    encode_frame_header,
    gemm_naive,
    matmul,
    __version__,
)

__all__ = [
    "DiTConfig",
    "ConfigError",
    "OutOfTier",
    "TransportError",
    "Trainer",
    "allreduce_inproc",
    "analytic_flops",
    "decode_frame_header",
    "encode_frame_header",
    "gemm_naive",
    "matmul",
]
