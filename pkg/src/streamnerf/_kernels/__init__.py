"""Hot inner loops: hash-grid encoding, alpha compositing, NV12 conversion.

The compiled ``_core`` extension is used when it was built; otherwise the
numpy implementations in ``_fallback`` are used. Set ``STREAMNERF_KERNELS``
to ``python`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("STREAMNERF_KERNELS", "").lower() != "python":
    try:
        from . import _core as _impl  # noqa: F811

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback

hash_encode = _impl.hash_encode
hash_encode_backward = _impl.hash_encode_backward
composite = _impl.composite
composite_backward = _impl.composite_backward
nv12_to_rgba = _impl.nv12_to_rgba
rgba_to_nv12 = _impl.rgba_to_nv12

__all__ = [
    "BACKEND",
    "hash_encode",
    "hash_encode_backward",
    "composite",
    "composite_backward",
    "nv12_to_rgba",
    "rgba_to_nv12",
]
