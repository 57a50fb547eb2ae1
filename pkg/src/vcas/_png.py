"""16-bit PNG encode/decode shared by the label, flow and depth codecs."""

import cv2
import numpy as np

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def decode_png16(data: bytes, channels: int) -> np.ndarray:
    buf = np.frombuffer(bytes(data), np.uint8)
    if buf.size < 8 or bytes(buf[:8]) != _SIGNATURE:
        raise ValueError("malformed PNG: bad signature")
    img = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError("malformed PNG: could not decode")
    if img.dtype != np.uint16:
        raise ValueError(f"expected a 16-bit PNG, got {img.dtype}")
    got = 1 if img.ndim == 2 else img.shape[2]
    if got != channels:
        raise ValueError(f"expected {channels} channel(s), got {got}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("PNG has zero size")
    return img


def encode_png16(img: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(img, np.uint16))
    if not ok:
        raise ValueError("PNG encoding failed")
    return buf.tobytes()
