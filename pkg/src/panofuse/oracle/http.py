"""JSON-over-HTTP client for remote model servers.

Requests go to ``POST {base_url}/v1/{panorama|inpaint|depth|segment}``.
Colour rasters and masks travel as base64 PNG, depth as base64 little-endian
PFM, poses as row-major 4x4 lists.  Responses carry ``status`` ("ok" on
success), ``model`` and the payload fields.
"""
from __future__ import annotations

import base64
import logging
import time
import uuid

import numpy as np
import requests

from .. import formats
from ..geom import Pose
from .base import OracleError, OracleSet, check_depth

log = logging.getLogger(__name__)


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


class HttpClient:
    def __init__(self, base_url: str, timeout: float = 60.0, retries: int = 3,
                 backoff: float = 0.5, session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()

    def call(self, kind: str, payload: dict) -> dict:
        rid = uuid.uuid4().hex[:12]
        body = {"request_id": rid, **payload}
        url = f"{self.base_url}/v1/{kind}"
        last = None
        for attempt in range(self.retries):
            try:
                resp = self.session.post(url, json=body, timeout=self.timeout)
                resp.raise_for_status()
                out = resp.json()
            except (requests.RequestException, ValueError) as exc:
                last = exc
                log.warning("%s [%s] attempt %d failed: %s", kind, rid, attempt + 1, exc)
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
                continue
            if out.get("status") != "ok":
                raise OracleError(kind, f"server status {out.get('status')!r}: {out.get('error', '')}", rid)
            return out
        raise OracleError(kind, f"request failed after {self.retries} attempts: {last}", rid)


def _pose_field(pose: Pose | None):
    return None if pose is None else pose.matrix().tolist()


class HttpPanoramaGen:
    def __init__(self, client: HttpClient):
        self.client = client

    def generate(self, prompt: str, pose: Pose, W: int, H: int):
        if not prompt:
            raise OracleError("panorama", "empty prompt")
        out = self.client.call("panorama", {"prompt": prompt, "width": W, "height": H,
                                            "pose": _pose_field(pose)})
        image = formats.png_to_image(unb64(out["image"]))
        if image.shape != (H, W, 3):
            raise OracleError("panorama", f"image shape {image.shape} != {(H, W, 3)}")
        depth = None
        if out.get("depth"):
            depth = check_depth(formats.pfm_to_depth(unb64(out["depth"])), (H, W), "panorama")
        return image, depth


class HttpInpainter:
    def __init__(self, client: HttpClient):
        self.client = client

    def inpaint(self, image, mask, prompt: str, pose: Pose | None = None, background: bool = False):
        image = np.asarray(image, dtype=np.float64)
        if not np.asarray(mask, bool).any():
            return image.copy()
        H, W = image.shape[:2]
        out = self.client.call("inpaint", {
            "prompt": prompt, "width": W, "height": H, "pose": _pose_field(pose),
            "background": bool(background), "image": b64(formats.image_to_png(image)),
            "mask": b64(formats.mask_to_png(mask))})
        res = formats.png_to_image(unb64(out["image"]))
        if res.shape != image.shape:
            raise OracleError("inpaint", f"image shape {res.shape} != {image.shape}")
        return res


class HttpDepthEstimator:
    def __init__(self, client: HttpClient):
        self.client = client

    def estimate(self, image, pose: Pose | None = None):
        image = np.asarray(image, dtype=np.float64)
        H, W = image.shape[:2]
        out = self.client.call("depth", {"width": W, "height": H, "pose": _pose_field(pose),
                                         "image": b64(formats.image_to_png(image))})
        return check_depth(formats.pfm_to_depth(unb64(out["depth"])), (H, W))


class HttpSegmenter:
    def __init__(self, client: HttpClient):
        self.client = client

    def segment(self, image, pose: Pose | None = None):
        image = np.asarray(image, dtype=np.float64)
        H, W = image.shape[:2]
        out = self.client.call("segment", {"width": W, "height": H, "pose": _pose_field(pose),
                                           "image": b64(formats.image_to_png(image))})
        masks = [formats.png_to_mask(unb64(m)) for m in out.get("masks", [])]
        for m in masks:
            if m.shape != (H, W):
                raise OracleError("segment", f"mask shape {m.shape} != {(H, W)}")
        return masks


def http_oracles(base_url: str, timeout: float = 60.0, retries: int = 3) -> OracleSet:
    client = HttpClient(base_url, timeout=timeout, retries=retries)
    return OracleSet(HttpPanoramaGen(client), HttpInpainter(client),
                     HttpDepthEstimator(client), HttpSegmenter(client))
