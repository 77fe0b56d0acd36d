"""Pluggable cell segmentation: a local connected-components segmenter and a
remote-service client speaking a JSON wire contract, plus a loopback server."""

from __future__ import annotations

import io
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests
from PIL import Image
from scipy import ndimage
from skimage.color import rgb2hsv

from .data import Stain, StainPatch
from .metrics import BrownThresholds, brown_mask

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)

# counterstain (hematoxylin-blue) HSV band for negative-cell detection
BLUE_HUE_LOW = 180.0
BLUE_HUE_HIGH = 280.0
BLUE_SAT_MIN = 0.15

DEFAULT_MIN_AREA = 12


class SegmenterError(RuntimeError):
    """Remote segmentation failure: network, protocol, or invalid payload."""


@dataclass
class Cell:
    centroid: tuple[int, int]
    bbox: tuple[int, int, int, int]  # r0, c0, r1, c1 inclusive
    cls: str  # 'positive' or 'negative'

    def __post_init__(self) -> None:
        r0, c0, r1, c1 = self.bbox
        r, c = self.centroid
        if r0 > r1 or c0 > c1:
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not (r0 <= r <= r1 and c0 <= c <= c1):
            raise ValueError(f"centroid {self.centroid} outside bbox {self.bbox}")
        if self.cls not in ("positive", "negative"):
            raise ValueError(f"unknown cell class {self.cls!r}")


@dataclass
class CellSegmentation:
    cells: list[Cell]
    image_shape: tuple[int, int]

    def __post_init__(self) -> None:
        h, w = self.image_shape
        for cell in self.cells:
            r0, c0, r1, c1 = cell.bbox
            if r0 < 0 or c0 < 0 or r1 >= h or c1 >= w:
                raise ValueError(f"bbox {cell.bbox} outside image bounds {self.image_shape}")


def _components_to_cells(mask: np.ndarray, min_area: int, cls: str) -> list[Cell]:
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    cells = []
    for sl, idx in zip(ndimage.find_objects(labels), range(1, n + 1)):
        region = labels[sl] == idx
        if int(region.sum()) < min_area:
            continue
        rows, cols = np.nonzero(region)
        r0, c0 = sl[0].start, sl[1].start
        centroid = (int(round(rows.mean())) + r0, int(round(cols.mean())) + c0)
        bbox = (r0, c0, sl[0].stop - 1, sl[1].stop - 1)
        # a concave component's pixel-mean can fall outside it; clamp into bbox
        centroid = (min(max(centroid[0], bbox[0]), bbox[2]),
                    min(max(centroid[1], bbox[1]), bbox[3]))
        cells.append(Cell(centroid=centroid, bbox=bbox, cls=cls))
    return cells


def segment_local(ihc: StainPatch, thresholds: BrownThresholds = BrownThresholds(),
                  min_area: int = DEFAULT_MIN_AREA) -> CellSegmentation:
    """Connected-components segmentation: positives are 8-connected brown-mask
    components, negatives are counterstain-blue components outside the brown
    regions; both use the same area floor."""
    brown = brown_mask(ihc.pixels, thresholds)
    hsv = rgb2hsv(ihc.pixels)
    hue = hsv[..., 0] * 360.0
    blue = ((hue >= BLUE_HUE_LOW) & (hue <= BLUE_HUE_HIGH)
            & (hsv[..., 1] >= BLUE_SAT_MIN)) & ~brown
    cells = (_components_to_cells(brown, min_area, "positive")
             + _components_to_cells(blue, min_area, "negative"))
    return CellSegmentation(cells=cells, image_shape=ihc.pixels.shape[:2])


def _encode_png(pixels: np.ndarray) -> bytes:
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def segment_remote(endpoint: str, ihc: StainPatch, timeout: float = 30.0) -> CellSegmentation:
    """POST the PNG-encoded patch to {endpoint}/segment and parse the response."""
    url = endpoint.rstrip("/") + "/segment"
    try:
        resp = requests.post(url, data=_encode_png(ihc.pixels),
                             headers={"Content-Type": "image/png"}, timeout=timeout)
    except requests.RequestException as e:
        raise SegmenterError(f"network error reaching {endpoint}: {e}") from e
    if resp.status_code != 200:
        try:
            detail = resp.json().get("error", resp.text)
        except ValueError:
            detail = resp.text
        raise SegmenterError(f"segmentation service {endpoint} returned "
                             f"{resp.status_code}: {detail}")
    try:
        doc = resp.json()
        cells = [Cell(centroid=tuple(c["centroid"]), bbox=tuple(c["bbox"]), cls=c["cls"])
                 for c in doc["cells"]]
        return CellSegmentation(cells=cells, image_shape=ihc.pixels.shape[:2])
    except (ValueError, KeyError, TypeError) as e:
        raise SegmenterError(f"malformed response from {endpoint}: {e}") from e


class _LoopbackHandler(BaseHTTPRequestHandler):
    thresholds: BrownThresholds = BrownThresholds()
    min_area: int = DEFAULT_MIN_AREA

    def log_message(self, *args) -> None:  # quiet test server
        pass

    def do_POST(self) -> None:
        if self.path != "/segment":
            self._reply(404, {"error": "unknown path"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length)
            with Image.open(io.BytesIO(raw)) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            patch = StainPatch(pixels, Stain.CDX2, "remote")
            seg = segment_local(patch, self.thresholds, self.min_area)
            self._reply(200, {"cells": [
                {"centroid": list(c.centroid), "bbox": list(c.bbox), "cls": c.cls}
                for c in seg.cells]})
        except Exception as e:
            self._reply(500, {"error": str(e)})

    def _reply(self, status: int, doc: dict) -> None:
        body = json.dumps(doc).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class LoopbackSegmentServer:
    """In-process HTTP server wrapping segment_local; implements the wire contract
    for integration tests. Use as a context manager."""

    def __init__(self, thresholds: BrownThresholds = BrownThresholds(),
                 min_area: int = DEFAULT_MIN_AREA, port: int = 0):
        handler = type("Handler", (_LoopbackHandler,),
                       {"thresholds": thresholds, "min_area": min_area})
        self.server = ThreadingHTTPServer(("127.0.0.1", port), handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def __enter__(self) -> "LoopbackSegmentServer":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()
