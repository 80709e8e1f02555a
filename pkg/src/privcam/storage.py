"""The untrusted cloud: a blob store indexed by camera and time.

There is deliberately no authentication and no access control; clients
rely on signatures and encryption, never on the store.  Anyone can
overwrite or mutilate a block (``tamper`` exists precisely to let tests
and attack scenarios do so) and the system must shrug it off.

Three interchangeable backends: in-process (fast tests), filesystem
(one file per block plus an append-only index journal), and an HTTP
client speaking to the bundled REST service:

    PUT  /v1/cameras/{hex id}/blocks/{start_ms}         body: block bytes
    GET  /v1/cameras/{hex id}/blocks/{start_ms}
    GET  /v1/cameras/{hex id}/blocks?from={ms}&to={ms}  -> JSON metadata array
    POST /v1/cameras/{hex id}/blocks/{start_ms}/tamper  {"offset": n, "xor": m}

This module must stay ignorant of keys and plaintext: it may peek at
the public block header (for the end timestamp) and nothing else.
"""

import hashlib
import json
import logging
import re
import struct
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable
from urllib.parse import parse_qs, urlparse

import requests

from .errors import (
    BlockNotFoundError,
    StorageFullError,
    StorageIoError,
    StorageUnavailableError,
)

logger = logging.getLogger(__name__)

CAMERA_ID_BYTES = 16

# Public block header: magic(4) | camera_id(16) | start_ms(8) | end_ms(8).
# The store reads end_ms from here for range queries; nothing deeper.
_END_MS_OFFSET = 28
_MIN_HEADER = 38


def peek_end_ms(data: bytes, default: int) -> int:
    if len(data) >= _MIN_HEADER:
        return struct.unpack_from("<Q", data, _END_MS_OFFSET)[0]
    return default


def _etag(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:32]


@dataclass(frozen=True, slots=True, order=True)
class BlockLocator:
    camera_id: bytes
    start_ms: int


@dataclass(frozen=True, slots=True)
class BlockMeta:
    locator: BlockLocator
    end_ms: int
    size: int
    etag: str

    def to_json(self) -> dict:
        return {"start_ms": self.locator.start_ms, "end_ms": self.end_ms,
                "size": self.size, "etag": self.etag}


class InMemoryBlobStore:
    """Dict-backed store; the reference behavior for all backends."""

    def __init__(self):
        self._blobs: dict[BlockLocator, bytes] = {}
        self._meta: dict[BlockLocator, BlockMeta] = {}
        self._lock = threading.Lock()

    def put_block(self, camera_id: bytes, start_ms: int, data: bytes) -> str:
        loc = BlockLocator(bytes(camera_id), start_ms)
        meta = BlockMeta(loc, peek_end_ms(data, start_ms), len(data), _etag(data))
        with self._lock:
            self._blobs[loc] = bytes(data)
            self._meta[loc] = meta
        return meta.etag

    def get_block(self, camera_id: bytes, start_ms: int) -> bytes:
        loc = BlockLocator(bytes(camera_id), start_ms)
        with self._lock:
            if loc not in self._blobs:
                raise BlockNotFoundError(f"no block at {start_ms} ms")
            return self._blobs[loc]

    def list_blocks(self, camera_id: bytes, from_ms: int, to_ms: int) -> list[BlockMeta]:
        """Blocks whose [start_ms, end_ms] intersects [from_ms, to_ms], in order."""
        cid = bytes(camera_id)
        with self._lock:
            metas = [m for loc, m in self._meta.items()
                     if loc.camera_id == cid
                     and m.locator.start_ms <= to_ms and m.end_ms >= from_ms]
        return sorted(metas, key=lambda m: m.locator.start_ms)

    def tamper(self, camera_id: bytes, start_ms: int,
               mutate: Callable[[bytes], bytes]) -> None:
        """Adversarial in-place mutation; etag updates, clients must not care."""
        loc = BlockLocator(bytes(camera_id), start_ms)
        with self._lock:
            if loc not in self._blobs:
                raise BlockNotFoundError(f"no block at {start_ms} ms")
            data = mutate(self._blobs[loc])
            self._blobs[loc] = data
            old = self._meta[loc]
            self._meta[loc] = BlockMeta(loc, old.end_ms, len(data), _etag(data))


class FileBlobStore:
    """One file per block under data_dir/{camera hex}/{start_ms}.cbk.

    Metadata goes to an append-only ``index.jsonl`` per camera; the last
    journal entry for a start_ms wins, which makes overwrites and crash
    recovery trivial to reason about.
    """

    def __init__(self, data_dir: str | Path, capacity_bytes: int | None = None):
        self.root = Path(data_dir)
        self.capacity_bytes = capacity_bytes
        self._lock = threading.Lock()
        self._index: dict[BlockLocator, BlockMeta] = {}
        self._used = 0
        self.root.mkdir(parents=True, exist_ok=True)
        self._load()

    def _camera_dir(self, camera_id: bytes) -> Path:
        return self.root / camera_id.hex()

    def _load(self) -> None:
        for cam_dir in sorted(self.root.iterdir()):
            journal = cam_dir / "index.jsonl"
            if not cam_dir.is_dir() or not journal.exists():
                continue
            try:
                camera_id = bytes.fromhex(cam_dir.name)
            except ValueError:
                continue
            for line in journal.read_text().splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                loc = BlockLocator(camera_id, entry["start_ms"])
                if not (cam_dir / f"{loc.start_ms}.cbk").exists():
                    continue
                self._index[loc] = BlockMeta(loc, entry["end_ms"],
                                             entry["size"], entry["etag"])
        self._used = sum(m.size for m in self._index.values())

    def put_block(self, camera_id: bytes, start_ms: int, data: bytes) -> str:
        loc = BlockLocator(bytes(camera_id), start_ms)
        meta = BlockMeta(loc, peek_end_ms(data, start_ms), len(data), _etag(data))
        with self._lock:
            previous = self._index.get(loc)
            new_used = self._used + len(data) - (previous.size if previous else 0)
            if self.capacity_bytes is not None and new_used > self.capacity_bytes:
                raise StorageFullError(
                    f"store capacity {self.capacity_bytes} B exceeded")
            cam_dir = self._camera_dir(loc.camera_id)
            try:
                cam_dir.mkdir(parents=True, exist_ok=True)
                tmp = cam_dir / f".{start_ms}.tmp"
                tmp.write_bytes(data)
                tmp.replace(cam_dir / f"{start_ms}.cbk")
                with open(cam_dir / "index.jsonl", "a") as fh:
                    fh.write(json.dumps(meta.to_json()) + "\n")
            except OSError as exc:
                raise StorageIoError(str(exc)) from exc
            self._index[loc] = meta
            self._used = new_used
        return meta.etag

    def get_block(self, camera_id: bytes, start_ms: int) -> bytes:
        loc = BlockLocator(bytes(camera_id), start_ms)
        with self._lock:
            if loc not in self._index:
                raise BlockNotFoundError(f"no block at {start_ms} ms")
        try:
            return (self._camera_dir(loc.camera_id) / f"{start_ms}.cbk").read_bytes()
        except OSError as exc:
            raise StorageIoError(str(exc)) from exc

    def list_blocks(self, camera_id: bytes, from_ms: int, to_ms: int) -> list[BlockMeta]:
        cid = bytes(camera_id)
        with self._lock:
            metas = [m for loc, m in self._index.items()
                     if loc.camera_id == cid
                     and m.locator.start_ms <= to_ms and m.end_ms >= from_ms]
        return sorted(metas, key=lambda m: m.locator.start_ms)

    def tamper(self, camera_id: bytes, start_ms: int,
               mutate: Callable[[bytes], bytes]) -> None:
        data = mutate(self.get_block(camera_id, start_ms))
        loc = BlockLocator(bytes(camera_id), start_ms)
        with self._lock:
            if loc not in self._index:
                raise BlockNotFoundError(f"no block at {start_ms} ms")
            try:
                (self._camera_dir(loc.camera_id) / f"{start_ms}.cbk").write_bytes(data)
            except OSError as exc:
                raise StorageIoError(str(exc)) from exc
            old = self._index[loc]
            self._index[loc] = BlockMeta(loc, old.end_ms, len(data), _etag(data))


# --- REST service -----------------------------------------------------------------

_BLOCK_PATH = re.compile(r"^/v1/cameras/([0-9a-fA-F]{32})/blocks/(\d+)$")
_LIST_PATH = re.compile(r"^/v1/cameras/([0-9a-fA-F]{32})/blocks$")
_TAMPER_PATH = re.compile(r"^/v1/cameras/([0-9a-fA-F]{32})/blocks/(\d+)/tamper$")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    store: FileBlobStore  # set on the server class

    def log_message(self, fmt, *args):
        logger.debug("storage: " + fmt, *args)

    def _reply(self, code: int, body: bytes,
               content_type: str = "application/octet-stream") -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _reply_json(self, code: int, obj) -> None:
        self._reply(code, json.dumps(obj).encode(), "application/json")

    def do_GET(self):
        url = urlparse(self.path)
        m = _BLOCK_PATH.match(url.path)
        if m:
            try:
                data = self.server.store.get_block(bytes.fromhex(m.group(1)),
                                                   int(m.group(2)))
            except BlockNotFoundError:
                self._reply_json(404, {"error": "not found"})
                return
            self._reply(200, data)
            return
        m = _LIST_PATH.match(url.path)
        if m:
            q = parse_qs(url.query)
            from_ms = int(q.get("from", ["0"])[0])
            to_ms = int(q.get("to", [str(2**63 - 1)])[0])
            metas = self.server.store.list_blocks(bytes.fromhex(m.group(1)),
                                                  from_ms, to_ms)
            self._reply_json(200, [meta.to_json() for meta in metas])
            return
        self._reply_json(404, {"error": "no such route"})

    def do_PUT(self):
        m = _BLOCK_PATH.match(urlparse(self.path).path)
        if not m:
            self._reply_json(404, {"error": "no such route"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        data = self.rfile.read(length)
        try:
            etag = self.server.store.put_block(bytes.fromhex(m.group(1)),
                                               int(m.group(2)), data)
        except StorageFullError:
            self._reply_json(507, {"error": "storage full"})
            return
        except StorageIoError as exc:
            self._reply_json(500, {"error": str(exc)})
            return
        self._reply_json(200, {"etag": etag})

    def do_POST(self):
        m = _TAMPER_PATH.match(urlparse(self.path).path)
        if not m:
            self._reply_json(404, {"error": "no such route"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        spec = json.loads(self.rfile.read(length) or b"{}")
        offset, xor = spec.get("offset", 0), spec.get("xor", 0xFF)

        def mutate(data: bytes) -> bytes:
            if not data:
                return data
            buf = bytearray(data)
            buf[offset % len(buf)] ^= xor
            return bytes(buf)

        try:
            self.server.store.tamper(bytes.fromhex(m.group(1)),
                                     int(m.group(2)), mutate)
        except BlockNotFoundError:
            self._reply_json(404, {"error": "not found"})
            return
        self._reply_json(200, {"tampered": True})


class StorageService:
    """Blocking or background HTTP front end over a local store."""

    def __init__(self, store, host: str = "127.0.0.1", port: int = 0):
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.store = store
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def serve_forever(self) -> None:
        logger.info("storage service listening on %s", self.base_url)
        self._httpd.serve_forever()

    def start_background(self) -> "StorageService":
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class RemoteBlobStore:
    """requests-backed client with the same interface as the local stores."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()

    def _url(self, camera_id: bytes, suffix: str) -> str:
        return f"{self.base_url}/v1/cameras/{camera_id.hex()}/blocks{suffix}"

    def put_block(self, camera_id: bytes, start_ms: int, data: bytes) -> str:
        try:
            resp = self._session.put(self._url(camera_id, f"/{start_ms}"),
                                     data=data, timeout=self.timeout)
        except requests.RequestException as exc:
            raise StorageUnavailableError(str(exc)) from exc
        if resp.status_code == 507:
            raise StorageFullError("remote store is full")
        if resp.status_code != 200:
            raise StorageIoError(f"put failed with HTTP {resp.status_code}")
        return resp.json()["etag"]

    def get_block(self, camera_id: bytes, start_ms: int) -> bytes:
        try:
            resp = self._session.get(self._url(camera_id, f"/{start_ms}"),
                                     timeout=self.timeout)
        except requests.RequestException as exc:
            raise StorageUnavailableError(str(exc)) from exc
        if resp.status_code == 404:
            raise BlockNotFoundError(f"no block at {start_ms} ms")
        if resp.status_code != 200:
            raise StorageIoError(f"get failed with HTTP {resp.status_code}")
        return resp.content

    def list_blocks(self, camera_id: bytes, from_ms: int, to_ms: int) -> list[BlockMeta]:
        try:
            resp = self._session.get(self._url(camera_id, ""),
                                     params={"from": from_ms, "to": to_ms},
                                     timeout=self.timeout)
        except requests.RequestException as exc:
            raise StorageUnavailableError(str(exc)) from exc
        if resp.status_code != 200:
            raise StorageIoError(f"list failed with HTTP {resp.status_code}")
        cid = bytes(camera_id)
        return [BlockMeta(BlockLocator(cid, e["start_ms"]), e["end_ms"],
                          e["size"], e["etag"])
                for e in resp.json()]

    def tamper_bit(self, camera_id: bytes, start_ms: int,
                   offset: int, xor: int = 0xFF) -> None:
        resp = self._session.post(self._url(camera_id, f"/{start_ms}/tamper"),
                                  json={"offset": offset, "xor": xor},
                                  timeout=self.timeout)
        if resp.status_code == 404:
            raise BlockNotFoundError(f"no block at {start_ms} ms")
