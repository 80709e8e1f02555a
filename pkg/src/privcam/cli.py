"""Command-line entry point orchestrating every scenario.

State for each party lives in plain files under a state directory
(``owner/``, ``camera/``, or a delegatee directory), so multi-step
scenarios compose:

    privcam init --state run/ --depth 8 --epoch-seconds 2
    privcam record --state run/ --frames 100 --data-dir run/blobs
    privcam stream --state run/ --data-dir run/blobs

Every protocol error maps to a distinct exit code (see errors module);
``attack`` runs a pairing under a scripted adversary and exits with the
code of whatever the attack broke.
"""

import argparse
import json
import sys
from pathlib import Path

from . import client as client_mod
from . import rand
from .camera import CameraConfig, Recorder
from .errors import NoAccessError, NotInitializedError, PrivcamError
from .identity import IdentityKeypair, IdentityPublic
from .keytree import KeyStore, TreeParams
from .metrics import StageTimings
from .protocols import (
    CameraDevice,
    DelegateeContext,
    EscrowMaterial,
    OwnerContext,
    PairingConfig,
    run_delegation,
    run_init_pairing,
)
from .storage import FileBlobStore, InMemoryBlobStore, RemoteBlobStore, StorageService
from .transport import AdversaryScript, PairingChannels
from .timebase import RealClock

_BENCH_DEPTHS = (24, 26, 28, 30, 32)
_BENCH_EPOCHS = (10, 60)


# --- state files ---------------------------------------------------------------

def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def save_owner(dirpath: Path, ctx: OwnerContext) -> None:
    _write(dirpath / "identity.bin", ctx.identity.to_secret_bytes())
    _write(dirpath / "camera_pub.bin", ctx.camera_pub.canonical())
    _write(dirpath / "store.ckt", ctx.store.to_bytes())
    _write(dirpath / "escrow.bin", ctx.escrow.encode())


def load_owner(dirpath: Path) -> OwnerContext:
    store = KeyStore.from_bytes((dirpath / "store.ckt").read_bytes())
    return OwnerContext(
        identity=IdentityKeypair.from_secret_bytes((dirpath / "identity.bin").read_bytes()),
        camera_pub=IdentityPublic.from_canonical((dirpath / "camera_pub.bin").read_bytes()),
        params=store.params,
        store=store,
        escrow=EscrowMaterial.decode((dirpath / "escrow.bin").read_bytes()),
    )


def save_delegatee(dirpath: Path, ctx: DelegateeContext) -> None:
    _write(dirpath / "identity.bin", ctx.identity.to_secret_bytes())
    _write(dirpath / "camera_pub.bin", ctx.camera_pub.canonical())
    _write(dirpath / "store.ckt", ctx.store.to_bytes())


def load_delegatee(dirpath: Path) -> DelegateeContext:
    return DelegateeContext(
        identity=IdentityKeypair.from_secret_bytes((dirpath / "identity.bin").read_bytes()),
        camera_pub=IdentityPublic.from_canonical((dirpath / "camera_pub.bin").read_bytes()),
        store=KeyStore.from_bytes((dirpath / "store.ckt").read_bytes()),
    )


def save_camera(dirpath: Path, device: CameraDevice) -> None:
    _write(dirpath / "factory_identity.bin", device.factory_identity.to_secret_bytes())
    meta = {"last_admin_ms": device.last_admin_ms,
            "initialized": device.initialized}
    _write(dirpath / "device.json", json.dumps(meta).encode())
    for name in ("op_identity.bin", "owner_pub.bin", "store.ckt",
                 "escrow.bin", "wifi.bin"):
        (dirpath / name).unlink(missing_ok=True)
    if device.initialized:
        _write(dirpath / "op_identity.bin", device.op_identity.to_secret_bytes())
        _write(dirpath / "owner_pub.bin", device.owner_pub.canonical())
        _write(dirpath / "store.ckt", device.store.to_bytes())
        _write(dirpath / "escrow.bin", device.escrow_blob)
        _write(dirpath / "wifi.bin", device.wifi_credentials or b"")


def load_camera(dirpath: Path) -> CameraDevice:
    device = CameraDevice(IdentityKeypair.from_secret_bytes(
        (dirpath / "factory_identity.bin").read_bytes()))
    meta = json.loads((dirpath / "device.json").read_text())
    if meta.get("initialized"):
        device.install(
            op_identity=IdentityKeypair.from_secret_bytes(
                (dirpath / "op_identity.bin").read_bytes()),
            owner_pub=IdentityPublic.from_canonical(
                (dirpath / "owner_pub.bin").read_bytes()),
            store=KeyStore.from_bytes((dirpath / "store.ckt").read_bytes()),
            escrow_blob=(dirpath / "escrow.bin").read_bytes(),
            wifi=(dirpath / "wifi.bin").read_bytes(),
        )
        device.last_admin_ms = meta.get("last_admin_ms", -1)
    return device


def _cursor_path(state: Path) -> Path:
    return state / "camera" / "recorder.json"


def load_cursor(state: Path) -> dict:
    path = _cursor_path(state)
    if path.exists():
        return json.loads(path.read_text())
    return {}


def save_cursor(state: Path, counter: int, next_ms: int) -> None:
    _write(_cursor_path(state), json.dumps(
        {"next_counter": counter, "next_start_ms": next_ms}).encode())


# --- config file -----------------------------------------------------------------

_CONFIG_KEYS = {"frame_rate", "frame_bytes", "depth", "epoch_seconds",
                "block_size", "storage_url", "data_dir"}


def parse_config_file(path: str) -> dict:
    """Flat key=value text with # comments; unknown keys are an error."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PrivcamError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise PrivcamError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _open_store(args) -> object:
    if getattr(args, "storage_url", None):
        return RemoteBlobStore(args.storage_url)
    if getattr(args, "data_dir", None):
        return FileBlobStore(args.data_dir)
    raise PrivcamError("one of --storage-url or --data-dir is required")


# --- subcommands -------------------------------------------------------------------

def cmd_serve_storage(args) -> int:
    host, _, port = args.listen.partition(":")
    service = StorageService(FileBlobStore(args.data_dir),
                             host=host or "127.0.0.1", port=int(port or 0))
    print(f"serving blocks from {args.data_dir} on {service.base_url}", flush=True)
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.shutdown()
    return 0


def cmd_init(args) -> int:
    state = Path(args.state)
    cfg = {}
    if args.config:
        cfg = parse_config_file(args.config)
    depth = args.depth or int(cfg.get("depth", 16))
    epoch_seconds = args.epoch_seconds or int(cfg.get("epoch_seconds", 10))
    device = CameraDevice()
    pairing = PairingConfig(depth=depth, epoch_seconds=epoch_seconds)
    ctx, passphrase = run_init_pairing(device, config=pairing,
                                       channels=PairingChannels.honest())
    save_owner(state / "owner", ctx)
    save_camera(state / "camera", device)
    print(f"camera id: {ctx.camera_id.hex()}")
    print(f"key tree: depth {depth}, epoch {epoch_seconds}s, "
          f"origin {ctx.params.origin_ms} ms")
    print("recovery passphrase (write it down, it is shown exactly once):")
    print(f"  {passphrase}")
    return 0


def cmd_record(args) -> int:
    state = Path(args.state)
    cfg = parse_config_file(args.config) if args.config else {}
    device = load_camera(state / "camera")
    if not device.initialized:
        raise NotInitializedError("camera is not initialized; run init first")
    config = CameraConfig(
        frame_rate=args.fps or int(cfg.get("frame_rate", 10)),
        frame_bytes=args.frame_bytes or int(cfg.get("frame_bytes", 102_400)),
        block_size=args.block_size or int(cfg.get("block_size", 32)),
    )
    if not args.storage_url and not args.data_dir:
        args.storage_url = cfg.get("storage_url") or None
        args.data_dir = cfg.get("data_dir") or None
    store = _open_store(args)
    cursor = load_cursor(state)
    start_ms = cursor.get("next_start_ms", device.store.params.origin_ms)
    counter = cursor.get("next_counter", 0)
    recorder = Recorder(device, config, store)
    stats = recorder.record(args.frames, start_ms=start_ms,
                            start_counter=counter, pace=args.pace)
    interval = 1000.0 / config.frame_rate
    save_cursor(state, counter + args.frames,
                int(start_ms + args.frames * interval))
    save_camera(state / "camera", device)
    print(f"captured {stats.frames_captured} frames "
          f"({stats.frames_skipped_no_key} skipped for deleted epochs), "
          f"uploaded {stats.blocks_uploaded} blocks, "
          f"{stats.blocks_pending} pending, {stats.blocks_dropped} dropped")
    for stage, s in sorted(stats.timings.stats().items()):
        print(f"  {stage}: mean {s.mean_ms:.3f} ms, stddev {s.std_ms:.3f} ms "
              f"over {s.count}")
    return 0


def _load_view_context(args):
    state = Path(args.state)
    if args.role == "delegatee":
        return load_delegatee(Path(args.dir) if args.dir else state / "delegatee")
    return load_owner(state / "owner")


def cmd_stream(args) -> int:
    ctx = _load_view_context(args)
    store = _open_store(args)
    if args.live:
        result = client_mod.stream_live(ctx, store, duration_ms=int(args.duration * 1000),
                                        fps=args.fps or 10)
    else:
        result = client_mod.stream_range(ctx, store, args.from_ms, args.to_ms)
    session = result.session
    summary = {
        "rendered": session.rendered,
        "dropped": session.dropped,
        "no_access": session.no_access,
        "quarantined": session.quarantined,
        "stages": {stage: {"mean_ms": s.mean_ms, "stddev_ms": s.std_ms,
                           "count": s.count}
                   for stage, s in result.timings.stats().items()},
    }
    if args.output == "json":
        print(json.dumps(summary, indent=2))
    else:
        print(f"rendered {session.rendered} frames, dropped {session.dropped}, "
              f"no-access {session.no_access}, quarantined {session.quarantined}")
        for stage, s in sorted(result.timings.stats().items()):
            print(f"  {stage}: mean {s.mean_ms:.3f} ms, stddev {s.std_ms:.3f} ms "
                  f"over {s.count}")
    if args.report:
        Path(args.report).write_text(result.timings.to_csv())
    if args.delays:
        Path(args.delays).write_text(result.delays_jsonl())
    return 0


def _epoch_range(params: TreeParams, from_ms: int, to_ms: int) -> tuple[int, int]:
    end = params.origin_ms + params.lifespan_seconds() * 1000 - 1
    return params.epoch_of(from_ms), params.epoch_of(min(to_ms, end))


def cmd_delegate(args) -> int:
    state = Path(args.state)
    ctx = load_owner(state / "owner")
    first, last = _epoch_range(ctx.params, args.from_ms, args.to_ms)
    delegatee = run_delegation(ctx, first, last, channels=PairingChannels.honest())
    save_delegatee(Path(args.out), delegatee)
    print(f"delegated epochs [{first}, {last}] "
          f"({len(delegatee.store)} keys) to {args.out}")
    return 0


def cmd_delete(args) -> int:
    state = Path(args.state)
    ctx = load_owner(state / "owner")
    device = load_camera(state / "camera")
    first, last = _epoch_range(ctx.params, args.from_ms, args.to_ms)
    client_mod.delete_range(ctx, device, first, last)
    save_owner(state / "owner", ctx)
    save_camera(state / "camera", device)
    print(f"deleted epochs [{first}, {last}]; stored ciphertext is now garbage")
    return 0


def cmd_reset(args) -> int:
    state = Path(args.state)
    ctx = load_owner(state / "owner")
    device = load_camera(state / "camera")
    client_mod.factory_reset(ctx, device)
    save_camera(state / "camera", device)
    for name in ("identity.bin", "camera_pub.bin", "store.ckt", "escrow.bin"):
        (state / "owner" / name).unlink(missing_ok=True)
    _cursor_path(state).unlink(missing_ok=True)
    print("factory reset complete; camera awaits a fresh pairing")
    return 0


def cmd_recover(args) -> int:
    state = Path(args.state)
    device = load_camera(state / "camera")
    ctx = client_mod.recover(device, args.passphrase)
    save_owner(Path(args.out), ctx)
    print(f"access recovered; owner state written to {args.out}")
    return 0


def cmd_attack(args) -> int:
    script = AdversaryScript.from_json(Path(args.script).read_text())
    channels = PairingChannels.with_adversary(script)
    if args.target == "delegation":
        device = CameraDevice()
        ctx, _ = run_init_pairing(device, config=PairingConfig(depth=8, epoch_seconds=2),
                                  channels=PairingChannels.honest())
        run_delegation(ctx, args.from_epoch, args.to_epoch, channels=channels)
    else:
        run_init_pairing(CameraDevice(),
                         config=PairingConfig(depth=8, epoch_seconds=2),
                         channels=channels)
    print("protocol completed despite the adversary script")
    return 0


def _humanize_bytes(n: int) -> str:
    if n >= 1 << 30:
        return f"{n >> 30} GiB"
    if n >= 1 << 20:
        return f"{n >> 20} MiB"
    return f"{n} B"


def bench_capacity_table() -> list[dict]:
    rows = []
    for depth in _BENCH_DEPTHS:
        row = {"depth": depth}
        for eps in _BENCH_EPOCHS:
            params = TreeParams(depth, eps, 0)
            row[f"lifespan_years_{eps}s"] = round(params.lifespan_years())
        row["worst_case_bytes"] = TreeParams(depth, 10, 0).worst_case_key_storage_bytes()
        rows.append(row)
    return rows


def run_bench(frames: int, frame_bytes: int) -> tuple[StageTimings, StageTimings]:
    """Record and stream ``frames`` frames in-process and return both reports.

    Worst-case tree shape (depth 32, 10 s epochs) at 10 fps, mirroring
    the per-stage delay methodology of averaging over the run.
    """
    device = CameraDevice()
    ctx, _ = run_init_pairing(device,
                              config=PairingConfig(depth=32, epoch_seconds=10),
                              channels=PairingChannels.honest())
    store = InMemoryBlobStore()
    config = CameraConfig(frame_rate=10, frame_bytes=frame_bytes, block_size=32)
    stats = Recorder(device, config, store).record(frames)
    result = client_mod.stream_range(ctx, store)
    if len(result.frames) != stats.frames_captured:
        raise PrivcamError("bench stream did not recover every recorded frame")
    return stats.timings, result.timings


def cmd_bench(args) -> int:
    camera_timings, client_timings = run_bench(args.frames, args.frame_bytes)
    capacity = bench_capacity_table()
    if args.output == "json":
        payload = {
            "camera": {k: vars(v) for k, v in camera_timings.stats().items()},
            "client": {k: vars(v) for k, v in client_timings.stats().items()},
            "capacity": capacity,
        }
        text = json.dumps(payload, indent=2)
    elif args.output == "csv":
        lines = ["device,stage,count,mean_ms,stddev_ms"]
        for device_name, timings in (("camera", camera_timings),
                                     ("client", client_timings)):
            for stage, s in sorted(timings.stats().items()):
                lines.append(f"{device_name},{stage},{s.count},"
                             f"{s.mean_ms:.6f},{s.std_ms:.6f}")
        lines.append("")
        lines.append("depth,lifespan_years_10s,lifespan_years_60s,worst_case_storage")
        for row in capacity:
            lines.append(f"{row['depth']},{row['lifespan_years_10s']},"
                         f"{row['lifespan_years_60s']},"
                         f"{_humanize_bytes(row['worst_case_bytes'])}")
        text = "\n".join(lines)
    else:
        lines = [f"per-stage delay over {args.frames} frames "
                 f"({args.frame_bytes} B payloads):"]
        for device_name, timings in (("camera", camera_timings),
                                     ("client", client_timings)):
            for stage, s in sorted(timings.stats().items()):
                lines.append(f"  {device_name:7s} {stage:22s} "
                             f"{s.mean_ms:9.3f} ms  (sd {s.std_ms:.3f}, n={s.count})")
        lines.append("")
        lines.append("key-tree capacity:")
        lines.append("  depth   10s epochs      60s epochs      worst-case key storage")
        for row in capacity:
            lines.append(f"  {row['depth']:<7d} {row['lifespan_years_10s']:>5d} years"
                         f"     {row['lifespan_years_60s']:>6d} years"
                         f"     {_humanize_bytes(row['worst_case_bytes'])}")
        text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# --- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privcam",
        description="end-to-end encrypted camera system simulator")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed the simulation byte source for reproducibility")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve-storage", help="run the untrusted blob store")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--listen", default="127.0.0.1:8571")
    p.set_defaults(func=cmd_serve_storage)

    p = sub.add_parser("init", help="pair a factory-fresh camera with an owner")
    p.add_argument("--state", required=True)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--epoch-seconds", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("record", help="run the camera pipeline")
    p.add_argument("--state", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--fps", type=int, default=None)
    p.add_argument("--frame-bytes", type=int, default=None)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--storage-url", default=None)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--pace", action="store_true",
                   help="honor the frame interval in real time")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("stream", help="verified playback (historical or live)")
    p.add_argument("--state", required=True)
    p.add_argument("--role", choices=["owner", "delegatee"], default="owner")
    p.add_argument("--dir", default=None,
                   help="delegatee state directory (with --role delegatee)")
    p.add_argument("--from", dest="from_ms", type=int, default=None)
    p.add_argument("--to", dest="to_ms", type=int, default=None)
    p.add_argument("--live", action="store_true")
    p.add_argument("--duration", type=float, default=5.0,
                   help="live mode duration in seconds")
    p.add_argument("--fps", type=int, default=None)
    p.add_argument("--storage-url", default=None)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--output", choices=["text", "json"], default="text")
    p.add_argument("--report", default=None, help="write per-stage CSV here")
    p.add_argument("--delays", default=None, help="write delay series JSONL here")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("delegate", help="grant a delegatee an epoch window")
    p.add_argument("--state", required=True)
    p.add_argument("--from", dest="from_ms", type=int, required=True)
    p.add_argument("--to", dest="to_ms", type=int, required=True)
    p.add_argument("--out", required=True, help="delegatee state directory")
    p.set_defaults(func=cmd_delegate)

    p = sub.add_parser("delete", help="cryptographically delete a time range")
    p.add_argument("--state", required=True)
    p.add_argument("--from", dest="from_ms", type=int, required=True)
    p.add_argument("--to", dest="to_ms", type=int, required=True)
    p.set_defaults(func=cmd_delete)

    p = sub.add_parser("reset", help="factory reset the camera")
    p.add_argument("--state", required=True)
    p.set_defaults(func=cmd_reset)

    p = sub.add_parser("recover", help="recover owner access from escrow")
    p.add_argument("--state", required=True)
    p.add_argument("--passphrase", required=True)
    p.add_argument("--out", required=True, help="new owner state directory")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("attack", help="run a pairing under an adversary script")
    p.add_argument("--script", required=True)
    p.add_argument("--target", choices=["init", "delegation"], default="init")
    p.add_argument("--from-epoch", type=int, default=0)
    p.add_argument("--to-epoch", type=int, default=0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("bench", help="per-stage delays and key-tree capacity table")
    p.add_argument("--frames", type=int, default=1000)
    p.add_argument("--frame-bytes", type=int, default=102_400)
    p.add_argument("--output", choices=["text", "csv", "json"], default="text")
    p.add_argument("--out", default=None, help="also write the report to this file")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None:
            with rand.seeded(args.seed):
                return args.func(args)
        return args.func(args)
    except PrivcamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: missing state file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
