"""Command line: ``notary <command>``.

Dataflow: setup -> gen -> feed -> seal -> serve -> audit / verify-user.
Keys live in ``--keys`` or ``$NOTARY_KEYS`` (default ``./keys``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from pathlib import Path

from . import ake, bench, crypto, policy
from . import workload as wl
from .crypto import KeyPair, PublicKey
from .model import ChunkId, Mode
from .sealing import ChunkPolicy, Enclave, Sealer
from .store import TAMPER_EDITS, ChunkStore, read_header, tamper
from .verify import verify_range, verify_user_range

log = logging.getLogger("notary")

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
AUDITOR_ID = b"auditor"
SP_ID = b"sp.campus"
TAMPER_ENV = "NOTARY_ALLOW_TAMPER"


def user_vid(device: bytes) -> bytes:
    return b"user-" + device.hex().encode()


def _keydir(args) -> Path:
    return Path(args.keys or os.environ.get("NOTARY_KEYS", "keys"))


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def _device(text: str) -> bytes:
    try:
        return bytes.fromhex(text.replace(":", ""))
    except ValueError:
        raise SystemExit(f"device id must be hex: {text!r}")


# -- setup -------------------------------------------------------------------

def cmd_setup(args) -> int:
    kd = _keydir(args)
    if kd.exists() and any(kd.iterdir()) and not args.force:
        print(f"{kd} is not empty; pass --force to overwrite", file=sys.stderr)
        return EXIT_ERROR
    kd.mkdir(parents=True, exist_ok=True)
    registry = ake.Registry(args.sp_id.encode())
    devices = {}
    made = 0

    def make(name: str) -> KeyPair:
        nonlocal made
        kp = KeyPair.generate()
        probe = b"self-test " + name.encode()
        if not crypto.verify_sig(kp.public, probe, crypto.sign(kp, probe)):
            raise RuntimeError(f"self-test failed for {name}")
        kp.save(kd / f"{name}.key")
        kp.public.save(kd / f"{name}.pub")
        made += 1
        return kp

    make("enclave")
    make("notifier")
    auditor = make("auditor")
    registry.add(ake.VerifierEntry(AUDITOR_ID, "auditor", auditor.public))
    for i in range(args.devices):
        dev = wl.device_id(i)
        kp = make(f"device-{dev.hex()}")
        devices[dev.hex()] = kp.public.hex()
        registry.add(ake.VerifierEntry(user_vid(dev), "user", kp.public, dev))
    registry.save(kd / "registry.json")
    (kd / "devices.json").write_text(json.dumps(devices, indent=1))
    _emit({"keypairs": made, "dir": str(kd)})
    return EXIT_OK


# -- workload ------------------------------------------------------------------

def cmd_gen(args) -> int:
    w = wl.generate(days=args.days, sensors=args.sensors, devices=args.devices,
                    events_per_day=args.events_per_day, seed=args.seed, start=args.start)
    n = wl.write_events(args.out, w.readings())
    _emit({"events": n, "out": args.out})
    return EXIT_OK


def cmd_rules(args) -> int:
    kd = _keydir(args)
    enclave = KeyPair.load(kd / "enclave.key")
    if args.campus:
        rules = wl.campus_rules(start=args.start, days=args.days, sensors=args.sensors,
                                devices=args.devices, seed=args.seed)
    else:
        rules = policy.RuleSet(policy.Polarity.parse(args.default))
    if args.rule_file:
        rules = policy.with_rules(rules, policy.load_rule_file(args.rule_file))
    rules.save(args.out, enclave)
    _emit({"rules": len(rules.rules), "digest": rules.digest.hex(), "out": args.out})
    return EXIT_OK


def cmd_notify(args) -> int:
    kd = _keydir(args)
    enclave = KeyPair.load(kd / "enclave.key")
    rules = policy.RuleSet.load(args.rules, enclave.public)
    new = policy.load_rule_file(args.rule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rule in new:
        if args.model == "nom":
            notifier = KeyPair.load(kd / "notifier.key")
            rules, bundle = policy.publish_rule_nom(rule, rules, enclave, notifier.public)
            doc = policy.broadcast(bundle, notifier, enclave.public)
            path = out / f"broadcast-{rule.rule_id}.json"
            path.write_text(json.dumps(doc, indent=1))
            written.append(str(path))
        else:
            devices = json.loads((kd / "devices.json").read_text())
            targets = {bytes.fromhex(d): PublicKey.fromhex(pk) for d, pk in devices.items()
                       if rule.devices is None or bytes.fromhex(d) in rule.devices}
            rules, bundles = policy.publish_rule_nam(rule, rules, enclave, targets)
            for dev, bundle in bundles.items():
                path = out / f"notice-{rule.rule_id}-{dev.hex()}.json"
                path.write_text(json.dumps(bundle.to_json()))
                written.append(str(path))
    rules.save(args.rules, enclave)
    _emit({"rules": len(rules.rules), "digest": rules.digest.hex(), "written": written})
    return EXIT_OK


def cmd_ack(args) -> int:
    kd = _keydir(args)
    dev = _device(args.device)
    keys = KeyPair.load(kd / f"device-{dev.hex()}.key")
    enclave_pk = PublicKey.load(kd / "enclave.pub")
    bundle = policy.NoticeBundle.from_json(json.loads(Path(args.notice).read_text()))
    rule = policy.open_notice(bundle, keys, enclave_pk)
    ack = policy.ack_rule_nam(keys, dev, rule)
    with open(args.out, "a") as fh:
        fh.write(json.dumps(ack.to_json()) + "\n")
    _emit({"device": dev.hex(), "rule": rule.rule_id})
    return EXIT_OK


def cmd_feed(args) -> int:
    enclave_pk = PublicKey.load(_keydir(args) / "enclave.pub")
    with open(args.out, "wb") as fh:
        n = wl.write_feed(fh, wl.encrypt_feed(wl.read_events(args.events), enclave_pk, args.batch))
    _emit({"batches": n, "out": args.out})
    return EXIT_OK


def _ack_registry(kd: Path, path, rules: policy.RuleSet) -> policy.AckRegistry:
    devices = json.loads((kd / "devices.json").read_text())
    registry = policy.AckRegistry({bytes.fromhex(d): PublicKey.fromhex(pk) for d, pk in devices.items()})
    for ack in policy.load_acks(path):
        registry = policy.register_ack(registry, ack, rules)
    return registry


def cmd_seal(args) -> int:
    kd = _keydir(args)
    enclave_keys = KeyPair.load(kd / "enclave.key")
    mode = Mode.parse(args.mode)
    store = ChunkStore(args.store, mode, args.buckets)
    rules = policy.RuleSet.load(args.rules, enclave_keys.public)
    acks = _ack_registry(kd, args.acks, rules) if args.acks else None
    chunk_policy = ChunkPolicy(max_bytes=args.max_bytes, max_age=args.max_age, mode=mode,
                               bucket_count=store.bucket_count)
    sealer = Sealer(enclave_keys, chunk_policy, store.put_chunk, store.put_seed)
    enclave = Enclave(enclave_keys, rules, sealer, acks)
    with open(args.feed, "rb") as fh:
        for ct in wl.read_feed(fh):
            enclave.ingest(ct)
    enclave.close()
    store.flush()
    store.put_rules(args.rules)
    _emit({"chunks": sealer.chunks_sealed, "readings": enclave.accepted, "filtered": enclave.filtered,
           "rejected_batches": enclave.rejected, "store": args.store})
    return EXIT_OK


# -- store -------------------------------------------------------------------

def cmd_store(args) -> int:
    store = ChunkStore(args.store)
    if args.store_cmd == "ls":
        rows = []
        for tag in store.streams():
            for i in store.indices(tag):
                cid = ChunkId(i, tag)
                try:
                    h = read_header(store.read_bytes(cid)[:512])
                    rows.append({"chunk": store.path_for(cid).name, "records": h.record_count,
                                 "pads": h.pad_count, "from": h.t_first, "to": h.t_last, "final": h.final})
                except Exception as exc:  # report, don't stop listing
                    rows.append({"chunk": store.path_for(cid).name, "error": str(exc)})
        _emit({"mode": store.mode.name.lower(), "chunks": rows})
        return EXIT_OK
    if args.store_cmd == "cat":
        chunk = store.load(ChunkId(args.index, args.tag))
        _emit({
            "chunk": [chunk.id.stream_tag, chunk.id.index], "mode": chunk.mode.name.lower(),
            "final": chunk.final, "pad_count": chunk.pad_count, "g": chunk.g.hex(),
            "records": [_record_json(r) for r in chunk.records[: args.limit]],
            "record_count": len(chunk.records),
        })
        return EXIT_OK
    # tamper
    if os.environ.get(TAMPER_ENV) != "1" and not args.i_am_testing:
        print(f"tamper is a test harness operation; set {TAMPER_ENV}=1 or pass --i-am-testing",
              file=sys.stderr)
        return EXIT_ERROR
    note = tamper(store.path_for(ChunkId(args.index, args.tag)), args.edit, random.Random(args.seed))
    store.invalidate()
    store.rebuild_index()
    _emit({"tampered": note})
    return EXIT_OK


def _record_json(r) -> dict:
    out = {"type": type(r).__name__.lower(), "time": r.time}
    for name in ("device", "sensor", "params"):
        v = getattr(r, name, None)
        if v is not None:
            out[name] = v.hex() if name == "device" else v.decode(errors="replace")
    return out


# -- retrieval -------------------------------------------------------------------

def cmd_serve(args) -> int:
    registry = ake.Registry.load(_keydir(args) / "registry.json")
    server = ake.LogServer(ake.parse_address(args.listen), registry.sp_id, registry,
                           ake.LogService(ChunkStore(args.store)))
    host, port = server.server_address[:2]
    print(f"serving {args.store} on {host}:{port}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def _session_identity(kd: Path, role: str, device: bytes | None):
    if role == "auditor":
        return AUDITOR_ID, KeyPair.load(kd / "auditor.key")
    return user_vid(device), KeyPair.load(kd / f"device-{device.hex()}.key")


def _fetch(args, role: str, query: ake.LogQuery) -> bytes:
    kd = _keydir(args)
    v_id, keys = _session_identity(kd, role, query.device)
    return ake.fetch(args.server, v_id, keys, query)


def cmd_fetch(args) -> int:
    dev = _device(args.device) if args.device else None
    kind = "audit" if args.role == "auditor" and dev is None else "user"
    query = ake.LogQuery(kind, args.t_from, args.t_to, dev)
    payload = _fetch(args, args.role, query)
    Path(args.out).write_bytes(payload)
    _emit({"bytes": len(payload), "out": args.out})
    return EXIT_OK


def cmd_audit(args) -> int:
    enclave_pk = PublicKey.load(_keydir(args) / "enclave.pub")
    if args.server:
        payload = _fetch(args, "auditor", ake.LogQuery("audit", args.t_from, args.t_to))
        items = ake.decode_audit_payload(payload)
    else:
        items = ChunkStore(args.store).get_chunks(t_from=args.t_from, t_to=args.t_to)
    report = verify_range(items, enclave_pk)
    _emit(report.to_json())
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_verify_user(args) -> int:
    kd = _keydir(args)
    enclave_pk = PublicKey.load(kd / "enclave.pub")
    dev = _device(args.device)
    if args.server:
        views = ake.decode_user_payload(_fetch(args, "user", ake.LogQuery("user", args.t_from, args.t_to, dev)))
    else:
        views = bench.user_day_views(ChunkStore(args.store), dev, args.t_from or 0, args.t_to or 2**63)
    reports, contiguity = verify_user_range(views, enclave_pk, dev)
    ok = contiguity.ok and all(r.reliable for r in reports) and bool(reports)
    matched = sorted(t for r in reports for t in r.matched) if ok else None
    out = {
        "ok": ok, "chunks": len(reports), "contiguity": contiguity.to_json(),
        "failures": [r.to_json() for r in reports if not r.reliable],
        "matched_times": matched, "present": None if not ok else bool(matched),
    }
    if args.claim:
        out["claim"] = args.claim
        out["claim_holds"] = None if not ok else (bool(matched) if args.claim == "present" else not matched)
    _emit(out)
    if not ok:
        return EXIT_FAIL
    if args.claim and not out["claim_holds"]:
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(args) -> int:
    report = bench.run(args.out, chunks=args.chunks, seed=args.seed, events_per_day=args.events_per_day,
                       max_bytes=args.max_bytes, max_age=args.max_age,
                       audit_counts=tuple(int(x) for x in args.audit_counts.split(",")))
    print("metric,measured,reference,threshold")
    for row in report["rows"]:
        print(",".join(f"{v:.4g}" if isinstance(v, float) else str(v) for v in row))
    print(f"wrote {args.out}/report.json, results.csv and figures", file=sys.stderr)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _range_args(p) -> None:
    p.add_argument("--from", dest="t_from", type=int, default=None, help="epoch seconds")
    p.add_argument("--to", dest="t_to", type=int, default=None, help="epoch seconds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="notary", description=__doc__.splitlines()[0])
    ap.add_argument("--keys", help="key directory (default $NOTARY_KEYS or ./keys)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("setup", help="generate keypairs and the verifier registry")
    p.add_argument("--devices", type=int, default=10)
    p.add_argument("--sp-id", default=SP_ID.decode())
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_setup)

    p = sub.add_parser("gen", help="generate a synthetic WiFi event file")
    p.add_argument("--out", required=True)
    p.add_argument("--days", type=float, default=1)
    p.add_argument("--sensors", type=int, default=490)
    p.add_argument("--devices", type=int, default=5000)
    p.add_argument("--events-per-day", type=int, default=wl.DEFAULT_EVENTS_PER_DAY)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=int, default=wl.DEFAULT_START)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("rules", help="write a signed rule set")
    p.add_argument("--out", required=True)
    p.add_argument("--campus", action="store_true", help="include the sample campus rules")
    p.add_argument("--default", default="opt-in", choices=["opt-in", "opt-out"])
    p.add_argument("--rule-file", help="JSONL rules to add")
    p.add_argument("--days", type=int, default=180)
    p.add_argument("--sensors", type=int, default=490)
    p.add_argument("--devices", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=int, default=wl.DEFAULT_START)
    p.set_defaults(func=cmd_rules)

    p = sub.add_parser("notify", help="publish new rules to users")
    p.add_argument("--rules", required=True, help="signed rule set to extend")
    p.add_argument("--rule", required=True, help="JSONL file of new rules")
    p.add_argument("--model", choices=["nom", "nam"], default="nom")
    p.add_argument("--out", required=True, help="directory for broadcast or notice files")
    p.set_defaults(func=cmd_notify)

    p = sub.add_parser("ack", help="acknowledge a notice as a device")
    p.add_argument("--device", required=True)
    p.add_argument("--notice", required=True)
    p.add_argument("--out", required=True, help="JSONL file of acknowledgments to append to")
    p.set_defaults(func=cmd_ack)

    p = sub.add_parser("feed", help="encrypt an event file for the enclave")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=wl.FEED_BATCH)
    p.set_defaults(func=cmd_feed)

    p = sub.add_parser("seal", help="run the enclave over an encrypted feed")
    p.add_argument("--feed", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--acks", help="JSONL acknowledgments; enables notice-and-ack filtering")
    p.add_argument("--mode", default="mixed", choices=["entire", "mixed", "per-sensor", "per-user"])
    p.add_argument("--chunk-bytes", "--max-bytes", dest="max_bytes", type=int, default=5 * 1024 * 1024)
    p.add_argument("--chunk-age", "--max-age", dest="max_age", type=int, default=1800, help="seconds")
    p.add_argument("--buckets", type=int, default=490)
    p.set_defaults(func=cmd_seal)

    p = sub.add_parser("store", help="inspect the chunk store")
    p.add_argument("--store", required=True)
    ss = p.add_subparsers(dest="store_cmd", required=True)
    ss.add_parser("ls")
    c = ss.add_parser("cat")
    c.add_argument("--tag", default="main")
    c.add_argument("--index", type=int, required=True)
    c.add_argument("--limit", type=int, default=20)
    t = ss.add_parser("tamper", help="apply an adversarial edit (test harness)")
    t.add_argument("--tag", default="main")
    t.add_argument("--index", type=int, required=True)
    t.add_argument("--edit", choices=TAMPER_EDITS, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--i-am-testing", action="store_true")
    p.set_defaults(func=cmd_store)

    p = sub.add_parser("serve", help="serve authenticated log retrieval")
    p.add_argument("--store", required=True)
    p.add_argument("--listen", default="127.0.0.1:7400")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("fetch", help="fetch raw logs over an authenticated session")
    p.add_argument("--server", required=True)
    p.add_argument("--role", choices=["auditor", "user"], required=True)
    p.add_argument("--device")
    p.add_argument("--out", required=True)
    _range_args(p)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("audit", help="verify every chunk in a time range")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--server")
    g.add_argument("--store")
    _range_args(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify-user", help="check a device's presence or absence")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--server")
    g.add_argument("--store")
    p.add_argument("--device", required=True)
    p.add_argument("--claim", choices=["present", "absent"])
    _range_args(p)
    p.set_defaults(func=cmd_verify_user)

    p = sub.add_parser("bench", help="measure seal time, storage overhead and verification cost")
    p.add_argument("--out", required=True)
    p.add_argument("--chunks", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--events-per-day", type=int, default=1_800_000)
    p.add_argument("--max-bytes", type=int, default=5 * 1024 * 1024)
    p.add_argument("--max-age", type=int, default=1800)
    p.add_argument("--audit-counts", default="1,5,10")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, policy.IntegrityError, ake.SessionAborted, ValueError) as exc:
        print(f"notary: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
