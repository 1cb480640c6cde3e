import json

import pytest

from notary import ake
from notary.cli import main
from notary.store import ChunkStore
from notary import workload as wl


def run(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr().out
    return rc, (json.loads(out) if out.strip().startswith("{") else out)


@pytest.fixture
def pipeline(tmp_path, capsys):
    k = str(tmp_path / "keys")
    ev, feed, rules, store = (str(tmp_path / n) for n in ("ev.csv", "feed.bin", "rules.json", "store"))
    assert run(capsys, "--keys", k, "setup", "--devices", "5")[0] == 0
    assert run(capsys, "gen", "--out", ev, "--days", "0.1", "--events-per-day", "30000", "--devices", "5",
               "--sensors", "20")[0] == 0
    assert run(capsys, "--keys", k, "rules", "--out", rules, "--campus", "--devices", "5", "--sensors", "20")[0] == 0
    assert run(capsys, "--keys", k, "feed", "--events", ev, "--out", feed)[0] == 0
    rc, out = run(capsys, "--keys", k, "seal", "--feed", feed, "--store", store, "--rules", rules,
                  "--max-age", "600")
    assert rc == 0 and out["chunks"] > 1 and out["rejected_batches"] == 0
    return {"keys": k, "store": store, "rules": rules, "feed": feed, "tmp": tmp_path}


def test_setup_counts_keypairs(tmp_path, capsys):
    rc, out = run(capsys, "--keys", str(tmp_path / "keys"), "setup", "--devices", "10")
    assert rc == 0 and out["keypairs"] == 13
    assert len(list((tmp_path / "keys").glob("*.key"))) == 13


def test_bench_smoke(tmp_path, capsys):
    rc, out = run(capsys, "bench", "--out", str(tmp_path / "b"), "--chunks", "3", "--max-bytes", "200000",
                  "--audit-counts", "1,2")
    assert rc == 0 and out.startswith("metric,measured")
    report = json.loads((tmp_path / "b" / "report.json").read_text())
    assert report["storage"]["chunks"] == 3 and report["audit"]["2"]["ok"]
    assert (tmp_path / "b" / "storage.png").exists()


def test_setup_refuses_to_overwrite(tmp_path, capsys):
    k = str(tmp_path / "keys")
    assert run(capsys, "--keys", k, "setup", "--devices", "1")[0] == 0
    assert run(capsys, "--keys", k, "setup", "--devices", "1")[0] == 1
    assert run(capsys, "--keys", k, "setup", "--devices", "1", "--force")[0] == 0


def test_pipeline_audits_clean(pipeline, capsys):
    rc, out = run(capsys, "--keys", pipeline["keys"], "audit", "--store", pipeline["store"])
    assert rc == 0 and out["ok"] and out["chunks"] > 1
    rc, out = run(capsys, "--keys", pipeline["keys"], "store", "--store", pipeline["store"], "ls")
    assert rc == 0 and len(out["chunks"]) > 1
    rc, out = run(capsys, "--keys", pipeline["keys"], "store", "--store", pipeline["store"], "cat", "--index", "0",
                  "--limit", "3")
    assert rc == 0 and len(out["records"]) == 3


def test_tamper_is_gated_and_detected(pipeline, capsys, monkeypatch):
    k, s = pipeline["keys"], pipeline["store"]
    monkeypatch.delenv("NOTARY_ALLOW_TAMPER", raising=False)
    assert run(capsys, "--keys", k, "store", "--store", s, "tamper", "--index", "0", "--edit", "modify")[0] == 1
    monkeypatch.setenv("NOTARY_ALLOW_TAMPER", "1")
    assert run(capsys, "--keys", k, "store", "--store", s, "tamper", "--index", "0", "--edit", "modify")[0] == 0
    rc, out = run(capsys, "--keys", k, "audit", "--store", s)
    assert rc == 2 and not out["ok"] and out["failures"][0]["reason"] == "signature"


def test_verify_user_locally_and_over_tcp(pipeline, capsys):
    k, s = pipeline["keys"], pipeline["store"]
    dev = wl.device_id(0).hex()
    rc, out = run(capsys, "--keys", k, "verify-user", "--store", s, "--device", dev)
    assert rc == 0 and out["ok"]
    registry = ake.Registry.load(f"{k}/registry.json")
    server = ake.LogServer(("127.0.0.1", 0), registry.sp_id, registry, ake.LogService(ChunkStore(s)))
    server.start_background()
    addr = "127.0.0.1:%d" % server.server_address[1]
    try:
        rc, remote = run(capsys, "--keys", k, "verify-user", "--server", addr, "--device", dev, "--claim",
                         "present" if out["present"] else "absent")
        assert rc == 0 and remote["matched_times"] == out["matched_times"]
        rc, audit = run(capsys, "--keys", k, "audit", "--server", addr)
        assert rc == 0 and audit["ok"]
        dump = pipeline["tmp"] / "raw.bin"
        rc, _ = run(capsys, "--keys", k, "fetch", "--server", addr, "--role", "user", "--device", dev,
                    "--out", str(dump))
        assert rc == 0 and b"views" in dump.read_bytes()
        assert run(capsys, "--keys", k, "fetch", "--server", addr, "--role", "user", "--device", "ff",
                   "--out", str(dump))[0] == 1
    finally:
        server.shutdown()
        server.server_close()


def test_notice_and_ack_flow(tmp_path, capsys):
    k = str(tmp_path / "keys")
    run(capsys, "--keys", k, "setup", "--devices", "3")
    ev, rules, feed, store = (str(tmp_path / n) for n in ("ev.csv", "r.json", "f.bin", "store"))
    run(capsys, "gen", "--out", ev, "--days", "0.05", "--events-per-day", "20000", "--devices", "3",
        "--sensors", "5")
    run(capsys, "--keys", k, "rules", "--out", rules, "--default", "opt-out")
    rule_file = tmp_path / "new.jsonl"
    rule_file.write_text(json.dumps({"rule_id": 1, "polarity": "opt-in", "validity_start": 0,
                                     "validity_end": 2**40}) + "\n")
    rc, out = run(capsys, "--keys", k, "notify", "--rules", rules, "--rule", str(rule_file), "--model", "nam",
                  "--out", str(tmp_path / "notices"))
    assert rc == 0 and len(out["written"]) == 3
    dev0 = wl.device_id(0).hex()
    acks = str(tmp_path / "acks.jsonl")
    assert run(capsys, "--keys", k, "ack", "--device", dev0, "--notice",
               str(tmp_path / "notices" / f"notice-1-{dev0}.json"), "--out", acks)[0] == 0
    run(capsys, "--keys", k, "feed", "--events", ev, "--out", feed)
    rc, out = run(capsys, "--keys", k, "seal", "--feed", feed, "--store", store, "--rules", rules, "--acks", acks)
    assert rc == 0 and 0 < out["filtered"] < out["readings"]
    chunks = ChunkStore(store)
    devices = {r.device for cid in chunks.select() for r in chunks.load(cid).records if hasattr(r, "device")}
    assert devices == {wl.device_id(0)}


def test_nom_broadcast(tmp_path, capsys):
    k = str(tmp_path / "keys")
    run(capsys, "--keys", k, "setup", "--devices", "1")
    rules = str(tmp_path / "r.json")
    run(capsys, "--keys", k, "rules", "--out", rules)
    rule_file = tmp_path / "new.jsonl"
    rule_file.write_text(json.dumps({"rule_id": 4, "polarity": "opt-out", "validity_start": 0,
                                     "validity_end": 10, "daily_window": [0, 60]}) + "\n")
    rc, out = run(capsys, "--keys", k, "notify", "--rules", rules, "--rule", str(rule_file), "--out",
                  str(tmp_path / "b"))
    assert rc == 0 and out["rules"] == 1
    doc = json.loads((tmp_path / "b" / "broadcast-4.json").read_text())
    assert doc["rule"]["rule_id"] == 4


def test_tampered_rules_refused(pipeline, capsys):
    doc = json.loads(open(pipeline["rules"]).read())
    assert doc["default_polarity"] == "opt-in"
    doc["default_polarity"] = "opt-out"
    open(pipeline["rules"], "w").write(json.dumps(doc))
    rc, _ = run(capsys, "--keys", pipeline["keys"], "seal", "--feed", pipeline["feed"], "--store",
                str(pipeline["tmp"] / "s2"), "--rules", pipeline["rules"])
    assert rc == 1
