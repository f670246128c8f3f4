"""Drives the dithc CLI end to end: exit codes and report contents."""
import json
import os
import subprocess
import sys
import tempfile

BIN = sys.argv[1]
SHAPES = sys.argv[2]
failures = []


def run(args, expect, name):
    with tempfile.TemporaryDirectory() as d:
        report = os.path.join(d, "r.jsonl")
        p = subprocess.run([BIN, *args, "--report", report], capture_output=True, text=True, timeout=600)
        recs = []
        if os.path.exists(report):
            with open(report) as f:
                recs = [json.loads(line) for line in f if line.strip()]
        if p.returncode != expect:
            failures.append(f"{name}: exit {p.returncode}, expected {expect}\n{p.stderr}")
        elif recs and recs[-1].get("exit_code") != expect:
            failures.append(f"{name}: summary exit_code {recs[-1].get('exit_code')}")
        print(f"{name}: exit {p.returncode}, {len(recs)} records")
        return recs


recs = run(["--mode", "train", "--model", "toy", "--batch", "2", "--steps", "3"], 0, "train")
steps = [r for r in recs if r.get("type") == "step"]
if len(steps) != 3 or not all(r["loss"] > 0 for r in steps):
    failures.append(f"train: expected 3 step records with positive loss, got {steps}")
if recs and recs[-1].get("status") != "ok":
    failures.append("train: summary status not ok")

run(["--mode", "train", "--batch", "0"], 2, "bad batch")
run(["--mode", "train", "--model", "nope"], 2, "bad model")
oot = run(["--mode", "train", "--batch", "2", "--steps", "1", "--fast-cap", "1M"], 3, "out of tier")
if oot and "capacity_report" not in json.dumps(oot[-1]):
    failures.append("out of tier: summary lacks capacity_report")
am = run(["--mode", "train", "--batch", "2", "--steps", "2", "--fast-cap", "3M", "--automem", "on"], 0, "automem")
if am and am[-1].get("status") != "ok":
    failures.append("automem: run did not complete")
run(["--mode", "train", "--batch", "2", "--steps", "2", "--ranks", "2", "--transport", "inproc"], 0, "dp inproc")
bench = run(["--mode", "bench-gemm", "--shapes", SHAPES, "--reps", "1"], 0, "bench-gemm")
if len([r for r in bench if r.get("type") == "gemm"]) != 5:
    failures.append("bench-gemm: expected 5 gemm records")

for f in failures:
    print("FAIL", f)
sys.exit(1 if failures else 0)
