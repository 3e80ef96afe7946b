"""Acceptance criterion for the worker: protocol conformance under replay.

Prints one [PASS]/[FAIL] verdict line, mirroring the search package's
acceptance suite. The replay corpus is 50 requests over hand-built genotype
variants; the worker must answer each with an id-matched, schema-valid
response, echo clean accuracy for epsilon 0, and reach clean accuracy of at
least 0.7 on a fixed-seed 5-epoch 2-class run, all inside 5 minutes.
"""

import json
import subprocess
import sys
import time

RESPONSE_KEYS = {"id", "clean_accuracy", "adversarial_accuracies", "status"}


def _verdict(capsys, name: str, ok: bool, elapsed: float) -> None:
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {name} ({elapsed:.2f}s)")


def _layer(kind, ifm, cin, k, stride, ofm, cout, caps_in=1, caps_out=1):
    return {"layer_type": kind, "ifm_size": ifm, "in_channels": cin,
            "in_capsules": caps_in, "kernel_size": k, "stride": stride,
            "ofm_size": ofm, "out_channels": cout, "out_capsules": caps_out}


def _conv_net(channels, kernel, with_skip):
    size = 12
    mid = (size - kernel) + 1
    layers = [
        _layer("conv", size, 1, kernel, 1, mid, channels),
        _layer("conv", mid, channels, 3, 1, mid - 2, channels),
        _layer("fully_connected", mid - 2, channels, mid - 2, 1, 1, 2),
    ]
    skips = [[0, 2]] if with_skip else []
    return {"input_resize": size, "layers": layers, "skip_connections": skips}


def _capsule_net(caps, groups):
    size = 10
    layers = [
        _layer("conv", size, 1, 3, 1, 8, 8),
        _layer("conv_capsule", 8, 8, 3, 1, 6, groups, caps_out=caps),
        _layer("fully_connected_capsule", 6, groups, 6, 1, 1, 2,
               caps_in=caps, caps_out=8),
    ]
    return {"input_resize": size, "layers": layers, "skip_connections": []}


def _replay_corpus():
    genotypes = []
    for kernel in (3, 5):
        for channels in (4, 8):
            for with_skip in (False, True):
                genotypes.append(_conv_net(channels, kernel, with_skip))
    for caps in (2, 4, 8):
        for groups in (4, 16):
            genotypes.append(_capsule_net(caps, groups))
    lines = []
    for i in range(50):
        geno = genotypes[i % len(genotypes)]
        lines.append(json.dumps({
            "id": 1000 + i,
            "genotype": geno,
            "epsilons": [0.0, 0.05],
            "train_epochs": 1,
            "seed": i,
        }))
    return lines


def test_protocol_conformance_replay(capsys):
    start = time.perf_counter()
    ok = False
    try:
        requests = _replay_corpus()
        proc = subprocess.run(
            [sys.executable, "-m", "nasworker"],
            input="\n".join(requests) + "\n",
            capture_output=True, text=True, timeout=280)
        assert proc.returncode == 0
        lines = proc.stdout.splitlines()
        assert json.loads(lines[0]) == {"hello": {"protocol": 1}}

        responses = [json.loads(line) for line in lines[1:]]
        assert len(responses) == 50
        for i, res in enumerate(responses):
            assert set(res) == RESPONSE_KEYS
            assert res["id"] == 1000 + i
            assert res["status"] == "ok"
            assert isinstance(res["clean_accuracy"], float)
            assert len(res["adversarial_accuracies"]) == 2
            assert all(isinstance(a, float) and 0.0 <= a <= 1.0
                       for a in [res["clean_accuracy"],
                                 *res["adversarial_accuracies"]])
            # epsilon 0 must echo the clean accuracy bit for bit
            assert res["adversarial_accuracies"][0] == res["clean_accuracy"]

        # fixed-seed 5-epoch 2-class run clears the accuracy floor
        trained = subprocess.run(
            [sys.executable, "-m", "nasworker"],
            input=json.dumps({"id": 1, "genotype": _conv_net(8, 3, False),
                              "epsilons": [0.0], "train_epochs": 5,
                              "seed": 0}) + "\n",
            capture_output=True, text=True, timeout=120)
        result = json.loads(trained.stdout.splitlines()[1])
        assert result["status"] == "ok"
        assert result["clean_accuracy"] >= 0.7

        elapsed = time.perf_counter() - start
        assert elapsed < 300.0
        ok = True
    finally:
        _verdict(capsys, "worker protocol conformance",
                 ok, time.perf_counter() - start)
