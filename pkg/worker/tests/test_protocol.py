"""Wire-protocol behavior, exercised in process through handle_line/serve."""

import io
import json

import pytest
import torch

from nasworker.serve import evaluate_request, handle_line, pgd_attack, serve
from nasworker.arch import parse_genotype

from test_arch import genotype

RESPONSE_KEYS = {"id", "clean_accuracy", "adversarial_accuracies", "status"}


def request_line(req_id=1, epsilons=(0.0, 0.05), epochs=1, seed=0, geno=None):
    return json.dumps({"id": req_id,
                       "genotype": geno if geno is not None else genotype(),
                       "epsilons": list(epsilons),
                       "train_epochs": epochs, "seed": seed})


def test_ok_response_schema():
    res = handle_line(request_line(req_id=42))
    assert set(res) == RESPONSE_KEYS
    assert res["id"] == 42 and res["status"] == "ok"
    assert len(res["adversarial_accuracies"]) == 2
    assert 0.0 <= res["clean_accuracy"] <= 1.0
    assert all(0.0 <= a <= 1.0 for a in res["adversarial_accuracies"])


def test_zero_epsilon_equals_clean():
    res = handle_line(request_line(epsilons=(0.0, 0.1)))
    assert res["adversarial_accuracies"][0] == res["clean_accuracy"]


def test_failed_on_bad_genotype():
    res = handle_line(request_line(req_id=9, geno={"layers": []}))
    assert res == {"id": 9, "clean_accuracy": 0.0,
                   "adversarial_accuracies": [], "status": "failed"}


def test_failed_keeps_epsilon_arity():
    geno = genotype()
    geno["layers"][-1]["out_channels"] = 99  # class count the dataset lacks
    res = handle_line(request_line(req_id=3, epsilons=(0.0, 0.1, 0.2),
                                   geno=geno))
    assert res["status"] == "failed"
    assert res["adversarial_accuracies"] == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("line", [
    "not json",
    json.dumps([1, 2]),
    json.dumps({"genotype": {}}),
    json.dumps({"id": "seven"}),
    json.dumps({"id": True}),
])
def test_failed_on_malformed_request(line):
    res = handle_line(line)
    assert res["status"] == "failed" and res["id"] == -1


@pytest.mark.parametrize("patch", [
    {"epsilons": []},
    {"epsilons": [-0.1]},
    {"epsilons": ["a"]},
    {"train_epochs": -1},
    {"train_epochs": 1.5},
    {"seed": "zero"},
])
def test_failed_on_bad_fields(patch):
    obj = json.loads(request_line(req_id=5))
    obj.update(patch)
    res = handle_line(json.dumps(obj))
    assert res["status"] == "failed" and res["id"] == 5


def test_serve_handshake_first_and_stream_survives():
    stdin = io.StringIO("\n".join([
        "", "garbage", request_line(req_id=1, epsilons=(0.0,), epochs=0),
    ]) + "\n")
    stdout = io.StringIO()
    serve(stdin, stdout)
    lines = stdout.getvalue().splitlines()
    assert json.loads(lines[0]) == {"hello": {"protocol": 1}}
    assert len(lines) == 3  # blank line skipped, bad line answered
    assert json.loads(lines[1])["status"] == "failed"
    good = json.loads(lines[2])
    assert good["id"] == 1 and good["status"] == "ok"


def test_evaluation_is_deterministic():
    spec = parse_genotype(genotype())
    first = evaluate_request(spec, (0.0, 0.05), epochs=1, seed=11)
    second = evaluate_request(spec, (0.0, 0.05), epochs=1, seed=11)
    assert first == second


def test_training_improves_over_init():
    geno = genotype()
    untrained = handle_line(request_line(epochs=0, seed=2, geno=geno))
    trained = handle_line(request_line(epochs=5, seed=2, geno=geno))
    assert trained["clean_accuracy"] >= untrained["clean_accuracy"]
    assert trained["clean_accuracy"] >= 0.7


def test_pgd_ball_and_box_constraints():
    spec = parse_genotype(genotype())
    from nasworker.arch import build_network
    from nasworker.data import class_subset, prepare
    x_train, y_train, x_test, y_test = class_subset(2)
    x = prepare(x_test[:40], spec.input_resize, spec.in_channels)
    y = torch.from_numpy(y_test[:40])
    model = build_network(spec, seed=0)
    for eps in (0.01, 0.1, 0.5):
        adv = pgd_attack(model, x, y, eps)
        assert torch.all((adv - x).abs() <= eps + 1e-6)
        assert torch.all(adv >= 0.0) and torch.all(adv <= 1.0)
    assert torch.equal(pgd_attack(model, x, y, 0.0), x)


def test_attack_hurts_accuracy_at_large_epsilon():
    res = handle_line(request_line(epsilons=(0.0, 0.5), epochs=5, seed=0))
    assert res["status"] == "ok"
    clean, (at_zero, at_half) = res["clean_accuracy"], res["adversarial_accuracies"]
    assert at_zero == clean
    assert at_half <= clean
