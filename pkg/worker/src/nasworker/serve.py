"""JSON-lines evaluation service over standard input/output.

Protocol: the worker first emits ``{"hello": {"protocol": 1}}``, then answers
one request per line. A request carries ``id``, ``genotype``, ``epsilons``,
``train_epochs``, and ``seed``; the reply echoes the id with
``clean_accuracy``, ``adversarial_accuracies`` (one per epsilon, in order),
and ``status`` of ``"ok"`` or ``"failed"``. A bad request fails that reply,
never the stream. All logging goes to stderr; stdout carries only protocol
lines.
"""

from __future__ import annotations

import json
import logging
import sys

import numpy as np
import torch
from torch import nn

from .arch import ArchSpec, build_network, parse_genotype
from .data import class_subset, prepare

PROTOCOL_VERSION = 1

# Attack settings mirror the search engine's reference attack: iterated
# sign-gradient ascent with step epsilon/4, projected into the epsilon ball
# and the unit box after every step.
PGD_ITERS = 10

# Training defaults (the published experiments leave these unstated).
LEARNING_RATE = 1e-3
BATCH_SIZE = 32

_FEASIBILITY_SLACK = 1e-6

log = logging.getLogger("nasworker")


class RequestError(ValueError):
    """Request line is structurally invalid."""


# -- request handling --------------------------------------------------------


def _parse_request(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RequestError(f"not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise RequestError("request must be an object")
    if isinstance(obj.get("id"), bool) or not isinstance(obj.get("id"), int):
        raise RequestError("request id must be an integer")
    return obj


def _request_fields(obj: dict) -> tuple[ArchSpec, tuple[float, ...], int, int]:
    spec = parse_genotype(obj.get("genotype"))
    raw_eps = obj.get("epsilons")
    if not isinstance(raw_eps, list) or not raw_eps:
        raise RequestError("epsilons must be a non-empty list")
    epsilons = []
    for value in raw_eps:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RequestError("epsilons must be numbers")
        if value < 0 or not np.isfinite(value):
            raise RequestError("epsilons must be finite and >= 0")
        epsilons.append(float(value))
    epochs = obj.get("train_epochs")
    if isinstance(epochs, bool) or not isinstance(epochs, int) or epochs < 0:
        raise RequestError("train_epochs must be a non-negative integer")
    seed = obj.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise RequestError("seed must be an integer")
    return spec, tuple(epsilons), epochs, seed


# -- training and attack -----------------------------------------------------


def train(model: nn.Module, x: torch.Tensor, y: torch.Tensor,
          epochs: int, seed: int) -> None:
    optimizer = torch.optim.Adam(model.parameters(), lr=LEARNING_RATE)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(seed)
    model.train()
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(len(x)))
        for start in range(0, len(x), BATCH_SIZE):
            batch = order[start:start + BATCH_SIZE]
            optimizer.zero_grad()
            loss = loss_fn(model(x[batch]), y[batch])
            loss.backward()
            optimizer.step()


def accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    model.eval()
    with torch.no_grad():
        predictions = model(x).argmax(dim=1)
    return float((predictions == y).float().mean().item())


def pgd_attack(model: nn.Module, x: torch.Tensor, y: torch.Tensor,
               epsilon: float, iters: int = PGD_ITERS) -> torch.Tensor:
    """Sign-gradient ascent, projected into the epsilon ball and unit box."""
    if epsilon == 0.0:
        return x
    step = epsilon / 4.0
    loss_fn = nn.CrossEntropyLoss()
    adv = x.clone()
    model.eval()
    for _ in range(iters):
        adv = adv.detach().requires_grad_(True)
        loss = loss_fn(model(adv), y)
        (grad,) = torch.autograd.grad(loss, adv)
        with torch.no_grad():
            adv = adv + step * grad.sign()
            adv = torch.clamp(adv, x - epsilon, x + epsilon)
            adv = torch.clamp(adv, 0.0, 1.0)
    adv = adv.detach()
    # feasibility asserted here so a projection bug can never leak out as a
    # plausible-looking accuracy
    assert torch.all((adv - x).abs() <= epsilon + _FEASIBILITY_SLACK)
    assert torch.all(adv >= 0.0) and torch.all(adv <= 1.0)
    return adv


def evaluate_request(spec: ArchSpec, epsilons: tuple[float, ...],
                     epochs: int, seed: int) -> tuple[float, list[float]]:
    """Train a fresh network for the request and measure its accuracies."""
    x_train, y_train, x_test, y_test = class_subset(spec.num_classes)
    side, channels = spec.input_resize, spec.in_channels
    train_x = prepare(x_train, side, channels)
    test_x = prepare(x_test, side, channels)
    train_y = torch.from_numpy(y_train)
    test_y = torch.from_numpy(y_test)

    model = build_network(spec, seed)
    train(model, train_x, train_y, epochs, seed)

    clean = accuracy(model, test_x, test_y)
    adversarial = []
    for eps in epsilons:
        if eps == 0.0:
            adversarial.append(clean)
            continue
        adv = pgd_attack(model, test_x, test_y, eps)
        adversarial.append(accuracy(model, adv, test_y))
    return clean, adversarial


# -- protocol loop -----------------------------------------------------------


def handle_line(line: str) -> dict:
    """One request line to one response object; failures never propagate."""
    request_id = -1
    count = 0
    try:
        obj = _parse_request(line)
        request_id = obj["id"]
        spec, epsilons, epochs, seed = _request_fields(obj)
        count = len(epsilons)
        clean, adversarial = evaluate_request(spec, epsilons, epochs, seed)
    except Exception as exc:
        log.warning("request %s failed: %s", request_id, exc)
        return {"id": request_id, "clean_accuracy": 0.0,
                "adversarial_accuracies": [0.0] * count, "status": "failed"}
    return {"id": request_id, "clean_accuracy": clean,
            "adversarial_accuracies": adversarial, "status": "ok"}


def serve(stdin, stdout) -> None:
    """Answer requests until the input stream closes."""
    stdout.write(json.dumps({"hello": {"protocol": PROTOCOL_VERSION}}) + "\n")
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(json.dumps(handle_line(line), sort_keys=True) + "\n")
        stdout.flush()


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(name)s: %(message)s")
    torch.set_num_threads(1)  # keep multi-worker pools from oversubscribing
    serve(sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
