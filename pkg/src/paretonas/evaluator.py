"""Fitness-evaluation contract and its two in-package implementations.

An evaluator answers: given an architecture, a list of perturbation budgets,
and a small training budget, what clean and adversarial accuracies does the
candidate reach? The surrogate backend answers from a closed-form synthetic
formula (fast, exactly reproducible); the external backend forwards requests
to a worker process over a newline-delimited JSON protocol so real training
code can live out of process. The toy backend lives in :mod:`.toy_model`.
"""

from __future__ import annotations

import hashlib
import json
import math
import queue
import subprocess
import threading
from dataclasses import dataclass
from enum import Enum

from . import genotype as gt
from . import hw_model

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT_S = 3600.0

_RESPONSE_FIELDS = ("id", "clean_accuracy", "adversarial_accuracies", "status")


class EvaluatorError(Exception):
    """Base class for evaluation-backend failures."""


class ProtocolError(EvaluatorError):
    """Worker spoke something other than the wire protocol."""


class EvaluatorTimeout(EvaluatorError):
    """Worker did not answer within the configured budget."""


class WorkerExitError(EvaluatorError):
    """Worker process ended while a request was outstanding."""


class EvalStatus(Enum):
    OK = "ok"
    FAILED = "failed"


@dataclass(frozen=True)
class EvaluationRequest:
    id: int
    genotype: gt.Genotype
    epsilons: tuple[float, ...]
    train_epochs: int
    seed: int

    def __post_init__(self) -> None:
        eps = tuple(float(e) for e in self.epsilons)
        object.__setattr__(self, "epsilons", eps)
        if any(e < 0 for e in eps):
            raise ValueError("epsilons must be non-negative")
        if list(eps) != sorted(eps):
            raise ValueError("epsilons must be sorted ascending")
        if self.train_epochs < 1:
            raise ValueError("train_epochs must be >= 1")


@dataclass(frozen=True)
class EvaluationResult:
    id: int
    clean_accuracy: float
    adversarial_accuracies: tuple[float, ...]
    status: EvalStatus

    def __post_init__(self) -> None:
        object.__setattr__(self, "adversarial_accuracies",
                           tuple(float(a) for a in self.adversarial_accuracies))


def failed_result(req: EvaluationRequest) -> EvaluationResult:
    """Worst-case sentinel; the search engine pairs it with infinite cost."""
    return EvaluationResult(id=req.id, clean_accuracy=0.0,
                            adversarial_accuracies=(0.0,) * len(req.epsilons),
                            status=EvalStatus.FAILED)


class Evaluator:
    """Contract base. Implementations must be deterministic for a fixed
    (genotype, epsilons, train_epochs, seed) tuple and safe to call from
    concurrent workers."""

    def evaluate(self, req: EvaluationRequest) -> EvaluationResult:
        raise NotImplementedError

    def evaluate_safe(self, req: EvaluationRequest) -> EvaluationResult:
        """Total version of evaluate: any backend failure becomes a Failed
        result so one bad candidate never aborts a generation."""
        try:
            return self.evaluate(req)
        except Exception:
            return failed_result(req)

    def evaluate_many(self, reqs: list[EvaluationRequest]) -> list[EvaluationResult]:
        return [self.evaluate_safe(r) for r in reqs]

    def close(self) -> None:
        pass


# -- surrogate --------------------------------------------------------------


@dataclass(frozen=True)
class SurrogateConfig:
    """Constants of the synthetic accuracy formula. The formula is not a
    model of any real dataset; it exists so search runs are cheap and byte
    reproducible while preserving the qualitative trade-off that bigger,
    more capsule-heavy networks resist larger perturbations."""

    log_params_gain: float = 0.35
    depth_gain: float = 0.1
    offset: float = -2.5
    jitter: float = 0.02
    eps_base: float = 0.01


def _logistic(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def _seeded_unit(g: gt.Genotype, seed: int) -> float:
    """Stable value in [-1, 1) derived from the genotype and the seed."""
    digest = hashlib.sha256(f"{gt.encode(g)}|{seed}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**63 - 1.0


def capsule_fraction(g: gt.Genotype) -> float:
    return sum(d.layer_type.is_capsule for d in g.layers) / len(g.layers)


def total_params(g: gt.Genotype) -> int:
    return sum(hw_model.layer_shape_params(d).w_l for d in g.layers)


class SurrogateEvaluator(Evaluator):
    def __init__(self, config: SurrogateConfig | None = None) -> None:
        self.config = config or SurrogateConfig()

    def evaluate(self, req: EvaluationRequest) -> EvaluationResult:
        cfg = self.config
        params = max(total_params(req.genotype), 1)
        depth = len(req.genotype.layers)
        clean = _logistic(cfg.log_params_gain * math.log10(params)
                          + cfg.depth_gain * depth + cfg.offset)
        clean += cfg.jitter * _seeded_unit(req.genotype, req.seed)
        clean = min(max(clean, 0.0), 1.0)
        eps0 = cfg.eps_base * (1.0 + capsule_fraction(req.genotype))
        advs = tuple(clean * math.exp(-e / eps0) for e in req.epsilons)
        return EvaluationResult(id=req.id, clean_accuracy=clean,
                                adversarial_accuracies=advs,
                                status=EvalStatus.OK)


# -- external worker protocol ----------------------------------------------


def _request_line(req: EvaluationRequest) -> str:
    payload = {
        "id": req.id,
        "genotype": gt.to_obj(req.genotype),
        "epsilons": list(req.epsilons),
        "train_epochs": req.train_epochs,
        "seed": req.seed,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _parse_response(line: str, req: EvaluationRequest) -> EvaluationResult:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"response is not valid JSON: {line!r}") from exc
    if not isinstance(obj, dict) or set(obj) != set(_RESPONSE_FIELDS):
        raise ProtocolError(f"response fields must be exactly {_RESPONSE_FIELDS}")
    if obj["id"] != req.id:
        raise ProtocolError(f"response id {obj['id']} != request id {req.id}")
    if obj["status"] not in ("ok", "failed"):
        raise ProtocolError(f"unknown status {obj['status']!r}")
    advs = obj["adversarial_accuracies"]
    if not isinstance(advs, list) or len(advs) != len(req.epsilons):
        raise ProtocolError("adversarial_accuracies length mismatch")
    values = [obj["clean_accuracy"], *advs]
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProtocolError(f"accuracy {v!r} is not a number")
        if not 0.0 <= float(v) <= 1.0:
            raise ProtocolError(f"accuracy {v} outside [0, 1]")
    return EvaluationResult(id=req.id, clean_accuracy=float(obj["clean_accuracy"]),
                            adversarial_accuracies=tuple(float(a) for a in advs),
                            status=EvalStatus(obj["status"]))


class ExternalWorker:
    """One worker process plus the reader thread that feeds its lines back.

    Access is serialized per instance; use a pool for concurrency.
    """

    def __init__(self, command: list[str], timeout: float = DEFAULT_TIMEOUT_S,
                 handshake_timeout: float = 60.0) -> None:
        self.command = list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._proc = subprocess.Popen(
            self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1)
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        try:
            hello = self._next_line(handshake_timeout)
            try:
                obj = json.loads(hello)
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"bad handshake line: {hello!r}") from exc
            if not isinstance(obj, dict) or not isinstance(obj.get("hello"), dict) \
                    or obj["hello"].get("protocol") != PROTOCOL_VERSION:
                raise ProtocolError(f"unsupported handshake: {hello!r}")
        except EvaluatorError:
            self.close()
            raise

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _next_line(self, timeout: float) -> str:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            self.close()
            raise EvaluatorTimeout(
                f"worker gave no answer within {timeout} s") from None
        if line is None:
            raise WorkerExitError(
                f"worker exited (code {self._proc.poll()})")
        return line

    @property
    def alive(self) -> bool:
        return self._proc.poll() is None

    def evaluate(self, req: EvaluationRequest) -> EvaluationResult:
        with self._lock:
            if not self.alive:
                raise WorkerExitError("worker process is gone")
            try:
                assert self._proc.stdin is not None
                self._proc.stdin.write(_request_line(req) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise WorkerExitError("worker closed its input") from exc
            return _parse_response(self._next_line(self.timeout), req)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                if self._proc.stdin is not None:
                    self._proc.stdin.close()
                self._proc.wait(timeout=5.0)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()


def external_evaluate(req: EvaluationRequest,
                      worker: ExternalWorker) -> EvaluationResult:
    """Run one request on an already-handshaken worker."""
    return worker.evaluate(req)


class ExternalEvaluatorPool(Evaluator):
    """N worker processes behind the evaluator contract.

    evaluate_many fans requests out across the pool and reassembles results
    in request order, so concurrency never changes what the caller sees. A
    worker that dies is respawned once per request before giving up on it.
    """

    def __init__(self, command: list[str], workers: int = 1,
                 timeout: float = DEFAULT_TIMEOUT_S) -> None:
        if workers < 1:
            raise ValueError("need at least one worker")
        self.command = list(command)
        self.timeout = timeout
        self._workers = [ExternalWorker(command, timeout=timeout)
                         for _ in range(workers)]

    def evaluate(self, req: EvaluationRequest) -> EvaluationResult:
        return self._workers[0].evaluate(req)

    def _run_one(self, slot: int, req: EvaluationRequest) -> EvaluationResult:
        worker = self._workers[slot]
        if not worker.alive:
            try:
                worker = ExternalWorker(self.command, timeout=self.timeout)
                self._workers[slot] = worker
            except (OSError, EvaluatorError):
                return failed_result(req)
        try:
            return worker.evaluate(req)
        except EvaluatorError:
            return failed_result(req)

    def evaluate_many(self, reqs: list[EvaluationRequest]) -> list[EvaluationResult]:
        pending: queue.Queue[tuple[int, EvaluationRequest]] = queue.Queue()
        for pos, req in enumerate(reqs):
            pending.put((pos, req))
        results: list[EvaluationResult | None] = [None] * len(reqs)

        def drain(slot: int) -> None:
            while True:
                try:
                    pos, req = pending.get_nowait()
                except queue.Empty:
                    return
                results[pos] = self._run_one(slot, req)

        threads = [threading.Thread(target=drain, args=(slot,))
                   for slot in range(len(self._workers))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert all(r is not None for r in results)
        return results  # type: ignore[return-value]

    def close(self) -> None:
        for w in self._workers:
            w.close()
