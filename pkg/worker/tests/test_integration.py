"""End-to-end check against the search engine's external-evaluator backend.

Skipped when the search package is not installed; the worker itself never
imports it.
"""

import sys

import pytest

paretonas = pytest.importorskip("paretonas")

from paretonas.evaluator import (  # noqa: E402
    EvalStatus,
    EvaluationRequest,
    ExternalEvaluatorPool,
)
from paretonas.genotype import SearchSpace, random_genotype  # noqa: E402

WORKER_CMD = [sys.executable, "-m", "nasworker"]


def test_pool_round_trip_with_real_worker():
    space = SearchSpace(12, 1, 2, max_layers=4)
    pool = ExternalEvaluatorPool(WORKER_CMD, workers=1)
    try:
        for req_id, seed in ((1, 0), (2, 5)):
            req = EvaluationRequest(id=req_id,
                                    genotype=random_genotype(space, seed),
                                    epsilons=(0.0, 0.05), train_epochs=1,
                                    seed=seed)
            res = pool.evaluate(req)
            assert res.id == req_id
            assert res.status is EvalStatus.OK
            assert res.adversarial_accuracies[0] == res.clean_accuracy
            assert 0.0 <= res.clean_accuracy <= 1.0
    finally:
        pool.close()
