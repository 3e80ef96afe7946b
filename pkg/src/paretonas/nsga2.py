"""Multi-objective evolutionary engine.

Assembles fitness vectors from evaluator accuracies and hardware costs, ranks
candidates by Pareto dominance with crowding-distance tie-breaking, and runs
the generational loop plus a same-budget random-search baseline. Hypervolume
against a worst-observed reference point summarizes progress per generation.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .evaluator import EvalStatus, EvaluationRequest, Evaluator
from .genotype import (
    Genotype,
    SearchSpace,
    crossover,
    genotype_hash,
    mutate,
    random_genotype,
    to_obj,
)
from .hw_model import CostOverflowError, HardwareConfig, NetworkCost, estimate

MAX_HYPERVOLUME_OBJECTIVES = 6


class LayoutMismatchError(ValueError):
    """Fitness vectors with different objective layouts were compared."""


class BadReferenceError(ValueError):
    """Hypervolume reference point not dominated by every front member."""


class ConfigError(ValueError):
    """Search configuration is inconsistent."""


class ObjectiveSense(Enum):
    MAXIMIZE = "maximize"
    MINIMIZE = "minimize"


_MAX = ObjectiveSense.MAXIMIZE
_MIN = ObjectiveSense.MINIMIZE

# accuracy objectives first, then energy, latency, memory
ONE_EPS_SENSES = (_MAX, _MIN, _MIN, _MIN)
TWO_EPS_SENSES = (_MAX, _MAX, _MIN, _MIN, _MIN)


@dataclass(frozen=True)
class FitnessVector:
    """Objective values with their optimization directions.

    Values are finite except for the failure sentinel, which scores zero
    accuracy and infinite cost so failures sort into the last front.
    """

    values: tuple[float, ...]
    senses: tuple[ObjectiveSense, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "senses", tuple(self.senses))
        if len(self.values) != len(self.senses):
            raise ValueError("one sense per objective required")
        if not self.values:
            raise ValueError("fitness needs at least one objective")
        if any(math.isnan(v) for v in self.values):
            raise ValueError("fitness values must not be NaN")

    @property
    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.values)


def assemble_fitness(adv_accuracies: Sequence[float],
                     cost: NetworkCost) -> FitnessVector:
    """Fitness layout for one or two accuracy objectives plus the three costs."""
    accs = tuple(float(a) for a in adv_accuracies)
    if len(accs) == 1:
        senses = ONE_EPS_SENSES
    elif len(accs) == 2:
        senses = TWO_EPS_SENSES
    else:
        raise ValueError("layouts are defined for one or two accuracy objectives")
    return FitnessVector(values=(*accs, cost.energy_mj, cost.latency_ms,
                                 cost.memory_mib), senses=senses)


def failure_fitness(n_accuracy: int) -> FitnessVector:
    senses = ONE_EPS_SENSES if n_accuracy == 1 else TWO_EPS_SENSES
    if n_accuracy not in (1, 2):
        raise ValueError("layouts are defined for one or two accuracy objectives")
    inf = float("inf")
    return FitnessVector(values=(0.0,) * n_accuracy + (inf, inf, inf),
                         senses=senses)


@dataclass
class Individual:
    """A genotype with its fitness; rank and crowding appear after sorting."""

    genotype: Genotype
    fitness: FitnessVector
    birth_generation: int
    status: EvalStatus
    rank: int | None = None
    crowding: float | None = None


Front = list[Individual]


# -- dominance and ranking ---------------------------------------------------


def dominates(a: FitnessVector, b: FitnessVector) -> bool:
    """True iff a is at least as good everywhere and strictly better once."""
    if a.senses != b.senses:
        raise LayoutMismatchError("fitness layouts differ")
    better = False
    for va, vb, sense in zip(a.values, b.values, a.senses):
        if sense is _MAX:
            if va < vb:
                return False
            if va > vb:
                better = True
        else:
            if va > vb:
                return False
            if va < vb:
                better = True
    return better


def non_dominated_sort(pop: Sequence[Individual]) -> list[Front]:
    """Partition into fronts F_1, F_2, ... and stamp each rank."""
    if not pop:
        raise ValueError("population must be non-empty")
    n = len(pop)
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(pop[i].fitness, pop[j].fitness):
                dominated_by[i].append(j)
                counts[j] += 1
            elif dominates(pop[j].fitness, pop[i].fitness):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts: list[Front] = []
    current = [i for i in range(n) if counts[i] == 0]
    rank = 0
    while current:
        for i in current:
            pop[i].rank = rank
        fronts.append([pop[i] for i in current])
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
        rank += 1
    return fronts


def crowding_distance(front: Sequence[Individual]) -> list[float]:
    """Stamp and return crowding distances for one front.

    Boundary individuals per objective get +inf; interior ones accumulate the
    normalized gap between their neighbors. An objective with zero range is
    skipped entirely, so fronts of identical points all score 0.
    """
    n = len(front)
    dists = [0.0] * n
    if n == 0:
        return dists
    k = len(front[0].fitness.values)
    for j in range(k):
        vals = [ind.fitness.values[j] for ind in front]
        order = sorted(range(n), key=lambda i: vals[i])
        lo, hi = vals[order[0]], vals[order[-1]]
        if lo == hi:
            continue
        span = hi - lo
        dists[order[0]] = dists[order[-1]] = float("inf")
        for pos in range(1, n - 1):
            i = order[pos]
            if math.isinf(dists[i]):
                continue
            contrib = (vals[order[pos + 1]] - vals[order[pos - 1]]) / span
            if math.isnan(contrib):  # inf neighbors on a failed front
                contrib = 0.0
            dists[i] += contrib
    for ind, d in zip(front, dists):
        ind.crowding = d
    return dists


def select_next_population(parents: Sequence[Individual],
                           offspring: Sequence[Individual],
                           target_size: int) -> list[Individual]:
    """Elitist environmental selection over the merged population.

    Whole fronts fill in rank order; the splitting front is truncated by
    descending crowding distance.
    """
    if target_size < 1:
        raise ValueError("target_size must be positive")
    merged = list(parents) + list(offspring)
    if len(merged) < target_size:
        raise ValueError("not enough individuals to fill the next population")
    fronts = non_dominated_sort(merged)
    for front in fronts:
        crowding_distance(front)
    out: list[Individual] = []
    for front in fronts:
        if len(out) + len(front) <= target_size:
            out.extend(front)
        else:
            ranked = sorted(front, key=lambda ind: -ind.crowding)
            out.extend(ranked[:target_size - len(out)])
            break
    return out


# -- hypervolume -------------------------------------------------------------


def _to_min_space(vec: FitnessVector) -> tuple[float, ...]:
    return tuple(-v if s is _MAX else v
                 for v, s in zip(vec.values, vec.senses))


def _prune_min(points: list[tuple[float, ...]]) -> list[tuple[float, ...]]:
    # drop points weakly dominated by another (min space), keep one duplicate
    kept: list[tuple[float, ...]] = []
    for p in sorted(set(points)):
        if not any(all(q[i] <= p[i] for i in range(len(p))) and q != p
                   for q in points if q != p):
            kept.append(p)
    return kept


def _hv_min(points: list[tuple[float, ...]], ref: tuple[float, ...]) -> float:
    if not points:
        return 0.0
    if len(ref) == 1:
        return ref[0] - min(p[0] for p in points)
    pts = sorted(_prune_min(points))
    total = 0.0
    for i, p in enumerate(pts):
        upper = pts[i + 1][0] if i + 1 < len(pts) else ref[0]
        width = upper - p[0]
        if width <= 0:
            continue
        slab = [q[1:] for q in pts[:i + 1]]
        total += width * _hv_min(slab, ref[1:])
    return total


def hypervolume(front: Sequence[FitnessVector],
                reference: Sequence[float]) -> float:
    """Exact measure of the region dominated by the front, up to the reference.

    The reference must be weakly dominated by every member; coordinates equal
    to the reference simply contribute zero volume.
    """
    front = list(front)
    if not front:
        return 0.0
    senses = front[0].senses
    if len(senses) > MAX_HYPERVOLUME_OBJECTIVES:
        raise ValueError(
            f"hypervolume supports at most {MAX_HYPERVOLUME_OBJECTIVES} objectives")
    ref = tuple(float(r) for r in reference)
    if len(ref) != len(senses):
        raise BadReferenceError("reference dimensionality mismatch")
    for vec in front:
        if vec.senses != senses:
            raise LayoutMismatchError("fitness layouts differ")
    ref_min = tuple(-r if s is _MAX else r for r, s in zip(ref, senses))
    pts = [_to_min_space(v) for v in front]
    for p in pts:
        if any(pi > ri for pi, ri in zip(p, ref_min)):
            raise BadReferenceError(
                "reference must be dominated by every front member")
    return _hv_min(pts, ref_min)


def worst_reference(individuals: Sequence[Individual],
                    ) -> tuple[float, ...] | None:
    """Worst observed value per objective over finite-fitness individuals."""
    finite = [ind.fitness for ind in individuals if ind.fitness.is_finite]
    if not finite:
        return None
    senses = finite[0].senses
    ref = []
    for j, sense in enumerate(senses):
        col = [f.values[j] for f in finite]
        ref.append(min(col) if sense is _MAX else max(col))
    return tuple(ref)


# -- search ------------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    """Engine settings; the defaults are the published search budget."""

    space: SearchSpace = SearchSpace(input_size=28, input_channels=1,
                                     num_classes=10)
    population_size: int = 10
    generations: int = 20
    offspring_size: int = 10
    mutation_prob: float = 0.1
    # Single-epsilon robustness objective at the operating point published for
    # 28x28 single-channel inputs, matching the default space above.
    epsilons: tuple[float, ...] = (0.03,)
    train_epochs: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "epsilons",
                           tuple(float(e) for e in self.epsilons))
        if self.population_size < 2:
            raise ConfigError("population_size must be at least 2")
        if self.generations < 0:
            raise ConfigError("generations must be non-negative")
        if self.offspring_size < 1:
            raise ConfigError("offspring_size must be positive")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ConfigError("mutation_prob must lie in [0, 1]")
        if len(self.epsilons) not in (1, 2):
            raise ConfigError("search uses one or two accuracy objectives")
        if any(e < 0 for e in self.epsilons):
            raise ConfigError("epsilons must be non-negative")
        if len(self.epsilons) == 2 and not self.epsilons[0] < self.epsilons[1]:
            raise ConfigError("epsilons must be strictly increasing")
        if self.train_epochs < 1:
            raise ConfigError("train_epochs must be positive")


@dataclass(frozen=True)
class RunLog:
    """Everything a run produced, ready for newline-delimited serialization."""

    records: tuple[dict, ...]
    final_front: tuple[Individual, ...]
    archive: tuple[Individual, ...]
    evaluations_requested: int
    backend_calls: int

    def to_ndjson(self) -> str:
        lines = [json.dumps(r, sort_keys=True, separators=(",", ":"))
                 for r in self.records]
        return "\n".join(lines) + "\n"


def _json_number(v: float):
    if math.isfinite(v):
        return v
    return "inf" if v > 0 else "-inf"


def _request_seed(run_seed: int, g: Genotype) -> int:
    digest = hashlib.sha256(f"{run_seed}|{genotype_hash(g)}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63))


@dataclass
class _RunState:
    config: SearchConfig
    evaluator: Evaluator
    hw: HardwareConfig
    run_seed: int
    cache: dict[str, object] = field(default_factory=dict)
    archive: list[Individual] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    summaries: list[dict] = field(default_factory=list)
    snapshots: list[int] = field(default_factory=list)
    next_id: int = 0
    evaluations_requested: int = 0
    backend_calls: int = 0

    def evaluate(self, genotypes: list[Genotype],
                 generation: int) -> list[Individual]:
        """Evaluate a batch, reusing cached results for repeated genotypes."""
        requests = []
        for g in genotypes:
            h = genotype_hash(g)
            if h not in self.cache:
                self.cache[h] = None  # reserve so batch duplicates collapse
                requests.append((h, EvaluationRequest(
                    id=self.next_id, genotype=g, epsilons=self.config.epsilons,
                    train_epochs=self.config.train_epochs,
                    seed=_request_seed(self.run_seed, g))))
                self.next_id += 1
        results = self.evaluator.evaluate_many([r for _, r in requests])
        for (h, _), res in zip(requests, results):
            self.cache[h] = res
        self.evaluations_requested += len(genotypes)
        self.backend_calls += len(requests)

        individuals = []
        for g in genotypes:
            res = self.cache[genotype_hash(g)]
            status = res.status
            if status is EvalStatus.OK:
                try:
                    fitness = assemble_fitness(res.adversarial_accuracies,
                                               estimate(g, self.hw))
                except CostOverflowError:
                    fitness = failure_fitness(len(self.config.epsilons))
                    status = EvalStatus.FAILED
            else:
                fitness = failure_fitness(len(self.config.epsilons))
            individuals.append(Individual(genotype=g, fitness=fitness,
                                          birth_generation=generation,
                                          status=status))
        self.archive.extend(individuals)
        return individuals

    def log_individuals(self, individuals: Sequence[Individual],
                        generation: int) -> None:
        for ind in individuals:
            self.records.append({
                "type": "individual",
                "generation": generation,
                "genotype": to_obj(ind.genotype),
                "fitness": [_json_number(v) for v in ind.fitness.values],
                "senses": [s.value for s in ind.fitness.senses],
                "status": ind.status.value,
                "rank": ind.rank,
                "crowding": _json_number(ind.crowding),
            })

    def log_summary(self, generation: int, population: Sequence[Individual],
                    ) -> None:
        by_rank = Counter(ind.rank for ind in population)
        summary = {
            "type": "generation",
            "generation": generation,
            "front_sizes": [by_rank[r] for r in sorted(by_rank)],
            "hypervolume": None,  # patched retrospectively
            "archive_size": len(self.archive),
            "evaluations_requested": self.evaluations_requested,
            "backend_calls": self.backend_calls,
        }
        self.records.append(summary)
        self.summaries.append(summary)
        self.snapshots.append(len(self.archive))

    def patch_hypervolumes(self) -> None:
        """Fill per-generation hypervolume against one run-wide reference.

        Using the worst observed value per objective as a fixed reference
        makes the sequence non-decreasing by construction: the archive only
        grows, and every snapshot is measured against the same box.
        """
        ref = worst_reference(self.archive)
        for summary, size in zip(self.summaries, self.snapshots):
            if ref is None:
                summary["hypervolume"] = 0.0
                continue
            prefix = self.archive[:size]
            finite = [ind for ind in prefix if ind.fitness.is_finite]
            if not finite:
                summary["hypervolume"] = 0.0
                continue
            fronts = non_dominated_sort(finite)
            summary["hypervolume"] = hypervolume(
                [ind.fitness for ind in fronts[0]], ref)

    def finish(self) -> RunLog:
        self.patch_hypervolumes()
        fronts = non_dominated_sort(self.archive)
        return RunLog(records=tuple(self.records),
                      final_front=tuple(fronts[0]),
                      archive=tuple(self.archive),
                      evaluations_requested=self.evaluations_requested,
                      backend_calls=self.backend_calls)


# Bound on variation redraws per offspring slot before a generation proceeds
# with fewer candidates.
_OFFSPRING_RETRY_FACTOR = 50


def _rank_standalone(individuals: Sequence[Individual]) -> None:
    for front in non_dominated_sort(individuals):
        crowding_distance(front)


def evolve(config: SearchConfig, evaluator: Evaluator, hw: HardwareConfig,
           seed: int = 0) -> RunLog:
    """Run the generational loop and log every evaluated individual.

    Each generation pairs random parents, produces offspring by crossover,
    and mutates each offspring with the configured probability. Candidates
    dropped as invalid are replaced by fresh variation draws until the
    offspring quota is met, so every generation spends its full evaluation
    budget; a retry cap keeps degenerate spaces from looping forever.
    Deterministic for a fixed seed and deterministic evaluator.
    """
    rng = np.random.default_rng(seed)
    state = _RunState(config=config, evaluator=evaluator, hw=hw, run_seed=seed)
    space = config.space

    init = [random_genotype(space, seed=_draw_seed(rng))
            for _ in range(config.population_size)]
    population = state.evaluate(init, generation=0)
    _rank_standalone(population)
    state.log_individuals(population, generation=0)
    state.log_summary(0, population)

    for gen in range(1, config.generations + 1):
        kids: list[Genotype] = []
        attempts = 0
        while (len(kids) < config.offspring_size
               and attempts < _OFFSPRING_RETRY_FACTOR * config.offspring_size):
            attempts += 1
            i, j = rng.choice(config.population_size, size=2, replace=False)
            for kid in crossover(population[i].genotype,
                                 population[j].genotype,
                                 seed=_draw_seed(rng), space=space):
                if rng.random() < config.mutation_prob:
                    mutated = mutate(kid, space, seed=_draw_seed(rng))
                    if mutated is None:
                        continue  # no valid single-gene change; redrawn
                    kid = mutated
                kids.append(kid)
        kids = kids[:config.offspring_size]

        offspring = state.evaluate(kids, generation=gen)
        population = select_next_population(population, offspring,
                                            config.population_size)
        state.log_individuals(offspring, generation=gen)
        state.log_summary(gen, population)

    return state.finish()


def random_search(config: SearchConfig, evaluator: Evaluator,
                  hw: HardwareConfig, seed: int = 0) -> RunLog:
    """Spend the same evaluation budget on independent random genotypes."""
    rng = np.random.default_rng(seed)
    state = _RunState(config=config, evaluator=evaluator, hw=hw, run_seed=seed)
    space = config.space

    chunk_sizes = [config.population_size]
    chunk_sizes += [config.offspring_size] * config.generations
    for gen, size in enumerate(chunk_sizes):
        genotypes = [random_genotype(space, seed=_draw_seed(rng))
                     for _ in range(size)]
        chunk = state.evaluate(genotypes, generation=gen)
        _rank_standalone(chunk)
        state.log_individuals(chunk, generation=gen)
        state.log_summary(gen, chunk)

    return state.finish()
