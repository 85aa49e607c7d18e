"""Two-phase genetic architecture search.

Phase one (rough search) runs on a mixed dataset pooled from a subsample of
every sub-dataset's training windows; phase two (transfer search) restarts
per sub-dataset from the best half of the rough population plus fresh
random individuals.  Fitness is the validation loss after a few training
epochs, so lower is better throughout.  Selection is elitist: parents and
offspring compete, the best S survive, and the per-generation best loss is
therefore non-increasing.
"""

from __future__ import annotations

import math
import multiprocessing
import time
from dataclasses import dataclass

import numpy as np

from .arch import decode
from .genome import (DEFAULT_CROSSOVER_RATE, DEFAULT_MUTATION_RATE, GeneSpace,
                     Genome, crossover, mutate, random_genome, serialize)
from .network import build
from .signal import FeatureDataset, fit_row_scale
from .training import NumericError, TrainConfig, train

_GA_STREAM = 0
_EVAL_STREAM = 1
_SPLIT_STREAM = 2
_SUBSAMPLE_STREAM = 3
ROUGH_PHASE = 0


def derive_seed(*parts: int) -> int:
    """Stable seed from integer coordinates (master seed, phase, generation, ...)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class Individual:
    genome: Genome
    fitness: float | None = None
    seed: int | None = None
    flagged: bool = False
    origin: str = "random"

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None


@dataclass
class Population:
    individuals: list[Individual]
    generation: int = 0

    def __len__(self) -> int:
        return len(self.individuals)

    def best(self) -> Individual:
        return min(self.individuals, key=_sort_key)


@dataclass
class SearchConfig:
    population_size: int = 20
    rough_generations: int = 20
    transfer_generations: int = 5
    crossover_rate: float = DEFAULT_CROSSOVER_RATE
    mutation_rate: float = DEFAULT_MUTATION_RATE
    fitness_epochs: int = 3
    rough_subsample: float = 0.2
    valid_fraction: float = 0.2
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2 or self.population_size % 2:
            raise ValueError("population_size must be even and at least 2")
        if self.rough_generations < 0 or self.transfer_generations < 0:
            raise ValueError("generation counts must be non-negative")
        if not 0 < self.rough_subsample <= 1:
            raise ValueError("rough_subsample must be in (0, 1]")


@dataclass
class EvalDataset:
    """Frozen train/validation split used for fitness evaluation."""

    train: FeatureDataset
    valid: FeatureDataset


def stratified_indices(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Per class, round(fraction * count) indices, at least 1 when count > 1."""
    picked = []
    for cls in np.unique(labels):
        cls_idx = np.flatnonzero(labels == cls)
        if len(cls_idx) < 2:
            continue
        k = max(1, int(round(fraction * len(cls_idx))))
        picked.extend(rng.permutation(cls_idx)[:k])
    return np.sort(np.array(picked, dtype=np.int64))


def make_eval_dataset(ds: FeatureDataset, valid_fraction: float, seed: int) -> EvalDataset:
    rng = np.random.default_rng(seed)
    valid_idx = stratified_indices(ds.labels, valid_fraction, rng)
    mask = np.ones(len(ds), dtype=bool)
    mask[valid_idx] = False
    return EvalDataset(ds.subset(np.flatnonzero(mask)), ds.subset(valid_idx))


def subsample_dataset(ds: FeatureDataset, fraction: float, seed: int) -> FeatureDataset:
    if fraction >= 1:
        return ds
    rng = np.random.default_rng(seed)
    return ds.subset(stratified_indices(ds.labels, fraction, rng))


# ---------------------------------------------------------------------------
# Fitness evaluators
# ---------------------------------------------------------------------------

class SurrogateEvaluator:
    """Analytic separable landscape with a known optimum, for tests.

    Each gene adds up to GENE_WEIGHT of loss, proportional to its distance
    from a fixed target genome (normalised by the gene span).  Wide genes
    (span >= 5, the filter indices) get a one-step tolerance band so that
    near-misses reachable by recombination score as exact; small structural
    genes must match exactly.  The optimum is exactly 1.0, attained at the
    target genome.
    """

    GENE_WEIGHT = 0.02
    BAND_SPAN = 5

    def __init__(self, space: GeneSpace | None = None, target: Genome | None = None):
        self.space = space or GeneSpace()
        if target is None:
            target = random_genome(self.space, np.random.default_rng(20240117))
        self.target = target
        self.optimum = 1.0

    def evaluate(self, genome: Genome, dataset=None, seed: int = 0) -> float:
        total = 0.0
        for g, t, (lo, hi) in zip(genome.genes, self.target.genes, self.space.ranges):
            span = max(hi - lo, 1)
            d = abs(g - t)
            if span >= self.BAND_SPAN:
                d = max(d - 1, 0)
            total += self.GENE_WEIGHT * d / span
        return 1.0 + total


class TrainerEvaluator:
    """Decode, build and briefly train a genome; fitness is the final validation loss."""

    def __init__(self, space: GeneSpace | None = None, epochs: int = 3,
                 batch_size: int = 32, base_lr: float = 0.001):
        self.space = space or GeneSpace()
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr

    def evaluate_with_history(self, genome: Genome, dataset: EvalDataset, seed: int):
        net = build(decode(genome, self.space), dataset.train.num_classes, seed=seed)
        net.set_input_scale(*fit_row_scale(dataset.train))
        cfg = TrainConfig(epochs=self.epochs, base_lr=self.base_lr,
                          batch_size=self.batch_size, seed=seed)
        _, history = train(net, dataset.train, dataset.valid, cfg)
        return history[-1]["valid_loss"], history

    def evaluate(self, genome: Genome, dataset: EvalDataset, seed: int = 0) -> float:
        return self.evaluate_with_history(genome, dataset, seed)[0]


def _safe_evaluate(evaluator, genome: Genome, dataset, seed: int) -> tuple[float, bool]:
    try:
        loss = float(evaluator.evaluate(genome, dataset, seed))
    except NumericError:
        return math.inf, True
    if not math.isfinite(loss):
        return math.inf, True
    return loss, False


def evaluate_individual(ind: Individual, evaluator, dataset, seed: int = 0) -> Individual:
    """Assign fitness; non-finite evaluations get a worst-case sentinel and a flag."""
    loss, flagged = _safe_evaluate(evaluator, ind.genome, dataset, seed)
    ind.fitness = loss
    ind.flagged = flagged
    ind.seed = seed
    return ind


_WORKER_STATE: dict = {}


def _init_worker(evaluator, dataset):
    _WORKER_STATE["evaluator"] = evaluator
    _WORKER_STATE["dataset"] = dataset


def _worker_eval(args):
    genome, seed = args
    return _safe_evaluate(_WORKER_STATE["evaluator"], genome, _WORKER_STATE["dataset"], seed)


def _evaluate_all(individuals: list[Individual], evaluator, dataset,
                  seeds: list[int], jobs: int = 1):
    if jobs <= 1 or len(individuals) <= 1:
        for ind, seed in zip(individuals, seeds):
            evaluate_individual(ind, evaluator, dataset, seed)
        return
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(jobs, len(individuals)), initializer=_init_worker,
                  initargs=(evaluator, dataset)) as pool:
        results = pool.map(_worker_eval, [(ind.genome, seed)
                                          for ind, seed in zip(individuals, seeds)])
    for ind, seed, (loss, flagged) in zip(individuals, seeds, results):
        ind.fitness = loss
        ind.flagged = flagged
        ind.seed = seed


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def _sort_key(ind: Individual):
    return (ind.fitness, serialize(ind.genome))


def roulette_select(individuals: list[Individual], rng: np.random.Generator
                    ) -> tuple[Individual, Individual]:
    """Two independent fitness-proportional draws (losses turned into weights)."""
    losses = np.array([ind.fitness for ind in individuals])
    if any(ind.fitness is None for ind in individuals):
        raise ValueError("roulette selection requires evaluated individuals")
    finite = losses[np.isfinite(losses)]
    if len(finite) == 0:
        weights = np.ones(len(individuals))
    else:
        delta = 1e-6 * (finite.max() - finite.min() + 1.0)
        weights = np.where(np.isfinite(losses), finite.max() - losses + delta, delta)
    p = weights / weights.sum()
    i, j = rng.choice(len(individuals), size=2, p=p)
    return individuals[int(i)], individuals[int(j)]


def environmental_select(parents: list[Individual], offspring: list[Individual],
                         size: int) -> list[Individual]:
    """Keep the best ``size`` of parents + offspring, ties broken by genome text."""
    pool = list(parents) + list(offspring)
    if len(pool) < size:
        raise ValueError(f"selection pool of {len(pool)} smaller than population {size}")
    return sorted(pool, key=_sort_key)[:size]


# ---------------------------------------------------------------------------
# Search phases
# ---------------------------------------------------------------------------

def _history_entry(generation: int, individuals: list[Individual]) -> dict:
    losses = np.array([ind.fitness for ind in individuals])
    finite = losses[np.isfinite(losses)]
    return {
        "generation": generation,
        "best_loss": float(finite.min()) if len(finite) else None,
        "mean_loss": float(finite.mean()) if len(finite) else None,
        "failed": int(np.sum(~np.isfinite(losses))),
    }


def _make_offspring(individuals, cfg: SearchConfig, space: GeneSpace,
                    rng: np.random.Generator) -> list[Individual]:
    offspring = []
    for _ in range(cfg.population_size // 2):
        p1, p2 = roulette_select(individuals, rng)
        c1, c2 = crossover(p1.genome, p2.genome, cfg.crossover_rate, rng, space)
        offspring.append(Individual(mutate(c1, cfg.mutation_rate, rng, space), origin="offspring"))
        offspring.append(Individual(mutate(c2, cfg.mutation_rate, rng, space), origin="offspring"))
    return offspring


def _run_generations(individuals, generations, cfg, space, evaluator, dataset,
                     rng, phase: int, history: list[dict], jobs: int):
    for gen in range(1, generations + 1):
        offspring = _make_offspring(individuals, cfg, space, rng)
        seeds = [derive_seed(cfg.seed, phase, _EVAL_STREAM, gen, i)
                 for i in range(len(offspring))]
        _evaluate_all(offspring, evaluator, dataset, seeds, jobs)
        individuals = environmental_select(individuals, offspring, cfg.population_size)
        history.append(_history_entry(gen, individuals))
    return individuals


def rough_search(cfg: SearchConfig, dataset, evaluator,
                 space: GeneSpace | None = None, jobs: int = 1
                 ) -> tuple[Population, list[dict]]:
    """Randomly initialise, then evolve for cfg.rough_generations on the mixed data."""
    space = space or GeneSpace()
    rng = np.random.default_rng(derive_seed(cfg.seed, ROUGH_PHASE, _GA_STREAM))
    individuals = [Individual(random_genome(space, rng))
                   for _ in range(cfg.population_size)]
    seeds = [derive_seed(cfg.seed, ROUGH_PHASE, _EVAL_STREAM, 0, i)
             for i in range(len(individuals))]
    _evaluate_all(individuals, evaluator, dataset, seeds, jobs)
    history = [_history_entry(0, individuals)]
    individuals = _run_generations(individuals, cfg.rough_generations, cfg, space,
                                   evaluator, dataset, rng, ROUGH_PHASE, history, jobs)
    return Population(individuals, cfg.rough_generations), history


@dataclass
class TransferResult:
    best: Individual
    population: Population
    history: list[dict]
    start_population: list[Individual]

    @property
    def carried_count(self) -> int:
        return sum(1 for ind in self.start_population if ind.origin == "carried")

    @property
    def fresh_count(self) -> int:
        return sum(1 for ind in self.start_population if ind.origin == "fresh")


def transfer_search(cfg: SearchConfig, rough_pop: Population, dataset, evaluator,
                    space: GeneSpace | None = None, sub_index: int = 0,
                    jobs: int = 1) -> TransferResult:
    """Seed with the best half of the rough population plus fresh randoms.

    Carried individuals keep their genomes but are re-evaluated on this
    sub-dataset; their rough fitness is discarded.
    """
    space = space or GeneSpace()
    if len(rough_pop) != cfg.population_size:
        raise ValueError("rough population size does not match the config")
    phase = 1 + sub_index
    rng = np.random.default_rng(derive_seed(cfg.seed, phase, _GA_STREAM))
    half = cfg.population_size // 2
    carried = [Individual(ind.genome, origin="carried")
               for ind in sorted(rough_pop.individuals, key=_sort_key)[:half]]
    fresh = [Individual(random_genome(space, rng), origin="fresh") for _ in range(half)]
    individuals = carried + fresh
    seeds = [derive_seed(cfg.seed, phase, _EVAL_STREAM, 0, i)
             for i in range(len(individuals))]
    _evaluate_all(individuals, evaluator, dataset, seeds, jobs)
    start_population = list(individuals)
    history = [_history_entry(0, individuals)]
    individuals = _run_generations(individuals, cfg.transfer_generations, cfg, space,
                                   evaluator, dataset, rng, phase, history, jobs)
    pop = Population(individuals, cfg.transfer_generations)
    return TransferResult(pop.best(), pop, history, start_population)


def run_search(cfg: SearchConfig, sub_datasets: list[FeatureDataset], evaluator,
               space: GeneSpace | None = None, jobs: int = 1) -> dict:
    """Rough search on pooled subsampled data, then one transfer search per sub-dataset."""
    if not sub_datasets:
        raise ValueError("need at least one sub-dataset")
    space = space or GeneSpace()

    t0 = time.perf_counter()
    mixed = FeatureDataset.concatenate([
        subsample_dataset(ds, cfg.rough_subsample,
                          derive_seed(cfg.seed, ROUGH_PHASE, _SUBSAMPLE_STREAM, i))
        for i, ds in enumerate(sub_datasets)
    ])
    mixed_eval = make_eval_dataset(mixed, cfg.valid_fraction,
                                   derive_seed(cfg.seed, ROUGH_PHASE, _SPLIT_STREAM))
    rough_pop, rough_history = rough_search(cfg, mixed_eval, evaluator, space, jobs)
    t_rough = time.perf_counter() - t0

    transfer_reports = []
    transfer_seconds = []
    for i, ds in enumerate(sub_datasets):
        t1 = time.perf_counter()
        eval_ds = make_eval_dataset(ds, cfg.valid_fraction,
                                    derive_seed(cfg.seed, 1 + i, _SPLIT_STREAM))
        result = transfer_search(cfg, rough_pop, eval_ds, evaluator, space, sub_index=i,
                                 jobs=jobs)
        transfer_seconds.append(time.perf_counter() - t1)
        transfer_reports.append({
            "sub_dataset": i,
            "history": result.history,
            "best_genome": serialize(result.best.genome),
            "best_loss": result.best.fitness,
            "start_carried": result.carried_count,
            "start_fresh": result.fresh_count,
        })

    return {
        "config": {
            "population_size": cfg.population_size,
            "rough_generations": cfg.rough_generations,
            "transfer_generations": cfg.transfer_generations,
            "crossover_rate": cfg.crossover_rate,
            "mutation_rate": cfg.mutation_rate,
            "fitness_epochs": cfg.fitness_epochs,
            "rough_subsample": cfg.rough_subsample,
            "valid_fraction": cfg.valid_fraction,
            "batch_size": cfg.batch_size,
            "seed": cfg.seed,
        },
        "rough": {
            "history": rough_history,
            "final_population": [serialize(ind.genome) for ind in rough_pop.individuals],
            "best_loss": rough_pop.best().fitness,
        },
        "transfer": transfer_reports,
        "timing": {
            "rough_seconds": t_rough,
            "transfer_seconds": transfer_seconds,
            "total_seconds": time.perf_counter() - t0,
        },
    }
