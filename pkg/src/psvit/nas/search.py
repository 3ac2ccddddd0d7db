"""FLOPS-constrained evolutionary search over supernet paths."""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..arch import CHOICES, CellChoice, Genotype, count_flops
from .supernet import path_str, sample_path


class InfeasibleBudget(ValueError):
    """The FLOPS budget is below the cost of the all-identity path."""


@dataclass
class SearchConfig:
    flops_budget: int
    population_size: int = 50
    max_iterations: int = 20
    total_samples: int = 1000
    topk: int = 10
    mutation_prob: float = 0.1
    crossover_rate: float = 0.5
    seed: int = 0
    max_retries: int = 10
    last_layer_independent: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.population_size > self.total_samples:
            raise ValueError("population_size cannot exceed total_samples")
        if self.topk > self.population_size:
            raise ValueError("topk cannot exceed population_size")
        if not 0.0 <= self.mutation_prob <= 1.0 or not 0.0 <= self.crossover_rate <= 1.0:
            raise ValueError("mutation_prob and crossover_rate must lie in [0, 1]")


@dataclass(frozen=True)
class Candidate:
    path: tuple
    fitness: float
    flops: int
    iteration: int

    @property
    def key(self):
        return path_str(self.path)

    def to_dict(self):
        return {"path": self.key, "fitness": self.fitness, "flops": self.flops, "iteration": self.iteration}


def rank_key(c: Candidate):
    """Best first: higher fitness, then fewer MACs, then path string."""
    return (-c.fitness, c.flops, c.key)


@dataclass
class SearchState:
    population: list = field(default_factory=list)
    archive: dict = field(default_factory=dict)
    iteration: int = 0
    best_history: list = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)


@dataclass
class SearchResult:
    topk: list
    state: SearchState
    log: list

    @property
    def best(self):
        return self.topk[0]


def repair_last_layer(path):
    """Turn the last non-identity cell into a basic layer if it is a sharing pair."""
    path = list(path)
    for i in range(len(path) - 1, -1, -1):
        if path[i] is CellChoice.IDENTITY:
            continue
        if path[i] is CellChoice.SHARED_PAIR:
            path[i] = CellChoice.BASIC
        break
    return tuple(path)


class PathSpace:
    """Cell-choice paths of a genotype template with a memoised MAC count."""

    def __init__(self, template: Genotype, last_layer_independent=True):
        self.template = template
        self.n_cells = template.num_cells
        self.last_layer_independent = last_layer_independent
        self._flops = {}
        self._lock = threading.Lock()

    def flops(self, path):
        key = path_str(path)
        with self._lock:
            hit = self._flops.get(key)
        if hit is None:
            hit = count_flops(self.template.with_cells(path)).total_macs
            with self._lock:
                self._flops[key] = hit
        return hit

    def normalise(self, path):
        path = tuple(CellChoice(c) for c in path)
        return repair_last_layer(path) if self.last_layer_independent else path

    def enumerate(self):
        """Every distinct (normalised) path; only for small spaces."""
        seen = {}
        for idx in np.ndindex(*(len(CHOICES),) * self.n_cells):
            p = self.normalise(tuple(CHOICES[i] for i in idx))
            seen.setdefault(path_str(p), p)
        return list(seen.values())


def _space_of(space):
    if isinstance(space, PathSpace):
        return space
    template = getattr(space, "genotype", space)
    return PathSpace(template)


def evolutionary_search(space, cfg: SearchConfig, fitness_fn, log_fn=None) -> SearchResult:
    """Evolve paths under ``cfg.flops_budget``; ``fitness_fn(path) -> float``.

    ``space`` is a :class:`PathSpace`, a supernet, or a genotype template.
    Every evaluated path is archived once; the returned top-k are the best
    archived paths.
    """
    ps = _space_of(space)
    ps.last_layer_independent = cfg.last_layer_independent
    rng = np.random.default_rng(cfg.seed)
    identity = (CellChoice.IDENTITY,) * ps.n_cells
    floor = ps.flops(identity)
    if cfg.flops_budget < floor:
        raise InfeasibleBudget(f"budget {cfg.flops_budget:,} MACs is below the all-identity cost {floor:,}")

    state = SearchState()
    log = []

    def feasible(p):
        return ps.flops(p) <= cfg.flops_budget

    def novel(p, taken):
        k = path_str(p)
        return k not in state.archive and k not in taken

    def random_feasible(taken=()):
        """Uniform sample under budget, preferring paths not yet seen."""
        repeat, repeats = None, 0
        for _ in range(100_000):
            p = ps.normalise(sample_path(rng, ps.n_cells))
            if not feasible(p):
                continue
            if novel(p, taken):
                return p
            repeat, repeats = repeat or p, repeats + 1
            if repeats >= 10 * cfg.max_retries:
                break
        # a repeat is harmless: evaluate() never scores a path twice
        return repeat or identity

    def constrained(make, taken):
        """Retry ``make`` until it yields an unseen path under budget, then sample afresh."""
        for _ in range(cfg.max_retries):
            p = ps.normalise(make())
            if feasible(p) and novel(p, taken):
                return p
        return random_feasible(taken)

    def mutate(parent, taken):
        def make():
            flips = rng.random(ps.n_cells) < cfg.mutation_prob
            picks = rng.integers(0, len(CHOICES), size=ps.n_cells)
            return tuple(CHOICES[picks[i]] if flips[i] else c for i, c in enumerate(parent))

        return constrained(make, taken)

    def crossover(a, b, taken):
        def make():
            cut = int(rng.integers(1, ps.n_cells)) if ps.n_cells > 1 else 0
            return tuple(a[:cut]) + tuple(b[cut:])

        return constrained(make, taken)

    def evaluate(paths):
        fresh, seen = [], set()
        for p in paths:
            k = path_str(p)
            if k not in state.archive and k not in seen and len(state.archive) + len(fresh) < cfg.total_samples:
                fresh.append(p)
                seen.add(k)
        if cfg.workers > 1 and len(fresh) > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                scores = list(pool.map(fitness_fn, fresh))
        else:
            scores = [fitness_fn(p) for p in fresh]
        for p, s in zip(fresh, scores):
            s = float(s)
            if not np.isfinite(s):
                raise ValueError(f"fitness for {path_str(p)} is not finite: {s}")
            c = Candidate(p, s, ps.flops(p), state.iteration)
            state.archive[c.key] = c
            rec = c.to_dict()
            log.append(rec)
            if log_fn is not None:
                log_fn(rec)
        return [state.archive[path_str(p)] for p in paths if path_str(p) in state.archive]

    population, taken = [], set()
    for _ in range(cfg.population_size):
        population.append(random_feasible(taken))
        taken.add(path_str(population[-1]))
    while True:
        state.population = evaluate(population)
        ranked = sorted(state.archive.values(), key=rank_key)
        state.best_history.append(ranked[0].fitness)
        state.iteration += 1
        if state.iteration >= cfg.max_iterations or len(state.archive) >= cfg.total_samples:
            break
        parents = [c.path for c in ranked[: cfg.topk]]
        n_cross = int(round(cfg.population_size * cfg.crossover_rate))
        children, taken = [], set()
        for _ in range(n_cross):
            i, j = rng.integers(0, len(parents), size=2)
            children.append(crossover(parents[i], parents[j], taken))
            taken.add(path_str(children[-1]))
        while len(children) < cfg.population_size:
            children.append(mutate(parents[int(rng.integers(0, len(parents)))], taken))
            taken.add(path_str(children[-1]))
        population = children

    state.rng_state = rng.bit_generator.state
    topk = sorted(state.archive.values(), key=rank_key)[: cfg.topk]
    return SearchResult(topk, state, log)


def exhaustive_best(space, fitness_fn, flops_budget, last_layer_independent=True):
    """Brute-force argmax over every path of a small space (search oracle)."""
    ps = _space_of(space)
    ps.last_layer_independent = last_layer_independent
    cands = [
        Candidate(p, float(fitness_fn(p)), ps.flops(p), 0) for p in ps.enumerate() if ps.flops(p) <= flops_budget
    ]
    return sorted(cands, key=rank_key)
