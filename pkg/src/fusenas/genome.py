"""Fixed-length integer genome and genetic operators for the fusion search space.

A genome is 20 bounded integers.  Positions (1-based) and their meaning:

  1      stem depth L1: blocks on each early branch before the first fusion
  2      trunk depth L2: blocks between the two fusions
  3      which stream pair fuses first (0: semg+acc, 1: semg+fused, 2: acc+fused)
  4-6    filter indices for the up-to-3 stem blocks of early branch A
  7-9    filter indices for early branch B
  10-12  filter indices for the late branch (first min(L1+L2, 3) used)
  13     post-fusion insertion (0: none, 1: local conv, 2: local residual conv)
  14     which fusion point the inserted block follows (0 or 1)
  15     filter index of the inserted block
  16     attention block enabled (0/1)
  17     attention flavour (0: channel, 1: spatial)
  18     attention insertion point (0: after fusion 1, 1: after fusion 2,
         2: after trunk, 3: before final block)
  19     channel-attention reduction ratio index into (2, 4, 8, 16)
  20     filter index of the final block

Filter indices select from ``GeneSpace.candidate_filters``.  Repair clamps
position 2 so that the decoded main-path depth L1 + L2 + 2 stays in [4, 6].
All operators take an explicit ``numpy.random.Generator`` and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GENOME_LENGTH = 20

DEFAULT_CANDIDATE_FILTERS = (8, 16, 24, 32, 48, 64, 96, 128, 192, 256)
REDUCTION_RATIOS = (2, 4, 8, 16)

DEFAULT_GENE_RANGES: tuple[tuple[int, int], ...] = (
    (1, 3),            # 1: stem depth L1
    (1, 2),            # 2: trunk depth L2
    (0, 2),            # 3: first-fusion pair
    (0, 9), (0, 9), (0, 9),   # 4-6: branch A filters
    (0, 9), (0, 9), (0, 9),   # 7-9: branch B filters
    (0, 9), (0, 9), (0, 9),   # 10-12: late branch filters
    (0, 2),            # 13: insertion kind
    (0, 1),            # 14: insertion fusion point
    (0, 9),            # 15: insertion filter index
    (0, 1),            # 16: attention enabled
    (0, 1),            # 17: attention flavour
    (0, 3),            # 18: attention insertion point
    (0, 3),            # 19: reduction ratio index
    (0, 9),            # 20: final block filter index
)

MIN_DEPTH = 4
MAX_DEPTH = 6

DEFAULT_CROSSOVER_RATE = 0.9
DEFAULT_MUTATION_RATE = 0.2


class GenomeError(ValueError):
    """Raised for genomes that violate the gene space."""


@dataclass(frozen=True)
class GeneSpace:
    """Per-position inclusive integer ranges plus the candidate filter table."""

    ranges: tuple[tuple[int, int], ...] = DEFAULT_GENE_RANGES
    candidate_filters: tuple[int, ...] = DEFAULT_CANDIDATE_FILTERS

    def __post_init__(self):
        if len(self.ranges) != GENOME_LENGTH:
            raise GenomeError(f"gene space needs {GENOME_LENGTH} ranges, got {len(self.ranges)}")
        for i, (lo, hi) in enumerate(self.ranges):
            if lo > hi:
                raise GenomeError(f"empty range at position {i + 1}: ({lo}, {hi})")
        cf = self.candidate_filters
        if len(cf) != 10:
            raise GenomeError(f"candidate_filters needs 10 entries, got {len(cf)}")
        if cf[0] <= 0 or any(b <= a for a, b in zip(cf, cf[1:])):
            raise GenomeError("candidate_filters must be strictly increasing positive integers")


@dataclass(frozen=True)
class Genome:
    """An immutable 20-gene architecture encoding."""

    genes: tuple[int, ...]

    def __post_init__(self):
        if len(self.genes) != GENOME_LENGTH:
            raise GenomeError(f"genome needs {GENOME_LENGTH} genes, got {len(self.genes)}")
        object.__setattr__(self, "genes", tuple(int(g) for g in self.genes))

    def gene(self, position: int) -> int:
        """Value at a 1-based position."""
        return self.genes[position - 1]


def check_ranges(g: Genome, space: GeneSpace) -> None:
    for i, (v, (lo, hi)) in enumerate(zip(g.genes, space.ranges)):
        if not lo <= v <= hi:
            raise GenomeError(f"gene {i + 1} = {v} outside range [{lo}, {hi}]")


def validate(g: Genome, space: GeneSpace) -> None:
    """Raise GenomeError unless every gene is in range and the depth bound holds."""
    check_ranges(g, space)
    depth = g.gene(1) + g.gene(2) + 2
    if not MIN_DEPTH <= depth <= MAX_DEPTH:
        raise GenomeError(f"main-path depth {depth} outside [{MIN_DEPTH}, {MAX_DEPTH}]")


def is_valid(g: Genome, space: GeneSpace) -> bool:
    try:
        validate(g, space)
    except GenomeError:
        return False
    return True


def repair(g: Genome, space: GeneSpace) -> Genome:
    """Clamp the trunk depth so the main-path depth lands in [4, 6].

    Only position 2 can change: g2 <- min(g2, 4 - g1).  Genes must already be
    within their ranges.
    """
    check_ranges(g, space)
    genes = list(g.genes)
    genes[1] = min(genes[1], MAX_DEPTH - 2 - genes[0])
    return Genome(tuple(genes))


def random_genome(space: GeneSpace, rng: np.random.Generator) -> Genome:
    """Sample each gene uniformly from its range, then repair."""
    genes = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in space.ranges)
    return repair(Genome(genes), space)


def crossover(
    a: Genome,
    b: Genome,
    rate: float,
    rng: np.random.Generator,
    space: GeneSpace | None = None,
) -> tuple[Genome, Genome]:
    """Single-point crossover: swap the tails after a cut point in 1..19.

    With probability ``rate`` a cut point k is drawn and the children are
    a[1..k]+b[k+1..20] and b[1..k]+a[k+1..20]; otherwise the children are
    copies of the parents.  Children are repaired.
    """
    space = space or GeneSpace()
    if rng.random() < rate:
        k = int(rng.integers(1, GENOME_LENGTH))
        child1 = Genome(a.genes[:k] + b.genes[k:])
        child2 = Genome(b.genes[:k] + a.genes[k:])
    else:
        child1, child2 = Genome(a.genes), Genome(b.genes)
    return repair(child1, space), repair(child2, space)


def mutate(
    g: Genome,
    rate: float,
    rng: np.random.Generator,
    space: GeneSpace | None = None,
) -> Genome:
    """Single-point mutation: resample one uniformly chosen gene, then repair."""
    space = space or GeneSpace()
    genes = list(g.genes)
    if rng.random() < rate:
        pos = int(rng.integers(0, GENOME_LENGTH))
        lo, hi = space.ranges[pos]
        genes[pos] = int(rng.integers(lo, hi + 1))
    return repair(Genome(tuple(genes)), space)


def serialize(g: Genome) -> str:
    """Text form: 20 comma-separated decimal integers, no whitespace."""
    return ",".join(str(v) for v in g.genes)


def deserialize(text: str, space: GeneSpace | None = None) -> Genome:
    """Parse the text form and check every gene against the space."""
    space = space or GeneSpace()
    tokens = text.strip().split(",")
    if len(tokens) != GENOME_LENGTH:
        raise GenomeError(f"expected {GENOME_LENGTH} comma-separated genes, got {len(tokens)}")
    try:
        genes = tuple(int(t) for t in tokens)
    except ValueError as exc:
        raise GenomeError(f"non-integer gene token: {exc}") from None
    g = Genome(genes)
    check_ranges(g, space)
    return g
