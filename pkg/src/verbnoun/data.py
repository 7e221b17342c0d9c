"""Planted-signal episode generator and the SAPB on-disk feature format.

The generator stands in for a real egocentric dataset: class identities
are fixed random unit prototypes, the noun identity is carried strongly
by exactly one bank row per frame (the interacted object, whose content
is the noun prototype flavored by the verb), weakly by the global noun
feature, and the verb identity lives in the verb feature and modulates
the carrier's within-frame position. The remaining rows are distractor
objects: prototypes of *other* nouns, unconstrained by the verb, so
naive row averaging mixes the interacted object with confusers.

Each verb additionally owns a random half of the channels. The carrier's
useful content lives inside that half, while box-imprecision
contamination is planted in the complementary half. A static map cannot
tell the two apart — which channels are signal depends on the verb — so
cleaning the carrier requires a verb-conditioned channel gate, while
rejecting whole distractor rows requires attention over rows. The two
mechanisms fail independently, which is what the ablation ladder probes.

All generated floats are quantized to float32 (the disk precision) so a
write/read round trip through a SAPB file is bit-exact; computation on
the values stays float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    ConfigError,
    MagicError,
    RecordFormatError,
    TrailingDataError,
    TruncatedFileError,
    VersionError,
)
from .sap import NOUN, VERB, BranchFeature, ObjectBank
from .training import Labels

# fraction of verb-prototype flavor mixed into each carrier row
CARRIER_VERB_MIX = 0.5
# probability that a frame's carrier sits in its verb-determined home slot
CARRIER_HOME_PROB = 0.75
# distinct confuser nouns visible per episode; repeating a small set across
# frames keeps row averages ambiguous between the interacted object and the
# bystanders, which only attention can resolve
CONFUSER_NOUNS = 3
# fraction of channels each verb claims as its signal subspace; carrier
# content lives inside the verb's channels, contamination outside them
VERB_CHANNEL_FRACTION = 0.5
# the global appearance feature reads the noun far more weakly than the
# global motion feature reads the verb (nouns are what the privileged bank
# is for); the noun global gets this fraction of global_signal_strength
NOUN_GLOBAL_FRACTION = 0.3
# detection boxes are imprecise: each carrier row is contaminated with a
# bystander noun, planted in the channels the verb does *not* own, at this
# multiple of the bank signal. Selecting the right row is not enough;
# verb-aware channel gating must clean the content, so attention without
# gating (no_csg) pays a measurable price.
CARRIER_CONTAMINATION = 3.0


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs of the synthetic world; one spec fixes prototypes and prior."""

    C: int = 64
    V: int = 12
    U: int = 30
    M: int = 12                       # sampled frames
    K: int = 5                        # detections kept per frame
    noise_sigma: float = 0.25
    distractor_count: int = 4         # distractor-prototype rows per frame
    global_signal_strength: float = 0.8
    bank_signal_strength: float = 1.3
    prior_concentration: float = 0.3  # fraction of nouns reachable per verb
    seed: int = 0

    def __post_init__(self):
        if self.V < 2 or self.U < 2:
            raise ConfigError("V and U must both be >= 2")
        if self.M < 1 or self.K < 1:
            raise ConfigError("M and K must both be >= 1")
        if not 0 <= self.distractor_count <= self.K - 1:
            raise ConfigError("distractor_count must be in [0, K-1]")
        if self.noise_sigma < 0 or self.global_signal_strength < 0 \
                or self.bank_signal_strength < 0:
            raise ConfigError("noise and signal strengths must be >= 0")
        if not 0 < self.prior_concentration <= 1:
            raise ConfigError("prior_concentration must be in (0, 1]")

    @property
    def N(self) -> int:
        return self.M * self.K


@dataclass
class Episode:
    """One labeled sample; carrier_rows records which bank rows hold signal."""

    verb_feature: BranchFeature
    noun_feature: BranchFeature
    bank: ObjectBank
    labels: Labels
    carrier_rows: np.ndarray | None = None  # generator metadata, not serialized


class _World:
    """Prototypes and action prior derived deterministically from a spec."""

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.verb_protos = _unit_rows(rng.standard_normal((spec.V, spec.C)))
        self.noun_protos = _unit_rows(rng.standard_normal((spec.U, spec.C)))
        # each verb owns a random subset of channels; its carriers live there
        owned = max(1, round(VERB_CHANNEL_FRACTION * spec.C))
        self.verb_masks = np.zeros((spec.V, spec.C))
        for v in range(spec.V):
            self.verb_masks[v, rng.choice(spec.C, size=owned, replace=False)] = 1.0
        # carrier content: interacted-object appearance flavored by the verb,
        # restricted to the verb's channel subspace
        mix = (self.noun_protos[:, None, :]
               + CARRIER_VERB_MIX * self.verb_protos[None, :, :]) \
            * self.verb_masks[None, :, :]
        self.carrier_protos = _unit_rows(mix)
        # contamination content: wrong-noun appearance confined to the
        # channels the verb does not own, shape (V, U, C)
        contam = self.noun_protos[None, :, :] * (1.0 - self.verb_masks)[:, None, :]
        self.contam_protos = _unit_rows(contam)

        # action prior: each verb reaches only a concentration-sized noun subset
        support = max(1, round(spec.prior_concentration * spec.U))
        table = np.zeros((spec.V, spec.U))
        verb_weights = rng.exponential(size=spec.V)
        for v in range(spec.V):
            nouns = rng.choice(spec.U, size=support, replace=False)
            table[v, nouns] = rng.exponential(size=support)
            table[v] *= verb_weights[v] / table[v].sum()
        self.prior_table = table / table.sum()
        self._verb_marginal = self.prior_table.sum(axis=1)
        self._noun_cond = self.prior_table / self._verb_marginal[:, None]

    def sample_labels(self, rng: np.random.Generator, count: int) -> list[Labels]:
        verbs = rng.choice(self.spec.V, size=count, p=self._verb_marginal)
        return [
            Labels(int(v), int(rng.choice(self.spec.U, p=self._noun_cond[v])))
            for v in verbs
        ]


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


@lru_cache(maxsize=32)
def _world(spec: GeneratorSpec) -> _World:
    return _World(spec)


def planted_prior(spec: GeneratorSpec) -> np.ndarray:
    """The V x U action prior the generator samples labels from."""
    return _world(spec).prior_table.copy()


def prototypes(spec: GeneratorSpec):
    """(verb, noun) prototype matrices for oracle classifiers."""
    w = _world(spec)
    return w.verb_protos.copy(), w.noun_protos.copy()


def sample_labels(spec: GeneratorSpec, rng: np.random.Generator,
                  count: int) -> list[Labels]:
    return _world(spec).sample_labels(rng, count)


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def generate_episode(spec: GeneratorSpec, rng: np.random.Generator) -> Episode:
    """Draw one labeled episode from the planted world."""
    w = _world(spec)
    lab = w.sample_labels(rng, 1)[0]
    v, u = lab.verb, lab.noun

    noise = spec.noise_sigma
    f_v = spec.global_signal_strength * w.verb_protos[v] \
        + noise * rng.standard_normal(spec.C)
    f_n = NOUN_GLOBAL_FRACTION * spec.global_signal_strength * w.noun_protos[u] \
        + noise * rng.standard_normal(spec.C)

    # bystander objects are nouns the verb rules out, so verb-aware paths
    # can discount them; fall back to any wrong noun if the prior is dense
    incompatible = np.flatnonzero(w.prior_table[v] == 0.0)
    pool = incompatible[incompatible != u]
    if pool.size == 0:
        pool = np.setdiff1d(np.arange(spec.U), [u])
    confusers = rng.choice(pool, size=min(CONFUSER_NOUNS, pool.size),
                           replace=False)

    # one bystander noun sits inside every box of the episode; drawn once so
    # its contribution stays coherent across frames and survives attention
    contaminant = int((u + 1 + rng.integers(spec.U - 1)) % spec.U)

    rows = np.zeros((spec.N, spec.C))
    carriers = np.zeros(spec.M, dtype=np.int64)
    for m in range(spec.M):
        home = (v + m) % spec.K
        slot = home if rng.random() < CARRIER_HOME_PROB \
            else int(rng.integers(spec.K))
        carriers[m] = m * spec.K + slot
        others = [s for s in range(spec.K) if s != slot]
        rng.shuffle(others)
        frame = rows[m * spec.K:(m + 1) * spec.K]
        frame[slot] = spec.bank_signal_strength * (
            w.carrier_protos[u, v]
            + CARRIER_CONTAMINATION * w.contam_protos[v, contaminant])
        for s in others[:spec.distractor_count]:
            frame[s] = spec.bank_signal_strength \
                * w.noun_protos[confusers[rng.integers(len(confusers))]]
        if noise > 0:
            frame += noise * rng.standard_normal((spec.K, spec.C))

    conf = rng.uniform(0.0, 1.0, size=(spec.M, spec.K))
    conf = np.sort(conf, axis=1)[:, ::-1].reshape(-1)  # non-increasing per frame
    frame_index = np.repeat(np.arange(spec.M), spec.K)

    return Episode(
        verb_feature=BranchFeature(_f32(f_v), VERB),
        noun_feature=BranchFeature(_f32(f_n), NOUN),
        bank=ObjectBank(_f32(rows), _f32(conf), frame_index),
        labels=lab,
        carrier_rows=carriers,
    )


def generate_dataset(spec: GeneratorSpec, count: int,
                     rng: np.random.Generator | None = None) -> list[Episode]:
    """count episodes from one seed stream; same spec and count reproduce bits."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    return [generate_episode(spec, rng) for _ in range(count)]


# --------------------------------------------------------------------------
# SAPB binary format
#
#   magic "SAPB" | version u32 | C,V,U,M,K u32 | record count u64
#   per record: verb u32 | noun u32 | f_v (C f32) | f_n (C f32)
#               | confidences (M*K f32) | bank rows (M*K*C f32)
#   all integers and floats little-endian.
# --------------------------------------------------------------------------

MAGIC = b"SAPB"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BankFileHeader:
    C: int
    V: int
    U: int
    M: int
    K: int

    @property
    def N(self) -> int:
        return self.M * self.K

    @classmethod
    def from_spec(cls, spec: GeneratorSpec) -> "BankFileHeader":
        return cls(spec.C, spec.V, spec.U, spec.M, spec.K)


@dataclass
class BankFile:
    header: BankFileHeader
    episodes: list

    def __len__(self):
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def __getitem__(self, i):
        return self.episodes[i]


def write_bank_file(path, dataset, header: BankFileHeader) -> None:
    """Serialize episodes; floats are stored as little-endian float32."""
    C, N = header.C, header.N
    chunks = [MAGIC, struct.pack("<6IQ", FORMAT_VERSION, header.C, header.V,
                                 header.U, header.M, header.K, len(dataset))]
    for ep in dataset:
        if ep.verb_feature.values.shape[0] != C or ep.bank.features.shape != (N, C):
            raise RecordFormatError(
                f"episode dims do not match header C={C}, N={N}")
        chunks.append(struct.pack("<2I", ep.labels.verb, ep.labels.noun))
        for arr in (ep.verb_feature.values, ep.noun_feature.values,
                    ep.bank.confidences, ep.bank.features):
            chunks.append(np.asarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"file ends inside {what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        with np.errstate(invalid="ignore"):  # signaling NaNs warn on cast
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise RecordFormatError(f"non-finite float in {what}")
        return arr


def read_bank_file(path) -> BankFile:
    """Parse a SAPB file, validating every structural and value invariant."""
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf)
    if cur.take(4, "magic") != MAGIC:
        raise MagicError(f"bad magic; expected {MAGIC!r}")
    version, = struct.unpack("<I", cur.take(4, "version"))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}")
    C, V, U, M, K = struct.unpack("<5I", cur.take(20, "dimension header"))
    if min(C, V, U, M, K) == 0:
        raise RecordFormatError("header dimensions must all be positive")
    count, = struct.unpack("<Q", cur.take(8, "record count"))
    N = M * K
    record_bytes = 8 + 4 * (2 * C + N + N * C)
    expected = cur.pos + count * record_bytes
    if expected > len(buf):
        raise TruncatedFileError(
            f"header declares {count} records ({expected} bytes) but file has "
            f"{len(buf)}")
    if expected < len(buf):
        raise TrailingDataError(f"{len(buf) - expected} unexpected trailing bytes")

    frame_index = np.repeat(np.arange(M), K)
    episodes = []
    for r in range(count):
        verb, noun = struct.unpack("<2I", cur.take(8, f"record {r} labels"))
        if verb >= V or noun >= U:
            raise RecordFormatError(
                f"record {r}: label ({verb}, {noun}) outside V={V}, U={U}")
        f_v = cur.floats(C, f"record {r} verb feature")
        f_n = cur.floats(C, f"record {r} noun feature")
        conf = cur.floats(N, f"record {r} confidences")
        if conf.min() < 0.0 or conf.max() > 1.0:
            raise RecordFormatError(f"record {r}: confidence outside [0, 1]")
        by_frame = conf.reshape(M, K)
        if np.any(np.diff(by_frame, axis=1) > 0):
            raise RecordFormatError(
                f"record {r}: confidences not non-increasing within a frame")
        rows = cur.floats(N * C, f"record {r} bank rows").reshape(N, C)
        episodes.append(Episode(
            verb_feature=BranchFeature(f_v, VERB),
            noun_feature=BranchFeature(f_n, NOUN),
            bank=ObjectBank(rows, conf, frame_index),
            labels=Labels(int(verb), int(noun)),
        ))
    return BankFile(BankFileHeader(C, V, U, M, K), episodes)
